#pragma once

// Segment/group bookkeeping: seeded k-means grouping, the t-step
// static/dynamic state machine, update-driven invalidation records and
// mixed-granularity retrieval (whole static groups, individual dynamic
// segments).
//
// The fixed-block mode exists for ablations: groups become consecutive-id
// blocks with no state machine, KV stays per-segment, and an update
// invalidates the updated segment plus every later segment of its block
// (positional invalidation, the fixed-block baseline behavior).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "keep/errors.hpp"
#include "keep/prefill.hpp"
#include "keep/prng.hpp"

namespace keep {

struct MemorySegment {
    SegmentId id = 0;
    std::string category;
    TokenSeq tokens;
    std::vector<double> embedding;  // unit norm, externally supplied
    std::uint64_t version = 1;
    std::int64_t last_update_step = 0;
};

enum class GroupState { Dynamic, Static };

struct MemoryGroup {
    GroupId id = 0;
    std::vector<SegmentId> member_ids;  // ascending
    GroupState state = GroupState::Dynamic;
    std::int64_t last_change_step = 0;
};

enum class GroupingMode { Semantic, FixedBlocks };

struct StoreConfig {
    int t = 10;  // stability window in steps
    int num_groups = 1;
    std::uint64_t seed = 0;
    GroupingMode mode = GroupingMode::Semantic;

    void validate() const {
        if (t < 1) throw ConfigError("stability window t must be >= 1");
        if (num_groups < 1) throw ConfigError("num_groups must be >= 1");
    }
};

// Cache owners: a dynamic segment owns per-segment blocks, a static group
// owns one joint block per layer.
struct OwnerRef {
    enum class Kind { Segment, Group };
    Kind kind = Kind::Segment;
    std::uint32_t id = 0;

    static OwnerRef segment(SegmentId s) { return {Kind::Segment, s}; }
    static OwnerRef group(GroupId g) { return {Kind::Group, g}; }

    bool operator==(const OwnerRef& o) const { return kind == o.kind && id == o.id; }
    bool operator<(const OwnerRef& o) const {
        if (kind != o.kind) return kind < o.kind;
        return id < o.id;
    }

    std::string str() const {
        return (kind == Kind::Segment ? "s" : "g") + std::to_string(id);
    }

    static std::optional<OwnerRef> parse(const std::string& s) {
        if (s.size() < 2 || (s[0] != 's' && s[0] != 'g')) return std::nullopt;
        try {
            std::uint32_t id = static_cast<std::uint32_t>(std::stoul(s.substr(1)));
            return s[0] == 's' ? segment(id) : group(id);
        } catch (...) {
            return std::nullopt;
        }
    }
};

struct InvalidationRecord {
    struct Entry {
        OwnerRef owner;
        std::uint64_t tokens = 0;
    };
    std::vector<Entry> entries;
    std::vector<std::pair<SegmentId, std::uint64_t>> new_segment_versions;

    std::uint64_t total_tokens() const {
        std::uint64_t n = 0;
        for (const auto& e : entries) n += e.tokens;
        return n;
    }
};

struct GroupTransition {
    GroupId group = 0;
    std::int64_t step = 0;
    std::vector<SegmentId> members;
    std::uint64_t tokens = 0;
    std::uint64_t new_group_version = 0;
};

struct RetrievalUnit {
    OwnerRef owner;
    std::vector<SegmentId> segments;  // ascending; singleton for dynamic segments
};

struct RetrievalSet {
    std::vector<RetrievalUnit> units;  // canonical order: groups by id, then segments by id

    std::size_t total_segments() const {
        std::size_t n = 0;
        for (const auto& u : units) n += u.segments.size();
        return n;
    }
};

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// Seeded k-means++ over unit embeddings; returns cluster index per point.
// Ties go to the lowest center index, empty clusters are reseeded with the
// farthest point, so the result is a pure function of (points, k, seed).
inline std::vector<int> kmeans(const std::vector<std::vector<double>>& points,
                               int k, std::uint64_t seed) {
    const int n = static_cast<int>(points.size());
    Rng rng = Rng::stream(seed, "kmeans");
    std::vector<std::vector<double>> centers;
    centers.reserve(k);
    centers.push_back(points[rng.next_below(n)]);
    std::vector<double> dist2(static_cast<std::size_t>(n));
    auto sqdist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            acc += d * d;
        }
        return acc;
    };
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = 1e300;
            for (const auto& c : centers) best = std::min(best, sqdist(points[i], c));
            dist2[i] = best;
            total += best;
        }
        int pick = 0;
        if (total > 0.0) {
            const double target = rng.next_double() * total;
            double run = 0.0;
            for (int i = 0; i < n; ++i) {
                run += dist2[i];
                if (run >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<int>(rng.next_below(n));
        }
        centers.push_back(points[pick]);
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = sqdist(points[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = sqdist(points[i], centers[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        for (int c = 0; c < k; ++c) {
            std::vector<double> mean(points[0].size(), 0.0);
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (assign[i] != c) continue;
                ++count;
                for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += points[i][j];
            }
            if (count == 0) {
                // Reseed with the point farthest from its center.
                int far = 0;
                double fd = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double d = sqdist(points[i], centers[assign[i]]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                centers[c] = points[far];
                assign[far] = c;
                changed = true;
            } else {
                for (auto& v : mean) v /= count;
                centers[c] = std::move(mean);
            }
        }
        if (!changed) break;
    }
    return assign;
}

}  // namespace detail

class MemoryStore;

inline std::vector<MemoryGroup> cluster_segments(const std::vector<MemorySegment>& segments,
                                                 const StoreConfig& config) {
    config.validate();
    if (segments.empty()) throw ConfigError("no segments to cluster");
    if (config.num_groups > static_cast<int>(segments.size()))
        throw ConfigError("num_groups exceeds segment count");

    std::vector<const MemorySegment*> by_id;
    by_id.reserve(segments.size());
    for (const auto& s : segments) by_id.push_back(&s);
    std::sort(by_id.begin(), by_id.end(),
              [](const MemorySegment* a, const MemorySegment* b) { return a->id < b->id; });

    std::vector<std::vector<SegmentId>> members(static_cast<std::size_t>(config.num_groups));
    if (config.mode == GroupingMode::FixedBlocks) {
        const std::size_t block =
            (by_id.size() + config.num_groups - 1) / config.num_groups;
        for (std::size_t i = 0; i < by_id.size(); ++i)
            members[std::min<std::size_t>(i / block, members.size() - 1)].push_back(by_id[i]->id);
    } else {
        std::vector<std::vector<double>> points;
        points.reserve(by_id.size());
        for (const auto* s : by_id) points.push_back(s->embedding);
        const auto assign = detail::kmeans(points, config.num_groups, config.seed);
        for (std::size_t i = 0; i < by_id.size(); ++i)
            members[assign[i]].push_back(by_id[i]->id);
    }

    // Canonical group ids: ascending smallest member id.
    std::erase_if(members, [](const auto& m) { return m.empty(); });
    std::sort(members.begin(), members.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    std::vector<MemoryGroup> groups;
    groups.reserve(members.size());
    for (std::size_t g = 0; g < members.size(); ++g)
        groups.push_back(MemoryGroup{static_cast<GroupId>(g), std::move(members[g]),
                                     GroupState::Dynamic, 0});
    return groups;
}

class MemoryStore {
public:
    MemoryStore(std::vector<MemorySegment> segments, const StoreConfig& config)
        : config_(config) {
        config_.validate();
        for (auto& s : segments) {
            check_embedding(s.embedding);
            if (!segments_.emplace(s.id, std::move(s)).second)
                throw ConfigError("duplicate segment id");
        }
        std::vector<MemorySegment> flat;
        flat.reserve(segments_.size());
        for (const auto& [id, seg] : segments_) flat.push_back(seg);
        groups_ = cluster_segments(flat, config_);
        group_versions_.assign(groups_.size(), 0);
        rebuild_index();
    }

    const StoreConfig& config() const { return config_; }
    std::int64_t current_step() const { return current_step_; }
    const std::vector<MemoryGroup>& groups() const { return groups_; }

    const MemorySegment& segment(SegmentId id) const {
        auto it = segments_.find(id);
        if (it == segments_.end())
            throw InputError("unknown segment " + std::to_string(id));
        return it->second;
    }

    const MemoryGroup& group_of(SegmentId id) const {
        return groups_[group_index(id)];
    }

    std::uint64_t group_version(GroupId g) const { return group_versions_.at(g); }

    InvalidationRecord apply_update(SegmentId id, TokenSeq new_tokens, std::int64_t step) {
        auto it = segments_.find(id);
        if (it == segments_.end())
            throw InputError("unknown segment " + std::to_string(id));
        if (step < current_step_) throw InputError("update step moves backwards");
        MemorySegment& seg = it->second;
        MemoryGroup& grp = groups_[group_index(id)];

        InvalidationRecord record;
        if (config_.mode == GroupingMode::FixedBlocks) {
            // Positional rule: the update invalidates the segment and every
            // later segment of its block.
            for (SegmentId m : grp.member_ids)
                if (m >= id)
                    record.entries.push_back({OwnerRef::segment(m),
                                              segments_.at(m).tokens.size()});
        } else if (grp.state == GroupState::Static) {
            std::uint64_t total = 0;
            for (SegmentId m : grp.member_ids) total += segments_.at(m).tokens.size();
            record.entries.push_back({OwnerRef::group(grp.id), total});
        } else {
            record.entries.push_back({OwnerRef::segment(id), seg.tokens.size()});
        }

        seg.tokens = std::move(new_tokens);
        seg.version += 1;
        seg.last_update_step = step;
        grp.state = GroupState::Dynamic;
        grp.last_change_step = step;
        current_step_ = std::max(current_step_, step);
        record.new_segment_versions.emplace_back(id, seg.version);
        return record;
    }

    std::vector<GroupTransition> advance_step(std::int64_t step) {
        if (step <= last_advance_step_) throw InputError("advance_step must strictly increase");
        last_advance_step_ = step;
        current_step_ = std::max(current_step_, step);
        std::vector<GroupTransition> out;
        if (config_.mode == GroupingMode::FixedBlocks) return out;
        for (auto& grp : groups_) {
            if (grp.state != GroupState::Dynamic) continue;
            std::int64_t newest = 0;
            std::uint64_t tokens = 0;
            for (SegmentId m : grp.member_ids) {
                const auto& seg = segments_.at(m);
                newest = std::max(newest, seg.last_update_step);
                tokens += seg.tokens.size();
            }
            if (newest <= step - config_.t) {
                grp.state = GroupState::Static;
                grp.last_change_step = step;
                group_versions_[grp.id] += 1;
                out.push_back(GroupTransition{grp.id, step, grp.member_ids, tokens,
                                              group_versions_[grp.id]});
            }
        }
        return out;
    }

    // Static groups are scored by their best member and retrieved whole;
    // dynamic segments are scored and retrieved individually. Units are
    // taken by descending score until at least k segments are covered.
    RetrievalSet retrieve(const std::vector<double>& query_embedding, int k) const {
        if (k < 1) throw InputError("retrieval k must be >= 1");
        if (segments_.empty()) throw InputError("retrieve on empty store");

        struct Candidate {
            double score;
            OwnerRef owner;
            std::vector<SegmentId> segments;
        };
        std::vector<Candidate> cands;
        for (const auto& grp : groups_) {
            if (grp.state == GroupState::Static) {
                double best = -2.0;
                for (SegmentId m : grp.member_ids)
                    best = std::max(best, detail::cosine(query_embedding,
                                                         segments_.at(m).embedding));
                cands.push_back({best, OwnerRef::group(grp.id), grp.member_ids});
            } else {
                for (SegmentId m : grp.member_ids)
                    cands.push_back({detail::cosine(query_embedding, segments_.at(m).embedding),
                                     OwnerRef::segment(m),
                                     std::vector<SegmentId>{m}});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.owner < b.owner;  // ties by ascending id, groups first
        });

        std::vector<Candidate> picked;
        std::size_t covered = 0;
        for (const auto& c : cands) {
            if (covered >= static_cast<std::size_t>(k)) break;
            picked.push_back(c);
            covered += c.segments.size();
        }

        RetrievalSet out;
        std::sort(picked.begin(), picked.end(), [](const Candidate& a, const Candidate& b) {
            const bool ag = a.owner.kind == OwnerRef::Kind::Group;
            const bool bg = b.owner.kind == OwnerRef::Kind::Group;
            if (ag != bg) return ag;  // group units first
            return a.owner.id < b.owner.id;
        });
        for (auto& c : picked) out.units.push_back({c.owner, std::move(c.segments)});
        return out;
    }

    // First observation of a new segment joins the nearest group, which
    // becomes dynamic.
    void add_segment(MemorySegment seg, std::int64_t step) {
        check_embedding(seg.embedding);
        if (segments_.count(seg.id)) throw ConfigError("duplicate segment id");
        seg.last_update_step = step;
        std::size_t best_group = 0;
        if (config_.mode == GroupingMode::FixedBlocks) {
            best_group = groups_.size() - 1;
        } else {
            double best = -2.0;
            for (std::size_t g = 0; g < groups_.size(); ++g) {
                std::vector<double> centroid(seg.embedding.size(), 0.0);
                for (SegmentId m : groups_[g].member_ids)
                    for (std::size_t j = 0; j < centroid.size(); ++j)
                        centroid[j] += segments_.at(m).embedding[j];
                const double norm = std::sqrt(std::max(1e-12, detail::cosine(centroid, centroid)));
                for (auto& v : centroid) v /= norm;
                const double score = detail::cosine(seg.embedding, centroid);
                if (score > best) {
                    best = score;
                    best_group = g;
                }
            }
        }
        auto& grp = groups_[best_group];
        grp.member_ids.push_back(seg.id);
        std::sort(grp.member_ids.begin(), grp.member_ids.end());
        grp.state = GroupState::Dynamic;
        grp.last_change_step = step;
        segments_.emplace(seg.id, std::move(seg));
        current_step_ = std::max(current_step_, step);
        rebuild_index();
    }

    // State soundness: Static iff the newest member update is at least t
    // steps old. Used by property tests.
    bool state_sound() const {
        if (config_.mode == GroupingMode::FixedBlocks) return true;
        for (const auto& grp : groups_) {
            std::int64_t newest = 0;
            for (SegmentId m : grp.member_ids)
                newest = std::max(newest, segments_.at(m).last_update_step);
            const bool quiet = newest <= last_advance_step_ - config_.t;
            if ((grp.state == GroupState::Static) != quiet) return false;
        }
        return true;
    }

private:
    void check_embedding(const std::vector<double>& e) const {
        if (e.empty()) throw ConfigError("segment embedding is empty");
        const double n = std::sqrt(detail::cosine(e, e));
        if (std::abs(n - 1.0) > 1e-6) throw ConfigError("segment embedding is not unit norm");
    }

    std::size_t group_index(SegmentId id) const {
        auto it = seg_to_group_.find(id);
        if (it == seg_to_group_.end())
            throw InputError("unknown segment " + std::to_string(id));
        return it->second;
    }

    void rebuild_index() {
        seg_to_group_.clear();
        for (std::size_t g = 0; g < groups_.size(); ++g)
            for (SegmentId m : groups_[g].member_ids) seg_to_group_[m] = g;
    }

    StoreConfig config_;
    std::map<SegmentId, MemorySegment> segments_;
    std::vector<MemoryGroup> groups_;
    std::vector<std::uint64_t> group_versions_;
    std::map<SegmentId, std::size_t> seg_to_group_;
    std::int64_t current_step_ = 0;
    std::int64_t last_advance_step_ = 0;
};

}  // namespace keep
