#pragma once

// Per-layer recomputation planning.
//
// The importance walk starts from query attention, then repeatedly lets the
// current relevant set pull in the segment it attends to most (one per hop,
// scores of unselected segments replaced by the mean attention from the
// relevant set). Layer l+1's plan is built from the attention summary layer l
// produced during execution, restricted to layer l's plan so the sets only
// shrink. Comparison strategies: positional prefix invalidation, pure reuse,
// fixed block-edge positions and a layer-0 KV-deviation ranking.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "keep/errors.hpp"
#include "keep/prefill.hpp"

namespace keep {

struct RatioSchedule {
    std::vector<double> r;  // r[0] == 1, non-increasing
    double r_avg = 1.0;

    int num_layers() const { return static_cast<int>(r.size()); }
};

// Geometric decay r[l] = gamma^l with gamma bisected so the mean hits r_avg.
inline RatioSchedule ratio_schedule(int num_layers, double r_avg) {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    RatioSchedule s;
    s.r_avg = r_avg;
    if (num_layers == 1) {
        s.r = {1.0};
        return s;
    }
    const double lo_feasible = 1.0 / num_layers;
    if (r_avg < lo_feasible - 1e-9 || r_avg > 1.0 + 1e-9)
        throw ConfigError("infeasible r_avg " + std::to_string(r_avg));

    auto mean_for = [&](double gamma) {
        double sum = 0.0, term = 1.0;
        for (int l = 0; l < num_layers; ++l) {
            sum += term;
            term *= gamma;
        }
        return sum / num_layers;
    };
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mean_for(mid) < r_avg)
            lo = mid;
        else
            hi = mid;
    }
    const double gamma = 0.5 * (lo + hi);
    s.r.resize(num_layers);
    double term = 1.0;
    for (int l = 0; l < num_layers; ++l) {
        s.r[l] = term;
        term *= gamma;
    }
    s.r[0] = 1.0;
    return s;
}

// Budget in segments for one layer; the 1/S floor shows up as "at least one".
inline std::size_t layer_budget(double ratio, std::size_t num_segments) {
    const double scaled = ratio * static_cast<double>(num_segments);
    auto b = static_cast<std::size_t>(std::ceil(scaled - 1e-9));
    return std::max<std::size_t>(1, std::min(b, num_segments));
}

struct ImportanceState {
    std::vector<double> scores;       // by layout position
    std::vector<int> relevant_order;  // insertion order
    std::set<int> relevant;
    int hop = 0;
};

inline ImportanceState init_importance(const AttentionSummary& attn) {
    ImportanceState st;
    st.scores = attn.query_to_segment;
    return st;
}

// One hop; returns whether a segment was added. candidates limits which
// positions may ever join (null = all).
inline bool propagate_hop(ImportanceState& state, const AttentionSummary& attn,
                          std::size_t budget, const std::vector<char>* candidates = nullptr) {
    const int S = static_cast<int>(state.scores.size());
    auto allowed = [&](int i) {
        return (candidates == nullptr || (*candidates)[i]) && !state.relevant.count(i);
    };

    if (!state.relevant.empty()) {
        for (int i = 0; i < S; ++i) {
            if (!allowed(i)) continue;
            double acc = 0.0;
            for (int m : state.relevant) acc += attn.segment_to_segment[m][i];
            state.scores[i] = acc / static_cast<double>(state.relevant.size());
        }
    }

    bool added = false;
    if (state.relevant.size() < budget) {
        int best = -1;
        for (int i = 0; i < S; ++i) {
            if (!allowed(i)) continue;
            if (state.scores[i] <= 0.0) continue;
            if (best < 0 || state.scores[i] > state.scores[best]) best = i;
        }
        if (best >= 0) {
            state.relevant.insert(best);
            state.relevant_order.push_back(best);
            added = true;
        }
    }
    state.hop += 1;
    return added;
}

// Hops until the relevant set stabilizes, the budget is filled, or S hops
// have run. Terminates in <= S hops since every productive hop adds one.
inline ImportanceState converge(const AttentionSummary& attn, std::size_t budget,
                                const std::vector<char>* candidates = nullptr) {
    ImportanceState state = init_importance(attn);
    const int S = static_cast<int>(state.scores.size());
    while (state.relevant.size() < budget && state.hop < S) {
        if (!propagate_hop(state, attn, budget, candidates)) break;
    }
    return state;
}

inline RecomputePlan plan_keep(const Model& model, const Layout& layout,
                               const CachedKV& cached, const TokenSeq& query,
                               const RatioSchedule& schedule, bool multihop = true) {
    const int L = model.cfg.num_layers;
    if (schedule.num_layers() != L) throw ConfigError("schedule length != num_layers");
    const int S = static_cast<int>(layout.num_segments());

    RecomputePlan plan;
    plan.layers.resize(L);
    std::vector<char> active(static_cast<std::size_t>(S), 1);
    PrefillCursor cursor(model, layout, &cached, query);
    for (int l = 0; l < L; ++l) {
        for (int i = 0; i < S; ++i)
            if (active[i]) plan.layers[l].insert(layout.segments[i].id);
        const AttentionSummary& summary = cursor.step(active);
        if (l + 1 >= L) break;

        const std::size_t budget = layer_budget(schedule.r[l + 1], S);
        std::size_t active_count = 0;
        for (char a : active) active_count += a;
        if (budget >= active_count) continue;  // recompute everything still live

        std::vector<char> next(static_cast<std::size_t>(S), 0);
        if (multihop) {
            const ImportanceState st = converge(summary, budget, &active);
            for (int i : st.relevant_order) next[i] = 1;
        } else {
            // Ablation: single-hop, query attention only.
            std::vector<int> order;
            for (int i = 0; i < S; ++i)
                if (active[i]) order.push_back(i);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return summary.query_to_segment[a] > summary.query_to_segment[b];
            });
            for (std::size_t i = 0; i < budget && i < order.size(); ++i)
                next[order[i]] = 1;
        }
        active = std::move(next);
    }
    return plan;
}

// Everything at or after the first invalidated position is recomputed at all
// layers; no invalidation means everything is reused.
inline RecomputePlan plan_prefix(const Layout& layout,
                                 std::optional<int> first_invalid_position, int num_layers) {
    RecomputePlan plan;
    plan.layers.resize(num_layers);
    if (!first_invalid_position.has_value()) return plan;
    const int S = static_cast<int>(layout.num_segments());
    for (int l = 0; l < num_layers; ++l)
        for (int i = *first_invalid_position; i < S; ++i)
            plan.layers[l].insert(layout.segments[i].id);
    return plan;
}

inline RecomputePlan plan_full_reuse(int num_layers) {
    RecomputePlan plan;
    plan.layers.resize(num_layers);
    return plan;
}

// Static positional heuristic: segments touching the first/last
// k_edge_tokens of their unit, ranked by distance to the nearest unit edge.
// Query-independent by construction.
inline RecomputePlan plan_fixed_position(const Layout& layout, const RatioSchedule& schedule,
                                         int k_edge_tokens) {
    const int S = static_cast<int>(layout.num_segments());
    std::vector<int> seg_start(S), seg_end(S);
    {
        int pos = 0;
        for (int i = 0; i < S; ++i) {
            seg_start[i] = pos;
            pos += static_cast<int>(layout.segments[i].tokens.size());
            seg_end[i] = pos;
        }
    }
    struct Ranked {
        int dist;
        SegmentId id;
        int pos;
    };
    std::vector<Ranked> eligible;
    for (const auto& [ubegin, uend] : layout.units) {
        const int ustart = seg_start[ubegin];
        const int ustop = seg_end[uend - 1];
        for (int i = ubegin; i < uend; ++i) {
            const bool head = seg_start[i] < ustart + k_edge_tokens;
            const bool tail = seg_end[i] > ustop - k_edge_tokens;
            if (!head && !tail) continue;
            const int dist = std::min(seg_start[i] - ustart, ustop - seg_end[i]);
            eligible.push_back({dist, layout.segments[i].id, i});
        }
    }
    std::sort(eligible.begin(), eligible.end(), [](const Ranked& a, const Ranked& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        return a.id < b.id;
    });

    RecomputePlan plan;
    plan.layers.resize(schedule.num_layers());
    for (int l = 0; l < schedule.num_layers(); ++l) {
        const std::size_t budget =
            std::min(layer_budget(schedule.r[l], S), eligible.size());
        for (std::size_t i = 0; i < budget; ++i) plan.layers[l].insert(eligible[i].id);
    }
    return plan;
}

// Layer 0 recomputes everything; later layers take the top segments by mean
// per-token L2 between fresh layer-0 KV and the cached layer-0 KV. The
// ranking is fixed, so shrinking budgets give nested plans; exact ties fall
// back to ascending id.
inline RecomputePlan plan_deviation(const Model& model, const Layout& layout,
                                    const CachedKV& cached, const TokenSeq& /*query*/,
                                    const RatioSchedule& schedule) {
    const int L = model.cfg.num_layers;
    if (schedule.num_layers() != L) throw ConfigError("schedule length != num_layers");
    const int S = static_cast<int>(layout.num_segments());
    const int d = model.cfg.model_dim;
    const auto& lw = model.layers[0];

    std::vector<double> deviation(static_cast<std::size_t>(S), 0.0);
    std::vector<float> fresh_k(static_cast<std::size_t>(d)), fresh_v(static_cast<std::size_t>(d));
    for (int i = 0; i < S; ++i) {
        const auto& seg = layout.segments[i];
        auto it = cached.find(seg.id);
        if (it == cached.end() || it->second.empty())
            throw CacheMissError("plan_deviation: no cached KV for segment " +
                                 std::to_string(seg.id));
        const LayerKV& c0 = it->second[0];
        double acc = 0.0;
        for (std::size_t t = 0; t < seg.tokens.size(); ++t) {
            const float* e = model.embedding.row_ptr(seg.tokens[t]);
            vec_mat(e, d, lw.wk, fresh_k.data());
            vec_mat(e, d, lw.wv, fresh_v.data());
            double sq = 0.0;
            for (int j = 0; j < d; ++j) {
                const double dk = static_cast<double>(fresh_k[j]) - c0.keys.at(static_cast<int>(t), j);
                const double dv = static_cast<double>(fresh_v[j]) - c0.values.at(static_cast<int>(t), j);
                sq += dk * dk + dv * dv;
            }
            acc += std::sqrt(sq);
        }
        deviation[i] = acc / static_cast<double>(seg.tokens.size());
    }

    std::vector<int> rank(static_cast<std::size_t>(S));
    for (int i = 0; i < S; ++i) rank[i] = i;
    std::sort(rank.begin(), rank.end(), [&](int a, int b) {
        if (deviation[a] != deviation[b]) return deviation[a] > deviation[b];
        return layout.segments[a].id < layout.segments[b].id;
    });

    RecomputePlan plan;
    plan.layers.resize(L);
    for (int i = 0; i < S; ++i) plan.layers[0].insert(layout.segments[i].id);
    for (int l = 1; l < L; ++l) {
        const std::size_t budget = layer_budget(schedule.r[l], S);
        for (std::size_t i = 0; i < budget && i < rank.size(); ++i)
            plan.layers[l].insert(layout.segments[rank[i]].id);
    }
    return plan;
}

struct StrategyResult {
    PrefillResult result;
    Divergence div;
    double reused_tokens = 0.0;      // segment tokens weighted by reused layers
    double recomputed_tokens = 0.0;  // includes query tokens
    std::vector<std::size_t> plan_sizes;
};

inline StrategyResult run_strategy(const Model& model, const Layout& layout,
                                   const CachedKV& cached, const TokenSeq& query,
                                   const RecomputePlan& plan) {
    plan.validate_monotone();
    StrategyResult out;
    out.result = selective_prefill(model, layout, cached, plan, query);
    const PrefillResult oracle = full_prefill(model, layout, query);
    out.div = divergence(model, out.result.final_hidden, oracle.final_hidden);
    out.plan_sizes = plan.sizes();

    const int L = model.cfg.num_layers;
    for (const auto& seg : layout.segments) {
        int recomputed_layers = 0;
        for (int l = 0; l < L; ++l)
            if (plan.layers[l].count(seg.id)) ++recomputed_layers;
        const double tokens = static_cast<double>(seg.tokens.size());
        out.recomputed_tokens += tokens * recomputed_layers / L;
        out.reused_tokens += tokens * (L - recomputed_layers) / L;
    }
    out.recomputed_tokens += static_cast<double>(query.size());
    return out;
}

enum class Strategy { Full, Prefix, FullReuse, FixedPos, Deviation, Keep };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Full: return "full";
        case Strategy::Prefix: return "prefix";
        case Strategy::FullReuse: return "full-reuse";
        case Strategy::FixedPos: return "fixed-pos";
        case Strategy::Deviation: return "deviation";
        case Strategy::Keep: return "keep";
    }
    return "?";
}

inline Strategy parse_strategy(const std::string& name) {
    for (Strategy s : {Strategy::Full, Strategy::Prefix, Strategy::FullReuse,
                       Strategy::FixedPos, Strategy::Deviation, Strategy::Keep})
        if (name == strategy_name(s)) return s;
    throw ConfigError("unknown strategy '" + name + "'");
}

}  // namespace keep
