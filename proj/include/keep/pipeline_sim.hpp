#pragma once

// Discrete-event model of the prefill pipeline: one compute engine, one load
// engine, plus an evaluation lane overlapped with the MLP half of a layer.
//
//   sequential - load(l), eval(l-1), compute(l), strictly serialized.
//   overlap    - KV for layer l+1 loads while layer l computes; compute(l+1)
//                waits for compute(l), eval(l) and its own loads.
//   balanced   - overlap, plus: whenever the load engine would idle during
//                compute(l), it pre-loads KV items of owners whose whole
//                membership already left the plan at or before l. Such items
//                are needed by every later layer, so no pre-loaded byte is
//                ever wasted.
//
// Loads are preemptible at item granularity (one owner, one layer). A
// pre-load item is only started if it finishes inside the current compute
// window, so regular next-layer loads are never delayed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "keep/errors.hpp"
#include "keep/memory_store.hpp"
#include "keep/prefill.hpp"

namespace keep {

struct CostModel {
    double compute_tu_per_token_per_layer = 1.0;
    double eval_tu_per_layer = 0.0;
    double attention_fraction = 0.5;

    void validate() const {
        if (compute_tu_per_token_per_layer <= 0.0)
            throw ConfigError("compute_tu_per_token_per_layer must be positive");
        if (eval_tu_per_layer < 0.0) throw ConfigError("eval_tu_per_layer must be >= 0");
        if (attention_fraction < 0.0 || attention_fraction > 1.0)
            throw ConfigError("attention_fraction must be in [0, 1]");
    }
};

struct LoadItem {
    int layer = 0;
    OwnerRef owner;
    std::uint64_t bytes = 0;
    double tu = 0.0;
};

struct Workload {
    int num_layers = 0;
    std::vector<double> compute_tu;
    std::vector<double> eval_tu;  // eval of layer l feeds layer l+1; last is 0
    double attention_fraction = 0.5;
    std::vector<LoadItem> items;  // sorted by (layer, owner)
    std::map<OwnerRef, std::vector<SegmentId>> owner_members;  // group owners only

    std::vector<SegmentId> members_of(const OwnerRef& owner) const {
        if (owner.kind == OwnerRef::Kind::Segment) return {owner.id};
        auto it = owner_members.find(owner);
        if (it == owner_members.end()) return {};
        return it->second;
    }
};

enum class SimKind { Load, Compute, Eval };
enum class SimResource { LoadEngine, ComputeEngine, EvalEngine };

struct SimEvent {
    SimKind kind = SimKind::Compute;
    SimResource resource = SimResource::ComputeEngine;
    int layer = 0;
    OwnerRef owner;  // loads only
    std::uint64_t bytes = 0;
    double start = 0.0;
    double end = 0.0;
};

struct Timeline {
    std::vector<SimEvent> events;
    double makespan = 0.0;
};

struct Violation {
    std::string code;  // D1, D2, R, P, S
    std::string message;
};

// Per-layer workload. Tokens recomputed at layer l (plus the query) cost
// compute time; blocks of units with any member outside plan[l] that sit in
// the slow tier cost load time, itemized per owner so idle windows can be
// filled.
struct LoadUnit {
    OwnerRef owner;
    std::vector<SegmentId> segments;
    std::vector<std::uint64_t> slow_bytes;  // per layer; 0 when fast-resident or absent
};

inline Workload derive_workload(const RecomputePlan& plan, const Layout& layout,
                                const std::vector<LoadUnit>& units,
                                std::size_t query_tokens, const CostModel& cost,
                                double slow_bandwidth_bytes_per_tu, bool with_eval) {
    cost.validate();
    plan.validate_monotone();
    if (slow_bandwidth_bytes_per_tu <= 0.0)
        throw ConfigError("slow bandwidth must be positive");
    const int L = static_cast<int>(plan.layers.size());

    Workload w;
    w.num_layers = L;
    w.attention_fraction = cost.attention_fraction;
    w.compute_tu.resize(L, 0.0);
    w.eval_tu.resize(L, 0.0);

    std::map<SegmentId, std::size_t> seg_tokens;
    for (const auto& seg : layout.segments) seg_tokens[seg.id] = seg.tokens.size();

    for (int l = 0; l < L; ++l) {
        std::size_t tokens = query_tokens;
        for (SegmentId s : plan.layers[l]) {
            auto it = seg_tokens.find(s);
            if (it == seg_tokens.end())
                throw PlanError("plan references unknown segment " + std::to_string(s));
            tokens += it->second;
        }
        w.compute_tu[l] = static_cast<double>(tokens) * cost.compute_tu_per_token_per_layer;
        if (with_eval && l + 1 < L) w.eval_tu[l] = cost.eval_tu_per_layer;
    }

    for (const auto& unit : units) {
        if (unit.owner.kind == OwnerRef::Kind::Group)
            w.owner_members[unit.owner] = unit.segments;
        for (int l = 0; l < L; ++l) {
            bool needed = false;
            for (SegmentId s : unit.segments)
                if (!plan.layers[l].count(s)) needed = true;
            if (!needed) continue;
            const std::uint64_t bytes =
                l < static_cast<int>(unit.slow_bytes.size()) ? unit.slow_bytes[l] : 0;
            if (bytes == 0) continue;
            w.items.push_back(LoadItem{l, unit.owner, bytes,
                                       static_cast<double>(bytes) / slow_bandwidth_bytes_per_tu});
        }
    }
    std::sort(w.items.begin(), w.items.end(), [](const LoadItem& a, const LoadItem& b) {
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.owner < b.owner;
    });
    return w;
}

namespace detail {

inline void emit(Timeline& tl, SimKind kind, SimResource res, int layer,
                 double start, double end, const OwnerRef& owner = {},
                 std::uint64_t bytes = 0) {
    if (end <= start) return;  // zero-duration work leaves no event
    tl.events.push_back(SimEvent{kind, res, layer, owner, bytes, start, end});
    tl.makespan = std::max(tl.makespan, end);
}

// First layer at which pre-loading this owner is safe: every member must
// already be out of the plan. Group blocks are atomic, so a single member
// still being recomputed blocks the whole item.
inline int preload_eligible_from(const Workload& w, const RecomputePlan& plan,
                                 const OwnerRef& owner) {
    const int L = static_cast<int>(plan.layers.size());
    const auto members = w.members_of(owner);
    if (members.empty()) return std::numeric_limits<int>::max();
    int from = 0;
    for (SegmentId m : members) {
        int first = std::numeric_limits<int>::max();
        for (int l = 0; l < L; ++l) {
            if (!plan.layers[l].count(m)) {
                first = l;
                break;
            }
        }
        from = std::max(from, first);
        if (from == std::numeric_limits<int>::max()) break;
    }
    return from;
}

}  // namespace detail

inline Timeline simulate_sequential(const Workload& w) {
    Timeline tl;
    double t = 0.0;
    for (int l = 0; l < w.num_layers; ++l) {
        for (const auto& item : w.items) {
            if (item.layer != l) continue;
            detail::emit(tl, SimKind::Load, SimResource::LoadEngine, l, t, t + item.tu,
                         item.owner, item.bytes);
            t += item.tu;
        }
        if (l >= 1 && w.eval_tu[l - 1] > 0.0) {
            detail::emit(tl, SimKind::Eval, SimResource::EvalEngine, l - 1, t,
                         t + w.eval_tu[l - 1]);
            t += w.eval_tu[l - 1];
        }
        detail::emit(tl, SimKind::Compute, SimResource::ComputeEngine, l, t,
                     t + w.compute_tu[l]);
        t += w.compute_tu[l];
    }
    tl.makespan = std::max(tl.makespan, t);
    return tl;
}

inline Timeline simulate_overlap(const Workload& w) {
    Timeline tl;
    const int L = w.num_layers;
    std::vector<double> load_last_end(static_cast<std::size_t>(L), 0.0);
    double load_free = 0.0, eval_free = 0.0;
    double prev_compute_end = 0.0, prev_eval_end = 0.0;

    // Layer-0 loads happen up front.
    for (const auto& item : w.items) {
        if (item.layer != 0) continue;
        detail::emit(tl, SimKind::Load, SimResource::LoadEngine, 0, load_free,
                     load_free + item.tu, item.owner, item.bytes);
        load_free += item.tu;
        load_last_end[0] = load_free;
    }

    for (int l = 0; l < L; ++l) {
        const double c_start = std::max({prev_compute_end, prev_eval_end, load_last_end[l]});
        const double c_end = c_start + w.compute_tu[l];
        detail::emit(tl, SimKind::Compute, SimResource::ComputeEngine, l, c_start, c_end);

        prev_eval_end = 0.0;
        if (w.eval_tu[l] > 0.0) {
            const double attn_done = c_start + w.attention_fraction * w.compute_tu[l];
            const double e_start = std::max(attn_done, eval_free);
            const double e_end = e_start + w.eval_tu[l];
            detail::emit(tl, SimKind::Eval, SimResource::EvalEngine, l, e_start, e_end);
            eval_free = e_end;
            prev_eval_end = e_end;
        }

        if (l + 1 < L) {
            for (const auto& item : w.items) {
                if (item.layer != l + 1) continue;
                const double start = std::max(load_free, c_start);
                detail::emit(tl, SimKind::Load, SimResource::LoadEngine, l + 1, start,
                             start + item.tu, item.owner, item.bytes);
                load_free = start + item.tu;
                load_last_end[l + 1] = load_free;
            }
        }
        prev_compute_end = c_end;
    }
    tl.makespan = std::max(tl.makespan, prev_compute_end);
    return tl;
}

inline Timeline simulate_balanced(const Workload& w, const RecomputePlan& plan) {
    Timeline tl;
    const int L = w.num_layers;
    struct Pending {
        LoadItem item;
        int eligible_from;
        bool loaded = false;
    };
    std::vector<Pending> pending;
    pending.reserve(w.items.size());
    for (const auto& item : w.items)
        pending.push_back({item, detail::preload_eligible_from(w, plan, item.owner), false});

    std::vector<double> load_last_end(static_cast<std::size_t>(L), 0.0);
    double load_free = 0.0, eval_free = 0.0;
    double prev_compute_end = 0.0, prev_eval_end = 0.0;

    for (auto& p : pending) {
        if (p.item.layer != 0) continue;
        detail::emit(tl, SimKind::Load, SimResource::LoadEngine, 0, load_free,
                     load_free + p.item.tu, p.item.owner, p.item.bytes);
        load_free += p.item.tu;
        load_last_end[0] = load_free;
        p.loaded = true;
    }

    for (int l = 0; l < L; ++l) {
        const double c_start = std::max({prev_compute_end, prev_eval_end, load_last_end[l]});
        const double c_end = c_start + w.compute_tu[l];
        detail::emit(tl, SimKind::Compute, SimResource::ComputeEngine, l, c_start, c_end);

        prev_eval_end = 0.0;
        if (w.eval_tu[l] > 0.0) {
            const double attn_done = c_start + w.attention_fraction * w.compute_tu[l];
            const double e_start = std::max(attn_done, eval_free);
            const double e_end = e_start + w.eval_tu[l];
            detail::emit(tl, SimKind::Eval, SimResource::EvalEngine, l, e_start, e_end);
            eval_free = e_end;
            prev_eval_end = e_end;
        }

        if (l + 1 < L) {
            for (auto& p : pending) {
                if (p.loaded || p.item.layer != l + 1) continue;
                const double start = std::max(load_free, c_start);
                detail::emit(tl, SimKind::Load, SimResource::LoadEngine, l + 1, start,
                             start + p.item.tu, p.item.owner, p.item.bytes);
                load_free = start + p.item.tu;
                load_last_end[l + 1] = load_free;
                p.loaded = true;
            }
        }

        // Fill the idle window until this compute finishes with the first
        // eligible future item, in ascending (layer, owner) order. An item
        // that would overrun the window stops the fill.
        while (true) {
            Pending* next = nullptr;
            for (auto& p : pending) {
                if (p.loaded || p.item.layer < l + 2) continue;
                if (p.eligible_from > l) continue;
                next = &p;
                break;
            }
            if (next == nullptr) break;
            const double start = std::max(load_free, c_start);
            const double end = start + next->item.tu;
            if (end > c_end + 1e-12) break;
            detail::emit(tl, SimKind::Load, SimResource::LoadEngine, next->item.layer,
                         start, end, next->item.owner, next->item.bytes);
            load_free = end;
            next->loaded = true;
        }
        prev_compute_end = c_end;
    }
    tl.makespan = std::max(tl.makespan, prev_compute_end);
    return tl;
}

inline std::vector<Violation> validate_timeline(const Timeline& tl, const RecomputePlan& plan,
                                                const Workload& w) {
    constexpr double kEps = 1e-9;
    std::vector<Violation> out;
    auto flag = [&](const std::string& code, const std::string& msg) {
        out.push_back(Violation{code, msg});
    };

    // R: no overlap on any single resource.
    for (SimResource res : {SimResource::LoadEngine, SimResource::ComputeEngine,
                            SimResource::EvalEngine}) {
        std::vector<const SimEvent*> evs;
        for (const auto& e : tl.events)
            if (e.resource == res) evs.push_back(&e);
        std::sort(evs.begin(), evs.end(),
                  [](const SimEvent* a, const SimEvent* b) { return a->start < b->start; });
        for (std::size_t i = 0; i + 1 < evs.size(); ++i)
            if (evs[i + 1]->start < evs[i]->end - kEps)
                flag("R", "overlapping events on one resource at layer " +
                              std::to_string(evs[i + 1]->layer));
    }

    std::map<int, const SimEvent*> compute_at;
    for (const auto& e : tl.events)
        if (e.kind == SimKind::Compute) compute_at[e.layer] = &e;

    // D1: eval(l-1) and all loads tagged layer l end before compute(l) starts.
    for (const auto& [layer, comp] : compute_at) {
        for (const auto& e : tl.events) {
            if (e.kind == SimKind::Load && e.layer == layer && e.end > comp->start + kEps)
                flag("D1", "load for layer " + std::to_string(layer) +
                               " ends after compute starts");
            if (e.kind == SimKind::Eval && e.layer == layer - 1 &&
                e.end > comp->start + kEps)
                flag("D1", "eval of layer " + std::to_string(layer - 1) +
                               " ends after compute of layer " + std::to_string(layer));
        }
    }

    // D2: eval(l) starts after the attention part of compute(l).
    for (const auto& e : tl.events) {
        if (e.kind != SimKind::Eval) continue;
        auto it = compute_at.find(e.layer);
        if (it == compute_at.end()) continue;
        const double attn_done =
            it->second->start + w.attention_fraction * (it->second->end - it->second->start);
        if (e.start < attn_done - kEps)
            flag("D2", "eval of layer " + std::to_string(e.layer) +
                           " starts before attention completes");
    }

    // P: every workload item is loaded exactly once with matching bytes.
    {
        std::map<std::pair<int, std::string>, std::uint64_t> loaded;
        for (const auto& e : tl.events)
            if (e.kind == SimKind::Load && e.bytes > 0)
                loaded[{e.layer, e.owner.str()}] += e.bytes;
        std::map<std::pair<int, std::string>, std::uint64_t> wanted;
        for (const auto& item : w.items)
            if (item.bytes > 0) wanted[{item.layer, item.owner.str()}] += item.bytes;
        if (loaded != wanted)
            flag("P", "loaded bytes do not match workload items");
    }

    // S: a pre-load (a load for layer >= l+2 running inside compute(l)) must
    // only touch owners whose members all left the plan by layer l.
    for (const auto& e : tl.events) {
        if (e.kind != SimKind::Load) continue;
        for (const auto& [layer, comp] : compute_at) {
            if (e.start >= comp->end - kEps || e.end <= comp->start + kEps) continue;
            if (e.layer < comp->layer + 2) continue;
            for (SegmentId m : w.members_of(e.owner)) {
                if (comp->layer < static_cast<int>(plan.layers.size()) &&
                    plan.layers[comp->layer].count(m))
                    flag("S", "pre-load of " + e.owner.str() + " while segment " +
                                  std::to_string(m) + " is still planned at layer " +
                                  std::to_string(comp->layer));
            }
        }
    }

    // Makespan bookkeeping.
    double max_end = 0.0;
    for (const auto& e : tl.events) max_end = std::max(max_end, e.end);
    if (tl.makespan + kEps < max_end)
        flag("P", "makespan smaller than the last event end");

    return out;
}

}  // namespace keep
