#pragma once

// Episode harness: generates synthetic update/query traces, replays them
// under one of the six strategies and aggregates per-step reports.
//
// Replay of one step: apply the step's updates (store transitions +
// cache invalidation), advance the stability clock (new static groups get
// their joint KV computed in the background), then serve the query -
// retrieve units, refresh any unit whose canonical KV is missing, build the
// plan, execute the selective prefill against a fresh oracle and simulate
// the load/compute pipeline for the step's TTFT.
//
// Refreshing a unit recomputes its standalone (or group-joint) KV and is
// charged to the step's TTFT; the prefill's own reuse accounting stays
// per-call so tokens_reused + tokens_recomputed always equals the tokens
// presented.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "keep/cache_manager.hpp"
#include "keep/memory_store.hpp"
#include "keep/pipeline_sim.hpp"
#include "keep/prefill.hpp"
#include "keep/recompute.hpp"
#include "keep/serialize.hpp"

namespace keep {

struct CategorySpec {
    std::string name;
    int count = 0;
    int tokens_per_segment = 8;
    double update_prob_per_step = 0.0;
};

enum class ScheduleKind { Sequential, Overlap, Balanced };

struct AblationFlags {
    GroupingMode grouping = GroupingMode::Semantic;
    bool multihop = true;
    bool balanced_loading = true;
};

struct EpisodeConfig {
    std::uint64_t seed = 0;
    int num_segments = 0;
    int num_steps = 1;
    int retrieval_k = 1;
    double r_avg = 0.5;
    int query_tokens = 8;
    int embedding_dim = 16;
    int fixed_pos_edge_tokens = 4;
    StoreConfig store;
    ModelConfig model;
    CostModel cost;
    TierConfig tier;
    std::vector<CategorySpec> categories;
    AblationFlags ablation;
    std::optional<ScheduleKind> schedule_override;

    void validate() const {
        if (num_steps < 1) throw ConfigError("num_steps must be >= 1");
        if (retrieval_k < 1) throw ConfigError("retrieval_k must be >= 1");
        if (query_tokens < 1) throw ConfigError("query_tokens must be >= 1");
        if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
        if (fixed_pos_edge_tokens < 0) throw ConfigError("fixed_pos_edge_tokens must be >= 0");
        model.validate();
        store.validate();
        cost.validate();
        tier.validate();
        int total = 0;
        for (const auto& c : categories) {
            if (c.count < 0) throw ConfigError("category count must be >= 0");
            if (c.tokens_per_segment < 1)
                throw ConfigError("tokens_per_segment must be >= 1");
            if (c.update_prob_per_step < 0.0 || c.update_prob_per_step > 1.0)
                throw ConfigError("update probability must be in [0, 1]");
            total += c.count;
        }
        if (total != num_segments)
            throw ConfigError("category counts must sum to num_segments");
        if (model.num_layers > 1) {
            const double lo = 1.0 / model.num_layers;
            if (r_avg < lo - 1e-9 || r_avg > 1.0 + 1e-9)
                throw ConfigError("r_avg outside [1/L, 1]");
        }
    }
};

// Four synthetic categories with qualitatively different update rates.
inline std::vector<CategorySpec> default_categories(int num_segments) {
    std::vector<CategorySpec> cats{
        {"object-state", 0, 8, 0.30},
        {"agent-state", 0, 8, 0.20},
        {"task-history", 0, 8, 0.02},
        {"environment-layout", 0, 8, 0.05},
    };
    const int base = num_segments / 4;
    int rest = num_segments - base * 4;
    for (auto& c : cats) {
        c.count = base + (rest > 0 ? 1 : 0);
        if (rest > 0) --rest;
    }
    return cats;
}

struct TraceEvent {
    enum class Type { InitSegment, Update, Query };
    Type type = Type::InitSegment;
    std::int64_t step = 0;
    SegmentId id = 0;
    std::string category;
    TokenSeq tokens;
    std::vector<double> embedding;
    std::uint64_t embedding_seed = 0;
    int k = 0;
};

// ---------------------------------------------------------------------------
// Config and trace (de)serialization
// ---------------------------------------------------------------------------

inline Json config_to_json(const EpisodeConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["num_segments"] = c.num_segments;
    j["num_steps"] = c.num_steps;
    j["retrieval_k"] = c.retrieval_k;
    j["r_avg"] = c.r_avg;
    j["query_tokens"] = c.query_tokens;
    j["embedding_dim"] = c.embedding_dim;
    j["fixed_pos_edge_tokens"] = c.fixed_pos_edge_tokens;
    j["store"] = Json{{"t", c.store.t},
                      {"num_groups", c.store.num_groups},
                      {"seed", c.store.seed}};
    j["model"] = Json{{"num_layers", c.model.num_layers}, {"num_heads", c.model.num_heads},
                      {"model_dim", c.model.model_dim},   {"mlp_dim", c.model.mlp_dim},
                      {"vocab_size", c.model.vocab_size}, {"seed", c.model.seed}};
    j["cost"] = Json{{"compute_tu_per_token_per_layer", c.cost.compute_tu_per_token_per_layer},
                     {"eval_tu_per_layer", c.cost.eval_tu_per_layer},
                     {"attention_fraction", c.cost.attention_fraction}};
    j["tier"] = Json{{"fast_capacity_bytes", c.tier.fast_capacity_bytes},
                     {"fast_bandwidth_bytes_per_tu", c.tier.fast_bandwidth_bytes_per_tu},
                     {"slow_to_fast_bandwidth_bytes_per_tu",
                      c.tier.slow_to_fast_bandwidth_bytes_per_tu}};
    Json cats = Json::array();
    for (const auto& cat : c.categories)
        cats.push_back(Json{{"name", cat.name},
                            {"count", cat.count},
                            {"tokens_per_segment", cat.tokens_per_segment},
                            {"update_prob_per_step", cat.update_prob_per_step}});
    j["categories"] = cats;
    j["ablation"] = Json{
        {"grouping", c.ablation.grouping == GroupingMode::Semantic ? "semantic" : "fixed"},
        {"multihop", c.ablation.multihop},
        {"balanced_loading", c.ablation.balanced_loading}};
    if (c.schedule_override) {
        const char* names[] = {"seq", "overlap", "balanced"};
        j["schedule_override"] = names[static_cast<int>(*c.schedule_override)];
    }
    return j;
}

inline EpisodeConfig config_from_json(const Json& j) {
    EpisodeConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.num_segments = j.at("num_segments").get<int>();
    c.num_steps = j.at("num_steps").get<int>();
    c.retrieval_k = j.at("retrieval_k").get<int>();
    c.r_avg = j.value("r_avg", 0.5);
    c.query_tokens = j.value("query_tokens", 8);
    c.embedding_dim = j.value("embedding_dim", 16);
    c.fixed_pos_edge_tokens = j.value("fixed_pos_edge_tokens", 4);
    const auto& js = j.at("store");
    c.store.t = js.at("t").get<int>();
    c.store.num_groups = js.at("num_groups").get<int>();
    c.store.seed = js.value("seed", c.seed);
    const auto& jm = j.at("model");
    c.model.num_layers = jm.at("num_layers").get<int>();
    c.model.num_heads = jm.at("num_heads").get<int>();
    c.model.model_dim = jm.at("model_dim").get<int>();
    c.model.mlp_dim = jm.at("mlp_dim").get<int>();
    c.model.vocab_size = jm.at("vocab_size").get<int>();
    c.model.seed = jm.value("seed", c.seed);
    const auto& jc = j.at("cost");
    c.cost.compute_tu_per_token_per_layer = jc.at("compute_tu_per_token_per_layer").get<double>();
    c.cost.eval_tu_per_layer = jc.value("eval_tu_per_layer", 0.0);
    c.cost.attention_fraction = jc.value("attention_fraction", 0.5);
    const auto& jt = j.at("tier");
    c.tier.fast_capacity_bytes = jt.at("fast_capacity_bytes").get<std::uint64_t>();
    c.tier.fast_bandwidth_bytes_per_tu = jt.at("fast_bandwidth_bytes_per_tu").get<std::uint64_t>();
    c.tier.slow_to_fast_bandwidth_bytes_per_tu =
        jt.at("slow_to_fast_bandwidth_bytes_per_tu").get<std::uint64_t>();
    if (j.contains("categories")) {
        for (const auto& jcat : j.at("categories")) {
            CategorySpec cat;
            cat.name = jcat.at("name").get<std::string>();
            cat.count = jcat.at("count").get<int>();
            cat.tokens_per_segment = jcat.value("tokens_per_segment", 8);
            cat.update_prob_per_step = jcat.at("update_prob_per_step").get<double>();
            c.categories.push_back(cat);
        }
    } else {
        c.categories = default_categories(c.num_segments);
    }
    if (j.contains("ablation")) {
        const auto& ja = j.at("ablation");
        const std::string grouping = ja.value("grouping", "semantic");
        if (grouping == "semantic") {
            c.ablation.grouping = GroupingMode::Semantic;
        } else if (grouping == "fixed") {
            c.ablation.grouping = GroupingMode::FixedBlocks;
        } else {
            throw ConfigError("ablation.grouping must be 'semantic' or 'fixed'");
        }
        c.ablation.multihop = ja.value("multihop", true);
        c.ablation.balanced_loading = ja.value("balanced_loading", true);
    }
    if (j.contains("schedule_override")) {
        const std::string s = j.at("schedule_override").get<std::string>();
        if (s == "seq") c.schedule_override = ScheduleKind::Sequential;
        else if (s == "overlap") c.schedule_override = ScheduleKind::Overlap;
        else if (s == "balanced") c.schedule_override = ScheduleKind::Balanced;
        else if (!s.empty()) throw ConfigError("bad schedule_override '" + s + "'");
    }
    c.validate();
    return c;
}

// KEEP_SEED overrides the top-level episode seed (not the model seed).
inline void apply_env_seed(EpisodeConfig& c) {
    if (const char* env = std::getenv("KEEP_SEED")) {
        c.seed = std::strtoull(env, nullptr, 10);
        c.store.seed = c.seed;
    }
}

inline Json trace_event_to_json(const TraceEvent& e) {
    Json j;
    switch (e.type) {
        case TraceEvent::Type::InitSegment:
            j["type"] = "init-segment";
            j["id"] = e.id;
            j["category"] = e.category;
            j["tokens"] = e.tokens;
            j["embedding"] = e.embedding;
            break;
        case TraceEvent::Type::Update:
            j["type"] = "update";
            j["step"] = e.step;
            j["id"] = e.id;
            j["tokens"] = e.tokens;
            break;
        case TraceEvent::Type::Query:
            j["type"] = "query";
            j["step"] = e.step;
            j["embedding_seed"] = e.embedding_seed;
            j["k"] = e.k;
            break;
    }
    return j;
}

inline TraceEvent trace_event_from_json(const Json& j) {
    TraceEvent e;
    const std::string type = j.at("type").get<std::string>();
    if (type == "init-segment") {
        e.type = TraceEvent::Type::InitSegment;
        e.id = j.at("id").get<SegmentId>();
        e.category = j.at("category").get<std::string>();
        e.tokens = j.at("tokens").get<TokenSeq>();
        e.embedding = j.at("embedding").get<std::vector<double>>();
    } else if (type == "update") {
        e.type = TraceEvent::Type::Update;
        e.step = j.at("step").get<std::int64_t>();
        e.id = j.at("id").get<SegmentId>();
        e.tokens = j.at("tokens").get<TokenSeq>();
    } else if (type == "query") {
        e.type = TraceEvent::Type::Query;
        e.step = j.at("step").get<std::int64_t>();
        e.embedding_seed = j.at("embedding_seed").get<std::uint64_t>();
        e.k = j.at("k").get<int>();
    } else {
        throw TraceError("unknown trace event type '" + type + "'");
    }
    return e;
}

inline std::string trace_to_jsonl(const std::vector<TraceEvent>& events) {
    std::string out;
    for (const auto& e : events) {
        out += trace_event_to_json(e).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<TraceEvent> trace_from_jsonl(const std::string& text) {
    std::vector<TraceEvent> events;
    std::istringstream in(text);
    std::string line;
    std::int64_t prev_step = 0;
    std::set<SegmentId> known;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TraceEvent e = trace_event_from_json(Json::parse(line));
        if (e.type == TraceEvent::Type::InitSegment) {
            if (!known.insert(e.id).second) throw TraceError("duplicate init-segment id");
        } else {
            if (e.step < prev_step) throw TraceError("trace steps decrease");
            prev_step = e.step;
            if (e.type == TraceEvent::Type::Update && !known.count(e.id))
                throw TraceError("update for unknown segment");
        }
        events.push_back(std::move(e));
    }
    return events;
}

// ---------------------------------------------------------------------------
// Episode generation
// ---------------------------------------------------------------------------

inline TokenSeq random_tokens(Rng& rng, int count, int vocab) {
    TokenSeq tokens(static_cast<std::size_t>(count));
    for (auto& t : tokens) t = static_cast<int>(rng.next_below(vocab));
    return tokens;
}

// Query derivation shared between generation and replay: a unit vector
// biased toward one focus segment, plus the query token content.
struct DerivedQuery {
    std::vector<double> embedding;
    TokenSeq tokens;
};

inline DerivedQuery derive_query(std::uint64_t embedding_seed,
                                 const std::vector<std::vector<double>>& segment_embeddings,
                                 int query_tokens, int vocab) {
    Rng rng(embedding_seed);
    const std::size_t focus = rng.next_below(segment_embeddings.size());
    std::vector<double> e = segment_embeddings[focus];
    for (auto& x : e) x += 0.25 * rng.gaussian();
    double norm = 0.0;
    for (double x : e) norm += x * x;
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& x : e) x /= norm;
    DerivedQuery q;
    q.embedding = std::move(e);
    q.tokens = random_tokens(rng, query_tokens, vocab);
    return q;
}

inline std::vector<TraceEvent> generate_episode(const EpisodeConfig& config) {
    config.validate();
    std::vector<TraceEvent> events;
    Rng seg_rng = Rng::stream(config.seed, "segments");
    SegmentId next_id = 0;
    std::vector<double> update_prob;
    std::vector<int> seg_tokens;
    for (const auto& cat : config.categories) {
        Rng centroid_rng = Rng::stream(config.seed, "centroid." + cat.name);
        const std::vector<double> centroid = centroid_rng.unit_vector(config.embedding_dim);
        for (int i = 0; i < cat.count; ++i) {
            TraceEvent e;
            e.type = TraceEvent::Type::InitSegment;
            e.id = next_id++;
            e.category = cat.name;
            e.tokens = random_tokens(seg_rng, cat.tokens_per_segment, config.model.vocab_size);
            std::vector<double> emb = centroid;
            for (auto& x : emb) x += 0.35 * seg_rng.gaussian();
            double norm = 0.0;
            for (double x : emb) norm += x * x;
            norm = std::sqrt(std::max(norm, 1e-12));
            for (auto& x : emb) x /= norm;
            e.embedding = std::move(emb);
            update_prob.push_back(cat.update_prob_per_step);
            seg_tokens.push_back(cat.tokens_per_segment);
            events.push_back(std::move(e));
        }
    }

    Rng update_rng = Rng::stream(config.seed, "updates");
    Rng query_rng = Rng::stream(config.seed, "queries");
    for (int step = 1; step <= config.num_steps; ++step) {
        for (SegmentId id = 0; id < next_id; ++id) {
            const double roll = update_rng.next_double();
            if (roll < update_prob[id]) {
                TraceEvent e;
                e.type = TraceEvent::Type::Update;
                e.step = step;
                e.id = id;
                e.tokens = random_tokens(update_rng, seg_tokens[id], config.model.vocab_size);
                events.push_back(std::move(e));
            }
        }
        TraceEvent q;
        q.type = TraceEvent::Type::Query;
        q.step = step;
        q.embedding_seed = query_rng.next_u64();
        q.k = config.retrieval_k;
        events.push_back(std::move(q));
    }
    return events;
}

// ---------------------------------------------------------------------------
// Episode replay
// ---------------------------------------------------------------------------

struct StepReport {
    std::int64_t step = 0;
    std::size_t realized_segments = 0;
    double ttft_tu = 0.0;
    double makespan_tu = 0.0;
    double refresh_tu = 0.0;
    double div_l2 = 0.0;
    double div_kl = 0.0;
    std::vector<std::size_t> plan_sizes;
    double reused_tokens = 0.0;
    double recomputed_tokens = 0.0;
    double memory_tokens = 0.0;
    std::uint64_t invalidated_tokens_delta = 0;
    std::uint64_t bytes_loaded_slow_delta = 0;
};

struct StrategyReport {
    std::string strategy;
    std::vector<StepReport> steps;
    double mean_ttft_tu = 0.0;
    double p95_ttft_tu = 0.0;
    double mean_div_l2 = 0.0;
    double mean_div_kl = 0.0;
    double reuse_ratio = 0.0;
    double mean_realized_segments = 0.0;
    std::uint64_t invalidated_tokens = 0;
    std::uint64_t bytes_slow = 0;
};

inline Json report_to_json(const StrategyReport& r) {
    Json j;
    j["strategy"] = r.strategy;
    Json steps = Json::array();
    for (const auto& s : r.steps) {
        Json js;
        js["step"] = s.step;
        js["realized_segments"] = s.realized_segments;
        js["ttft_tu"] = s.ttft_tu;
        js["makespan_tu"] = s.makespan_tu;
        js["refresh_tu"] = s.refresh_tu;
        js["div_l2"] = s.div_l2;
        js["div_kl"] = s.div_kl;
        js["plan_sizes"] = s.plan_sizes;
        js["reused_tokens"] = s.reused_tokens;
        js["recomputed_tokens"] = s.recomputed_tokens;
        js["memory_tokens"] = s.memory_tokens;
        js["invalidated_tokens_delta"] = s.invalidated_tokens_delta;
        js["bytes_loaded_slow_delta"] = s.bytes_loaded_slow_delta;
        steps.push_back(js);
    }
    j["per_step"] = steps;
    j["aggregate"] = Json{{"steps", r.steps.size()},
                          {"mean_ttft_tu", r.mean_ttft_tu},
                          {"p95_ttft_tu", r.p95_ttft_tu},
                          {"mean_div_l2", r.mean_div_l2},
                          {"mean_div_kl", r.mean_div_kl},
                          {"reuse_ratio", r.reuse_ratio},
                          {"mean_realized_segments", r.mean_realized_segments},
                          {"invalidated_tokens", r.invalidated_tokens},
                          {"bytes_slow", r.bytes_slow}};
    return j;
}

namespace detail {

struct EpisodeRuntime {
    const EpisodeConfig& config;
    Model model;
    MemoryStore store;
    CacheManager cache;
    RatioSchedule schedule;

    EpisodeRuntime(const EpisodeConfig& cfg, std::vector<MemorySegment> segments)
        : config(cfg),
          model(Model::init(cfg.model)),
          store(std::move(segments), store_config(cfg)),
          cache(cfg.tier),
          schedule(ratio_schedule(cfg.model.num_layers, cfg.r_avg)) {}

    static StoreConfig store_config(const EpisodeConfig& cfg) {
        StoreConfig sc = cfg.store;
        sc.mode = cfg.ablation.grouping;
        if (sc.seed == 0) sc.seed = cfg.seed;
        return sc;
    }

    std::uint64_t owner_version(const OwnerRef& owner) const {
        if (owner.kind == OwnerRef::Kind::Segment)
            return store.segment(owner.id).version;
        return store.group_version(owner.id);
    }

    // Canonical KV for a unit: standalone per segment, joint per group.
    void compute_and_put(const RetrievalUnit& unit) {
        const int L = config.model.num_layers;
        if (unit.owner.kind == OwnerRef::Kind::Segment) {
            const auto& seg = store.segment(unit.owner.id);
            auto kv = segment_prefill(model, seg.tokens);
            for (int l = 0; l < L; ++l)
                cache.put(unit.owner, seg.version, l, seg.tokens.size(), std::move(kv[l]));
        } else {
            Layout members;
            std::uint64_t tokens = 0;
            for (SegmentId m : unit.segments) {
                members.segments.push_back({m, store.segment(m).tokens});
                tokens += store.segment(m).tokens.size();
            }
            members.units.emplace_back(0, static_cast<int>(members.segments.size()));
            auto kv = full_prefill(model, members, {}).kv;
            const std::uint64_t version = store.group_version(unit.owner.id);
            for (int l = 0; l < L; ++l)
                cache.put(unit.owner, version, l, tokens, std::move(kv[l]));
        }
    }

    std::uint64_t unit_tokens(const RetrievalUnit& unit) const {
        std::uint64_t n = 0;
        for (SegmentId s : unit.segments) n += store.segment(s).tokens.size();
        return n;
    }
};

}  // namespace detail

inline StrategyReport run_episode(const std::vector<TraceEvent>& trace,
                                  const std::string& strategy_name_in,
                                  const EpisodeConfig& config) {
    config.validate();
    const Strategy strategy = parse_strategy(strategy_name_in);
    const int L = config.model.num_layers;

    std::vector<MemorySegment> segments;
    std::map<std::int64_t, std::vector<const TraceEvent*>> steps;
    for (const auto& e : trace) {
        if (e.type == TraceEvent::Type::InitSegment) {
            MemorySegment seg;
            seg.id = e.id;
            seg.category = e.category;
            seg.tokens = e.tokens;
            seg.embedding = e.embedding;
            segments.push_back(std::move(seg));
        } else {
            steps[e.step].push_back(&e);
        }
    }
    if (segments.empty()) throw TraceError("trace has no init-segment events");

    std::vector<std::vector<double>> embeddings_by_id;
    {
        std::vector<MemorySegment> sorted = segments;
        std::sort(sorted.begin(), sorted.end(),
                  [](const auto& a, const auto& b) { return a.id < b.id; });
        for (const auto& s : sorted) embeddings_by_id.push_back(s.embedding);
    }

    detail::EpisodeRuntime rt(config, std::move(segments));
    StrategyReport report;
    report.strategy = strategy_name(strategy);

    ReuseStats prev_stats;
    double total_reused = 0.0, total_memory_tokens = 0.0;

    for (const auto& [step, events] : steps) {
        // Updates first, then the stability clock, then queries.
        for (const auto* e : events) {
            if (e->type != TraceEvent::Type::Update) continue;
            const auto record = rt.store.apply_update(e->id, e->tokens, step);
            rt.cache.invalidate(record);
        }
        for (const auto& transition : rt.store.advance_step(step)) {
            RetrievalUnit unit{OwnerRef::group(transition.group), transition.members};
            rt.compute_and_put(unit);  // background joint recompute
        }

        for (const auto* e : events) {
            if (e->type != TraceEvent::Type::Query) continue;
            const DerivedQuery query = derive_query(e->embedding_seed, embeddings_by_id,
                                                    config.query_tokens,
                                                    config.model.vocab_size);
            const RetrievalSet rset = rt.store.retrieve(query.embedding, e->k);

            Layout layout;
            std::vector<RetrievalUnit> units = rset.units;
            for (const auto& unit : units) {
                const int begin = static_cast<int>(layout.segments.size());
                for (SegmentId s : unit.segments)
                    layout.segments.push_back({s, rt.store.segment(s).tokens});
                layout.units.emplace_back(begin, static_cast<int>(layout.segments.size()));
            }

            // Refresh missing canonical KV. `full` never reads the cache and
            // `prefix` recomputes everything at or after the first miss.
            double refresh_tu = 0.0;
            std::optional<int> first_invalid_pos;
            {
                int pos = 0;
                for (const auto& unit : units) {
                    const bool current = rt.cache.has_current(
                        unit.owner, rt.owner_version(unit.owner), L);
                    if (!current) {
                        if (!first_invalid_pos) first_invalid_pos = pos;
                        if (strategy != Strategy::Full && strategy != Strategy::Prefix) {
                            rt.compute_and_put(unit);
                            refresh_tu += static_cast<double>(rt.unit_tokens(unit)) * L *
                                          config.cost.compute_tu_per_token_per_layer;
                        }
                    }
                    pos += static_cast<int>(unit.segments.size());
                }
            }

            // Per-segment cached KV views (group blocks sliced per member).
            CachedKV cached;
            for (const auto& unit : units) {
                if (unit.owner.kind == OwnerRef::Kind::Segment) {
                    const LayerKV* first = rt.cache.peek_payload(unit.owner, 0);
                    if (first == nullptr) continue;
                    std::vector<LayerKV> per_layer;
                    bool complete = true;
                    for (int l = 0; l < L; ++l) {
                        const LayerKV* p = rt.cache.peek_payload(unit.owner, l);
                        if (p == nullptr) {
                            complete = false;
                            break;
                        }
                        per_layer.push_back(*p);
                    }
                    if (complete) cached[unit.owner.id] = std::move(per_layer);
                } else {
                    bool complete = true;
                    std::vector<const LayerKV*> joint;
                    for (int l = 0; l < L; ++l) {
                        const LayerKV* p = rt.cache.peek_payload(unit.owner, l);
                        if (p == nullptr) {
                            complete = false;
                            break;
                        }
                        joint.push_back(p);
                    }
                    if (!complete) continue;
                    int offset = 0;
                    for (SegmentId m : unit.segments) {
                        const int n = static_cast<int>(rt.store.segment(m).tokens.size());
                        std::vector<LayerKV> per_layer;
                        per_layer.reserve(L);
                        for (int l = 0; l < L; ++l) {
                            LayerKV slice{Mat(n, rt.model.cfg.model_dim),
                                          Mat(n, rt.model.cfg.model_dim)};
                            for (int t = 0; t < n; ++t) {
                                const float* kr = joint[l]->keys.row_ptr(offset + t);
                                const float* vr = joint[l]->values.row_ptr(offset + t);
                                std::copy(kr, kr + rt.model.cfg.model_dim, slice.keys.row_ptr(t));
                                std::copy(vr, vr + rt.model.cfg.model_dim, slice.values.row_ptr(t));
                            }
                            per_layer.push_back(std::move(slice));
                        }
                        cached[m] = std::move(per_layer);
                        offset += n;
                    }
                }
            }

            RecomputePlan plan;
            switch (strategy) {
                case Strategy::Full: {
                    plan.layers.resize(L);
                    for (const auto& seg : layout.segments)
                        for (int l = 0; l < L; ++l) plan.layers[l].insert(seg.id);
                    break;
                }
                case Strategy::Prefix:
                    plan = plan_prefix(layout, first_invalid_pos, L);
                    break;
                case Strategy::FullReuse:
                    plan = plan_full_reuse(L);
                    break;
                case Strategy::FixedPos:
                    plan = plan_fixed_position(layout, rt.schedule,
                                               config.fixed_pos_edge_tokens);
                    break;
                case Strategy::Deviation:
                    plan = plan_deviation(rt.model, layout, cached, query.tokens, rt.schedule);
                    break;
                case Strategy::Keep:
                    plan = plan_keep(rt.model, layout, cached, query.tokens, rt.schedule,
                                     config.ablation.multihop);
                    break;
            }

            const StrategyResult sr = run_strategy(rt.model, layout, cached, query.tokens, plan);
            rt.cache.add_prefill_accounting(sr.reused_tokens, sr.recomputed_tokens);

            // Workload from the pre-load tier state, then replay the loads so
            // LRU order and slow-byte stats evolve.
            std::vector<LoadUnit> load_units;
            for (const auto& unit : units) {
                LoadUnit lu;
                lu.owner = unit.owner;
                lu.segments = unit.segments;
                lu.slow_bytes.assign(L, 0);
                for (int l = 0; l < L; ++l) {
                    const auto tier = rt.cache.peek_tier(unit.owner, l);
                    if (tier && *tier == Tier::Slow) {
                        const LayerKV* p = rt.cache.peek_payload(unit.owner, l);
                        lu.slow_bytes[l] = kv_block_bytes(*p);
                    }
                }
                load_units.push_back(std::move(lu));
            }
            const bool with_eval = strategy == Strategy::Keep;
            const Workload workload = derive_workload(
                plan, layout, load_units, query.tokens.size(), config.cost,
                static_cast<double>(config.tier.slow_to_fast_bandwidth_bytes_per_tu),
                with_eval);

            ScheduleKind kind;
            switch (strategy) {
                case Strategy::Full:
                case Strategy::Prefix:
                    kind = ScheduleKind::Sequential;
                    break;
                case Strategy::Keep:
                    kind = config.ablation.balanced_loading ? ScheduleKind::Balanced
                                                            : ScheduleKind::Overlap;
                    break;
                default:
                    kind = ScheduleKind::Overlap;
                    break;
            }
            if (config.schedule_override) kind = *config.schedule_override;

            Timeline timeline;
            switch (kind) {
                case ScheduleKind::Sequential: timeline = simulate_sequential(workload); break;
                case ScheduleKind::Overlap: timeline = simulate_overlap(workload); break;
                case ScheduleKind::Balanced: timeline = simulate_balanced(workload, plan); break;
            }
            const auto violations = validate_timeline(timeline, plan, workload);
            if (!violations.empty())
                throw PlanError("schedule produced an invalid timeline: " +
                                violations.front().code + " " + violations.front().message);

            for (int l = 0; l < L; ++l) {
                for (const auto& unit : units) {
                    bool needed = false;
                    for (SegmentId s : unit.segments)
                        if (!plan.layers[l].count(s)) needed = true;
                    if (!needed) continue;
                    if (rt.cache.peek_tier(unit.owner, l)) rt.cache.load(unit.owner, l);
                }
            }

            const ReuseStats stats = rt.cache.snapshot_stats();
            StepReport row;
            row.step = step;
            row.realized_segments = layout.segments.size();
            row.refresh_tu = refresh_tu;
            row.makespan_tu = timeline.makespan;
            row.ttft_tu = refresh_tu + timeline.makespan;
            row.div_l2 = sr.div.l2;
            row.div_kl = sr.div.sym_kl;
            row.plan_sizes = sr.plan_sizes;
            row.reused_tokens = sr.reused_tokens;
            row.recomputed_tokens = sr.recomputed_tokens;
            row.memory_tokens = static_cast<double>(layout.total_tokens());
            row.invalidated_tokens_delta = stats.tokens_invalidated - prev_stats.tokens_invalidated;
            row.bytes_loaded_slow_delta = stats.bytes_loaded_slow - prev_stats.bytes_loaded_slow;
            prev_stats = stats;
            total_reused += sr.reused_tokens;
            total_memory_tokens += row.memory_tokens;
            report.steps.push_back(std::move(row));
        }
    }

    if (!report.steps.empty()) {
        std::vector<double> ttfts;
        for (const auto& s : report.steps) {
            report.mean_ttft_tu += s.ttft_tu;
            report.mean_div_l2 += s.div_l2;
            report.mean_div_kl += s.div_kl;
            report.mean_realized_segments += static_cast<double>(s.realized_segments);
            ttfts.push_back(s.ttft_tu);
        }
        const double n = static_cast<double>(report.steps.size());
        report.mean_ttft_tu /= n;
        report.mean_div_l2 /= n;
        report.mean_div_kl /= n;
        report.mean_realized_segments /= n;
        std::sort(ttfts.begin(), ttfts.end());
        const std::size_t idx =
            static_cast<std::size_t>(std::ceil(0.95 * ttfts.size())) - 1;
        report.p95_ttft_tu = ttfts[std::min(idx, ttfts.size() - 1)];
        report.reuse_ratio = total_memory_tokens > 0 ? total_reused / total_memory_tokens : 0.0;
    }
    const ReuseStats stats = prev_stats;
    report.invalidated_tokens = stats.tokens_invalidated;
    report.bytes_slow = stats.bytes_loaded_slow;
    return report;
}

// ---------------------------------------------------------------------------
// Comparison CSV
// ---------------------------------------------------------------------------

struct SweepSpec {
    std::vector<int> ks;
    std::vector<double> rs;
};

inline std::string compare_csv(const std::vector<TraceEvent>& trace,
                               const std::vector<std::string>& strategies,
                               const EpisodeConfig& config, const SweepSpec& sweep) {
    std::string csv =
        "strategy,k,r_avg,mean_ttft_tu,p95_ttft_tu,mean_div_l2,mean_div_kl,"
        "reuse_ratio,invalidated_tokens,bytes_slow\n";
    struct Point {
        int k;
        double r;
    };
    std::vector<Point> points;
    if (!sweep.ks.empty()) {
        for (int k : sweep.ks) points.push_back({k, config.r_avg});
    } else if (!sweep.rs.empty()) {
        for (double r : sweep.rs) points.push_back({config.retrieval_k, r});
    } else {
        points.push_back({config.retrieval_k, config.r_avg});
    }

    for (const auto& name : strategies) {
        for (const auto& pt : points) {
            EpisodeConfig cfg = config;
            cfg.retrieval_k = pt.k;
            cfg.r_avg = pt.r;
            // Queries carry their own k; sweeping k rewrites it.
            std::vector<TraceEvent> adjusted = trace;
            for (auto& e : adjusted)
                if (e.type == TraceEvent::Type::Query) e.k = pt.k;
            const StrategyReport rep = run_episode(adjusted, name, cfg);
            csv += name;
            csv += ',' + std::to_string(pt.k);
            csv += ',' + fmt_tu(pt.r);
            csv += ',' + fmt_tu(rep.mean_ttft_tu);
            csv += ',' + fmt_tu(rep.p95_ttft_tu);
            csv += ',' + fmt_tu(rep.mean_div_l2);
            csv += ',' + fmt_tu(rep.mean_div_kl);
            csv += ',' + fmt_tu(rep.reuse_ratio);
            csv += ',' + std::to_string(rep.invalidated_tokens);
            csv += ',' + std::to_string(rep.bytes_slow);
            csv += '\n';
        }
    }
    return csv;
}

}  // namespace keep
