#pragma once

// Prefill paths over a segmented context.
//
//   full_prefill      - dense causal pass over [segments..., query]; the
//                       numeric oracle everything else is compared against.
//   segment_prefill   - a segment processed as if it were the whole context;
//                       this is the KV that gets cached per segment.
//   selective_prefill - layer-by-layer replay that recomputes only the
//                       segments named by a plan and reuses cached KV for the
//                       rest. Query tokens are always recomputed.
//
// Attention summaries aggregate per-head attention into segment-level mass:
// mean over heads, mean over source tokens, sum over destination tokens of a
// segment. Rows therefore sum to at most 1 and the segment-to-segment matrix
// is strictly lower-triangular in layout order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "keep/errors.hpp"
#include "keep/model.hpp"
#include "keep/tensor.hpp"

namespace keep {

using SegmentId = std::uint32_t;
using GroupId = std::uint32_t;
using TokenSeq = std::vector<int>;

struct LayoutSegment {
    SegmentId id = 0;
    TokenSeq tokens;
};

// Retrieval units over segment indices, [begin, end). A unit is either one
// dynamic segment or a whole static group; plans are per-segment but loading
// and edge heuristics work on units.
struct Layout {
    std::vector<LayoutSegment> segments;
    std::vector<std::pair<int, int>> units;

    static Layout of(std::vector<LayoutSegment> segs) {
        Layout l;
        l.segments = std::move(segs);
        for (int i = 0; i < static_cast<int>(l.segments.size()); ++i)
            l.units.emplace_back(i, i + 1);
        return l;
    }

    std::size_t num_segments() const { return segments.size(); }

    std::size_t total_tokens() const {
        std::size_t n = 0;
        for (const auto& s : segments) n += s.tokens.size();
        return n;
    }

    int position_of(SegmentId id) const {
        for (int i = 0; i < static_cast<int>(segments.size()); ++i)
            if (segments[i].id == id) return i;
        return -1;
    }
};

struct LayerKV {
    Mat keys;    // [tokens x d]
    Mat values;  // [tokens x d]
};

struct AttentionSummary {
    int layer = 0;
    std::vector<double> query_to_segment;
    std::vector<std::vector<double>> segment_to_segment;
};

struct PrefillResult {
    Mat final_hidden;            // [T x d]; rows of dropped segments are zero
    std::vector<LayerKV> kv;     // per layer, covering all T tokens
    std::vector<AttentionSummary> attn;
};

// Cached standalone (or group-joint, pre-sliced) KV per segment, per layer.
using CachedKV = std::map<SegmentId, std::vector<LayerKV>>;

struct RecomputePlan {
    // layers[l] = segment ids recomputed at layer l.
    std::vector<std::set<SegmentId>> layers;

    bool is_monotone() const {
        for (std::size_t l = 0; l + 1 < layers.size(); ++l)
            for (SegmentId s : layers[l + 1])
                if (!layers[l].count(s)) return false;
        return true;
    }

    void validate_monotone() const {
        if (!is_monotone()) throw PlanError("plan is not monotone across layers");
    }

    std::vector<std::size_t> sizes() const {
        std::vector<std::size_t> out;
        out.reserve(layers.size());
        for (const auto& s : layers) out.push_back(s.size());
        return out;
    }
};

struct Divergence {
    double l2 = 0.0;
    double sym_kl = 0.0;
};

namespace detail {

// One attention row: query vector q over keys/values rows [0, t_limit],
// all heads. Writes the context vector to out (zeroed here) and adds the
// mean-over-heads probability of each visible token into prob_mean.
inline void attention_row(const float* q, const Mat& keys, const Mat& values,
                          int t_limit, int num_heads, int head_dim,
                          float* out, double* prob_mean,
                          std::vector<double>& scores_scratch) {
    const int d = num_heads * head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const double inv_heads = 1.0 / num_heads;
    std::vector<double>& s = scores_scratch;
    if (static_cast<int>(s.size()) < t_limit + 1) s.resize(t_limit + 1);
    for (int j = 0; j < d; ++j) out[j] = 0.0f;

    std::vector<double> ctx(static_cast<std::size_t>(head_dim));
    for (int h = 0; h < num_heads; ++h) {
        const int off = h * head_dim;
        double mx = -1e300;
        for (int t = 0; t <= t_limit; ++t) {
            s[t] = dot(q + off, keys.row_ptr(t) + off, head_dim) * scale;
            if (s[t] > mx) mx = s[t];
        }
        double sum = 0.0;
        for (int t = 0; t <= t_limit; ++t) {
            s[t] = std::exp(s[t] - mx);
            sum += s[t];
        }
        const double inv = 1.0 / sum;
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int t = 0; t <= t_limit; ++t) {
            const double p = s[t] * inv;
            prob_mean[t] += p * inv_heads;
            const float* vrow = values.row_ptr(t) + off;
            for (int j = 0; j < head_dim; ++j) ctx[j] += p * vrow[j];
        }
        for (int j = 0; j < head_dim; ++j)
            out[off + j] = static_cast<float>(ctx[j]);
    }
}

inline void check_tokens(const TokenSeq& tokens, int vocab) {
    for (int t : tokens)
        if (t < 0 || t >= vocab)
            throw InputError("token " + std::to_string(t) + " out of vocab range");
}

}  // namespace detail

// Steps a selective prefill one layer at a time so that plan construction can
// consume the attention summary of layer l before deciding layer l+1. The
// active set may only shrink between layers; query tokens are always active.
class PrefillCursor {
public:
    PrefillCursor(const Model& model, const Layout& layout,
                  const CachedKV* cached, const TokenSeq& query)
        : model_(model), layout_(layout), cached_(cached) {
        if (layout.segments.empty()) throw InputError("layout is empty");
        for (const auto& seg : layout.segments) {
            if (seg.tokens.empty()) throw InputError("empty segment in layout");
            detail::check_tokens(seg.tokens, model.cfg.vocab_size);
        }
        detail::check_tokens(query, model.cfg.vocab_size);

        const int S = static_cast<int>(layout.segments.size());
        seg_start_.resize(S);
        seg_len_.resize(S);
        int pos = 0;
        for (int i = 0; i < S; ++i) {
            seg_start_[i] = pos;
            seg_len_[i] = static_cast<int>(layout.segments[i].tokens.size());
            pos += seg_len_[i];
        }
        query_start_ = pos;
        query_len_ = static_cast<int>(query.size());
        total_ = pos + query_len_;

        token_seg_.assign(total_, -1);
        for (int i = 0; i < S; ++i)
            for (int t = 0; t < seg_len_[i]; ++t) token_seg_[seg_start_[i] + t] = i;

        const int d = model.cfg.model_dim;
        x_ = Mat(total_, d);
        auto embed_row = [&](int row, int token) {
            const float* e = model.embedding.row_ptr(token);
            std::copy(e, e + d, x_.row_ptr(row));
        };
        for (int i = 0; i < S; ++i)
            for (int t = 0; t < seg_len_[i]; ++t)
                embed_row(seg_start_[i] + t, layout.segments[i].tokens[t]);
        for (int t = 0; t < query_len_; ++t)
            embed_row(query_start_ + t, query[t]);

        active_prev_.assign(S, 1);
        dropped_.assign(S, 0);
        result_.kv.reserve(model.cfg.num_layers);
        result_.attn.reserve(model.cfg.num_layers);
    }

    int num_layers() const { return model_.cfg.num_layers; }
    int num_segments() const { return static_cast<int>(layout_.segments.size()); }
    int layer() const { return layer_; }

    // Process one layer; active[i] says segment position i is recomputed.
    const AttentionSummary& step(const std::vector<char>& active) {
        const int S = num_segments();
        const int d = model_.cfg.model_dim;
        if (layer_ >= model_.cfg.num_layers) throw PlanError("stepped past last layer");
        if (static_cast<int>(active.size()) != S) throw PlanError("active mask size mismatch");
        for (int i = 0; i < S; ++i)
            if (active[i] && !active_prev_[i])
                throw PlanError("plan is not monotone across layers");

        for (int i = 0; i < S; ++i) {
            if (!active[i] && !dropped_[i]) {
                dropped_[i] = 1;
                for (int t = seg_start_[i]; t < seg_start_[i] + seg_len_[i]; ++t)
                    std::fill(x_.row_ptr(t), x_.row_ptr(t) + d, 0.0f);
            }
        }

        const auto& lw = model_.layers[layer_];
        LayerKV kv{Mat(total_, d), Mat(total_, d)};
        Mat q(total_, d);

        auto row_computed = [&](int t) {
            const int sgi = token_seg_[t];
            return sgi < 0 || active[sgi] != 0;
        };

        for (int t = 0; t < total_; ++t) {
            if (row_computed(t)) {
                vec_mat(x_.row_ptr(t), d, lw.wk, kv.keys.row_ptr(t));
                vec_mat(x_.row_ptr(t), d, lw.wv, kv.values.row_ptr(t));
                vec_mat(x_.row_ptr(t), d, lw.wq, q.row_ptr(t));
            } else {
                const int sgi = token_seg_[t];
                const LayerKV& c = cached_layer(layout_.segments[sgi].id);
                const int local = t - seg_start_[sgi];
                std::copy(c.keys.row_ptr(local), c.keys.row_ptr(local) + d,
                          kv.keys.row_ptr(t));
                std::copy(c.values.row_ptr(local), c.values.row_ptr(local) + d,
                          kv.values.row_ptr(t));
            }
        }

        // Attention + residual, then summary aggregation per computed row.
        std::vector<double> prob_mean(static_cast<std::size_t>(total_));
        std::vector<double> qts_raw(static_cast<std::size_t>(S), 0.0);
        std::vector<std::vector<double>> sts_raw(
            static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(S), 0.0));
        std::vector<float> ctx(static_cast<std::size_t>(d));
        std::vector<float> proj(static_cast<std::size_t>(d));

        for (int t = 0; t < total_; ++t) {
            if (!row_computed(t)) continue;
            std::fill(prob_mean.begin(), prob_mean.begin() + t + 1, 0.0);
            detail::attention_row(q.row_ptr(t), kv.keys, kv.values, t,
                                  model_.cfg.num_heads, model_.cfg.head_dim(),
                                  ctx.data(), prob_mean.data(), scores_);
            const int src = token_seg_[t];
            for (int tp = 0; tp <= t; ++tp) {
                const int dst = token_seg_[tp];
                if (dst < 0) continue;  // mass onto query tokens is not summarized
                if (src < 0)
                    qts_raw[dst] += prob_mean[tp];
                else if (dst != src)
                    sts_raw[src][dst] += prob_mean[tp];
            }
            vec_mat(ctx.data(), d, lw.wo, proj.data());
            float* xr = x_.row_ptr(t);
            for (int j = 0; j < d; ++j) xr[j] += proj[j];
        }

        // MLP for computed rows.
        std::vector<float> hidden(static_cast<std::size_t>(model_.cfg.mlp_dim));
        for (int t = 0; t < total_; ++t) {
            if (!row_computed(t)) continue;
            vec_mat(x_.row_ptr(t), d, lw.mlp_in, hidden.data());
            for (auto& h : hidden)
                if (h < 0.0f) h = 0.0f;
            vec_mat(hidden.data(), model_.cfg.mlp_dim, lw.mlp_out, proj.data());
            float* xr = x_.row_ptr(t);
            for (int j = 0; j < d; ++j) xr[j] += proj[j];
        }

        AttentionSummary summary;
        summary.layer = layer_;
        summary.query_to_segment.assign(S, 0.0);
        summary.segment_to_segment.assign(
            static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(S), 0.0));
        for (int j = 0; j < S; ++j)
            if (query_len_ > 0) summary.query_to_segment[j] = qts_raw[j] / query_len_;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < i; ++j)
                summary.segment_to_segment[i][j] = sts_raw[i][j] / seg_len_[i];

        result_.kv.push_back(std::move(kv));
        result_.attn.push_back(std::move(summary));
        active_prev_ = active;
        ++layer_;
        return result_.attn.back();
    }

    PrefillResult finish() {
        if (layer_ != model_.cfg.num_layers)
            throw PlanError("cursor finished before the last layer");
        result_.final_hidden = x_;
        // Rows of segments dropped at any layer stay discarded.
        const int d = model_.cfg.model_dim;
        for (int i = 0; i < num_segments(); ++i) {
            if (!dropped_[i]) continue;
            for (int t = seg_start_[i]; t < seg_start_[i] + seg_len_[i]; ++t)
                std::fill(result_.final_hidden.row_ptr(t),
                          result_.final_hidden.row_ptr(t) + d, 0.0f);
        }
        return std::move(result_);
    }

private:
    const LayerKV& cached_layer(SegmentId id) const {
        if (cached_ == nullptr)
            throw CacheMissError("no cached KV supplied for segment " + std::to_string(id));
        auto it = cached_->find(id);
        if (it == cached_->end())
            throw CacheMissError("missing cached KV for segment " + std::to_string(id));
        if (layer_ >= static_cast<int>(it->second.size()))
            throw CacheMissError("cached KV for segment " + std::to_string(id) +
                                 " has no layer " + std::to_string(layer_));
        return it->second[layer_];
    }

    const Model& model_;
    const Layout& layout_;
    const CachedKV* cached_;
    Mat x_;
    std::vector<int> seg_start_, seg_len_;
    int query_start_ = 0, query_len_ = 0, total_ = 0, layer_ = 0;
    std::vector<int> token_seg_;
    std::vector<char> active_prev_, dropped_;
    std::vector<double> scores_;
    PrefillResult result_;
};

// Dense causal pass over the whole concatenation. Independent of the cursor
// machinery above on purpose: this is the oracle side of every comparison.
inline PrefillResult full_prefill(const Model& model, const Layout& layout,
                                  const TokenSeq& query) {
    if (layout.segments.empty()) throw InputError("layout is empty");
    for (const auto& seg : layout.segments) {
        if (seg.tokens.empty()) throw InputError("empty segment in layout");
        detail::check_tokens(seg.tokens, model.cfg.vocab_size);
    }
    detail::check_tokens(query, model.cfg.vocab_size);

    const int S = static_cast<int>(layout.segments.size());
    const int d = model.cfg.model_dim;
    std::vector<int> seg_start(S), seg_len(S);
    int pos = 0;
    for (int i = 0; i < S; ++i) {
        seg_start[i] = pos;
        seg_len[i] = static_cast<int>(layout.segments[i].tokens.size());
        pos += seg_len[i];
    }
    const int query_start = pos;
    const int query_len = static_cast<int>(query.size());
    const int total = pos + query_len;
    if (total < 1) throw InputError("no tokens to prefill");

    std::vector<int> token_seg(static_cast<std::size_t>(total), -1);
    for (int i = 0; i < S; ++i)
        for (int t = 0; t < seg_len[i]; ++t) token_seg[seg_start[i] + t] = i;

    Mat x(total, d);
    auto embed_row = [&](int row, int token) {
        const float* e = model.embedding.row_ptr(token);
        std::copy(e, e + d, x.row_ptr(row));
    };
    for (int i = 0; i < S; ++i)
        for (int t = 0; t < seg_len[i]; ++t)
            embed_row(seg_start[i] + t, layout.segments[i].tokens[t]);
    for (int t = 0; t < query_len; ++t) embed_row(query_start + t, query[t]);

    PrefillResult res;
    res.kv.reserve(model.cfg.num_layers);
    res.attn.reserve(model.cfg.num_layers);
    std::vector<double> scores;
    std::vector<float> ctx(static_cast<std::size_t>(d)), proj(static_cast<std::size_t>(d));
    std::vector<float> mlp_hidden(static_cast<std::size_t>(model.cfg.mlp_dim));
    std::vector<double> prob_mean(static_cast<std::size_t>(total));

    for (int l = 0; l < model.cfg.num_layers; ++l) {
        const auto& lw = model.layers[l];
        LayerKV kv{Mat(total, d), Mat(total, d)};
        Mat q(total, d);
        for (int t = 0; t < total; ++t) {
            vec_mat(x.row_ptr(t), d, lw.wk, kv.keys.row_ptr(t));
            vec_mat(x.row_ptr(t), d, lw.wv, kv.values.row_ptr(t));
            vec_mat(x.row_ptr(t), d, lw.wq, q.row_ptr(t));
        }

        std::vector<double> qts_raw(static_cast<std::size_t>(S), 0.0);
        std::vector<std::vector<double>> sts_raw(
            static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(S), 0.0));

        for (int t = 0; t < total; ++t) {
            std::fill(prob_mean.begin(), prob_mean.begin() + t + 1, 0.0);
            detail::attention_row(q.row_ptr(t), kv.keys, kv.values, t,
                                  model.cfg.num_heads, model.cfg.head_dim(),
                                  ctx.data(), prob_mean.data(), scores);
            const int src = token_seg[t];
            for (int tp = 0; tp <= t; ++tp) {
                const int dst = token_seg[tp];
                if (dst < 0) continue;
                if (src < 0)
                    qts_raw[dst] += prob_mean[tp];
                else if (dst != src)
                    sts_raw[src][dst] += prob_mean[tp];
            }
            vec_mat(ctx.data(), d, lw.wo, proj.data());
            float* xr = x.row_ptr(t);
            for (int j = 0; j < d; ++j) xr[j] += proj[j];
        }

        for (int t = 0; t < total; ++t) {
            vec_mat(x.row_ptr(t), d, lw.mlp_in, mlp_hidden.data());
            for (auto& h : mlp_hidden)
                if (h < 0.0f) h = 0.0f;
            vec_mat(mlp_hidden.data(), model.cfg.mlp_dim, lw.mlp_out, proj.data());
            float* xr = x.row_ptr(t);
            for (int j = 0; j < d; ++j) xr[j] += proj[j];
        }

        AttentionSummary summary;
        summary.layer = l;
        summary.query_to_segment.assign(S, 0.0);
        summary.segment_to_segment.assign(
            static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(S), 0.0));
        for (int j = 0; j < S; ++j)
            if (query_len > 0) summary.query_to_segment[j] = qts_raw[j] / query_len;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < i; ++j)
                summary.segment_to_segment[i][j] = sts_raw[i][j] / seg_len[i];

        res.kv.push_back(std::move(kv));
        res.attn.push_back(std::move(summary));
    }
    res.final_hidden = std::move(x);
    return res;
}

// KV of a segment processed as its own context (local positions, local mask).
inline std::vector<LayerKV> segment_prefill(const Model& model, const TokenSeq& segment) {
    if (segment.empty()) throw InputError("segment is empty");
    Layout layout = Layout::of({LayoutSegment{0, segment}});
    return full_prefill(model, layout, {}).kv;
}

inline PrefillResult selective_prefill(const Model& model, const Layout& layout,
                                       const CachedKV& cached, const RecomputePlan& plan,
                                       const TokenSeq& query) {
    if (static_cast<int>(plan.layers.size()) != model.cfg.num_layers)
        throw PlanError("plan layer count does not match model");
    plan.validate_monotone();
    const int S = static_cast<int>(layout.segments.size());
    for (const auto& layer_set : plan.layers)
        for (SegmentId s : layer_set)
            if (layout.position_of(s) < 0)
                throw PlanError("plan references unknown segment " + std::to_string(s));

    PrefillCursor cursor(model, layout, &cached, query);
    for (int l = 0; l < model.cfg.num_layers; ++l) {
        std::vector<char> active(static_cast<std::size_t>(S), 0);
        for (SegmentId s : plan.layers[l]) active[layout.position_of(s)] = 1;
        cursor.step(active);
    }
    return cursor.finish();
}

// L2 of the last hidden row plus symmetric KL of the softmaxed output
// distribution for that row.
inline Divergence divergence(const Model& model, const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw InputError("divergence on mismatched shapes");
    if (a.rows < 1) throw InputError("divergence on empty tensors");
    const int last = a.rows - 1;
    Divergence out;
    double acc = 0.0;
    for (int j = 0; j < a.cols; ++j) {
        const double delta = static_cast<double>(a.at(last, j)) - b.at(last, j);
        acc += delta * delta;
    }
    out.l2 = std::sqrt(acc);

    auto softmax = [](std::vector<double> v) {
        double mx = v[0];
        for (double x : v) mx = std::max(mx, x);
        double sum = 0.0;
        for (auto& x : v) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (auto& x : v) x /= sum;
        return v;
    };
    const std::vector<double> p = softmax(model.logits(a.row_ptr(last)));
    const std::vector<double> q = softmax(model.logits(b.row_ptr(last)));
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        kl += (p[i] - q[i]) * (std::log(p[i]) - std::log(q[i]));
    out.sym_kl = kl;
    return out;
}

}  // namespace keep
