#pragma once

// A small deterministic causal transformer used as the numeric ground truth
// for every caching strategy. There is no positional encoding: token order
// only enters through the causal mask, so the key/value state of a token at
// the first layer depends on its embedding alone. That makes "missing
// cross-attention" the single source of error when per-segment KV is reused,
// which is exactly the effect the engine measures.

#include <cmath>
#include <string>
#include <vector>

#include "keep/errors.hpp"
#include "keep/prng.hpp"
#include "keep/tensor.hpp"

namespace keep {

struct ModelConfig {
    int num_layers = 0;
    int num_heads = 0;
    int model_dim = 0;
    int mlp_dim = 0;
    int vocab_size = 0;
    std::uint64_t seed = 0;

    int head_dim() const { return model_dim / num_heads; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("num_layers must be positive");
        if (num_heads < 1) throw ConfigError("num_heads must be positive");
        if (model_dim < 1) throw ConfigError("model_dim must be positive");
        if (mlp_dim < 1) throw ConfigError("mlp_dim must be positive");
        if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
        if (model_dim % num_heads != 0)
            throw ConfigError("model_dim not divisible by num_heads");
    }
};

struct LayerWeights {
    Mat wq, wk, wv, wo;   // [d x d]
    Mat mlp_in;           // [d x mlp]
    Mat mlp_out;          // [mlp x d]
};

class Model {
public:
    ModelConfig cfg;
    Mat embedding;  // [V x d]
    Mat unembed;    // [d x V]
    std::vector<LayerWeights> layers;

    static Model init(const ModelConfig& config) {
        config.validate();
        Model m;
        m.cfg = config;
        const double std = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
        m.embedding = init_tensor(config, "embed", config.vocab_size, config.model_dim, std);
        m.unembed = init_tensor(config, "unembed", config.model_dim, config.vocab_size, std);
        m.layers.resize(config.num_layers);
        for (int l = 0; l < config.num_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& lw = m.layers[l];
            lw.wq = init_tensor(config, p + "wq", config.model_dim, config.model_dim, std);
            lw.wk = init_tensor(config, p + "wk", config.model_dim, config.model_dim, std);
            lw.wv = init_tensor(config, p + "wv", config.model_dim, config.model_dim, std);
            lw.wo = init_tensor(config, p + "wo", config.model_dim, config.model_dim, std);
            lw.mlp_in = init_tensor(config, p + "mlp_in", config.model_dim, config.mlp_dim, std);
            lw.mlp_out = init_tensor(config, p + "mlp_out", config.mlp_dim, config.model_dim, std);
        }
        return m;
    }

    // Output distribution for one hidden row; double precision for stable KL.
    std::vector<double> logits(const float* hidden) const {
        std::vector<double> out(static_cast<std::size_t>(cfg.vocab_size));
        for (int j = 0; j < cfg.vocab_size; ++j) {
            double acc = 0.0;
            for (int i = 0; i < cfg.model_dim; ++i)
                acc += static_cast<double>(hidden[i]) * unembed.at(i, j);
            out[j] = acc;
        }
        return out;
    }

private:
    static Mat init_tensor(const ModelConfig& cfg, const std::string& name,
                           int rows, int cols, double std) {
        Mat t(rows, cols);
        Rng rng = Rng::stream(cfg.seed, name);
        for (auto& x : t.a) x = static_cast<float>(rng.normal(std));
        return t;
    }
};

}  // namespace keep
