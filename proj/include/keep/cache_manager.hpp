#pragma once

// Two-tier KV block store. The fast tier models on-device memory with a
// byte capacity and LRU demotion to the unbounded slow tier; loading from
// the slow tier costs size/bandwidth time units and promotes the block.
// Blocks are keyed by (owner, layer) and carry the owner version so stale
// payloads are never served after an invalidation.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "keep/errors.hpp"
#include "keep/memory_store.hpp"
#include "keep/prefill.hpp"

namespace keep {

enum class Tier { Fast, Slow };

struct TierConfig {
    std::uint64_t fast_capacity_bytes = 0;
    std::uint64_t fast_bandwidth_bytes_per_tu = 0;
    std::uint64_t slow_to_fast_bandwidth_bytes_per_tu = 0;

    void validate() const {
        if (fast_capacity_bytes == 0 || fast_bandwidth_bytes_per_tu == 0 ||
            slow_to_fast_bandwidth_bytes_per_tu == 0)
            throw ConfigError("tier parameters must be positive");
        if (slow_to_fast_bandwidth_bytes_per_tu > fast_bandwidth_bytes_per_tu)
            throw ConfigError("slow bandwidth must not exceed fast bandwidth");
    }
};

struct ReuseStats {
    double tokens_reused = 0.0;
    double tokens_recomputed = 0.0;
    std::uint64_t tokens_invalidated = 0;
    std::uint64_t bytes_loaded_slow = 0;
    std::uint64_t cache_misses = 0;
};

struct KVBlock {
    OwnerRef owner;
    std::uint64_t version = 0;
    int layer = 0;
    std::uint64_t tokens = 0;
    std::uint64_t size_bytes = 0;
    Tier tier = Tier::Slow;
    std::uint64_t last_touch = 0;
    LayerKV payload;
};

inline std::uint64_t kv_block_bytes(const LayerKV& payload) {
    // keys + values, 4 bytes per float
    return static_cast<std::uint64_t>(payload.keys.rows) * payload.keys.cols * 2 * 4;
}

class CacheManager {
public:
    explicit CacheManager(const TierConfig& config) : config_(config) {
        config_.validate();
    }

    const TierConfig& config() const { return config_; }

    Tier put(const OwnerRef& owner, std::uint64_t version, int layer,
             std::uint64_t tokens, LayerKV payload) {
        KVBlock block;
        block.owner = owner;
        block.version = version;
        block.layer = layer;
        block.tokens = tokens;
        block.size_bytes = kv_block_bytes(payload);
        block.payload = std::move(payload);
        block.last_touch = ++touch_;

        auto& cur = current_version_[owner];
        cur = std::max(cur, version);

        const Key key{owner, layer};
        auto it = blocks_.find(key);
        if (it != blocks_.end()) {
            if (it->second.tier == Tier::Fast) fast_used_ -= it->second.size_bytes;
            blocks_.erase(it);
        }
        if (block.size_bytes <= config_.fast_capacity_bytes) {
            make_room(block.size_bytes);
            block.tier = Tier::Fast;
            fast_used_ += block.size_bytes;
        } else {
            block.tier = Tier::Slow;
        }
        const Tier placed = block.tier;
        blocks_.emplace(key, std::move(block));
        return placed;
    }

    // Returns the payload and its load cost in time units. Fast hits are
    // free; slow hits pay size/bandwidth and are promoted under LRU.
    std::pair<const LayerKV*, double> load(const OwnerRef& owner, int layer) {
        auto it = blocks_.find(Key{owner, layer});
        if (it == blocks_.end()) {
            ++stats_.cache_misses;
            throw CacheMissError("no block for " + owner.str() + " layer " +
                                 std::to_string(layer));
        }
        KVBlock& block = it->second;
        const auto cur = current_version_.find(owner);
        if (cur == current_version_.end() || block.version != cur->second) {
            ++stats_.cache_misses;
            throw CacheMissError("stale block for " + owner.str() + " layer " +
                                 std::to_string(layer));
        }
        double cost = 0.0;
        if (block.tier == Tier::Slow) {
            cost = static_cast<double>(block.size_bytes) /
                   static_cast<double>(config_.slow_to_fast_bandwidth_bytes_per_tu);
            stats_.bytes_loaded_slow += block.size_bytes;
            if (block.size_bytes <= config_.fast_capacity_bytes) {
                make_room(block.size_bytes);
                block.tier = Tier::Fast;
                fast_used_ += block.size_bytes;
            }
        }
        block.last_touch = ++touch_;
        return {&block.payload, cost};
    }

    // Pure lookup used for workload derivation; does not touch LRU order.
    std::optional<Tier> peek_tier(const OwnerRef& owner, int layer) const {
        auto it = blocks_.find(Key{owner, layer});
        if (it == blocks_.end()) return std::nullopt;
        const auto cur = current_version_.find(owner);
        if (cur == current_version_.end() || it->second.version != cur->second)
            return std::nullopt;
        return it->second.tier;
    }

    const LayerKV* peek_payload(const OwnerRef& owner, int layer) const {
        auto it = blocks_.find(Key{owner, layer});
        if (it == blocks_.end()) return nullptr;
        const auto cur = current_version_.find(owner);
        if (cur == current_version_.end() || it->second.version != cur->second)
            return nullptr;
        return &it->second.payload;
    }

    bool has_current(const OwnerRef& owner, std::uint64_t version, int num_layers) const {
        const auto cur = current_version_.find(owner);
        if (cur != current_version_.end() && cur->second > version) return false;
        for (int l = 0; l < num_layers; ++l) {
            auto it = blocks_.find(Key{owner, l});
            if (it == blocks_.end() || it->second.version != version) return false;
        }
        return true;
    }

    // Drops every layer block of each listed owner; counts an owner's tokens
    // once if anything was dropped. Idempotent.
    std::uint64_t invalidate(const InvalidationRecord& record) {
        std::uint64_t dropped_tokens = 0;
        for (const auto& entry : record.entries) {
            bool dropped = false;
            for (auto it = blocks_.begin(); it != blocks_.end();) {
                if (it->first.owner == entry.owner) {
                    if (it->second.tier == Tier::Fast) fast_used_ -= it->second.size_bytes;
                    it = blocks_.erase(it);
                    dropped = true;
                } else {
                    ++it;
                }
            }
            if (dropped) dropped_tokens += entry.tokens;
        }
        for (const auto& [seg, version] : record.new_segment_versions) {
            auto& cur = current_version_[OwnerRef::segment(seg)];
            cur = std::max(cur, version);
        }
        stats_.tokens_invalidated += dropped_tokens;
        return dropped_tokens;
    }

    void add_prefill_accounting(double reused_tokens, double recomputed_tokens) {
        stats_.tokens_reused += reused_tokens;
        stats_.tokens_recomputed += recomputed_tokens;
    }

    ReuseStats snapshot_stats() const { return stats_; }

    std::uint64_t fast_used_bytes() const { return fast_used_; }

    std::uint64_t block_count() const { return blocks_.size(); }

private:
    struct Key {
        OwnerRef owner;
        int layer;
        bool operator<(const Key& o) const {
            if (!(owner == o.owner)) return owner < o.owner;
            return layer < o.layer;
        }
    };

    void make_room(std::uint64_t need) {
        while (fast_used_ + need > config_.fast_capacity_bytes) {
            KVBlock* lru = nullptr;
            for (auto& [key, block] : blocks_) {
                if (block.tier != Tier::Fast) continue;
                if (lru == nullptr || block.last_touch < lru->last_touch) lru = &block;
            }
            if (lru == nullptr) break;
            lru->tier = Tier::Slow;
            fast_used_ -= lru->size_bytes;
        }
    }

    TierConfig config_;
    std::map<Key, KVBlock> blocks_;
    std::map<OwnerRef, std::uint64_t> current_version_;
    ReuseStats stats_;
    std::uint64_t fast_used_ = 0;
    std::uint64_t touch_ = 0;
};

}  // namespace keep
