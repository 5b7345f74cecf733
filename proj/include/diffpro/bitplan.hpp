#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "diffpro/core.hpp"

namespace diffpro {

// Weight precision for one layer. 3/4/6/8 are integer codes; 16/32 are
// floating passthrough (no quantization error, accounted at that width).
inline constexpr int kFp16Bits = 16;
inline constexpr int kFp32Bits = 32;

inline bool is_passthrough_bits(int b) { return b == kFp16Bits || b == kFp32Bits; }

struct LayerAssignment {
    int bits = 8;
    int group_size = 128;
    bool frozen = false;

    bool passthrough() const { return is_passthrough_bits(bits); }

    friend bool operator==(const LayerAssignment& a, const LayerAssignment& b) {
        return a.bits == b.bits && a.group_size == b.group_size && a.frozen == b.frozen;
    }
};

// Ordered per-layer assignment covering every quantizable layer exactly once.
struct BitPlan {
    std::map<std::string, LayerAssignment> layers;

    LayerAssignment& at(const std::string& id) {
        auto it = layers.find(id);
        if (it == layers.end()) throw InvalidArgument("bit plan does not cover layer " + id);
        return it->second;
    }
    const LayerAssignment& at(const std::string& id) const {
        auto it = layers.find(id);
        if (it == layers.end()) throw InvalidArgument("bit plan does not cover layer " + id);
        return it->second;
    }

    static BitPlan uniform(const std::vector<std::string>& ids, int bits, int group_size) {
        BitPlan p;
        for (const auto& id : ids) p.layers[id] = LayerAssignment{bits, group_size, false};
        return p;
    }

    friend bool operator==(const BitPlan& a, const BitPlan& b) { return a.layers == b.layers; }
};

// Candidate value sets. The ordered bit set includes FP16 passthrough as the
// most precise step; FP32 is reserved for explicit baselines.
struct SearchSpace {
    std::vector<int> bit_set{3, 4, 6, 8, kFp16Bits};
    std::vector<int> group_set{32, 64, 128, 192, 288};

    int bit_index(int b) const {
        auto it = std::find(bit_set.begin(), bit_set.end(), b);
        if (it == bit_set.end()) throw InvalidArgument("bits not in search space: " + std::to_string(b));
        return static_cast<int>(it - bit_set.begin());
    }
    int group_index(int g) const {
        auto it = std::find(group_set.begin(), group_set.end(), g);
        if (it == group_set.end())
            throw InvalidArgument("group size not in search space: " + std::to_string(g));
        return static_cast<int>(it - group_set.begin());
    }
};

// 64-bit fingerprint over the canonical (layer, bits, group, frozen) listing.
// Schedule and DAQ terms are folded in by the candidate-level fingerprint.
inline uint64_t fingerprint(const BitPlan& plan, uint64_t h = 0xcbf29ce484222325ull) {
    for (const auto& [id, a] : plan.layers) {  // std::map iterates in key order
        h = fnv1a64(id, h);
        const int32_t fields[3] = {a.bits, a.group_size, a.frozen ? 1 : 0};
        h = fnv1a64(fields, sizeof(fields), h);
    }
    return h;
}

}  // namespace diffpro
