#pragma once

#include <cstdint>
#include <vector>

#include "blockdiff/rng.hpp"

namespace blockdiff {

// Block layout of one training answer. answer_len is the post-padding length.
struct BlockPlan {
    int prompt_len = 0;
    int answer_len = 0;
    int block_size = 1;

    int n_blocks() const { return answer_len / block_size; }
    void validate() const;
};

enum class NoiseSchedule {
    Linear,  // alpha_t = 1 - t, so the loss scale |alpha_t'| / (1 - alpha_t) = 1/t
};

struct NoiseConfig {
    float t_min = 1e-3f;  // noise levels drawn from (t_min, 1]; also caps the weight at 1/t_min
    NoiseSchedule schedule = NoiseSchedule::Linear;
};

// A training answer after block-wise corruption.
struct NoisySample {
    std::vector<int> x0;          // clean tokens [L]
    std::vector<int> xt;          // corrupted tokens, MASK at masked positions [L]
    std::vector<float> t;         // per-block noise level, one entry per block
    std::vector<uint8_t> masked;  // per-position flag [L]
    std::vector<float> weight;    // per-position loss weight, > 0 only at masked [L]
};

// Appends EOS until the length is divisible by block_size; an already
// divisible answer is returned unchanged. An empty answer yields a single
// all-EOS block.
std::vector<int> pad_to_block_multiple(const std::vector<int>& answer, int block_size, int eos_id);

// |alpha_t'| / (1 - alpha_t) under the configured schedule, capped at
// 1/t_min. Linear schedule: min(1/t, 1/t_min). Requires t in (0, 1].
float loss_weight(float t, const NoiseConfig& cfg);

// Corrupts x0 with a caller-supplied noise level per block: every position in
// block i is masked independently with probability t_per_block[i]. x0 must
// not already contain mask_id.
NoisySample apply_block_noise(const std::vector<int>& x0, const BlockPlan& plan,
                              const std::vector<float>& t_per_block, Rng& rng, int mask_id,
                              const NoiseConfig& cfg);

// Draws t_i ~ Uniform(t_min, 1] independently per block, then corrupts.
NoisySample sample_block_noise(const std::vector<int>& x0, const BlockPlan& plan, Rng& rng,
                               int mask_id, const NoiseConfig& cfg);

}  // namespace blockdiff
