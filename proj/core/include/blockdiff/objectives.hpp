#pragma once

#include <optional>
#include <vector>

#include "blockdiff/datagen.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/noising.hpp"
#include "blockdiff/rng.hpp"

namespace blockdiff {

// One training example. prompt_tokens must be non-empty (BOS at minimum);
// answer_tokens are padded to a block multiple before batching.
struct Example {
    std::optional<GridImage> image;
    std::vector<int> prompt_tokens;
    std::vector<int> answer_tokens;
};

using Batch = std::vector<Example>;

enum class BatchReduction {
    Mean,  // decouples the learning rate from batch size and mask rate
    Sum,
};

struct ObjectiveConfig {
    NoiseConfig noise;
    BatchReduction reduction = BatchReduction::Mean;
    int block_size = 0;  // 0 = take the model's configured block size
};

// [vision embeddings ; text embeddings] for the example's prompt.
Tensor prompt_embeddings(const Parameters& params, const Example& ex);
int prompt_span(const Example& ex);
BlockPlan plan_for(const Example& ex, int block_size);

// Next-token objective under causal attention; mean CE over answer positions,
// prompt positions excluded.
Tensor ar_loss_example(const Parameters& params, const Example& ex);
Tensor ar_loss(const Parameters& params, const Batch& batch,
               const ObjectiveConfig& cfg = {});

// Whole-answer denoising with one shared noise level per sequence and weight
// 1/t at masked positions. The corruption is taken as given so callers can
// force or replay draws.
Tensor full_diffusion_loss_example(const Parameters& params, const Example& ex,
                                   const NoisySample& noisy, const ObjectiveConfig& cfg);
Tensor full_diffusion_loss(const Parameters& params, const Batch& batch, Rng& rng,
                           const ObjectiveConfig& cfg = {});

// Block objective: one forward over [prompt | clean | noisy] under the hybrid
// training mask; CE read from noisy-copy logits at masked positions with the
// per-block schedule weight. Clean-copy positions contribute no loss.
Tensor block_diffusion_loss_example(const Parameters& params, const Example& ex,
                                    const NoisySample& noisy, const ObjectiveConfig& cfg);
Tensor block_diffusion_loss(const Parameters& params, const Batch& batch, Rng& rng,
                            const ObjectiveConfig& cfg = {});

// shared t ~ Uniform(t_min, 1] for full-diffusion corruption
float draw_shared_t(Rng& rng, const NoiseConfig& cfg);

}  // namespace blockdiff
