#include "blockdiff/objectives.hpp"

#include <stdexcept>

namespace blockdiff {

Tensor prompt_embeddings(const Parameters& params, const Example& ex) {
    if (ex.prompt_tokens.empty()) {
        throw std::invalid_argument("prompt_embeddings: prompt must be non-empty");
    }
    Tensor text = embed_tokens(params, ex.prompt_tokens);
    if (!ex.image) {
        return text;
    }
    Tensor vis = connect(params, encode_image(params, *ex.image));
    return concat_rows({vis, text});
}

int prompt_span(const Example& ex) {
    const int cells = ex.image ? ex.image->size * ex.image->size : 0;
    return cells + static_cast<int>(ex.prompt_tokens.size());
}

BlockPlan plan_for(const Example& ex, int block_size) {
    BlockPlan plan;
    plan.prompt_len = prompt_span(ex);
    plan.answer_len = static_cast<int>(ex.answer_tokens.size());
    plan.block_size = block_size;
    plan.validate();
    return plan;
}

static int effective_block_size(const Parameters& params, const ObjectiveConfig& cfg) {
    return cfg.block_size > 0 ? cfg.block_size : params.config.block_size;
}

static std::vector<int> iota_positions(int start, int count) {
    std::vector<int> pos(count);
    for (int i = 0; i < count; ++i) {
        pos[i] = start + i;
    }
    return pos;
}

Tensor ar_loss_example(const Parameters& params, const Example& ex) {
    const int L = static_cast<int>(ex.answer_tokens.size());
    if (L < 1) {
        throw std::invalid_argument("ar_loss: empty answer");
    }
    Tensor prompt = prompt_embeddings(params, ex);
    const int P = prompt.rows();
    Tensor x = concat_rows({prompt, embed_tokens(params, ex.answer_tokens)});
    const int n = P + L;
    ForwardOutput out = forward(params, x, iota_positions(0, n), causal_mask(n));

    // row P-1+j predicts answer token j
    std::vector<int> targets(n, 0);
    std::vector<float> weights(n, 0.0f);
    std::vector<uint8_t> active(n, 0);
    for (int j = 0; j < L; ++j) {
        targets[P - 1 + j] = ex.answer_tokens[j];
        weights[P - 1 + j] = 1.0f;
        active[P - 1 + j] = 1;
    }
    return weighted_masked_ce(out.logits, targets, weights, active);
}

Tensor full_diffusion_loss_example(const Parameters& params, const Example& ex,
                                   const NoisySample& noisy, const ObjectiveConfig& cfg) {
    (void)cfg;
    Tensor prompt = prompt_embeddings(params, ex);
    const int P = prompt.rows();
    const int L = static_cast<int>(noisy.xt.size());
    Tensor x = concat_rows({prompt, embed_tokens(params, noisy.xt)});
    ForwardOutput out = forward(params, x, iota_positions(0, P + L), full_diffusion_mask(P, L));

    std::vector<int> targets(P + L, 0);
    std::vector<float> weights(P + L, 0.0f);
    std::vector<uint8_t> active(P + L, 0);
    for (int i = 0; i < L; ++i) {
        if (noisy.masked[i]) {
            targets[P + i] = noisy.x0[i];
            weights[P + i] = noisy.weight[i];
            active[P + i] = 1;
        }
    }
    return weighted_masked_ce(out.logits, targets, weights, active);
}

Tensor block_diffusion_loss_example(const Parameters& params, const Example& ex,
                                    const NoisySample& noisy, const ObjectiveConfig& cfg) {
    const int D = static_cast<int>(noisy.x0.size()) / static_cast<int>(noisy.t.size());
    (void)cfg;
    Tensor prompt = prompt_embeddings(params, ex);
    const int P = prompt.rows();
    const int L = static_cast<int>(noisy.x0.size());
    Tensor x = concat_rows({prompt, embed_tokens(params, noisy.x0), embed_tokens(params, noisy.xt)});

    // the noisy copy reuses the clean copy's position indices
    std::vector<int> positions = iota_positions(0, P + L);
    positions.reserve(P + 2 * L);
    for (int i = 0; i < L; ++i) {
        positions.push_back(P + i);
    }
    ForwardOutput out = forward(params, x, positions, hybrid_training_mask(P, L, D));

    const int n = P + 2 * L;
    std::vector<int> targets(n, 0);
    std::vector<float> weights(n, 0.0f);
    std::vector<uint8_t> active(n, 0);
    for (int i = 0; i < L; ++i) {
        if (noisy.masked[i]) {
            targets[P + L + i] = noisy.x0[i];
            weights[P + L + i] = noisy.weight[i];
            active[P + L + i] = 1;
        }
    }
    return weighted_masked_ce(out.logits, targets, weights, active);
}

static Tensor combine_batch(std::vector<Tensor> losses, const ObjectiveConfig& cfg) {
    if (losses.empty()) {
        throw std::invalid_argument("objective: empty batch");
    }
    return combine_scalars(losses, cfg.reduction == BatchReduction::Mean);
}

Tensor ar_loss(const Parameters& params, const Batch& batch, const ObjectiveConfig& cfg) {
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const auto& ex : batch) {
        losses.push_back(ar_loss_example(params, ex));
    }
    return combine_batch(std::move(losses), cfg);
}

float draw_shared_t(Rng& rng, const NoiseConfig& cfg) {
    return static_cast<float>(1.0 - (1.0 - cfg.t_min) * rng.uniform());
}

Tensor full_diffusion_loss(const Parameters& params, const Batch& batch, Rng& rng,
                           const ObjectiveConfig& cfg) {
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const auto& ex : batch) {
        const int L = static_cast<int>(ex.answer_tokens.size());
        BlockPlan plan;
        plan.prompt_len = prompt_span(ex);
        plan.answer_len = L;
        plan.block_size = L;  // one block spanning the whole answer
        const float t = draw_shared_t(rng, cfg.noise);
        NoisySample noisy =
            apply_block_noise(ex.answer_tokens, plan, {t}, rng, params.config.mask_id, cfg.noise);
        losses.push_back(full_diffusion_loss_example(params, ex, noisy, cfg));
    }
    return combine_batch(std::move(losses), cfg);
}

Tensor block_diffusion_loss(const Parameters& params, const Batch& batch, Rng& rng,
                            const ObjectiveConfig& cfg) {
    const int D = effective_block_size(params, cfg);
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const auto& ex : batch) {
        BlockPlan plan = plan_for(ex, D);
        NoisySample noisy = sample_block_noise(ex.answer_tokens, plan, rng, params.config.mask_id, cfg.noise);
        losses.push_back(block_diffusion_loss_example(params, ex, noisy, cfg));
    }
    return combine_batch(std::move(losses), cfg);
}

}  // namespace blockdiff
