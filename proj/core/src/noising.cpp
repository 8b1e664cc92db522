#include "blockdiff/noising.hpp"

#include <algorithm>
#include <stdexcept>

namespace blockdiff {

void BlockPlan::validate() const {
    if (prompt_len < 0 || answer_len < 1 || block_size < 1) {
        throw std::invalid_argument("BlockPlan: non-positive sizes");
    }
    if (answer_len % block_size != 0) {
        throw std::invalid_argument("BlockPlan: answer_len must be divisible by block_size");
    }
}

std::vector<int> pad_to_block_multiple(const std::vector<int>& answer, int block_size, int eos_id) {
    if (block_size < 1) {
        throw std::invalid_argument("pad_to_block_multiple: block_size must be >= 1");
    }
    std::vector<int> out = answer;
    if (out.empty()) {
        out.assign(block_size, eos_id);
        return out;
    }
    const size_t rem = out.size() % static_cast<size_t>(block_size);
    if (rem != 0) {
        out.insert(out.end(), static_cast<size_t>(block_size) - rem, eos_id);
    }
    return out;
}

float loss_weight(float t, const NoiseConfig& cfg) {
    if (!(t > 0.0f) || t > 1.0f) {
        throw std::invalid_argument("loss_weight: t must lie in (0, 1]");
    }
    switch (cfg.schedule) {
        case NoiseSchedule::Linear:
            return std::min(1.0f / t, 1.0f / cfg.t_min);
    }
    throw std::logic_error("loss_weight: unknown schedule");
}

NoisySample apply_block_noise(const std::vector<int>& x0, const BlockPlan& plan,
                              const std::vector<float>& t_per_block, Rng& rng, int mask_id,
                              const NoiseConfig& cfg) {
    plan.validate();
    if (static_cast<int>(x0.size()) != plan.answer_len) {
        throw std::invalid_argument("apply_block_noise: x0 length does not match plan");
    }
    if (static_cast<int>(t_per_block.size()) != plan.n_blocks()) {
        throw std::invalid_argument("apply_block_noise: one t per block required");
    }
    for (int tok : x0) {
        if (tok == mask_id) {
            throw std::invalid_argument("apply_block_noise: clean answer already contains MASK");
        }
    }

    NoisySample s;
    s.x0 = x0;
    s.xt = x0;
    s.t = t_per_block;
    s.masked.assign(x0.size(), 0);
    s.weight.assign(x0.size(), 0.0f);

    const int D = plan.block_size;
    for (int b = 0; b < plan.n_blocks(); ++b) {
        const float t = t_per_block[b];
        const float w = loss_weight(t, cfg);
        for (int j = 0; j < D; ++j) {
            const int pos = b * D + j;
            if (rng.uniform() < static_cast<double>(t)) {
                s.xt[pos] = mask_id;
                s.masked[pos] = 1;
                s.weight[pos] = w;
            }
        }
    }
    return s;
}

NoisySample sample_block_noise(const std::vector<int>& x0, const BlockPlan& plan, Rng& rng,
                               int mask_id, const NoiseConfig& cfg) {
    plan.validate();
    if (!(cfg.t_min > 0.0f) || cfg.t_min >= 1.0f) {
        throw std::invalid_argument("sample_block_noise: t_min must lie in (0, 1)");
    }
    // t = 1 - (1 - t_min) * u maps u in [0,1) onto (t_min, 1]
    std::vector<float> t(plan.n_blocks());
    for (auto& ti : t) {
        ti = static_cast<float>(1.0 - (1.0 - cfg.t_min) * rng.uniform());
    }
    return apply_block_noise(x0, plan, t, rng, mask_id, cfg);
}

}  // namespace blockdiff
