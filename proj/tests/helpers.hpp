#pragma once

// Shared test utilities. The oracles here re-implement behavior from the
// textual rules, independent of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "blockdiff/decoder.hpp"
#include "blockdiff/masks.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/rng.hpp"

namespace testutil {

// ---- rule-based attention-mask oracle --------------------------------------
// Region classification first, then the three textual rules, written without
// reference to the mask-construction code.

enum class Region { Prompt, Clean, Noisy };

struct HybridLayout {
    int P, L, D;
    Region region(int idx) const {
        if (idx < P) {
            return Region::Prompt;
        }
        return idx < P + L ? Region::Clean : Region::Noisy;
    }
    int block_of(int idx) const {
        return region(idx) == Region::Clean ? (idx - P) / D : (idx - P - L) / D;
    }
};

inline bool oracle_block_causal_allow(int P, int L, int D, int q, int k) {
    // prompt rows: causal over the prompt only
    if (q < P) {
        return k <= q;
    }
    // answer rows: all prompt keys, answer keys in blocks <= own block
    if (k < P) {
        return true;
    }
    return (k - P) / D <= (q - P) / D;
}

inline bool oracle_hybrid_allow(int P, int L, int D, int q, int k) {
    const HybridLayout lay{P, L, D};
    const Region rq = lay.region(q);
    const Region rk = lay.region(k);
    if (rq == Region::Prompt || rq == Region::Clean) {
        // clean-sequence rows never see noisy keys and otherwise follow the
        // inference pattern over [prompt | clean]
        if (rk == Region::Noisy) {
            return false;
        }
        return oracle_block_causal_allow(P, L, D, q, k);
    }
    // noisy rows: whole prompt; clean blocks strictly earlier; own noisy block
    const int qb = lay.block_of(q);
    switch (rk) {
        case Region::Prompt:
            return true;
        case Region::Clean:
            return lay.block_of(k) < qb;
        case Region::Noisy:
            return lay.block_of(k) == qb;
    }
    return false;
}

// ---- misc -------------------------------------------------------------------

inline bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float mx = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) {
        mx = std::max(mx, std::abs(a[i] - b[i]));
    }
    return mx;
}

// small model whose head is randomized so logits vary (init leaves it zero)
inline blockdiff::Parameters tiny_model(blockdiff::ModelConfig cfg, uint64_t seed,
                                        bool randomize_head = true) {
    blockdiff::Parameters p = blockdiff::init_params(cfg, seed);
    if (randomize_head) {
        blockdiff::Rng rng(seed ^ 0xbeefu);
        for (auto& v : p.head_w.data_mut()) {
            v = static_cast<float>(rng.normal() * 0.2);
        }
    }
    return p;
}

// ---- reference decoder (no KV cache) ----------------------------------------
// Recomputes the full prefix on every forward with the inference-time block
// pattern; shares only forward() with the engine under test.

struct ReferenceStepLogits {
    std::vector<float> logits;  // [D x V] for the active block at one denoise step
};

struct ReferenceResult {
    std::vector<int> tokens;
    bool found_eos = false;
    std::vector<ReferenceStepLogits> step_logits;
};

inline ReferenceResult reference_generate(const blockdiff::Parameters& params,
                                          const blockdiff::GridImage* image,
                                          const std::vector<int>& prompt_tokens, int static_steps,
                                          int max_blocks) {
    using namespace blockdiff;
    NoGradGuard ng;
    const ModelConfig& cfg = params.config;
    const int D = cfg.block_size;
    const int V = cfg.vocab_size;

    Tensor prompt_embeds;
    {
        Tensor text = embed_tokens(params, prompt_tokens);
        prompt_embeds = image ? concat_rows({connect(params, encode_image(params, *image)), text}) : text;
    }
    const int P = prompt_embeds.rows();

    ReferenceResult res;
    std::vector<int> committed;  // fully denoised tokens so far
    for (int b = 0; b < max_blocks; ++b) {
        const int L = static_cast<int>(committed.size()) + D;
        if (P + L > cfg.max_positions) {
            break;
        }
        std::vector<int> block(D, cfg.mask_id);
        std::vector<uint8_t> decided(D, 0);
        int n_decided = 0;
        int step = 0;
        while (n_decided < D) {
            // monolithic forward over [prompt | committed | current block]
            std::vector<int> tail = committed;
            tail.insert(tail.end(), block.begin(), block.end());
            Tensor x = concat_rows({prompt_embeds, embed_tokens(params, tail)});
            std::vector<int> positions(P + L);
            for (int i = 0; i < P + L; ++i) {
                positions[i] = i;
            }
            ForwardOutput out = forward(params, x, positions, block_causal_mask(P, L, D));

            ReferenceStepLogits sl;
            sl.logits.assign(out.logits.data().end() - static_cast<size_t>(D) * V,
                             out.logits.data().end());
            res.step_logits.push_back(std::move(sl));

            // static schedule: first (D mod S) steps take the ceiling
            const int base = D / static_steps;
            const int rem = D % static_steps;
            const int take = step < rem ? base + 1 : base;

            struct Cand {
                int slot;
                int token;
                float score;
            };
            std::vector<Cand> cands;
            for (int i = 0; i < D; ++i) {
                if (decided[i]) {
                    continue;
                }
                const float* row = res.step_logits.back().logits.data() + static_cast<size_t>(i) * V;
                auto [tok, score] = confidence(row, V);
                cands.push_back({i, tok, score});
            }
            std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.score != b.score) {
                    return a.score > b.score;
                }
                return a.slot < b.slot;
            });
            for (int i = 0; i < take && i < static_cast<int>(cands.size()); ++i) {
                block[cands[i].slot] = cands[i].token;
                decided[cands[i].slot] = 1;
                ++n_decided;
            }
            ++step;
        }
        committed.insert(committed.end(), block.begin(), block.end());
        res.tokens = committed;
        bool eos = false;
        for (int t : block) {
            if (t == cfg.eos_id) {
                eos = true;
            }
        }
        if (eos) {
            res.found_eos = true;
            break;
        }
    }
    return res;
}

}  // namespace testutil
