#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace blockdiff {

// Boolean attention-allow matrix. Row = query position, column = key
// position. Invariant: every query row allows at least one key.
struct AttnMask {
    int n_query = 0;
    int n_key = 0;
    std::vector<uint8_t> allow;  // row-major [n_query x n_key]

    bool at(int q, int k) const { return allow[static_cast<size_t>(q) * n_key + k] != 0; }
    void set(int q, int k, bool v) { allow[static_cast<size_t>(q) * n_key + k] = v ? 1 : 0; }

    static AttnMask falses(int nq, int nk);
    static AttnMask from_predicate(int nq, int nk, const std::function<bool(int, int)>& pred);

    // throws if any query row allows no key
    void validate() const;

    // '#' = allowed, '.' = disallowed; one text row per query
    std::string to_text_grid() const;
};

// Left-to-right pattern: allow[q][k] = (k <= q).
AttnMask causal_mask(int n);

// Whole-sequence denoising pattern over [prompt | answer]: prompt rows are
// causal over the prompt; answer rows see the full prompt and the whole
// answer bidirectionally.
AttnMask full_diffusion_mask(int prompt_len, int answer_len);

// Inference-time pattern over [prompt | answer]: prompt causal; an answer
// position in block j sees all prompt keys, answer blocks < j, and its own
// block bidirectionally. answer_len must be divisible by block_size.
AttnMask block_causal_mask(int prompt_len, int answer_len, int block_size);

// Training pattern over [prompt | clean answer | noisy answer], both answer
// copies of length answer_len. Prompt and clean rows follow
// block_causal_mask over the clean part and never see noisy keys. A noisy
// row in block i sees all prompt keys, clean keys in blocks strictly < i,
// and noisy keys within block i only.
AttnMask hybrid_training_mask(int prompt_len, int answer_len, int block_size);

// Decode-step pattern for one block attending to an existing cache: every
// query sees all cached keys plus the whole block (bidirectional).
AttnMask cache_decode_mask(int cache_len, int span);

}  // namespace blockdiff
