#pragma once

#include <string>
#include <vector>

#include "blockdiff/datagen.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/rng.hpp"

namespace blockdiff {

struct DecodeStrategy {
    enum class Kind {
        Static,   // fixed denoise-step count per block, low-confidence remasking
        Dynamic,  // threshold-gated: decode everything whose confidence exceeds tau
        Ar,       // token-by-token baseline
    };

    Kind kind = Kind::Static;
    int steps = 0;             // Static; 0 means "use the block size" (one token per step)
    float threshold = 0.9f;    // Dynamic
    float temperature = 0.0f;  // 0 = greedy argmax; > 0 samples from softmax(logits / T)

    static DecodeStrategy static_steps(int s);
    static DecodeStrategy dynamic(float tau);
    static DecodeStrategy ar();
    // "static:S" | "static" | "dynamic:TAU" | "ar"
    static DecodeStrategy parse(const std::string& text);
    std::string to_string() const;

    int effective_steps(int block_size) const;  // validates 1 <= S <= D
    void validate(int block_size) const;
};

struct DecodeStats {
    long tokens_generated = 0;
    long denoise_forwards = 0;
    long commit_forwards = 0;
    std::vector<int> per_step_decode_counts;
    double wall_time_s = 0.0;

    // average number of tokens decided per denoise forward
    double parallelism() const;
    // total model forwards spent per generated token; the AR baseline is 1.0
    double forwards_per_token() const;
};

struct StepTrace {
    int block_index = 0;
    int step_index = 0;
    std::vector<int> positions;  // slots decided this step, within-block indices
    std::vector<int> tokens;
    std::vector<float> confidences;
};

struct GenerateResult {
    std::string text;             // detokenized, truncated at the first EOS
    std::vector<int> raw_tokens;  // every decided slot, including EOS padding
    DecodeStats stats;
    bool truncated = false;  // stopped by max_blocks or the position budget, no EOS seen
    std::vector<StepTrace> trace;
};

// Runs the prompt (and image, when present) through the model under causal
// attention and commits its K/V; committed length = G^2 + |prompt|.
KVCache prefill(const Parameters& params, const GridImage* image,
                const std::vector<int>& prompt_tokens);

// (argmax token, max softmax probability) of one logits row; ties resolve to
// the lowest token id.
std::pair<int, float> confidence(const float* logits_row, int vocab);

struct BlockResult {
    std::vector<int> tokens;       // all D slots decided
    std::vector<int> step_counts;  // tokens decided per denoise step
    int forwards = 0;
    std::vector<StepTrace> trace;
};

// Iteratively denoises one block of config.block_size slots on top of the
// cache. All slots start masked; a decided slot never reverts. rng is only
// consulted when strategy.temperature > 0.
BlockResult denoise_block(const Parameters& params, const KVCache& cache,
                          const DecodeStrategy& strategy, Rng* rng = nullptr,
                          int block_index = 0, bool want_trace = false);

// One clean forward of the decided block; its K/V are appended to the cache.
// expected_start must equal the cache's committed length, which rejects
// committing the same block twice.
void commit_block(const Parameters& params, KVCache& cache, const std::vector<int>& tokens,
                  int expected_start);

// Full decode loop: prefill, then denoise+commit per block until a fully
// denoised block contains EOS, the block budget runs out, or the position
// budget would overflow. Deterministic when temperature is 0.
GenerateResult generate(const Parameters& params, const GridImage* image,
                        const std::vector<int>& prompt_tokens, const DecodeStrategy& strategy,
                        int max_blocks, const Tokenizer& tokenizer, bool want_trace = false,
                        Rng* rng = nullptr);

}  // namespace blockdiff
