#pragma once

#include <string>
#include <vector>

#include "blockdiff/datagen.hpp"
#include "blockdiff/decoder.hpp"
#include "blockdiff/model.hpp"

namespace blockdiff {

inline constexpr const char* kBenchCsvVersion = "# blockdiff-bench v1";

// One benchmark measurement over a full evaluation set.
struct BenchRow {
    std::string strategy;         // "static" | "dynamic" | "ar"
    int block_size = 0;
    double steps_or_threshold = 0.0;
    double token_accuracy = 0.0;
    double exact_match_rate = 0.0;
    long denoise_forwards = 0;
    long commit_forwards = 0;
    double parallelism = 0.0;
    double tokens_per_second = 0.0;
};

// CSV with one version comment line and a header row; columns in BenchRow
// order. Loading re-derives parallelism from the raw columns (generated
// tokens = commit_forwards * block_size) and rejects rows that disagree
// beyond 1e-9.
void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path);
std::vector<BenchRow> read_bench_csv(const std::string& path);

struct EvalMetrics {
    double token_accuracy = 0.0;    // position-wise match against the gold answer tokens
    double exact_match_rate = 0.0;  // generated text equals the gold caption
    double well_formed_rate = 0.0;  // generated text parses under the caption grammar
    long samples = 0;
    DecodeStats stats;  // summed over the set; wall time is per-sample and summed
};

// Greedy decode of every sample followed by token/string comparison against
// the canonical caption. Fans out across samples when BLOCKDIFF_THREADS > 1;
// aggregation order is fixed so results do not depend on the thread count.
EvalMetrics evaluate(const Parameters& params, const std::vector<Sample>& samples,
                     const Tokenizer& tokenizer, const DecodeStrategy& strategy, int max_blocks);

// Denoise-step sweep: one row per S over the full set.
std::vector<BenchRow> bench_steps(const Parameters& params, const std::vector<Sample>& val,
                                  const Tokenizer& tokenizer, const std::vector<int>& steps_list,
                                  int max_blocks);

// Dynamic-threshold sweep: one row per tau.
std::vector<BenchRow> bench_dynamic(const Parameters& params, const std::vector<Sample>& val,
                                    const Tokenizer& tokenizer, const std::vector<double>& taus,
                                    int max_blocks);

// blocks needed for the longest caption in the set (tokenized + EOS, padded)
int blocks_needed(const std::vector<Sample>& samples, const Tokenizer& tokenizer, int block_size);

}  // namespace blockdiff
