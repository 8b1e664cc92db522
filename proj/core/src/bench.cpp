#include "blockdiff/bench.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "blockdiff/noising.hpp"
#include "blockdiff/parallel.hpp"

namespace blockdiff {

int blocks_needed(const std::vector<Sample>& samples, const Tokenizer& tokenizer, int block_size) {
    int max_len = 0;
    for (const auto& s : samples) {
        std::vector<int> answer = tokenizer.tokenize(s.caption);
        answer.push_back(Tokenizer::kEosId);
        answer = pad_to_block_multiple(answer, block_size, Tokenizer::kEosId);
        max_len = std::max(max_len, static_cast<int>(answer.size()));
    }
    return std::max(1, max_len / block_size);
}

EvalMetrics evaluate(const Parameters& params, const std::vector<Sample>& samples,
                     const Tokenizer& tokenizer, const DecodeStrategy& strategy, int max_blocks) {
    if (samples.empty()) {
        throw std::invalid_argument("evaluate: empty sample set");
    }
    struct PerSample {
        long matches = 0;
        long span = 0;
        bool exact = false;
        bool well_formed = false;
        DecodeStats stats;
    };
    std::vector<PerSample> results(samples.size());

    parallel_for(static_cast<int>(samples.size()), thread_count_from_env(), [&](int i) {
        const Sample& s = samples[static_cast<size_t>(i)];
        std::vector<int> prompt = {Tokenizer::kBosId};
        const std::vector<int> prompt_text = tokenizer.tokenize(s.prompt);
        prompt.insert(prompt.end(), prompt_text.begin(), prompt_text.end());

        GenerateResult gen =
            generate(params, &s.image, prompt, strategy, max_blocks, tokenizer);

        std::vector<int> gold = tokenizer.tokenize(s.caption);
        gold.push_back(Tokenizer::kEosId);
        // visible span: everything up to and including the first EOS
        std::vector<int> vis = gen.raw_tokens;
        for (size_t j = 0; j < vis.size(); ++j) {
            if (vis[j] == Tokenizer::kEosId) {
                vis.resize(j + 1);
                break;
            }
        }
        PerSample& r = results[static_cast<size_t>(i)];
        const size_t lo = std::min(vis.size(), gold.size());
        for (size_t j = 0; j < lo; ++j) {
            if (vis[j] == gold[j]) {
                ++r.matches;
            }
        }
        r.span = static_cast<long>(std::max(vis.size(), gold.size()));
        r.exact = gen.text == s.caption;
        r.well_formed = caption_well_formed(gen.text);
        r.stats = gen.stats;
    });

    EvalMetrics m;
    m.samples = static_cast<long>(samples.size());
    long matches = 0, span = 0, exact = 0, well = 0;
    for (const auto& r : results) {  // fixed aggregation order
        matches += r.matches;
        span += r.span;
        exact += r.exact ? 1 : 0;
        well += r.well_formed ? 1 : 0;
        m.stats.tokens_generated += r.stats.tokens_generated;
        m.stats.denoise_forwards += r.stats.denoise_forwards;
        m.stats.commit_forwards += r.stats.commit_forwards;
        m.stats.wall_time_s += r.stats.wall_time_s;
    }
    m.token_accuracy = span == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(span);
    m.exact_match_rate = static_cast<double>(exact) / static_cast<double>(m.samples);
    m.well_formed_rate = static_cast<double>(well) / static_cast<double>(m.samples);
    return m;
}

static BenchRow row_from_metrics(const EvalMetrics& m, const Parameters& params,
                                 const std::string& strategy, double knob) {
    BenchRow row;
    row.strategy = strategy;
    row.block_size = params.config.block_size;
    row.steps_or_threshold = knob;
    row.token_accuracy = m.token_accuracy;
    row.exact_match_rate = m.exact_match_rate;
    row.denoise_forwards = m.stats.denoise_forwards;
    row.commit_forwards = m.stats.commit_forwards;
    row.parallelism = m.stats.parallelism();
    row.tokens_per_second = m.stats.wall_time_s > 0.0
                                ? static_cast<double>(m.stats.tokens_generated) / m.stats.wall_time_s
                                : 0.0;
    return row;
}

std::vector<BenchRow> bench_steps(const Parameters& params, const std::vector<Sample>& val,
                                  const Tokenizer& tokenizer, const std::vector<int>& steps_list,
                                  int max_blocks) {
    if (val.empty()) {
        throw std::invalid_argument("bench_steps: empty evaluation set");
    }
    std::vector<BenchRow> rows;
    for (int s : steps_list) {
        EvalMetrics m = evaluate(params, val, tokenizer, DecodeStrategy::static_steps(s), max_blocks);
        rows.push_back(row_from_metrics(m, params, "static", s));
    }
    return rows;
}

std::vector<BenchRow> bench_dynamic(const Parameters& params, const std::vector<Sample>& val,
                                    const Tokenizer& tokenizer, const std::vector<double>& taus,
                                    int max_blocks) {
    if (val.empty()) {
        throw std::invalid_argument("bench_dynamic: empty evaluation set");
    }
    std::vector<BenchRow> rows;
    for (double tau : taus) {
        EvalMetrics m = evaluate(params, val, tokenizer,
                                 DecodeStrategy::dynamic(static_cast<float>(tau)), max_blocks);
        rows.push_back(row_from_metrics(m, params, "dynamic", tau));
    }
    return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("write_bench_csv: cannot open " + path);
    }
    out << kBenchCsvVersion << '\n';
    out << "strategy,block_size,steps_or_threshold,token_accuracy,exact_match_rate,"
           "denoise_forwards,commit_forwards,parallelism,tokens_per_second\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.12g,%.12g,%.12g,%ld,%ld,%.12g,%.12g\n",
                      r.strategy.c_str(), r.block_size, r.steps_or_threshold, r.token_accuracy,
                      r.exact_match_rate, r.denoise_forwards, r.commit_forwards, r.parallelism,
                      r.tokens_per_second);
        out << buf;
    }
}

std::vector<BenchRow> read_bench_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("read_bench_csv: cannot open " + path);
    }
    std::vector<BenchRow> rows;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (!header_seen) {
            if (line.rfind("strategy,", 0) != 0) {
                throw std::runtime_error("read_bench_csv: missing header row");
            }
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (fields.size() != 9) {
            throw std::runtime_error("read_bench_csv: expected 9 columns, got " +
                                     std::to_string(fields.size()));
        }
        BenchRow r;
        r.strategy = fields[0];
        r.block_size = std::stoi(fields[1]);
        r.steps_or_threshold = std::stod(fields[2]);
        r.token_accuracy = std::stod(fields[3]);
        r.exact_match_rate = std::stod(fields[4]);
        r.denoise_forwards = std::stol(fields[5]);
        r.commit_forwards = std::stol(fields[6]);
        r.parallelism = std::stod(fields[7]);
        r.tokens_per_second = std::stod(fields[8]);

        // cross-check: generated tokens = commit_forwards * block_size for
        // block strategies; the AR baseline is one token per forward
        if (r.strategy == "ar") {
            if (std::abs(r.parallelism - 1.0) > 1e-9) {
                throw std::runtime_error("read_bench_csv: ar row parallelism must be 1.0");
            }
        } else if (r.denoise_forwards > 0) {
            const double recomputed = static_cast<double>(r.commit_forwards) * r.block_size /
                                      static_cast<double>(r.denoise_forwards);
            if (std::abs(recomputed - r.parallelism) > 1e-9) {
                throw std::runtime_error("read_bench_csv: parallelism column fails revalidation");
            }
        }
        rows.push_back(std::move(r));
    }
    if (!header_seen) {
        throw std::runtime_error("read_bench_csv: empty file");
    }
    return rows;
}

}  // namespace blockdiff
