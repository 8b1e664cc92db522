#include "blockdiff/decoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace blockdiff {

DecodeStrategy DecodeStrategy::static_steps(int s) {
    DecodeStrategy st;
    st.kind = Kind::Static;
    st.steps = s;
    return st;
}

DecodeStrategy DecodeStrategy::dynamic(float tau) {
    DecodeStrategy st;
    st.kind = Kind::Dynamic;
    st.threshold = tau;
    return st;
}

DecodeStrategy DecodeStrategy::ar() {
    DecodeStrategy st;
    st.kind = Kind::Ar;
    return st;
}

DecodeStrategy DecodeStrategy::parse(const std::string& text) {
    if (text == "ar") {
        return ar();
    }
    if (text == "static") {
        return static_steps(0);
    }
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? std::string() : text.substr(colon + 1);
    try {
        if (head == "static" && !arg.empty()) {
            return static_steps(std::stoi(arg));
        }
        if (head == "dynamic" && !arg.empty()) {
            return dynamic(std::stof(arg));
        }
    } catch (const std::exception&) {
        // fall through to the common error
    }
    throw std::invalid_argument("strategy: expected static[:S], dynamic:TAU or ar, got '" + text + "'");
}

std::string DecodeStrategy::to_string() const {
    switch (kind) {
        case Kind::Static:
            return "static:" + std::to_string(steps);
        case Kind::Dynamic: {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "dynamic:%g", threshold);
            return buf;
        }
        case Kind::Ar:
            return "ar";
    }
    return "?";
}

int DecodeStrategy::effective_steps(int block_size) const {
    return steps == 0 ? block_size : steps;
}

void DecodeStrategy::validate(int block_size) const {
    if (kind == Kind::Static) {
        const int s = effective_steps(block_size);
        if (s < 1 || s > block_size) {
            throw std::invalid_argument("strategy: static steps must lie in [1, block_size]");
        }
    } else if (kind == Kind::Dynamic) {
        if (threshold < 0.0f || threshold > 1.0f) {
            throw std::invalid_argument("strategy: dynamic threshold must lie in [0, 1]");
        }
    }
    if (temperature < 0.0f) {
        throw std::invalid_argument("strategy: temperature must be >= 0");
    }
}

double DecodeStats::parallelism() const {
    return denoise_forwards == 0 ? 0.0
                                 : static_cast<double>(tokens_generated) / static_cast<double>(denoise_forwards);
}

double DecodeStats::forwards_per_token() const {
    return tokens_generated == 0
               ? 0.0
               : static_cast<double>(denoise_forwards + commit_forwards) / static_cast<double>(tokens_generated);
}

static Tensor prompt_embeds_for(const Parameters& params, const GridImage* image,
                                const std::vector<int>& tokens) {
    Tensor text = tokens.empty() ? Tensor() : embed_tokens(params, tokens);
    if (!image) {
        return text;
    }
    Tensor vis = connect(params, encode_image(params, *image));
    return tokens.empty() ? vis : concat_rows({vis, text});
}

static std::vector<int> iota_positions(int start, int count) {
    std::vector<int> pos(count);
    std::iota(pos.begin(), pos.end(), start);
    return pos;
}

KVCache prefill(const Parameters& params, const GridImage* image,
                const std::vector<int>& prompt_tokens) {
    if (prompt_tokens.empty()) {
        throw std::invalid_argument("prefill: prompt must be non-empty");
    }
    NoGradGuard ng;
    Tensor x = prompt_embeds_for(params, image, prompt_tokens);
    const int n = x.rows();
    if (n > params.config.max_positions) {
        throw std::invalid_argument("prefill: prompt exceeds max_positions");
    }
    ForwardOutput out = forward(params, x, iota_positions(0, n), causal_mask(n));
    KVCache cache;
    cache.init(params.config);
    cache.append(out.k, out.v, n, 0);
    return cache;
}

std::pair<int, float> confidence(const float* logits_row, int vocab) {
    int best = 0;
    float mx = logits_row[0];
    for (int j = 1; j < vocab; ++j) {
        if (logits_row[j] > mx) {  // strict: ties keep the lowest id
            mx = logits_row[j];
            best = j;
        }
    }
    double denom = 0.0;
    for (int j = 0; j < vocab; ++j) {
        denom += std::exp(static_cast<double>(logits_row[j]) - mx);
    }
    return {best, static_cast<float>(1.0 / denom)};
}

// token count for static step s of S: the first (D mod S) steps take the
// ceiling so exactly D slots are decided after S steps
static int static_step_count(int block_size, int steps, int step_index) {
    const int base = block_size / steps;
    const int rem = block_size % steps;
    return step_index < rem ? base + 1 : base;
}

static std::pair<int, float> pick_token(const float* row, int vocab, float temperature, Rng* rng) {
    if (temperature <= 0.0f || rng == nullptr) {
        return confidence(row, vocab);
    }
    // softmax(logits / T) sampling; the reported confidence is the sampled
    // token's probability under the tempered distribution
    float mx = row[0];
    for (int j = 1; j < vocab; ++j) {
        mx = std::max(mx, row[j]);
    }
    std::vector<double> probs(vocab);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) {
        probs[j] = std::exp((static_cast<double>(row[j]) - mx) / temperature);
        z += probs[j];
    }
    double u = rng->uniform() * z;
    for (int j = 0; j < vocab; ++j) {
        u -= probs[j];
        if (u <= 0.0) {
            return {j, static_cast<float>(probs[j] / z)};
        }
    }
    return {vocab - 1, static_cast<float>(probs[vocab - 1] / z)};
}

BlockResult denoise_block(const Parameters& params, const KVCache& cache,
                          const DecodeStrategy& strategy, Rng* rng, int block_index,
                          bool want_trace) {
    const ModelConfig& cfg = params.config;
    const int D = cfg.block_size;
    strategy.validate(D);
    if (strategy.kind == DecodeStrategy::Kind::Ar) {
        throw std::invalid_argument("denoise_block: the AR strategy has no block denoiser");
    }
    if (cache.committed + D > cfg.max_positions) {
        throw std::invalid_argument("denoise_block: block would exceed max_positions");
    }

    NoGradGuard ng;
    BlockResult res;
    res.tokens.assign(D, cfg.mask_id);
    std::vector<uint8_t> decided(D, 0);
    const std::vector<int> positions = iota_positions(cache.committed, D);
    const AttnMask mask = cache_decode_mask(cache.committed, D);
    const int static_steps = strategy.kind == DecodeStrategy::Kind::Static ? strategy.effective_steps(D) : 0;

    int n_decided = 0;
    int step = 0;
    while (n_decided < D) {
        ForwardOutput out = forward(params, embed_tokens(params, res.tokens), positions, mask, &cache);
        ++res.forwards;

        struct Cand {
            int slot;
            int token;
            float score;
        };
        std::vector<Cand> cands;
        cands.reserve(D - n_decided);
        for (int i = 0; i < D; ++i) {
            if (decided[i]) {
                continue;
            }
            const float* row = out.logits.data().data() + static_cast<size_t>(i) * cfg.vocab_size;
            auto [tok, score] = pick_token(row, cfg.vocab_size, strategy.temperature, rng);
            cands.push_back({i, tok, score});
        }
        // highest confidence first; equal scores resolve to the lowest slot
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            return a.slot < b.slot;
        });

        int take = 0;
        if (strategy.kind == DecodeStrategy::Kind::Static) {
            take = static_step_count(D, static_steps, step);
        } else {
            for (const auto& c : cands) {
                if (c.score > strategy.threshold) {
                    ++take;
                }
            }
            take = std::max(take, 1);  // progress guarantee: at least the single best slot
        }
        take = std::min<int>(take, static_cast<int>(cands.size()));

        StepTrace tr;
        for (int i = 0; i < take; ++i) {
            const auto& c = cands[i];
            res.tokens[c.slot] = c.token;
            decided[c.slot] = 1;
            if (want_trace) {
                tr.positions.push_back(c.slot);
                tr.tokens.push_back(c.token);
                tr.confidences.push_back(c.score);
            }
        }
        n_decided += take;
        res.step_counts.push_back(take);
        if (want_trace) {
            tr.block_index = block_index;
            tr.step_index = step;
            res.trace.push_back(std::move(tr));
        }
        ++step;
    }
    return res;
}

void commit_block(const Parameters& params, KVCache& cache, const std::vector<int>& tokens,
                  int expected_start) {
    const int D = static_cast<int>(tokens.size());
    if (cache.committed + D > params.config.max_positions) {
        throw std::invalid_argument("commit_block: cache would exceed max_positions");
    }
    NoGradGuard ng;
    const std::vector<int> positions = iota_positions(expected_start, D);
    // expected_start is validated by the cache append below
    ForwardOutput out = forward(params, embed_tokens(params, tokens), positions,
                                cache_decode_mask(cache.committed, D), &cache);
    cache.append(out.k, out.v, D, expected_start);
}

static GenerateResult generate_ar(const Parameters& params, const GridImage* image,
                                  const std::vector<int>& prompt_tokens,
                                  const DecodeStrategy& strategy, int max_tokens,
                                  const Tokenizer& tokenizer, Rng* rng) {
    NoGradGuard ng;
    GenerateResult res;
    const ModelConfig& cfg = params.config;

    // cache covers everything before the last prompt token; the decode
    // forward of each token doubles as its commit (1 forward per token)
    std::vector<int> prefix(prompt_tokens.begin(), prompt_tokens.end() - 1);
    KVCache cache;
    cache.init(cfg);
    if (image || !prefix.empty()) {
        Tensor x = prompt_embeds_for(params, image, prefix);
        ForwardOutput out = forward(params, x, iota_positions(0, x.rows()), causal_mask(x.rows()));
        cache.append(out.k, out.v, x.rows(), 0);
    }

    int cur = prompt_tokens.back();
    for (int i = 0; i < max_tokens; ++i) {
        const int pos = cache.committed;
        if (pos + 1 > cfg.max_positions) {
            res.truncated = true;
            break;
        }
        ForwardOutput out = forward(params, embed_tokens(params, {cur}), {pos},
                                    cache_decode_mask(cache.committed, 1), &cache);
        cache.append(out.k, out.v, 1, pos);
        ++res.stats.denoise_forwards;
        auto [tok, score] = pick_token(out.logits.data().data(), cfg.vocab_size, strategy.temperature, rng);
        (void)score;
        res.raw_tokens.push_back(tok);
        ++res.stats.tokens_generated;
        res.stats.per_step_decode_counts.push_back(1);
        if (tok == cfg.eos_id) {
            break;
        }
        cur = tok;
        if (i == max_tokens - 1) {
            res.truncated = true;
        }
    }

    std::vector<int> visible = res.raw_tokens;
    auto eos = std::find(visible.begin(), visible.end(), cfg.eos_id);
    visible.erase(eos, visible.end());
    res.text = tokenizer.detokenize(visible);
    return res;
}

GenerateResult generate(const Parameters& params, const GridImage* image,
                        const std::vector<int>& prompt_tokens, const DecodeStrategy& strategy,
                        int max_blocks, const Tokenizer& tokenizer, bool want_trace, Rng* rng) {
    const ModelConfig& cfg = params.config;
    const int D = cfg.block_size;
    strategy.validate(D);
    if (max_blocks < 1) {
        throw std::invalid_argument("generate: max_blocks must be >= 1");
    }
    if (prompt_tokens.empty()) {
        throw std::invalid_argument("generate: prompt must be non-empty");
    }

    const auto t0 = std::chrono::steady_clock::now();
    if (strategy.kind == DecodeStrategy::Kind::Ar) {
        GenerateResult res = generate_ar(params, image, prompt_tokens, strategy, max_blocks * D, tokenizer, rng);
        res.stats.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return res;
    }

    GenerateResult res;
    KVCache cache = prefill(params, image, prompt_tokens);
    bool found_eos = false;
    for (int b = 0; b < max_blocks; ++b) {
        if (cache.committed + D > cfg.max_positions) {
            break;  // position budget exhausted; reported via `truncated`
        }
        const int start = cache.committed;
        BlockResult block = denoise_block(params, cache, strategy, rng, b, want_trace);
        commit_block(params, cache, block.tokens, start);

        res.stats.denoise_forwards += block.forwards;
        res.stats.commit_forwards += 1;
        res.stats.tokens_generated += D;
        res.stats.per_step_decode_counts.insert(res.stats.per_step_decode_counts.end(),
                                                block.step_counts.begin(), block.step_counts.end());
        for (auto& tr : block.trace) {
            res.trace.push_back(std::move(tr));
        }
        res.raw_tokens.insert(res.raw_tokens.end(), block.tokens.begin(), block.tokens.end());

        if (std::find(block.tokens.begin(), block.tokens.end(), cfg.eos_id) != block.tokens.end()) {
            found_eos = true;
            break;
        }
    }
    res.truncated = !found_eos;

    std::vector<int> visible = res.raw_tokens;
    auto eos = std::find(visible.begin(), visible.end(), cfg.eos_id);
    visible.erase(eos, visible.end());
    res.text = tokenizer.detokenize(visible);
    res.stats.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace blockdiff
