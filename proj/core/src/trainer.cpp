#include "blockdiff/trainer.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "blockdiff/parallel.hpp"

namespace blockdiff {

const char* stage_name(Stage stage) {
    switch (stage) {
        case Stage::ConnectorAR:
            return "connector_ar";
        case Stage::FinetuneAR:
            return "finetune_ar";
        case Stage::FinetuneFullDiff:
            return "finetune_full_diff";
        case Stage::FinetuneBlockDiff:
            return "finetune_block_diff";
    }
    return "?";
}

Stage stage_from_string(const std::string& name) {
    if (name == "connector_ar") {
        return Stage::ConnectorAR;
    }
    if (name == "finetune_ar") {
        return Stage::FinetuneAR;
    }
    if (name == "finetune_full_diff") {
        return Stage::FinetuneFullDiff;
    }
    if (name == "finetune_block_diff") {
        return Stage::FinetuneBlockDiff;
    }
    throw std::runtime_error("unknown stage '" + name + "'");
}

void TrainConfig::validate() const {
    if (steps < 1 || batch < 1 || block_size < 1) {
        throw std::invalid_argument("TrainConfig: steps, batch and block_size must be >= 1");
    }
    if (!(lr > 0.0)) {
        throw std::invalid_argument("TrainConfig: lr must be > 0");
    }
    if (!(noise.t_min > 0.0f) || noise.t_min >= 1.0f) {
        throw std::invalid_argument("TrainConfig: t_min must lie in (0, 1)");
    }
}

Example make_example(const Sample& sample, const Tokenizer& tokenizer, int block_size,
                     bool text_only) {
    Example ex;
    ex.prompt_tokens.push_back(Tokenizer::kBosId);
    if (!text_only) {
        ex.image = sample.image;
        const std::vector<int> prompt_text = tokenizer.tokenize(sample.prompt);
        ex.prompt_tokens.insert(ex.prompt_tokens.end(), prompt_text.begin(), prompt_text.end());
    }
    ex.answer_tokens = tokenizer.tokenize(sample.caption);
    ex.answer_tokens.push_back(Tokenizer::kEosId);
    ex.answer_tokens = pad_to_block_multiple(ex.answer_tokens, block_size, Tokenizer::kEosId);
    return ex;
}

// ---- AdamW ------------------------------------------------------------------

namespace {

class AdamW {
  public:
    AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(Parameters& params,
              const std::unordered_map<const TensorNode*, std::vector<float>>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (auto& [name, tensor] : params.named()) {
            if (!tensor->requires_grad()) {
                continue;
            }
            auto it = grads.find(tensor->node());
            if (it == grads.end()) {
                continue;  // no gradient path this step (e.g. unused connector in text-only runs)
            }
            const std::vector<float>& g = it->second;
            State& st = state_[tensor->node()];
            if (st.m.empty()) {
                st.m.assign(g.size(), 0.0f);
                st.v.assign(g.size(), 0.0f);
            }
            std::vector<float>& w = tensor->data_mut();
            for (size_t i = 0; i < g.size(); ++i) {
                st.m[i] = static_cast<float>(b1_ * st.m[i] + (1.0 - b1_) * g[i]);
                st.v[i] = static_cast<float>(b2_ * st.v[i] + (1.0 - b2_) * static_cast<double>(g[i]) * g[i]);
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                w[i] = static_cast<float>(w[i] - lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]));
            }
        }
    }

  private:
    struct State {
        std::vector<float> m, v;
    };
    double lr_, b1_, b2_, eps_, wd_;
    int t_ = 0;
    std::unordered_map<const TensorNode*, State> state_;
};

struct DrawnNoise {
    // pre-drawn per example on the main thread so worker count never changes
    // the rng stream
    NoisySample noisy;
    bool used = false;
};

Tensor stage_loss_example(const Parameters& params, Stage stage, const Example& ex,
                          const DrawnNoise& noise, const ObjectiveConfig& ocfg) {
    switch (stage) {
        case Stage::ConnectorAR:
        case Stage::FinetuneAR:
            return ar_loss_example(params, ex);
        case Stage::FinetuneFullDiff:
            return full_diffusion_loss_example(params, ex, noise.noisy, ocfg);
        case Stage::FinetuneBlockDiff:
            return block_diffusion_loss_example(params, ex, noise.noisy, ocfg);
    }
    throw std::logic_error("stage_loss_example: unknown stage");
}

DrawnNoise draw_noise(const Parameters& params, Stage stage, const Example& ex, Rng& rng,
                      const ObjectiveConfig& ocfg) {
    DrawnNoise out;
    if (stage == Stage::FinetuneFullDiff) {
        BlockPlan plan;
        plan.prompt_len = prompt_span(ex);
        plan.answer_len = static_cast<int>(ex.answer_tokens.size());
        plan.block_size = plan.answer_len;
        const float t = draw_shared_t(rng, ocfg.noise);
        out.noisy = apply_block_noise(ex.answer_tokens, plan, {t}, rng, params.config.mask_id, ocfg.noise);
        out.used = true;
    } else if (stage == Stage::FinetuneBlockDiff) {
        BlockPlan plan = plan_for(ex, ocfg.block_size);
        out.noisy = sample_block_noise(ex.answer_tokens, plan, rng, params.config.mask_id, ocfg.noise);
        out.used = true;
    }
    return out;
}

}  // namespace

void audit_gradient_flow(Parameters& params, const TrainConfig& cfg,
                         const std::vector<Example>& probe) {
    if (probe.empty()) {
        throw std::invalid_argument("audit_gradient_flow: empty probe batch");
    }
    params.set_trainable(cfg.trainable());
    ObjectiveConfig ocfg{cfg.noise, cfg.reduction, cfg.block_size};
    Rng rng(cfg.seed ^ 0xa0d17u);

    std::vector<Tensor> losses;
    for (const auto& ex : probe) {
        DrawnNoise noise = draw_noise(params, cfg.stage, ex, rng, ocfg);
        losses.push_back(stage_loss_example(params, cfg.stage, ex, noise, ocfg));
    }
    GradStore grads = backward(combine_scalars(losses, cfg.reduction == BatchReduction::Mean));

    bool any_inside = false;
    const TrainableSet set = cfg.trainable();
    for (auto& [name, tensor] : params.named()) {
        const std::vector<float>* g = grads.find(*tensor);
        const bool inside = name != "vision.w" &&
                            (set == TrainableSet::All || params.is_connector(name));
        if (!inside && g != nullptr) {
            throw std::runtime_error("gradient audit: gradient reached frozen tensor " + name);
        }
        if (inside && g != nullptr) {
            for (float v : *g) {
                if (v != 0.0f) {
                    any_inside = true;
                    break;
                }
            }
        }
    }
    if (!any_inside) {
        throw std::runtime_error("gradient audit: no nonzero gradient inside the trainable set");
    }
}

RunRecord train_stage(Parameters& params, const TrainConfig& cfg,
                      const std::vector<Sample>& train, const Tokenizer& tokenizer) {
    cfg.validate();
    if (train.empty()) {
        throw std::invalid_argument("train_stage: empty training set");
    }
    params.set_trainable(cfg.trainable());
    if (cfg.stage == Stage::FinetuneBlockDiff || cfg.stage == Stage::FinetuneFullDiff) {
        // the checkpoint carries the block size it was trained with
        params.config.block_size = cfg.block_size;
    }

    const int n = static_cast<int>(train.size());
    std::vector<Example> examples;
    examples.reserve(train.size());
    for (const auto& s : train) {
        examples.push_back(make_example(s, tokenizer, cfg.block_size, cfg.text_only));
    }

    ObjectiveConfig ocfg{cfg.noise, cfg.reduction, cfg.block_size};
    const int probe_n = std::min<int>(cfg.batch, n);
    audit_gradient_flow(params, cfg, {examples.begin(), examples.begin() + probe_n});

    AdamW opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    Rng rng(cfg.seed);
    const int threads = thread_count_from_env();

    RunRecord rec;
    rec.stage = cfg.stage;
    rec.loss_series.reserve(static_cast<size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        try {
            std::vector<int> idx(static_cast<size_t>(cfg.batch));
            for (auto& i : idx) {
                i = rng.uniform_int(n);
            }
            std::vector<DrawnNoise> noise(idx.size());
            for (size_t e = 0; e < idx.size(); ++e) {
                noise[e] = draw_noise(params, cfg.stage, examples[static_cast<size_t>(idx[e])], rng, ocfg);
            }

            std::vector<float> losses(idx.size());
            std::vector<GradStore> grads(idx.size());
            parallel_for(static_cast<int>(idx.size()), threads, [&](int e) {
                const Example& ex = examples[static_cast<size_t>(idx[static_cast<size_t>(e)])];
                Tensor loss = stage_loss_example(params, cfg.stage, ex, noise[static_cast<size_t>(e)], ocfg);
                losses[static_cast<size_t>(e)] = loss.item();
                grads[static_cast<size_t>(e)] = backward(loss);
            });

            double loss_acc = 0.0;
            for (float l : losses) {
                loss_acc += l;
            }
            const double scale = cfg.reduction == BatchReduction::Mean ? 1.0 / static_cast<double>(idx.size()) : 1.0;
            const float step_loss = static_cast<float>(loss_acc * scale);
            if (!std::isfinite(step_loss)) {
                throw std::runtime_error("non-finite loss");
            }

            // fixed-order reduction over examples, then one optimizer step
            std::unordered_map<const TensorNode*, std::vector<float>> total;
            for (auto& [name, tensor] : params.named()) {
                if (!tensor->requires_grad()) {
                    continue;
                }
                std::vector<float>* acc = nullptr;
                for (size_t e = 0; e < grads.size(); ++e) {
                    const std::vector<float>* g = grads[e].find(*tensor);
                    if (!g) {
                        continue;
                    }
                    if (!acc) {
                        acc = &total[tensor->node()];
                        acc->assign(tensor->numel(), 0.0f);
                    }
                    for (size_t i = 0; i < g->size(); ++i) {
                        (*acc)[i] += (*g)[i];
                    }
                }
                if (acc && cfg.reduction == BatchReduction::Mean) {
                    const float inv = 1.0f / static_cast<float>(grads.size());
                    for (auto& v : *acc) {
                        v *= inv;
                    }
                }
            }
            opt.step(params, total);
            rec.loss_series.push_back(step_loss);
        } catch (const std::exception& e) {
            throw std::runtime_error("train_stage[" + std::string(stage_name(cfg.stage)) + "] step " +
                                     std::to_string(step) + ": " + e.what());
        }
    }
    return rec;
}

RunRecord pretrain_ar_lm(Parameters& params, TrainConfig cfg, const std::vector<Sample>& train,
                         const Tokenizer& tokenizer) {
    cfg.stage = Stage::FinetuneAR;
    cfg.text_only = true;
    return train_stage(params, cfg, train, tokenizer);
}

PipelineResult pipeline_from_ar_lm(const Parameters& base_ar_lm, const Dataset& data,
                                   const Tokenizer& tokenizer, const TrainConfig& connector_cfg,
                                   const TrainConfig& finetune_cfg, bool run_ar_sibling) {
    PipelineResult res;
    res.stage_sequence = {Stage::ConnectorAR, Stage::FinetuneBlockDiff};

    Parameters post_connector = clone_params(base_ar_lm);
    TrainConfig ccfg = connector_cfg;
    ccfg.stage = Stage::ConnectorAR;
    res.records.push_back(train_stage(post_connector, ccfg, data.train, tokenizer));

    Parameters diffusion = clone_params(post_connector);
    TrainConfig dcfg = finetune_cfg;
    dcfg.stage = Stage::FinetuneBlockDiff;
    res.records.push_back(train_stage(diffusion, dcfg, data.train, tokenizer));

    if (run_ar_sibling) {
        Parameters ar_branch = clone_params(post_connector);
        TrainConfig acfg = finetune_cfg;  // same data, steps, lr and seed as the diffusion branch
        acfg.stage = Stage::FinetuneAR;
        res.records.push_back(train_stage(ar_branch, acfg, data.train, tokenizer));
        res.ar_sibling = std::move(ar_branch);
    }
    res.final_params = std::move(diffusion);
    return res;
}

PipelineResult pipeline_from_ar_vlm(const Parameters& base_ar_vlm, const Dataset& data,
                                    const Tokenizer& tokenizer, const TrainConfig& finetune_cfg) {
    PipelineResult res;
    res.stage_sequence = {Stage::FinetuneBlockDiff};
    Parameters diffusion = clone_params(base_ar_vlm);
    TrainConfig dcfg = finetune_cfg;
    dcfg.stage = Stage::FinetuneBlockDiff;
    res.records.push_back(train_stage(diffusion, dcfg, data.train, tokenizer));
    res.final_params = std::move(diffusion);
    return res;
}

}  // namespace blockdiff
