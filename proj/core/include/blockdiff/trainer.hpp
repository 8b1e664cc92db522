#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blockdiff/datagen.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/objectives.hpp"

namespace blockdiff {

enum class Stage {
    ConnectorAR,       // AR objective, connector weights only
    FinetuneAR,        // AR objective, all weights
    FinetuneFullDiff,  // whole-answer diffusion objective, all weights
    FinetuneBlockDiff, // block-diffusion objective, all weights
};

const char* stage_name(Stage stage);
Stage stage_from_string(const std::string& name);

struct TrainConfig {
    Stage stage = Stage::FinetuneBlockDiff;
    double lr = 1e-4;  // connector stage default is 3e-4
    int steps = 100;
    int batch = 8;
    uint64_t seed = 1;
    int block_size = 8;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    NoiseConfig noise;
    BatchReduction reduction = BatchReduction::Mean;
    bool text_only = false;  // captions as plain text, no image (AR-LM pretraining recipe)

    TrainableSet trainable() const {
        return stage == Stage::ConnectorAR ? TrainableSet::ConnectorOnly : TrainableSet::All;
    }
    void validate() const;
};

struct RunRecord {
    Stage stage = Stage::FinetuneBlockDiff;
    std::vector<float> loss_series;  // one entry per step
    std::string checkpoint;          // path prefix, filled by callers that save
    std::map<std::string, double> eval_metrics;
};

// Tokenizes one sample into a training example: prompt = [BOS] + prompt text
// (plus the image unless text_only), answer = caption + EOS padded to a block
// multiple.
Example make_example(const Sample& sample, const Tokenizer& tokenizer, int block_size,
                     bool text_only);

// One backward on a probe batch; throws if any gradient lands outside the
// configured trainable set or none lands inside it.
void audit_gradient_flow(Parameters& params, const TrainConfig& cfg,
                         const std::vector<Example>& probe);

// Runs one stage with AdamW (decoupled weight decay). Only the stage's
// trainable set is updated; everything else stays bit-identical.
// Deterministic for a fixed (config, seed, dataset) and any thread count.
// Throws with the offending step index if the loss goes non-finite.
RunRecord train_stage(Parameters& params, const TrainConfig& cfg,
                      const std::vector<Sample>& train, const Tokenizer& tokenizer);

// AR text pretraining on captions as plain text; produces the toy AR-LM base
// the from-AR-LM pipeline starts from.
RunRecord pretrain_ar_lm(Parameters& params, TrainConfig cfg, const std::vector<Sample>& train,
                         const Tokenizer& tokenizer);

struct PipelineResult {
    std::vector<Stage> stage_sequence;
    std::vector<RunRecord> records;
    Parameters final_params;                // the diffusion-finetuned model
    std::optional<Parameters> ar_sibling;   // paired AR-finetuned branch, same data/steps/seed
};

// Modality shift + paradigm shift from a text-pretrained AR base: connector
// AR-pretraining, then block-diffusion finetuning of everything. When
// run_ar_sibling is set, a FinetuneAR branch is trained from the same
// post-connector state with the same finetune config.
PipelineResult pipeline_from_ar_lm(const Parameters& base_ar_lm, const Dataset& data,
                                   const Tokenizer& tokenizer, const TrainConfig& connector_cfg,
                                   const TrainConfig& finetune_cfg, bool run_ar_sibling);

// Paradigm shift only: a vision-language-aligned AR base needs no extra
// pretraining stage; one block-diffusion finetune over all weights.
PipelineResult pipeline_from_ar_vlm(const Parameters& base_ar_vlm, const Dataset& data,
                                    const Tokenizer& tokenizer, const TrainConfig& finetune_cfg);

}  // namespace blockdiff
