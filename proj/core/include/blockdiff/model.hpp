#pragma once

#include <string>
#include <utility>
#include <vector>

#include "blockdiff/datagen.hpp"
#include "blockdiff/masks.hpp"
#include "blockdiff/tensor.hpp"

namespace blockdiff {

// One architecture serves the AR, full-diffusion and block-diffusion
// paradigms; only the attention mask fed to forward() differs.
struct ModelConfig {
    int vocab_size = 64;  // includes reserved BOS/EOS/MASK ids
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int max_positions = 512;
    int block_size = 8;  // default decode block D
    int d_vis = 32;
    int n_palette = 8;  // one-hot width of the frozen vision encoder
    int bos_id = 0;
    int eos_id = 1;
    int mask_id = 2;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

enum class TrainableSet {
    ConnectorOnly,
    All,
};

// All learnable tensors. The vision encoder is drawn once at init and never
// receives gradients.
struct Parameters {
    ModelConfig config;

    Tensor tok_embed;  // [V x d], includes the MASK row, trained like any other
    Tensor pos_embed;  // [max_positions x d], learned absolute positions

    struct Layer {
        Tensor ln1_gain, ln2_gain;        // [d]
        Tensor wq, wk, wv, wo;            // [d x d]
        Tensor mlp_w1, mlp_w2;            // [d x 4d], [4d x d]
        Tensor mlp_b1, mlp_b2;            // [4d], [d]
    };
    std::vector<Layer> layers;

    Tensor final_gain;  // [d]
    Tensor head_w;      // [d x V], zero at init so a fresh model is exactly uniform

    Tensor vis_w;                              // [n_palette x d_vis], frozen
    Tensor conn_w1, conn_b1, conn_w2, conn_b2; // two affine layers with GELU between

    // deterministic (name, tensor) walk used by the optimizer, checkpoints
    // and the frozen-set audits
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;

    bool is_connector(const std::string& name) const;
    void set_trainable(TrainableSet set);
};

Parameters init_params(const ModelConfig& config, uint64_t seed);

// Deep copy: fresh tensor nodes with the same data and requires_grad flags.
// Plain Parameters assignment only copies handles, which would alias
// branches of a training pipeline.
Parameters clone_params(const Parameters& params);

// Vision embeddings for a grid, one row per cell in row-major order. The
// frozen encoder maps each cell's color one-hot through a fixed linear
// layer, so there is no cross-cell mixing.
Tensor encode_image(const Parameters& params, const GridImage& image);

// Two-layer connector into model space; the only trainable pieces during the
// connector-pretraining stage.
Tensor connect(const Parameters& params, const Tensor& vision_embeds);

Tensor embed_tokens(const Parameters& params, const std::vector<int>& ids);

// Committed key/value rows for clean (prompt or fully denoised) tokens only.
struct KVCache {
    int committed = 0;
    std::vector<std::vector<float>> k;  // per layer, row-major [committed x d]
    std::vector<std::vector<float>> v;

    void init(const ModelConfig& config);
    // start must equal the current committed length; appending out of order
    // (or the same span twice) is rejected
    void append(const std::vector<std::vector<float>>& fresh_k,
                const std::vector<std::vector<float>>& fresh_v, int rows, int start);
};

struct ForwardOutput {
    Tensor logits;                      // [L x V]
    std::vector<std::vector<float>> k;  // fresh per-layer K for the query span [L x d]
    std::vector<std::vector<float>> v;
};

// Runs the transformer over already-embedded inputs (no position embeddings
// applied yet; they are gathered here from `positions`). With a cache, the
// mask must cover [L x (cache.committed + L)] keys; the cache itself is
// never mutated.
ForwardOutput forward(const Parameters& params, const Tensor& input_embeds,
                      const std::vector<int>& positions, const AttnMask& mask,
                      const KVCache* cache = nullptr);

// Checkpoints: <prefix>.json manifest {tensor name, shape, byte offset} plus
// <prefix>.bin, one blob of little-endian f32; round-trips bit-exactly.
void save_checkpoint(const Parameters& params, const std::string& prefix);
Parameters load_checkpoint(const std::string& prefix);

}  // namespace blockdiff
