#include "blockdiff/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace blockdiff {

void ModelConfig::validate() const {
    if (vocab_size < 4 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_positions < 1 ||
        block_size < 1 || d_vis < 1 || n_palette < 1) {
        throw std::invalid_argument("ModelConfig: non-positive field");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    }
    if (bos_id == eos_id || bos_id == mask_id || eos_id == mask_id) {
        throw std::invalid_argument("ModelConfig: special ids must be distinct");
    }
    if (bos_id >= vocab_size || eos_id >= vocab_size || mask_id >= vocab_size) {
        throw std::invalid_argument("ModelConfig: special ids must be < vocab_size");
    }
}

std::vector<std::pair<std::string, Tensor*>> Parameters::named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_embed", &tok_embed);
    out.emplace_back("pos_embed", &pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& layer = layers[l];
        out.emplace_back(p + "ln1_gain", &layer.ln1_gain);
        out.emplace_back(p + "wq", &layer.wq);
        out.emplace_back(p + "wk", &layer.wk);
        out.emplace_back(p + "wv", &layer.wv);
        out.emplace_back(p + "wo", &layer.wo);
        out.emplace_back(p + "ln2_gain", &layer.ln2_gain);
        out.emplace_back(p + "mlp_w1", &layer.mlp_w1);
        out.emplace_back(p + "mlp_b1", &layer.mlp_b1);
        out.emplace_back(p + "mlp_w2", &layer.mlp_w2);
        out.emplace_back(p + "mlp_b2", &layer.mlp_b2);
    }
    out.emplace_back("final_gain", &final_gain);
    out.emplace_back("head_w", &head_w);
    out.emplace_back("vision.w", &vis_w);
    out.emplace_back("connector.w1", &conn_w1);
    out.emplace_back("connector.b1", &conn_b1);
    out.emplace_back("connector.w2", &conn_w2);
    out.emplace_back("connector.b2", &conn_b2);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> Parameters::named() const {
    auto mut = const_cast<Parameters*>(this)->named();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) {
        out.emplace_back(name, t);
    }
    return out;
}

bool Parameters::is_connector(const std::string& name) const {
    return name.rfind("connector.", 0) == 0;
}

void Parameters::set_trainable(TrainableSet set) {
    for (auto& [name, t] : named()) {
        if (name == "vision.w") {
            t->set_requires_grad(false);  // frozen unconditionally
        } else if (set == TrainableSet::ConnectorOnly) {
            t->set_requires_grad(is_connector(name));
        } else {
            t->set_requires_grad(true);
        }
    }
}

Parameters init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const int d = config.d_model;
    const int v = config.vocab_size;
    const float emb_std = 1.0f / std::sqrt(static_cast<float>(d));

    Parameters p;
    p.config = config;
    p.tok_embed = Tensor::randn({v, d}, rng, emb_std, true);
    p.pos_embed = Tensor::randn({config.max_positions, d}, rng, emb_std, true);
    for (int l = 0; l < config.n_layers; ++l) {
        Parameters::Layer layer;
        const float proj_std = 1.0f / std::sqrt(static_cast<float>(d));
        layer.ln1_gain = Tensor::full({d}, 1.0f, true);
        layer.wq = Tensor::randn({d, d}, rng, proj_std, true);
        layer.wk = Tensor::randn({d, d}, rng, proj_std, true);
        layer.wv = Tensor::randn({d, d}, rng, proj_std, true);
        layer.wo = Tensor::randn({d, d}, rng, proj_std, true);
        layer.ln2_gain = Tensor::full({d}, 1.0f, true);
        layer.mlp_w1 = Tensor::randn({d, 4 * d}, rng, proj_std, true);
        layer.mlp_b1 = Tensor::zeros({4 * d}, true);
        layer.mlp_w2 = Tensor::randn({4 * d, d}, rng, 1.0f / std::sqrt(4.0f * d), true);
        layer.mlp_b2 = Tensor::zeros({d}, true);
        p.layers.push_back(std::move(layer));
    }
    p.final_gain = Tensor::full({d}, 1.0f, true);
    // zero head: a fresh model is exactly uniform over the vocabulary
    p.head_w = Tensor::zeros({d, v}, true);

    p.vis_w = Tensor::randn({config.n_palette, config.d_vis}, rng,
                            1.0f / std::sqrt(static_cast<float>(config.n_palette)), false);
    p.conn_w1 = Tensor::randn({config.d_vis, d}, rng, 1.0f / std::sqrt(static_cast<float>(config.d_vis)), true);
    p.conn_b1 = Tensor::zeros({d}, true);
    p.conn_w2 = Tensor::randn({d, d}, rng, 1.0f / std::sqrt(static_cast<float>(d)), true);
    p.conn_b2 = Tensor::zeros({d}, true);
    return p;
}

Parameters clone_params(const Parameters& params) {
    Parameters out = init_params(params.config, 0);
    auto src = params.named();
    auto dst = out.named();
    for (size_t i = 0; i < src.size(); ++i) {
        dst[i].second->data_mut() = src[i].second->data();
        dst[i].second->set_requires_grad(src[i].second->requires_grad());
    }
    return out;
}

Tensor encode_image(const Parameters& params, const GridImage& image) {
    image.validate(params.config.n_palette);
    const int cells = image.size * image.size;
    if (cells > params.config.max_positions) {
        throw std::invalid_argument("encode_image: grid exceeds the position budget");
    }
    // one-hot gather: row per cell, no cross-cell mixing
    return embedding(params.vis_w, image.cells);
}

Tensor connect(const Parameters& params, const Tensor& vision_embeds) {
    if (vision_embeds.rank() != 2 || vision_embeds.cols() != params.config.d_vis) {
        throw std::invalid_argument("connect: input width must equal d_vis");
    }
    Tensor h = gelu(add(matmul(vision_embeds, params.conn_w1), params.conn_b1));
    return add(matmul(h, params.conn_w2), params.conn_b2);
}

Tensor embed_tokens(const Parameters& params, const std::vector<int>& ids) {
    return embedding(params.tok_embed, ids);
}

void KVCache::init(const ModelConfig& config) {
    committed = 0;
    k.assign(config.n_layers, {});
    v.assign(config.n_layers, {});
}

void KVCache::append(const std::vector<std::vector<float>>& fresh_k,
                     const std::vector<std::vector<float>>& fresh_v, int rows, int start) {
    if (start != committed) {
        throw std::runtime_error("KVCache: append at position " + std::to_string(start) +
                                 " but committed length is " + std::to_string(committed));
    }
    if (fresh_k.size() != k.size() || fresh_v.size() != v.size()) {
        throw std::invalid_argument("KVCache: layer count mismatch");
    }
    for (size_t l = 0; l < k.size(); ++l) {
        k[l].insert(k[l].end(), fresh_k[l].begin(), fresh_k[l].end());
        v[l].insert(v[l].end(), fresh_v[l].begin(), fresh_v[l].end());
    }
    committed += rows;
}

ForwardOutput forward(const Parameters& params, const Tensor& input_embeds,
                      const std::vector<int>& positions, const AttnMask& mask,
                      const KVCache* cache) {
    const ModelConfig& cfg = params.config;
    const int L = input_embeds.rows();
    const int d = cfg.d_model;
    if (input_embeds.cols() != d) {
        throw std::invalid_argument("forward: embedding width must equal d_model");
    }
    if (static_cast<int>(positions.size()) != L) {
        throw std::invalid_argument("forward: one position index per row required");
    }
    for (int pos : positions) {
        if (pos < 0 || pos >= cfg.max_positions) {
            throw std::out_of_range("forward: position index exceeds max_positions");
        }
    }
    const int cache_len = cache ? cache->committed : 0;
    if (mask.n_query != L || mask.n_key != cache_len + L) {
        throw std::invalid_argument("forward: mask must be [L x (cache_len + L)]");
    }

    const int nh = cfg.n_heads;
    const int hd = cfg.head_dim();
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

    ForwardOutput out;
    out.k.resize(cfg.n_layers);
    out.v.resize(cfg.n_layers);

    Tensor h = add(input_embeds, embedding(params.pos_embed, positions));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& layer = params.layers[l];
        Tensor a_in = rmsnorm(h, layer.ln1_gain);
        Tensor q = matmul(a_in, layer.wq);
        Tensor k_new = matmul(a_in, layer.wk);
        Tensor v_new = matmul(a_in, layer.wv);
        out.k[l] = k_new.data();
        out.v[l] = v_new.data();

        Tensor k_all = k_new;
        Tensor v_all = v_new;
        if (cache && cache_len > 0) {
            Tensor ck = Tensor::from_data({cache_len, d}, cache->k[l]);
            Tensor cv = Tensor::from_data({cache_len, d}, cache->v[l]);
            k_all = concat_rows({ck, k_new});
            v_all = concat_rows({cv, v_new});
        }

        std::vector<Tensor> head_ctx;
        head_ctx.reserve(nh);
        for (int hh = 0; hh < nh; ++hh) {
            Tensor qh = slice_cols(q, hh * hd, (hh + 1) * hd);
            Tensor kh = slice_cols(k_all, hh * hd, (hh + 1) * hd);
            Tensor vh = slice_cols(v_all, hh * hd, (hh + 1) * hd);
            Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
            Tensor probs = masked_softmax(scores, mask);
            head_ctx.push_back(matmul(probs, vh));
        }
        Tensor ctx = nh == 1 ? head_ctx[0] : concat_cols(head_ctx);
        h = add(h, matmul(ctx, layer.wo));

        Tensor m_in = rmsnorm(h, layer.ln2_gain);
        Tensor mid = gelu(add(matmul(m_in, layer.mlp_w1), layer.mlp_b1));
        h = add(h, add(matmul(mid, layer.mlp_w2), layer.mlp_b2));
    }
    out.logits = matmul(rmsnorm(h, params.final_gain), params.head_w);
    return out;
}

// ---- checkpoint -------------------------------------------------------------

static void write_f32_le(std::ofstream& out, const std::vector<float>& data) {
    for (float f : data) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        const uint8_t b[4] = {static_cast<uint8_t>(bits), static_cast<uint8_t>(bits >> 8),
                              static_cast<uint8_t>(bits >> 16), static_cast<uint8_t>(bits >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
}

static std::vector<float> read_f32_le(std::ifstream& in, size_t count) {
    std::vector<float> data(count);
    std::vector<uint8_t> raw(count * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) {
        throw std::runtime_error("checkpoint: blob truncated");
    }
    for (size_t i = 0; i < count; ++i) {
        const uint32_t bits = static_cast<uint32_t>(raw[4 * i]) | (static_cast<uint32_t>(raw[4 * i + 1]) << 8) |
                              (static_cast<uint32_t>(raw[4 * i + 2]) << 16) |
                              (static_cast<uint32_t>(raw[4 * i + 3]) << 24);
        std::memcpy(&data[i], &bits, 4);
    }
    return data;
}

static nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                          {"max_positions", c.max_positions}, {"block_size", c.block_size},
                          {"d_vis", c.d_vis},           {"n_palette", c.n_palette},
                          {"bos_id", c.bos_id},         {"eos_id", c.eos_id},
                          {"mask_id", c.mask_id}};
}

static ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size");
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.max_positions = j.at("max_positions");
    c.block_size = j.at("block_size");
    c.d_vis = j.at("d_vis");
    c.n_palette = j.at("n_palette");
    c.bos_id = j.at("bos_id");
    c.eos_id = j.at("eos_id");
    c.mask_id = j.at("mask_id");
    return c;
}

void save_checkpoint(const Parameters& params, const std::string& prefix) {
    nlohmann::json manifest;
    manifest["format"] = "blockdiff-ckpt-v1";
    manifest["config"] = config_to_json(params.config);
    manifest["blob"] = prefix.substr(prefix.find_last_of('/') + 1) + ".bin";

    std::ofstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) {
        throw std::runtime_error("save_checkpoint: cannot open " + prefix + ".bin");
    }
    size_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : params.named()) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t->shape();
        entry["offset"] = offset;
        entry["size"] = t->numel() * 4;
        tensors.push_back(entry);
        write_f32_le(blob, t->data());
        offset += t->numel() * 4;
    }
    manifest["tensors"] = tensors;

    std::ofstream mf(prefix + ".json", std::ios::binary);
    if (!mf) {
        throw std::runtime_error("save_checkpoint: cannot open " + prefix + ".json");
    }
    mf << manifest.dump(2) << '\n';
}

Parameters load_checkpoint(const std::string& prefix) {
    std::ifstream mf(prefix + ".json", std::ios::binary);
    if (!mf) {
        throw std::runtime_error("load_checkpoint: cannot open " + prefix + ".json");
    }
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format") != "blockdiff-ckpt-v1") {
        throw std::runtime_error("load_checkpoint: unknown checkpoint format");
    }
    const ModelConfig cfg = config_from_json(manifest.at("config"));
    Parameters p = init_params(cfg, 0);

    const std::string dir = prefix.find_last_of('/') == std::string::npos
                                ? std::string()
                                : prefix.substr(0, prefix.find_last_of('/') + 1);
    std::ifstream blob(dir + manifest.at("blob").get<std::string>(), std::ios::binary);
    if (!blob) {
        throw std::runtime_error("load_checkpoint: cannot open blob");
    }

    auto named = p.named();
    size_t cursor = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name");
        Tensor* target = nullptr;
        for (auto& [n, t] : named) {
            if (n == name) {
                target = t;
                break;
            }
        }
        if (!target) {
            throw std::runtime_error("load_checkpoint: unknown tensor " + name);
        }
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (shape != target->shape()) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        }
        const size_t offset = entry.at("offset");
        if (offset != cursor) {
            blob.seekg(static_cast<std::streamoff>(offset));
        }
        target->data_mut() = read_f32_le(blob, target->numel());
        cursor = offset + target->numel() * 4;
    }
    return p;
}

}  // namespace blockdiff
