#include "blockdiff/datagen.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "blockdiff/rng.hpp"

namespace blockdiff {

void GridImage::validate(int n_colors) const {
    if (size < 1 || static_cast<int>(cells.size()) != size * size) {
        throw std::invalid_argument("GridImage: cells must form a size x size grid");
    }
    for (int c : cells) {
        if (c < 0 || c >= n_colors) {
            throw std::invalid_argument("GridImage: color index outside palette");
        }
    }
}

std::string caption_for(const GridImage& image) {
    std::string out;
    const int g = image.size;
    out.reserve(static_cast<size_t>(g) * g * 10);
    for (int r = 0; r < g; ++r) {
        for (int c = 0; c < g; ++c) {
            out += std::to_string(r);
            out.push_back(',');
            out += std::to_string(c);
            out.push_back(':');
            out += kColorNames[image.cells[static_cast<size_t>(r) * g + c]];
            out.push_back(';');
        }
    }
    return out;
}

bool caption_well_formed(const std::string& text) {
    size_t i = 0;
    const size_t n = text.size();
    auto eat_digits = [&]() {
        size_t start = i;
        while (i < n && text[i] >= '0' && text[i] <= '9') {
            ++i;
        }
        return i > start;
    };
    auto eat_color = [&]() {
        for (const char* name : kColorNames) {
            const size_t len = std::char_traits<char>::length(name);
            if (text.compare(i, len, name) == 0) {
                i += len;
                return true;
            }
        }
        return false;
    };
    int entries = 0;
    while (i < n) {
        if (!eat_digits() || i >= n || text[i] != ',') {
            return false;
        }
        ++i;
        if (!eat_digits() || i >= n || text[i] != ':') {
            return false;
        }
        ++i;
        if (!eat_color() || i >= n || text[i] != ';') {
            return false;
        }
        ++i;
        ++entries;
    }
    return entries > 0;
}

static uint64_t fnv1a(const std::vector<int>& cells) {
    uint64_t h = 14695981039346656037ull;
    for (int c : cells) {
        h ^= static_cast<uint64_t>(static_cast<uint8_t>(c));
        h *= 1099511628211ull;
    }
    return h;
}

Dataset gen_dataset(int n, int grid_size, int n_colors, uint64_t seed) {
    if (n < 1 || grid_size < 1) {
        throw std::invalid_argument("gen_dataset: n and grid_size must be >= 1");
    }
    if (n_colors < 2 || n_colors > kMaxColors) {
        throw std::invalid_argument("gen_dataset: palette must have 2..8 colors");
    }
    Rng rng(seed);
    Dataset ds;
    ds.grid_size = grid_size;
    ds.n_colors = n_colors;
    for (int i = 0; i < n; ++i) {
        GridImage img;
        img.size = grid_size;
        img.cells.resize(static_cast<size_t>(grid_size) * grid_size);
        for (auto& c : img.cells) {
            c = rng.uniform_int(n_colors);
        }
        Sample s;
        s.caption = caption_for(img);
        s.prompt = kDefaultPrompt;
        s.image = std::move(img);
        if (fnv1a(s.image.cells) % 5 == 0) {
            ds.val.push_back(std::move(s));
        } else {
            ds.train.push_back(std::move(s));
        }
    }
    return ds;
}

static const char* kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789,:; ";

Tokenizer::Tokenizer() {
    byte_to_id_.fill(-1);
    id_to_byte_.assign(3, '\0');  // specials occupy ids 0..2
    int id = 3;
    for (const char* p = kAlphabet; *p; ++p, ++id) {
        byte_to_id_[static_cast<uint8_t>(*p)] = id;
        id_to_byte_.push_back(*p);
    }
}

std::vector<int> Tokenizer::tokenize(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char ch : text) {
        const int id = byte_to_id_[static_cast<uint8_t>(ch)];
        if (id < 0) {
            throw std::invalid_argument(std::string("tokenize: byte outside alphabet: '") + ch + "'");
        }
        ids.push_back(id);
    }
    return ids;
}

std::string Tokenizer::detokenize(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id == kBosId) {
            out.push_back('^');
        } else if (id == kEosId) {
            out.push_back('$');
        } else if (id == kMaskId) {
            out.push_back('_');
        } else if (id >= 3 && id < static_cast<int>(id_to_byte_.size())) {
            out.push_back(id_to_byte_[static_cast<size_t>(id)]);
        } else if (id >= 0 && id < vocab_size()) {
            out.push_back('_');  // reserved id with no byte assigned
        } else {
            throw std::out_of_range("detokenize: id outside vocabulary");
        }
    }
    return out;
}

void save_jsonl(const std::vector<Sample>& samples, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_jsonl: cannot open " + path);
    }
    for (const auto& s : samples) {
        nlohmann::json j;
        j["cells"] = s.image.cells;
        j["prompt"] = s.prompt;
        j["caption"] = s.caption;
        out << j.dump() << '\n';
    }
}

std::vector<Sample> load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_jsonl: cannot open " + path);
    }
    std::vector<Sample> samples;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line);
        Sample s;
        s.image.cells = j.at("cells").get<std::vector<int>>();
        const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(s.image.cells.size()))));
        if (static_cast<size_t>(g) * g != s.image.cells.size()) {
            throw std::runtime_error("load_jsonl: cell count is not a perfect square");
        }
        s.image.size = g;
        s.prompt = j.at("prompt").get<std::string>();
        s.caption = j.at("caption").get<std::string>();
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace blockdiff
