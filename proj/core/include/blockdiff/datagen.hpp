#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace blockdiff {

// Four-letter names keep every caption for a given grid size the same length.
inline constexpr std::array<const char*, 8> kColorNames = {"ruby", "jade", "blue", "gold",
                                                           "cyan", "pink", "gray", "teal"};
inline constexpr int kMaxColors = 8;

inline constexpr const char* kDefaultPrompt = "describe the grid";

struct GridImage {
    int size = 0;             // G; cells are a G x G grid
    std::vector<int> cells;   // row-major color indices, each < palette size

    void validate(int n_colors) const;
};

struct Sample {
    GridImage image;
    std::string prompt;
    std::string caption;
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
    int grid_size = 0;
    int n_colors = 0;
};

// Canonical caption: row-major "r,c:colorname;" entries.
std::string caption_for(const GridImage& image);

// Accepts exactly the regular caption grammar (digit+ ',' digit+ ':' color ';')+.
// Used to score well-formedness of model outputs.
bool caption_well_formed(const std::string& text);

// Deterministic dataset; the train/val split keys on a hash of the cell
// bytes, so a grid seen in val can never occur in train.
Dataset gen_dataset(int n, int grid_size, int n_colors, uint64_t seed);

// Byte-level tokenizer over the caption alphabet (lowercase letters, digits,
// ",:; ") plus reserved specials. tokenize never emits a special id;
// detokenize renders specials as '^' (BOS), '$' (EOS), '_' (MASK), all of
// which sit outside the alphabet so malformed output stays detectable.
class Tokenizer {
  public:
    static constexpr int kBosId = 0;
    static constexpr int kEosId = 1;
    static constexpr int kMaskId = 2;

    Tokenizer();

    std::vector<int> tokenize(const std::string& text) const;  // throws on out-of-alphabet bytes
    std::string detokenize(const std::vector<int>& ids) const;
    int vocab_size() const { return 64; }

  private:
    std::array<int, 256> byte_to_id_;
    std::string id_to_byte_;
};

// Line-delimited records {"cells": [...], "prompt": "...", "caption": "..."};
// grid size is the square root of the cell count.
void save_jsonl(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_jsonl(const std::string& path);

}  // namespace blockdiff
