#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alignlab/tensor.hpp"

namespace alignlab {

// Attribute-factored synthetic pairs: a colored shape rendered at a quadrant
// position, captioned from a fixed template. Captions determine the attribute
// tuple and vice versa, so alignment quality is directly measurable.
struct CorpusSpec {
    std::vector<std::string> shapes = {"circle", "square", "triangle", "cross"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple", "orange", "white", "cyan"};
    std::vector<std::string> sizes = {"tiny", "small", "big", "huge"};
    std::vector<std::string> positions = {"top left", "top right", "bottom left", "bottom right"};
    std::string caption_template = "a {size} {color} {shape} in the {position}";
    int image_size = 32;
    int channels = 3;
    int n_pairs = 512;
    std::uint64_t seed = 7;

    std::int64_t combinations() const {
        return static_cast<std::int64_t>(shapes.size()) * static_cast<std::int64_t>(colors.size()) *
               static_cast<std::int64_t>(sizes.size()) * static_cast<std::int64_t>(positions.size());
    }
};

struct AttributeTuple {
    int shape = 0;
    int color = 0;
    int size = 0;
    int position = 0;

    bool operator==(const AttributeTuple&) const = default;
};

struct PairRecord {
    int id = 0;
    AttributeTuple attrs;
    std::string caption;
    std::vector<std::uint8_t> pixels;  // channels * H * W
};

struct TokenVocab {
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kCls = 1;
    static constexpr std::int32_t kUnk = 2;

    std::map<std::string, std::int32_t> word_to_id;
    std::vector<std::string> id_to_word;  // index == id, reserved slots included

    std::int32_t id_of(const std::string& word) const;
    std::int32_t size() const { return static_cast<std::int32_t>(id_to_word.size()); }
};

struct Corpus {
    CorpusSpec spec;
    TokenVocab vocab;
    std::vector<PairRecord> records;  // already shuffled by the corpus seed

    std::int64_t holdout_count() const { return static_cast<std::int64_t>(records.size()) / 8; }
    std::span<const PairRecord> train_split() const;
    std::span<const PairRecord> eval_split() const;  // last 12.5%, never trained on
};

Corpus generate(const CorpusSpec& spec);

std::vector<std::int32_t> tokenize(const std::string& text, const TokenVocab& vocab, int max_seq_len);
std::string detokenize(std::span<const std::int32_t> ids, const TokenVocab& vocab);

// Epoch-wise shuffled full batches (the trailing short batch is dropped);
// a pure function of (seed, epoch).
std::vector<std::vector<std::size_t>> batch_indices(std::size_t corpus_size, std::size_t batch_size,
                                                    std::uint64_t seed, std::int64_t epoch);

// [b, channels, H, W], per-channel scaled to [-1, 1].
Tensor batch_pixels(std::span<const PairRecord> records, std::span<const std::size_t> indices,
                    const CorpusSpec& spec);
std::vector<std::vector<std::int32_t>> batch_tokens(std::span<const PairRecord> records,
                                                    std::span<const std::size_t> indices, const TokenVocab& vocab,
                                                    int max_seq_len);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace alignlab
