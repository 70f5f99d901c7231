#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "alignlab/config.hpp"
#include "alignlab/corpus.hpp"

using namespace alignlab;

namespace {

CorpusSpec small_spec() {
    CorpusSpec spec;
    spec.n_pairs = 64;
    spec.seed = 123;
    return spec;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

// Test-side parser: recover the attribute tuple from a caption.
AttributeTuple parse_caption(const CorpusSpec& spec, const std::string& caption) {
    AttributeTuple attrs{-1, -1, -1, -1};
    const auto find_word = [&caption](const std::string& word) {
        const std::string padded = " " + caption + " ";
        return padded.find(" " + word + " ") != std::string::npos;
    };
    for (std::size_t i = 0; i < spec.shapes.size(); ++i)
        if (find_word(spec.shapes[i])) attrs.shape = static_cast<int>(i);
    for (std::size_t i = 0; i < spec.colors.size(); ++i)
        if (find_word(spec.colors[i])) attrs.color = static_cast<int>(i);
    for (std::size_t i = 0; i < spec.sizes.size(); ++i)
        if (find_word(spec.sizes[i])) attrs.size = static_cast<int>(i);
    for (std::size_t i = 0; i < spec.positions.size(); ++i)
        if (caption.find(spec.positions[i]) != std::string::npos) attrs.position = static_cast<int>(i);
    return attrs;
}

}  // namespace

TEST_CASE("generation is deterministic and exhausts the attribute grid") {
    CorpusSpec spec;  // 4 * 8 * 4 * 4 = 512 combinations
    CHECK(spec.combinations() == 512);
    spec.n_pairs = 512;

    const Corpus first = generate(spec);
    const Corpus second = generate(spec);
    REQUIRE(first.records.size() == 512);
    for (std::size_t i = 0; i < first.records.size(); ++i) {
        CHECK(first.records[i].caption == second.records[i].caption);
        CHECK(first.records[i].pixels == second.records[i].pixels);
        CHECK(first.records[i].attrs == second.records[i].attrs);
    }

    // all attribute tuples distinct, all captions distinct
    std::set<std::string> captions;
    for (const PairRecord& record : first.records) captions.insert(record.caption);
    CHECK(captions.size() == 512);
}

TEST_CASE("captions round-trip to their attribute tuples") {
    const Corpus corpus = generate(small_spec());
    for (const PairRecord& record : corpus.records) {
        const AttributeTuple parsed = parse_caption(corpus.spec, record.caption);
        CHECK(parsed == record.attrs);
    }
}

TEST_CASE("images render the attributes they claim") {
    CorpusSpec spec = small_spec();
    const Corpus corpus = generate(spec);
    const std::int64_t n = spec.image_size;
    for (const PairRecord& record : corpus.records) {
        // some pixels are foreground, and they sit in the right quadrant
        std::int64_t foreground = 0;
        std::int64_t correct_quadrant = 0;
        for (std::int64_t y = 0; y < n; ++y) {
            for (std::int64_t x = 0; x < n; ++x) {
                const bool is_background = record.pixels[static_cast<std::size_t>(y * n + x)] == 40 &&
                                           record.pixels[static_cast<std::size_t>(n * n + y * n + x)] == 40 &&
                                           record.pixels[static_cast<std::size_t>(2 * n * n + y * n + x)] == 40;
                if (is_background) continue;
                ++foreground;
                const int quadrant = (x >= n / 2 ? 1 : 0) + (y >= n / 2 ? 2 : 0);
                correct_quadrant += quadrant == record.attrs.position;
            }
        }
        CHECK(foreground > 0);
        // shapes render strictly inside their quadrant at the default size
        CHECK(correct_quadrant == foreground);
    }
}

TEST_CASE("requesting more unique pairs than combinations fails") {
    CorpusSpec spec;
    spec.n_pairs = 513;
    CHECK_THROWS_AS(generate(spec), GenerationError);
    spec.n_pairs = 0;
    CHECK_THROWS_AS(generate(spec), GenerationError);
}

TEST_CASE("tokenizer basics") {
    const Corpus corpus = generate(small_spec());
    const TokenVocab& vocab = corpus.vocab;

    const auto ids = tokenize("a red circle", vocab, 8);
    REQUIRE(ids.size() == 8);
    CHECK(ids[0] == TokenVocab::kCls);
    CHECK(ids[1] == vocab.word_to_id.at("a"));
    CHECK(ids[2] == vocab.word_to_id.at("red"));
    CHECK(ids[3] == vocab.word_to_id.at("circle"));
    for (std::size_t i = 4; i < 8; ++i) CHECK(ids[i] == TokenVocab::kPad);

    // round trip modulo padding
    CHECK(detokenize(ids, vocab) == "a red circle");

    // unknown words map to unk without changing the length
    const auto with_unk = tokenize("a red zeppelin", vocab, 8);
    CHECK(with_unk[3] == TokenVocab::kUnk);
    CHECK(with_unk.size() == 8);

    // lowercase, whitespace split
    const auto cased = tokenize("A   RED\tcircle", vocab, 8);
    CHECK(cased == ids);

    // truncation to max length
    const auto truncated = tokenize("a red circle in the top left", vocab, 4);
    CHECK(truncated.size() == 4);
}

TEST_CASE("every caption word is in the vocabulary") {
    const Corpus corpus = generate(small_spec());
    for (const PairRecord& record : corpus.records) {
        const auto ids = tokenize(record.caption, corpus.vocab, 16);
        CHECK(std::find(ids.begin(), ids.end(), TokenVocab::kUnk) == ids.end());
    }
}

TEST_CASE("batching is a pure function of seed and epoch") {
    const auto first = batch_indices(100, 16, 7, 3);
    const auto second = batch_indices(100, 16, 7, 3);
    CHECK(first == second);

    const auto other_epoch = batch_indices(100, 16, 7, 4);
    CHECK(first != other_epoch);

    // drops the final short batch, partitions the rest
    CHECK(first.size() == 6);
    std::set<std::size_t> seen;
    for (const auto& batch : first) {
        CHECK(batch.size() == 16);
        seen.insert(batch.begin(), batch.end());
    }
    CHECK(seen.size() == 96);

    CHECK_THROWS_AS(batch_indices(10, 16, 7, 0), ContractError);
}

TEST_CASE("holdout split is the last eighth and is disjoint from training") {
    CorpusSpec spec;
    spec.n_pairs = 512;
    const Corpus corpus = generate(spec);
    CHECK(corpus.holdout_count() == 64);
    CHECK(corpus.train_split().size() == 448);
    CHECK(corpus.eval_split().size() == 64);
    std::set<int> train_ids, eval_ids;
    for (const PairRecord& record : corpus.train_split()) train_ids.insert(record.id);
    for (const PairRecord& record : corpus.eval_split()) eval_ids.insert(record.id);
    for (int id : eval_ids) CHECK(!train_ids.contains(id));
}

TEST_CASE("pixel batches are normalized to [-1, 1]") {
    const Corpus corpus = generate(small_spec());
    const std::vector<std::size_t> indices = {0, 1};
    Tensor batch = batch_pixels(corpus.records, indices, corpus.spec);
    CHECK(batch.shape() == Shape{2, 3, 32, 32});
    for (double v : batch.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("save and load round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "alignlab_test_corpus";
    std::filesystem::remove_all(dir);
    const Corpus corpus = generate(small_spec());
    save_corpus(corpus, dir);

    const Corpus loaded = load_corpus(dir);
    REQUIRE(loaded.records.size() == corpus.records.size());
    for (std::size_t i = 0; i < corpus.records.size(); ++i) {
        CHECK(loaded.records[i].id == corpus.records[i].id);
        CHECK(loaded.records[i].caption == corpus.records[i].caption);
        CHECK(loaded.records[i].attrs == corpus.records[i].attrs);
        CHECK(loaded.records[i].pixels == corpus.records[i].pixels);
    }
    CHECK(loaded.vocab.id_to_word == corpus.vocab.id_to_word);

    // writing again produces byte-identical files
    const auto dir2 = std::filesystem::temp_directory_path() / "alignlab_test_corpus_2";
    std::filesystem::remove_all(dir2);
    save_corpus(corpus, dir2);
    CHECK(slurp(dir / "index.jsonl") == slurp(dir2 / "index.jsonl"));
    CHECK(slurp(dir / "spec.json") == slurp(dir2 / "spec.json"));
    CHECK(slurp(dir / "images/00000.tns") == slurp(dir2 / "images/00000.tns"));

    // duplicate ids are rejected
    std::ofstream index(dir / "index.jsonl", std::ios::app);
    index << R"({"id":0,"caption":"x","attributes":{"shape":"circle","color":"red","size":"tiny","position":"top left"},"image":"images/00000.tns"})" << "\n";
    index.close();
    CHECK_THROWS_AS(load_corpus(dir), DataError);
}

TEST_CASE("corpus spec parses from config text") {
    const auto values = parse_ini(
        "[corpus]\n"
        "n_pairs = 32\n"
        "seed = 9\n"
        "shapes = circle, square\n"
        "image_size = 16\n");
    const CorpusSpec spec = corpus_spec_from_ini(values);
    CHECK(spec.n_pairs == 32);
    CHECK(spec.seed == 9);
    CHECK(spec.shapes == std::vector<std::string>{"circle", "square"});
    CHECK(spec.image_size == 16);
    CHECK(spec.colors.size() == 8);  // untouched default
}
