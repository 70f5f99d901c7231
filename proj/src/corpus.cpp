#include "alignlab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "alignlab/checkpoint.hpp"
#include "alignlab/rng.hpp"

namespace alignlab {

namespace {

struct Rgb {
    std::uint8_t r, g, b;
};

const std::map<std::string, Rgb>& color_table() {
    static const std::map<std::string, Rgb> table = {
        {"red", {220, 50, 40}},    {"green", {60, 200, 70}},   {"blue", {50, 90, 220}},
        {"yellow", {230, 220, 50}}, {"purple", {160, 60, 200}}, {"orange", {240, 150, 40}},
        {"white", {240, 240, 240}}, {"cyan", {60, 220, 220}},   {"pink", {240, 130, 180}},
        {"brown", {140, 90, 50}},
    };
    return table;
}

constexpr std::uint8_t kBackground = 40;

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) {
                words.push_back(current);
                current.clear();
            }
        } else {
            current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!current.empty()) {
        words.push_back(current);
    }
    return words;
}

std::string substitute(const std::string& tmpl, const std::string& key, const std::string& value) {
    const std::string placeholder = "{" + key + "}";
    const std::size_t at = tmpl.find(placeholder);
    if (at == std::string::npos) {
        throw GenerationError("caption template is missing the {" + key + "} placeholder");
    }
    std::string out = tmpl;
    out.replace(at, placeholder.size(), value);
    return out;
}

std::string caption_for(const CorpusSpec& spec, const AttributeTuple& attrs) {
    std::string caption = spec.caption_template;
    caption = substitute(caption, "size", spec.sizes[static_cast<std::size_t>(attrs.size)]);
    caption = substitute(caption, "color", spec.colors[static_cast<std::size_t>(attrs.color)]);
    caption = substitute(caption, "shape", spec.shapes[static_cast<std::size_t>(attrs.shape)]);
    caption = substitute(caption, "position", spec.positions[static_cast<std::size_t>(attrs.position)]);
    return caption;
}

bool inside_shape(const std::string& shape, std::int64_t dx, std::int64_t dy, std::int64_t radius) {
    if (shape == "circle") {
        return dx * dx + dy * dy <= radius * radius;
    }
    if (shape == "square") {
        return std::abs(dx) <= radius && std::abs(dy) <= radius;
    }
    if (shape == "triangle") {
        // upward-pointing: full width at the base, apex at the top
        if (dy < -radius || dy > radius) return false;
        const std::int64_t half_width = (dy + radius) / 2;
        return std::abs(dx) <= half_width;
    }
    if (shape == "cross") {
        const std::int64_t arm = std::max<std::int64_t>(1, radius / 3);
        return (std::abs(dx) <= arm && std::abs(dy) <= radius) || (std::abs(dy) <= arm && std::abs(dx) <= radius);
    }
    throw GenerationError("no renderer for shape '" + shape + "'");
}

std::vector<std::uint8_t> render(const CorpusSpec& spec, const AttributeTuple& attrs) {
    const std::int64_t n = spec.image_size;
    const auto color_it = color_table().find(spec.colors[static_cast<std::size_t>(attrs.color)]);
    if (color_it == color_table().end()) {
        throw GenerationError("no rgb value for color '" + spec.colors[static_cast<std::size_t>(attrs.color)] + "'");
    }
    const Rgb rgb = color_it->second;

    // quadrant centers in (col, row); position order matches spec.positions
    const std::int64_t q = n / 4;
    static const std::array<std::pair<int, int>, 4> quadrant = {{{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
    if (attrs.position < 0 || attrs.position >= 4) {
        throw GenerationError("positions beyond the four quadrants are not renderable");
    }
    const std::int64_t cx = q + 2 * q * quadrant[static_cast<std::size_t>(attrs.position)].first;
    const std::int64_t cy = q + 2 * q * quadrant[static_cast<std::size_t>(attrs.position)].second;
    // radii stay strictly inside the quadrant and large enough that every
    // shape renders distinctly
    const std::int64_t radius =
        std::max<std::int64_t>(2, (q - 1) * (attrs.size + 1) / static_cast<std::int64_t>(spec.sizes.size()));

    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(spec.channels * n * n), kBackground);
    const std::string& shape = spec.shapes[static_cast<std::size_t>(attrs.shape)];
    for (std::int64_t y = 0; y < n; ++y) {
        for (std::int64_t x = 0; x < n; ++x) {
            if (!inside_shape(shape, x - cx, y - cy, radius)) continue;
            pixels[static_cast<std::size_t>(0 * n * n + y * n + x)] = rgb.r;
            pixels[static_cast<std::size_t>(1 * n * n + y * n + x)] = rgb.g;
            pixels[static_cast<std::size_t>(2 * n * n + y * n + x)] = rgb.b;
        }
    }
    return pixels;
}

TokenVocab build_vocab(const CorpusSpec& spec) {
    std::set<std::string> words;
    const auto absorb = [&words](const std::string& text) {
        for (const std::string& w : split_words(text)) words.insert(w);
    };
    std::string template_literals = spec.caption_template;
    for (const char* key : {"{size}", "{color}", "{shape}", "{position}"}) {
        const std::size_t at = template_literals.find(key);
        if (at != std::string::npos) template_literals.replace(at, std::string(key).size(), " ");
    }
    absorb(template_literals);
    for (const auto& list : {spec.shapes, spec.colors, spec.sizes, spec.positions}) {
        for (const std::string& item : list) absorb(item);
    }

    TokenVocab vocab;
    vocab.id_to_word = {"<pad>", "<cls>", "<unk>"};
    for (const std::string& w : words) {
        vocab.word_to_id[w] = static_cast<std::int32_t>(vocab.id_to_word.size());
        vocab.id_to_word.push_back(w);
    }
    return vocab;
}

}  // namespace

std::int32_t TokenVocab::id_of(const std::string& word) const {
    const auto it = word_to_id.find(word);
    return it == word_to_id.end() ? kUnk : it->second;
}

std::span<const PairRecord> Corpus::train_split() const {
    return {records.data(), records.size() - static_cast<std::size_t>(holdout_count())};
}

std::span<const PairRecord> Corpus::eval_split() const {
    const auto holdout = static_cast<std::size_t>(holdout_count());
    return {records.data() + (records.size() - holdout), holdout};
}

Corpus generate(const CorpusSpec& spec) {
    if (spec.image_size <= 0 || spec.image_size % 4 != 0) {
        throw GenerationError("image size must be a positive multiple of 4");
    }
    if (spec.channels != 3) {
        throw GenerationError("renderer emits rgb images only");
    }
    if (spec.n_pairs <= 0) {
        throw GenerationError("n_pairs must be positive");
    }
    if (spec.n_pairs > spec.combinations()) {
        throw GenerationError("requested " + std::to_string(spec.n_pairs) + " unique pairs from " +
                              std::to_string(spec.combinations()) + " attribute combinations");
    }

    std::vector<AttributeTuple> combos;
    combos.reserve(static_cast<std::size_t>(spec.combinations()));
    for (std::size_t s = 0; s < spec.shapes.size(); ++s)
        for (std::size_t c = 0; c < spec.colors.size(); ++c)
            for (std::size_t z = 0; z < spec.sizes.size(); ++z)
                for (std::size_t p = 0; p < spec.positions.size(); ++p)
                    combos.push_back({static_cast<int>(s), static_cast<int>(c), static_cast<int>(z),
                                      static_cast<int>(p)});
    Rng rng(mix_seed(spec.seed, 0));
    rng.shuffle(combos);
    combos.resize(static_cast<std::size_t>(spec.n_pairs));

    Corpus corpus;
    corpus.spec = spec;
    corpus.vocab = build_vocab(spec);
    corpus.records.reserve(combos.size());
    for (std::size_t i = 0; i < combos.size(); ++i) {
        PairRecord record;
        record.id = static_cast<int>(i);
        record.attrs = combos[i];
        record.caption = caption_for(spec, combos[i]);
        record.pixels = render(spec, combos[i]);
        corpus.records.push_back(std::move(record));
    }
    return corpus;
}

std::vector<std::int32_t> tokenize(const std::string& text, const TokenVocab& vocab, int max_seq_len) {
    std::vector<std::int32_t> ids;
    ids.reserve(static_cast<std::size_t>(max_seq_len));
    ids.push_back(TokenVocab::kCls);
    for (const std::string& word : split_words(text)) {
        ids.push_back(vocab.id_of(word));
    }
    ids.resize(static_cast<std::size_t>(max_seq_len), TokenVocab::kPad);
    return ids;
}

std::string detokenize(std::span<const std::int32_t> ids, const TokenVocab& vocab) {
    std::string out;
    for (std::int32_t id : ids) {
        if (id == TokenVocab::kPad || id == TokenVocab::kCls) continue;
        if (!out.empty()) out.push_back(' ');
        if (id < 0 || id >= vocab.size()) {
            out += "<unk>";
        } else {
            out += vocab.id_to_word[static_cast<std::size_t>(id)];
        }
    }
    return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t corpus_size, std::size_t batch_size,
                                                    std::uint64_t seed, std::int64_t epoch) {
    if (batch_size == 0 || batch_size > corpus_size) {
        throw ContractError("batch size " + std::to_string(batch_size) + " for corpus of " +
                            std::to_string(corpus_size));
    }
    std::vector<std::size_t> order(corpus_size);
    for (std::size_t i = 0; i < corpus_size; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at + batch_size <= corpus_size; at += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(at + batch_size));
    }
    return batches;
}

Tensor batch_pixels(std::span<const PairRecord> records, std::span<const std::size_t> indices,
                    const CorpusSpec& spec) {
    const std::int64_t per_image = static_cast<std::int64_t>(spec.channels) * spec.image_size * spec.image_size;
    std::vector<double> values(static_cast<std::size_t>(static_cast<std::int64_t>(indices.size()) * per_image));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& pixels = records[indices[i]].pixels;
        for (std::int64_t j = 0; j < per_image; ++j) {
            values[i * static_cast<std::size_t>(per_image) + static_cast<std::size_t>(j)] =
                static_cast<double>(pixels[static_cast<std::size_t>(j)]) / 127.5 - 1.0;
        }
    }
    return Tensor::from_values(
        {static_cast<std::int64_t>(indices.size()), spec.channels, spec.image_size, spec.image_size},
        std::move(values));
}

std::vector<std::vector<std::int32_t>> batch_tokens(std::span<const PairRecord> records,
                                                    std::span<const std::size_t> indices, const TokenVocab& vocab,
                                                    int max_seq_len) {
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(indices.size());
    for (std::size_t index : indices) {
        out.push_back(tokenize(records[index].caption, vocab, max_seq_len));
    }
    return out;
}

// --------------------------------------------------------------------------
// Directory layout: spec.json, vocab.json, index.jsonl, images/NNNNN.tns
// --------------------------------------------------------------------------

namespace {

nlohmann::json spec_to_json(const CorpusSpec& spec) {
    return {
        {"shapes", spec.shapes},       {"colors", spec.colors},
        {"sizes", spec.sizes},         {"positions", spec.positions},
        {"caption_template", spec.caption_template},
        {"image_size", spec.image_size}, {"channels", spec.channels},
        {"n_pairs", spec.n_pairs},     {"seed", spec.seed},
    };
}

CorpusSpec spec_from_json(const nlohmann::json& j) {
    CorpusSpec spec;
    spec.shapes = j.at("shapes").get<std::vector<std::string>>();
    spec.colors = j.at("colors").get<std::vector<std::string>>();
    spec.sizes = j.at("sizes").get<std::vector<std::string>>();
    spec.positions = j.at("positions").get<std::vector<std::string>>();
    spec.caption_template = j.at("caption_template");
    spec.image_size = j.at("image_size");
    spec.channels = j.at("channels");
    spec.n_pairs = j.at("n_pairs");
    spec.seed = j.at("seed");
    return spec;
}

std::string image_name(int id) {
    char buffer[16];
    std::snprintf(buffer, sizeof(buffer), "%05d.tns", id);
    return buffer;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");

    std::ofstream spec_file(dir / "spec.json", std::ios::trunc);
    spec_file << spec_to_json(corpus.spec).dump(2) << "\n";

    std::ofstream vocab_file(dir / "vocab.json", std::ios::trunc);
    vocab_file << nlohmann::json{{"words", corpus.vocab.id_to_word}}.dump(2) << "\n";

    std::ofstream index(dir / "index.jsonl", std::ios::trunc);
    if (!index) {
        throw FormatError("cannot write corpus index in '" + dir.string() + "'");
    }
    for (const PairRecord& record : corpus.records) {
        const std::string image = "images/" + image_name(record.id);
        const nlohmann::json line = {
            {"id", record.id},
            {"caption", record.caption},
            {"attributes",
             {{"shape", corpus.spec.shapes[static_cast<std::size_t>(record.attrs.shape)]},
              {"color", corpus.spec.colors[static_cast<std::size_t>(record.attrs.color)]},
              {"size", corpus.spec.sizes[static_cast<std::size_t>(record.attrs.size)]},
              {"position", corpus.spec.positions[static_cast<std::size_t>(record.attrs.position)]}}},
            {"image", image},
        };
        index << line.dump() << "\n";

        Container container;
        container.metadata = {{"format", "image"}, {"id", record.id}};
        container.entries.emplace(
            "pixels", StoredTensor::from_bytes_u8({corpus.spec.channels, corpus.spec.image_size, corpus.spec.image_size},
                                                  record.pixels));
        write_container(dir / image, container);
    }
}

namespace {

int attr_index(const std::vector<std::string>& values, const std::string& value, const char* what) {
    const auto it = std::find(values.begin(), values.end(), value);
    if (it == values.end()) {
        throw DataError("unknown " + std::string(what) + " '" + value + "' in corpus index");
    }
    return static_cast<int>(it - values.begin());
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream spec_file(dir / "spec.json");
    if (!spec_file) {
        throw FormatError("no corpus at '" + dir.string() + "' (missing spec.json)");
    }
    nlohmann::json spec_json;
    spec_file >> spec_json;

    Corpus corpus;
    corpus.spec = spec_from_json(spec_json);
    corpus.vocab = build_vocab(corpus.spec);

    std::ifstream index(dir / "index.jsonl");
    if (!index) {
        throw FormatError("missing index.jsonl in '" + dir.string() + "'");
    }
    std::set<int> seen_ids;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        PairRecord record;
        record.id = j.at("id");
        if (!seen_ids.insert(record.id).second) {
            throw DataError("duplicate pair id " + std::to_string(record.id));
        }
        record.caption = j.at("caption");
        const auto& attrs = j.at("attributes");
        record.attrs.shape = attr_index(corpus.spec.shapes, attrs.at("shape"), "shape");
        record.attrs.color = attr_index(corpus.spec.colors, attrs.at("color"), "color");
        record.attrs.size = attr_index(corpus.spec.sizes, attrs.at("size"), "size");
        record.attrs.position = attr_index(corpus.spec.positions, attrs.at("position"), "position");

        const Container container = read_container(dir / std::string(j.at("image")));
        const auto it = container.entries.find("pixels");
        if (it == container.entries.end() || it->second.dtype != DType::u8) {
            throw FormatError("image container for pair " + std::to_string(record.id) + " has no u8 pixels entry");
        }
        record.pixels.resize(it->second.raw.size());
        std::memcpy(record.pixels.data(), it->second.raw.data(), it->second.raw.size());
        corpus.records.push_back(std::move(record));
    }
    return corpus;
}

}  // namespace alignlab
