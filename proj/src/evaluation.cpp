#include "alignlab/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace alignlab {

PromptTemplate::PromptTemplate(std::string p) : pattern(std::move(p)) {
    const auto first = pattern.find("{}");
    if (first == std::string::npos || pattern.find("{}", first + 1) != std::string::npos) {
        throw ConfigError("prompt template must contain exactly one {} placeholder");
    }
}

std::string PromptTemplate::apply(const std::string& name) const {
    std::string out = pattern;
    out.replace(out.find("{}"), 2, name);
    return out;
}

nlohmann::json RetrievalResult::to_json() const {
    nlohmann::json j;
    for (const auto& [rank, value] : tr_at) j["tr@" + std::to_string(rank)] = value;
    for (const auto& [rank, value] : ir_at) j["ir@" + std::to_string(rank)] = value;
    j["mean_tr"] = mean_tr;
    j["mean_ir"] = mean_ir;
    return j;
}

nlohmann::json ZeroShotResult::to_json() const {
    nlohmann::json j;
    for (const auto& [k, value] : accuracy_at) j["top" + std::to_string(k)] = value;
    return j;
}

nlohmann::json SplitEvaluation::to_json() const {
    nlohmann::json j = retrieval.to_json();
    for (const auto& [k, value] : zero_shot.accuracy_at) j["top" + std::to_string(k)] = value;
    return j;
}

namespace {

constexpr std::array<int, 3> kRanks = {1, 5, 10};

// 1-based rank of the ground-truth candidate under descending score with
// lower-index tie preference.
int rank_of(std::span<const double> scores, std::size_t truth) {
    int better = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j == truth) continue;
        if (scores[j] > scores[truth] || (scores[j] == scores[truth] && j < truth)) {
            ++better;
        }
    }
    return better + 1;
}

}  // namespace

RetrievalResult retrieval_from_similarity(const std::vector<double>& similarity, std::size_t n,
                                          const std::vector<int>& pair_index) {
    if (similarity.size() != n * n) {
        throw ShapeError("retrieval: similarity matrix is not " + std::to_string(n) + "x" + std::to_string(n));
    }
    if (pair_index.size() != n) {
        throw DataError("retrieval: pair index has " + std::to_string(pair_index.size()) + " entries for " +
                        std::to_string(n) + " queries");
    }
    std::vector<int> inverse(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        const int j = pair_index[i];
        if (j < 0 || static_cast<std::size_t>(j) >= n || inverse[static_cast<std::size_t>(j)] != -1) {
            throw DataError("retrieval: pair index is not a bijection (duplicate or out-of-range id)");
        }
        inverse[static_cast<std::size_t>(j)] = static_cast<int>(i);
    }

    RetrievalResult result;
    std::vector<int> tr_ranks(n), ir_ranks(n);
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) {
        tr_ranks[i] = rank_of({similarity.data() + i * n, n}, static_cast<std::size_t>(pair_index[i]));
    }
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) column[i] = similarity[i * n + j];
        ir_ranks[j] = rank_of(column, static_cast<std::size_t>(inverse[j]));
    }

    for (int rank : kRanks) {
        const auto recall = [&](const std::vector<int>& ranks) {
            std::int64_t hits = 0;
            for (int r : ranks) hits += r <= rank;
            return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
        };
        result.tr_at[rank] = recall(tr_ranks);
        result.ir_at[rank] = recall(ir_ranks);
    }
    result.mean_tr = (result.tr_at[1] + result.tr_at[5] + result.tr_at[10]) / 3.0;
    result.mean_ir = (result.ir_at[1] + result.ir_at[5] + result.ir_at[10]) / 3.0;
    return result;
}

RetrievalResult retrieval(const Tensor& image_embeddings, const Tensor& text_embeddings,
                          const std::vector<int>& pair_index) {
    if (image_embeddings.rank() != 2 || text_embeddings.rank() != 2 ||
        image_embeddings.dim(0) != text_embeddings.dim(0) || image_embeddings.dim(1) != text_embeddings.dim(1)) {
        throw ShapeError("retrieval: embeddings disagree: " + shape_str(image_embeddings.shape()) + " vs " +
                         shape_str(text_embeddings.shape()));
    }
    NoGradGuard no_grad;
    const Tensor s = matmul_nt(image_embeddings, text_embeddings);
    const auto values = s.values();
    return retrieval_from_similarity(std::vector<double>(values.begin(), values.end()),
                                     static_cast<std::size_t>(image_embeddings.dim(0)), pair_index);
}

// --------------------------------------------------------------------------
// Zero-shot classification
// --------------------------------------------------------------------------

ZeroShotResult zero_shot_classify(DualEncoder& model, const Tensor& images,
                                  const std::vector<std::string>& class_names, const std::vector<int>& labels,
                                  const PromptTemplate& prompt, const TokenVocab& vocab,
                                  const std::vector<int>& ks) {
    if (class_names.empty()) {
        throw ContractError("zero_shot_classify: at least one class is required");
    }
    const std::size_t classes = class_names.size();
    for (int k : ks) {
        if (k < 1 || static_cast<std::size_t>(k) > classes) {
            throw ContractError("zero_shot_classify: top-" + std::to_string(k) + " requested with " +
                                std::to_string(classes) + " classes");
        }
    }
    if (static_cast<std::int64_t>(labels.size()) != images.dim(0)) {
        throw ContractError("zero_shot_classify: one label per image required");
    }

    NoGradGuard no_grad;
    std::vector<std::vector<std::int32_t>> prompts;
    prompts.reserve(classes);
    for (const std::string& name : class_names) {
        prompts.push_back(tokenize(prompt.apply(name), vocab, model.preset().text.max_seq_len));
    }
    Tensor class_embeddings = model.project_text(model.encode_text(prompts));
    Tensor image_embeddings = model.project_image(model.encode_image(images));
    Tensor scores = matmul_nt(image_embeddings, class_embeddings);  // [images, classes]

    const std::int64_t n = images.dim(0);
    std::map<int, std::int64_t> hits;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::span<const double> row(scores.values().data() + i * static_cast<std::int64_t>(classes), classes);
        const int rank = rank_of(row, static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]));
        for (int k : ks) hits[k] += rank <= k;
    }
    Tape::current().clear();

    ZeroShotResult result;
    for (int k : ks) {
        result.accuracy_at[k] = 100.0 * static_cast<double>(hits[k]) / static_cast<double>(n);
    }
    return result;
}

// --------------------------------------------------------------------------
// Corpus-level helpers
// --------------------------------------------------------------------------

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> out(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

}  // namespace

Tensor embed_images(DualEncoder& model, std::span<const PairRecord> records, const CorpusSpec& spec,
                    int batch_size) {
    NoGradGuard no_grad;
    const std::vector<std::size_t> all = iota_indices(records.size());
    std::vector<double> out;
    std::int64_t dim = 0;
    for (std::size_t at = 0; at < all.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t count = std::min(static_cast<std::size_t>(batch_size), all.size() - at);
        const std::span<const std::size_t> chunk(all.data() + at, count);
        Tensor embeddings = model.project_image(model.encode_image(batch_pixels(records, chunk, spec)));
        dim = embeddings.dim(1);
        out.insert(out.end(), embeddings.values().begin(), embeddings.values().end());
        Tape::current().clear();
    }
    return Tensor::from_values({static_cast<std::int64_t>(records.size()), dim}, std::move(out));
}

Tensor embed_captions(DualEncoder& model, std::span<const PairRecord> records, const TokenVocab& vocab,
                      int batch_size) {
    NoGradGuard no_grad;
    const std::vector<std::size_t> all = iota_indices(records.size());
    std::vector<double> out;
    std::int64_t dim = 0;
    for (std::size_t at = 0; at < all.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t count = std::min(static_cast<std::size_t>(batch_size), all.size() - at);
        const std::span<const std::size_t> chunk(all.data() + at, count);
        const auto tokens = batch_tokens(records, chunk, vocab, model.preset().text.max_seq_len);
        Tensor embeddings = model.project_text(model.encode_text(tokens));
        dim = embeddings.dim(1);
        out.insert(out.end(), embeddings.values().begin(), embeddings.values().end());
        Tape::current().clear();
    }
    return Tensor::from_values({static_cast<std::int64_t>(records.size()), dim}, std::move(out));
}

SplitEvaluation evaluate_split(DualEncoder& model, std::span<const PairRecord> records, const Corpus& corpus,
                               const PromptTemplate& prompt) {
    if (records.empty()) {
        throw DataError("evaluate_split: empty split");
    }
    SplitEvaluation evaluation;

    Tensor image_embeddings = embed_images(model, records, corpus.spec);
    Tensor text_embeddings = embed_captions(model, records, corpus.vocab);
    std::vector<int> identity(records.size());
    std::iota(identity.begin(), identity.end(), 0);
    evaluation.retrieval = retrieval(image_embeddings, text_embeddings, identity);

    std::vector<std::string> class_names;
    std::vector<int> labels(records.size());
    class_names.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        class_names.push_back(records[i].caption);
        labels[i] = static_cast<int>(i);
    }
    const std::vector<std::size_t> all = iota_indices(records.size());
    Tensor pixels = batch_pixels(records, all, corpus.spec);
    // tiny splits cannot support top-5
    const std::vector<int> ks = records.size() >= 5 ? std::vector<int>{1, 5} : std::vector<int>{1};
    evaluation.zero_shot = zero_shot_classify(model, pixels, class_names, labels, prompt, corpus.vocab, ks);
    return evaluation;
}

}  // namespace alignlab
