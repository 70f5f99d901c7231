#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignlab/corpus.hpp"
#include "alignlab/encoder.hpp"

namespace alignlab {

// Single-placeholder prompt wrapper for natural-language classification.
struct PromptTemplate {
    std::string pattern = "a photo of {}";

    PromptTemplate() = default;
    explicit PromptTemplate(std::string p);
    std::string apply(const std::string& name) const;
};

struct RetrievalResult {
    std::map<int, double> tr_at;  // rank -> recall in percent, ranks {1,5,10}
    std::map<int, double> ir_at;
    double mean_tr = 0.0;
    double mean_ir = 0.0;

    nlohmann::json to_json() const;
};

// Bidirectional recall at {1,5,10} from unit-normalized embeddings.
// pair_index[i] is the matching text row of image i and must be a
// permutation; ties rank the lower candidate index first.
RetrievalResult retrieval(const Tensor& image_embeddings, const Tensor& text_embeddings,
                          const std::vector<int>& pair_index);

// Same metric straight from a similarity matrix (row = image query).
RetrievalResult retrieval_from_similarity(const std::vector<double>& similarity, std::size_t n,
                                          const std::vector<int>& pair_index);

struct ZeroShotResult {
    std::map<int, double> accuracy_at;  // k -> percent

    double top1() const { return accuracy_at.at(1); }
    double top5() const { return accuracy_at.at(5); }
    nlohmann::json to_json() const;
};

// Embeds one templated prompt per class and assigns each image the argmax
// class; ties break toward the lower class index. Throws ContractError when
// a requested top-k exceeds the class count.
ZeroShotResult zero_shot_classify(DualEncoder& model, const Tensor& images,
                                  const std::vector<std::string>& class_names, const std::vector<int>& labels,
                                  const PromptTemplate& prompt, const TokenVocab& vocab,
                                  const std::vector<int>& ks = {1, 5});

// Batched embedding helpers (no gradients recorded).
Tensor embed_images(DualEncoder& model, std::span<const PairRecord> records, const CorpusSpec& spec,
                    int batch_size = 64);
Tensor embed_captions(DualEncoder& model, std::span<const PairRecord> records, const TokenVocab& vocab,
                      int batch_size = 64);

// Retrieval over a corpus split with identity ground-truth pairing, plus
// zero-shot classification with the split's captions as class names.
struct SplitEvaluation {
    RetrievalResult retrieval;
    ZeroShotResult zero_shot;

    nlohmann::json to_json() const;
};

SplitEvaluation evaluate_split(DualEncoder& model, std::span<const PairRecord> records, const Corpus& corpus,
                               const PromptTemplate& prompt = PromptTemplate());

}  // namespace alignlab
