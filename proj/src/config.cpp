#include "alignlab/config.hpp"

#include <fstream>
#include <sstream>

namespace alignlab {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream stream(value);
    std::string item;
    while (std::getline(stream, item, ',')) {
        const std::string trimmed = trim(item);
        if (!trimmed.empty()) out.push_back(trimmed);
    }
    return out;
}

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("bad boolean '" + value + "' for " + key);
}

template <typename T>
T parse_number(const std::string& value, const std::string& key) {
    std::istringstream stream(value);
    T out{};
    std::string rest;
    if (!(stream >> out) || (stream >> rest)) {
        throw ConfigError("bad numeric value '" + value + "' for " + key);
    }
    return out;
}

template <typename Map, typename Fn>
void with_key(const Map& values, const std::string& key, Fn&& fn) {
    const auto it = values.find(key);
    if (it != values.end()) fn(it->second);
}

}  // namespace

std::map<std::string, std::string> parse_ini(const std::string& text) {
    std::map<std::string, std::string> out;
    std::string section;
    std::istringstream stream(text);
    std::string line;
    int line_number = 0;
    while (std::getline(stream, line)) {
        ++line_number;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.resize(comment);
        const std::string content = trim(line);
        if (content.empty()) continue;
        if (content.front() == '[') {
            if (content.back() != ']') {
                throw ConfigError("bad section header on line " + std::to_string(line_number));
            }
            section = trim(content.substr(1, content.size() - 2));
            continue;
        }
        const auto eq = content.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key = value on line " + std::to_string(line_number));
        }
        const std::string key = trim(content.substr(0, eq));
        const std::string value = trim(content.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("empty key on line " + std::to_string(line_number));
        }
        out[section.empty() ? key : section + "." + key] = value;
    }
    return out;
}

std::map<std::string, std::string> parse_ini_file(const std::filesystem::path& path) {
    std::ifstream file(path);
    if (!file) {
        throw ConfigError("cannot read config file '" + path.string() + "'");
    }
    std::stringstream buffer;
    buffer << file.rdbuf();
    return parse_ini(buffer.str());
}

void TrainConfig::validate() const {
    if (batch_size < 2) {
        throw ConfigError("batch size must be at least 2 (the loss needs an in-batch negative)");
    }
    if (epochs < 1) {
        throw ConfigError("epochs must be positive");
    }
    if (resolved_warmup_epochs() > epochs) {
        throw ConfigError("warmup epochs exceed total epochs");
    }
    if (base_lr <= 0.0 || final_lr <= 0.0) {
        throw ConfigError("learning rates must be positive");
    }
    if (out_dir.empty()) {
        throw ConfigError("output directory is required");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {
        {"preset", preset},
        {"size", size},
        {"batch_size", batch_size},
        {"epochs", epochs},
        {"warmup_epochs", resolved_warmup_epochs()},
        {"base_lr", base_lr},
        {"final_lr", final_lr},
        {"weight_decay", weight_decay},
        {"seed", seed},
        {"paper_literal", paper_literal},
        {"checkpoint_every", checkpoint_every},
        {"out_dir", out_dir},
        {"corpus_dir", corpus_dir},
    };
}

TrainConfig TrainConfig::from_ini(const std::map<std::string, std::string>& values) {
    TrainConfig config;
    with_key(values, "train.preset", [&](const std::string& v) { config.preset = v; });
    with_key(values, "train.size", [&](const std::string& v) { config.size = v; });
    with_key(values, "train.batch_size", [&](const std::string& v) { config.batch_size = parse_number<int>(v, "train.batch_size"); });
    with_key(values, "train.epochs", [&](const std::string& v) { config.epochs = parse_number<int>(v, "train.epochs"); });
    with_key(values, "train.warmup_epochs", [&](const std::string& v) { config.warmup_epochs = parse_number<int>(v, "train.warmup_epochs"); });
    with_key(values, "train.base_lr", [&](const std::string& v) { config.base_lr = parse_number<double>(v, "train.base_lr"); });
    with_key(values, "train.final_lr", [&](const std::string& v) { config.final_lr = parse_number<double>(v, "train.final_lr"); });
    with_key(values, "train.weight_decay", [&](const std::string& v) { config.weight_decay = parse_number<double>(v, "train.weight_decay"); });
    with_key(values, "train.seed", [&](const std::string& v) { config.seed = parse_number<std::uint64_t>(v, "train.seed"); });
    with_key(values, "train.paper_literal", [&](const std::string& v) { config.paper_literal = parse_bool(v, "train.paper_literal"); });
    with_key(values, "train.checkpoint_every", [&](const std::string& v) { config.checkpoint_every = parse_number<int>(v, "train.checkpoint_every"); });
    with_key(values, "train.out", [&](const std::string& v) { config.out_dir = v; });
    with_key(values, "train.corpus_dir", [&](const std::string& v) { config.corpus_dir = v; });
    return config;
}

CorpusSpec corpus_spec_from_ini(const std::map<std::string, std::string>& values) {
    CorpusSpec spec;
    with_key(values, "corpus.shapes", [&](const std::string& v) { spec.shapes = split_list(v); });
    with_key(values, "corpus.colors", [&](const std::string& v) { spec.colors = split_list(v); });
    with_key(values, "corpus.sizes", [&](const std::string& v) { spec.sizes = split_list(v); });
    with_key(values, "corpus.positions", [&](const std::string& v) { spec.positions = split_list(v); });
    with_key(values, "corpus.caption_template", [&](const std::string& v) { spec.caption_template = v; });
    with_key(values, "corpus.image_size", [&](const std::string& v) { spec.image_size = parse_number<int>(v, "corpus.image_size"); });
    with_key(values, "corpus.n_pairs", [&](const std::string& v) { spec.n_pairs = parse_number<int>(v, "corpus.n_pairs"); });
    with_key(values, "corpus.seed", [&](const std::string& v) { spec.seed = parse_number<std::uint64_t>(v, "corpus.seed"); });
    return spec;
}

}  // namespace alignlab
