#include "magus/condition.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

namespace magus {
namespace {

using nlohmann::json;

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor seeded_normal(at::Generator& gen, std::vector<int64_t> sizes, double scale) {
    return torch::randn(sizes, gen, kF64) * scale;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) {
        return 0;
    }
    std::size_t count = 0;
    for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + 1)) {
        ++count;
    }
    return count;
}

std::vector<std::string> string_list(const json& j, const char* key) {
    if (!j.contains(key)) {
        return {};
    }
    return j.at(key).get<std::vector<std::string>>();
}

}  // namespace

int64_t PromptEmbedding::num_valid() const {
    return valid_mask.sum().item<int64_t>();
}

bool PromptEmbedding::equals(const PromptEmbedding& other) const {
    return torch::equal(sentence, other.sentence) && torch::equal(sequence, other.sequence) &&
           torch::equal(pooled, other.pooled) && torch::equal(valid_mask, other.valid_mask);
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    for (const char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            if (!current.empty()) {
                out.push_back(std::move(current));
                current.clear();
            }
        } else if (std::isalnum(c) || c == '-' || c == '_') {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) {
        out.push_back(std::move(current));
    }
    return out;
}

ToyEncoderConfig ToyEncoderConfig::defaults() {
    ToyEncoderConfig config;
    std::set<std::string> words{"<pad>"};
    const auto bank = CaptionBank::defaults();
    for (const auto& t : bank.templates) {
        for (auto& token : tokenize(t)) {
            if (token != "key" && token != "mood" && token != "genre" && token != "timbre") {
                words.insert(token);
            }
        }
    }
    for (const auto* list : {&bank.moods, &bank.genres, &bank.timbres}) {
        for (const auto& w : *list) {
            words.insert(lower(w));
        }
    }
    config.vocabulary.assign(words.begin(), words.end());
    return config;
}

std::string ToyEncoderConfig::to_json() const {
    json j;
    j["vocabulary"] = vocabulary;
    j["max_length"] = dims.max_length;
    j["sentence_dim"] = dims.sentence_dim;
    j["sequence_tokens"] = dims.sequence_tokens;
    j["sequence_dim"] = dims.sequence_dim;
    j["pooled_dim"] = dims.pooled_dim;
    j["token_weight"] = token_weight;
    j["position_scale"] = position_scale;
    j["seed"] = seed;
    return j.dump();
}

ToyEncoderConfig ToyEncoderConfig::from_json(std::string_view text) {
    const auto j = json::parse(text);
    ToyEncoderConfig c;
    c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    c.dims.max_length = j.at("max_length").get<int>();
    c.dims.sentence_dim = j.at("sentence_dim").get<int>();
    c.dims.sequence_tokens = j.at("sequence_tokens").get<int>();
    c.dims.sequence_dim = j.at("sequence_dim").get<int>();
    c.dims.pooled_dim = j.at("pooled_dim").get<int>();
    c.token_weight = j.at("token_weight").get<double>();
    c.position_scale = j.at("position_scale").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

ToyTextEncoder::ToyTextEncoder(ToyEncoderConfig config) : config_(std::move(config)) {
    const auto& d = config_.dims;
    if (config_.vocabulary.empty()) {
        throw ConfigurationError("toy encoder needs a non-empty vocabulary");
    }
    if (d.max_length < 1 || d.sentence_dim < 1 || d.sequence_tokens < 1 || d.sequence_dim < 1 || d.pooled_dim < 1) {
        throw ParameterError("encoder dimensions must be positive");
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.seed);
    const auto V = static_cast<int64_t>(config_.vocabulary.size());
    table_ = seeded_normal(gen, {V, d.sentence_dim}, 1.0);
    positions_ = seeded_normal(gen, {d.max_length, d.sentence_dim}, config_.position_scale);
    pool_proj_ = seeded_normal(gen, {d.pooled_dim, d.sentence_dim}, 1.0 / std::sqrt(d.sentence_dim));
    seq_proj_ = seeded_normal(gen, {d.sequence_dim, d.sentence_dim}, 1.0 / std::sqrt(d.sentence_dim));
    seq_pool_proj_ = seeded_normal(gen, {d.sequence_dim, d.pooled_dim}, 1.0 / std::sqrt(d.pooled_dim));
    seq_queries_ = seeded_normal(gen, {d.sequence_tokens, d.sequence_dim}, 1.0);
}

int64_t ToyTextEncoder::index_of(const std::string& token) const {
    const auto& v = config_.vocabulary;
    const auto it = std::find(v.begin(), v.end(), token);
    if (it == v.end()) {
        throw VocabularyError(token);
    }
    return it - v.begin();
}

bool ToyTextEncoder::knows(const std::string& token) const {
    const auto& v = config_.vocabulary;
    return std::find(v.begin(), v.end(), token) != v.end();
}

torch::Tensor ToyTextEncoder::token_embedding(const std::string& token) const {
    return table_[index_of(token)].clone();
}

PromptEmbedding ToyTextEncoder::encode(std::span<const std::string> tokens) const {
    const auto& d = config_.dims;
    const auto n = static_cast<int64_t>(tokens.size());
    if (n > d.max_length) {
        throw ParameterError("prompt has " + std::to_string(n) + " tokens; the encoder accepts at most " +
                             std::to_string(d.max_length));
    }
    std::vector<int64_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        ids.push_back(index_of(t));
    }

    PromptEmbedding e;
    e.sentence = torch::zeros({d.max_length, d.sentence_dim}, kF64);
    e.valid_mask = torch::zeros({d.max_length}, torch::kBool);
    torch::Tensor mean = torch::zeros({d.sentence_dim}, kF64);
    torch::Tensor valid_rows = torch::zeros({0, d.sentence_dim}, kF64);
    if (n > 0) {
        const auto raw = table_.index_select(0, torch::tensor(ids, torch::kLong)) + positions_.slice(0, 0, n);
        mean = raw.mean(0);
        valid_rows = config_.token_weight * raw + (1.0 - config_.token_weight) * mean.unsqueeze(0);
        e.sentence.slice(0, 0, n).copy_(valid_rows);
        e.valid_mask.slice(0, 0, n).fill_(true);
    }
    e.pooled = torch::mv(pool_proj_, mean);
    const auto projected = torch::cat({torch::mm(valid_rows, seq_proj_.t()), torch::mv(seq_pool_proj_, e.pooled).unsqueeze(0)});
    const auto weights = torch::softmax(torch::mm(seq_queries_, projected.t()) / std::sqrt(double(d.sequence_dim)), 1);
    e.sequence = torch::mm(weights, projected);
    return e;
}

PromptEmbedding embed_prompt(std::span<const std::string> tokens, const TextEncoder& encoder) {
    return encoder.encode(tokens);
}

PromptEmbedding embed_prompt(std::string_view text, const TextEncoder& encoder) {
    const auto tokens = tokenize(text);
    return encoder.encode(tokens);
}

torch::Tensor pooled_sentence(const PromptEmbedding& e) {
    const auto n = e.num_valid();
    if (n == 0) {
        return torch::zeros({e.sentence_dim()}, kF64);
    }
    const auto mask = e.valid_mask.to(torch::kFloat64).unsqueeze(1);
    return (e.sentence * mask).sum(0) / static_cast<double>(n);
}

std::string EditDirection::to_json() const {
    json j;
    j["source_keyword"] = source_keyword;
    j["target_keyword"] = target_keyword;
    j["num_captions"] = num_captions;
    j["dim"] = delta.defined() ? delta.numel() : 0;
    j["norm"] = delta.defined() ? delta.norm().item<double>() : 0.0;
    return j.dump(2);
}

CaptionBank CaptionBank::defaults() {
    CaptionBank bank;
    bank.templates = {
        "A {mood} {genre} music with {KEY} performance.",
        "A {mood} {genre} piece featuring {KEY}.",
        "{KEY} plays a {mood} {genre} tune.",
        "A {genre} track with a {mood} {KEY} melody.",
        "The {KEY} sounds {mood} in this {genre} song.",
        "A {mood} {genre} song played on {KEY}.",
    };
    bank.moods = {"upbeat", "relaxing", "peaceful"};
    bank.genres = {"jazz", "classical", "rock"};
    bank.timbres = {"timbreA", "timbreB", "timbreC"};
    return bank;
}

CaptionBank CaptionBank::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigurationError("caption bank '" + path.string() + "' is not valid JSON: " + e.what());
    }
    CaptionBank bank;
    bank.templates = string_list(j, "templates");
    bank.moods = string_list(j, "moods");
    bank.genres = string_list(j, "genres");
    bank.timbres = string_list(j, "timbres");
    bank.validate();
    return bank;
}

std::string CaptionBank::to_json() const {
    json j;
    j["templates"] = templates;
    j["moods"] = moods;
    j["genres"] = genres;
    j["timbres"] = timbres;
    return j.dump(2);
}

void CaptionBank::save(const std::filesystem::path& path) const {
    write_file_atomic(path, to_json());
}

void CaptionBank::validate() const {
    if (templates.empty()) {
        throw ConfigurationError("caption bank has no templates");
    }
    for (const auto& t : templates) {
        if (count_occurrences(t, "{KEY}") != 1) {
            throw ConfigurationError("template must contain exactly one {KEY} slot: '" + t + "'");
        }
        if ((t.find("{mood}") != std::string::npos && moods.empty()) ||
            (t.find("{genre}") != std::string::npos && genres.empty()) ||
            (t.find("{timbre}") != std::string::npos && timbres.empty())) {
            throw ConfigurationError("template uses a slot with an empty vocabulary: '" + t + "'");
        }
    }
}

std::optional<std::string> CaptionBank::category_of(std::string_view word) const {
    const auto w = lower(word);
    auto in = [&](const std::vector<std::string>& list) {
        return std::any_of(list.begin(), list.end(), [&](const std::string& x) { return lower(x) == w; });
    };
    if (in(moods)) return "mood";
    if (in(genres)) return "genre";
    if (in(timbres)) return "timbre";
    return std::nullopt;
}

std::vector<std::string> synthesize_captions(const std::string& keyword, const CaptionBank& bank, int n,
                                             std::uint64_t seed) {
    if (n < 1) {
        throw ParameterError("caption count must be >= 1");
    }
    if (keyword.empty()) {
        throw ParameterError("keyword must be non-empty");
    }
    bank.validate();
    std::mt19937_64 rng(seed);
    auto pick = [&](const std::vector<std::string>& list) -> const std::string& {
        std::vector<const std::string*> allowed;
        for (const auto& x : list) {
            if (lower(x) != lower(keyword)) {
                allowed.push_back(&x);
            }
        }
        if (allowed.empty()) {
            throw ConfigurationError("no slot value other than the keyword '" + keyword + "'");
        }
        return *allowed[rng() % allowed.size()];
    };
    auto fill = [&]() {
        std::string out = bank.templates[rng() % bank.templates.size()];
        const std::pair<const char*, const std::vector<std::string>*> slots[] = {
            {"{mood}", &bank.moods}, {"{genre}", &bank.genres}, {"{timbre}", &bank.timbres}};
        for (const auto& [slot, list] : slots) {
            for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot)) {
                out.replace(pos, std::string_view(slot).size(), pick(*list));
            }
        }
        out.replace(out.find("{KEY}"), 5, keyword);
        return out;
    };

    constexpr int kAttempts = 32;
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (int i = 0; i < n; ++i) {
        std::string caption = fill();
        for (int attempt = 1; attempt < kAttempts && seen.count(caption) != 0; ++attempt) {
            caption = fill();
        }
        seen.insert(caption);
        out.push_back(std::move(caption));
    }
    return out;
}

EditDirection compute_delta(std::span<const std::string> captions_src, std::span<const std::string> captions_tgt,
                            const TextEncoder& encoder) {
    if (captions_src.empty() || captions_tgt.empty()) {
        throw ParameterError("compute_delta needs non-empty caption sets");
    }
    auto set_mean = [&](std::span<const std::string> captions) {
        auto acc = torch::zeros({encoder.dims().sentence_dim}, kF64);
        for (const auto& c : captions) {
            acc += pooled_sentence(embed_prompt(std::string_view(c), encoder));
        }
        return acc / static_cast<double>(captions.size());
    };
    EditDirection d;
    d.delta = set_mean(captions_tgt) - set_mean(captions_src);
    d.num_captions = static_cast<int>(captions_src.size());
    return d;
}

PromptEmbedding apply_edit(const PromptEmbedding& e, const EditDirection& direction, const PromptEmbedding& target,
                           const torch::Tensor& position_mask) {
    if (!direction.delta.defined() || direction.delta.dim() != 1 || direction.delta.size(0) != e.sentence_dim()) {
        throw ShapeError("edit direction length must equal the sentence dimension " +
                         std::to_string(e.sentence_dim()));
    }
    if (target.sequence.sizes() != e.sequence.sizes() || target.sentence.sizes() != e.sentence.sizes()) {
        throw ShapeError("target embedding dimensions differ from the source embedding");
    }
    const auto mask = position_mask.defined() ? position_mask : e.valid_mask;
    if (mask.dim() != 1 || mask.size(0) != e.max_length()) {
        throw ShapeError("position mask must have one entry per sentence position");
    }
    PromptEmbedding out;
    out.sentence = e.sentence + mask.to(torch::kFloat64).unsqueeze(1) * direction.delta.to(torch::kFloat64).unsqueeze(0);
    out.sequence = target.sequence.clone();
    out.pooled = target.pooled.clone();
    out.valid_mask = e.valid_mask.clone();
    return out;
}

void export_captions(const std::filesystem::path& path, std::span<const std::string> captions) {
    std::string out;
    for (const auto& c : captions) {
        out += c;
        out += '\n';
    }
    write_file_atomic(path, out);
}

std::string swap_keyword(std::string_view prompt, std::string_view from, std::string_view to) {
    const auto hay = lower(prompt);
    const auto needle = lower(from);
    auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; };
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
        const bool left_ok = pos == 0 || !is_word(hay[pos - 1]);
        const bool right_ok = pos + needle.size() >= hay.size() || !is_word(hay[pos + needle.size()]);
        if (left_ok && right_ok) {
            std::string out(prompt);
            out.replace(pos, needle.size(), to);
            return out;
        }
    }
    throw ParameterError("keyword '" + std::string(from) + "' not found in prompt '" + std::string(prompt) + "'");
}

}  // namespace magus
