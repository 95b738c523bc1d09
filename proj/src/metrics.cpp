#include "magus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "magus/error.hpp"

namespace magus {

Chromagram chromagram(const LatentClip& clip, int pitch_classes) {
    if (!clip.data.defined() || clip.data.numel() == 0) {
        throw ParameterError("chromagram of an empty clip");
    }
    if (pitch_classes < 1) {
        throw ParameterError("pitch_classes must be positive");
    }
    if (!clip.all_finite()) {
        throw ParameterError("chromagram input contains non-finite values");
    }
    const auto energy = clip.data.to(torch::kFloat64).clamp_min(0.0).sum(0);  // (F, T)
    const auto bins = energy.size(0);
    auto out = torch::zeros({pitch_classes, energy.size(1)}, torch::kFloat64);
    for (int64_t f = 0; f < bins; ++f) {
        out[f % pitch_classes] += energy[f];
    }
    return Chromagram{out};
}

Chromagram audio_chromagram(const torch::Tensor& samples, double sample_rate, const AudioChromaOptions& o) {
    if (!samples.defined() || samples.dim() != 1 || samples.numel() == 0) {
        throw ParameterError("audio chromagram needs a non-empty mono waveform");
    }
    auto x = samples.to(torch::kFloat64);
    if (x.numel() < o.frame_length) {
        x = torch::constant_pad_nd(x, {0, o.frame_length - x.numel()});
    }
    const auto window = torch::hann_window(o.frame_length, torch::kFloat64);
    const auto spec = torch::stft(x, o.frame_length, o.hop_length, o.frame_length, window, /*normalized=*/false,
                                  /*onesided=*/true, /*return_complex=*/true)
                          .abs();  // (bins, frames)
    auto out = torch::zeros({12, spec.size(1)}, torch::kFloat64);
    for (int64_t k = 1; k < spec.size(0); ++k) {
        const double freq = k * sample_rate / o.frame_length;
        if (freq < o.min_frequency) {
            continue;
        }
        const auto midi = static_cast<long>(std::lround(69.0 + 12.0 * std::log2(freq / 440.0)));
        out[((midi % 12) + 12) % 12] += spec[k];
    }
    return Chromagram{out};
}

double chroma_similarity(const Chromagram& a, const Chromagram& b) {
    if (a.energy.sizes() != b.energy.sizes()) {
        throw ShapeError("chromagram shapes differ");
    }
    const auto x = a.energy.to(torch::kFloat64).flatten();
    const auto y = b.energy.to(torch::kFloat64).flatten();
    const double nx = x.norm().item<double>();
    const double ny = y.norm().item<double>();
    if (nx == 0.0 && ny == 0.0) {
        return 1.0;
    }
    if (nx == 0.0 || ny == 0.0) {
        return 0.0;
    }
    const double cosine = torch::dot(x, y).item<double>() / (nx * ny);
    return std::clamp(cosine, 0.0, 1.0);
}

double semantic_similarity(const LatentClip& clip, const std::string& text, const SemanticScorer* scorer) {
    if (scorer == nullptr) {
        throw ConfigurationError("no semantic scorer registered");
    }
    return std::clamp(scorer->score(clip, text), 0.0, 1.0);
}

void EvalReport::finalize() {
    groups.clear();
    overall = GroupSummary{};
    failed = 0;
    auto accumulate = [](GroupSummary& s, const EvalRow& r) {
        ++s.count;
        s.semantic += r.semantic;
        s.chroma += r.chroma;
        s.avg += r.avg;
        for (const auto& [k, v] : r.extras) {
            s.extras[k] += v;
        }
    };
    for (const auto& row : rows) {
        if (row.error) {
            ++failed;
            continue;
        }
        accumulate(groups[row.group], row);
        accumulate(overall, row);
    }
    auto normalize = [](GroupSummary& s) {
        if (s.count == 0) {
            return;
        }
        s.semantic /= s.count;
        s.chroma /= s.count;
        s.avg /= s.count;
        for (auto& [k, v] : s.extras) {
            v /= s.count;
        }
    };
    for (auto& [name, s] : groups) {
        normalize(s);
    }
    normalize(overall);
}

namespace {

nlohmann::json summary_json(const GroupSummary& s) {
    nlohmann::json j;
    j["count"] = s.count;
    j["semantic"] = s.semantic;
    j["chroma"] = s.chroma;
    j["avg"] = s.avg;
    j["extras"] = s.extras;
    return j;
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["schema"] = "magus.eval_report";
    j["version"] = 1;
    j["avg_definition"] = "row mean of (semantic + chroma) / 2, averaged over rows";
    j["config"] = config;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        row["group"] = r.group;
        row["label"] = r.label;
        row["semantic"] = r.semantic;
        row["chroma"] = r.chroma;
        row["avg"] = r.avg;
        row["extras"] = r.extras;
        if (r.error) {
            row["error"] = *r.error;
        }
        j["rows"].push_back(row);
    }
    j["groups"] = nlohmann::json::object();
    for (const auto& [name, s] : groups) {
        j["groups"][name] = summary_json(s);
    }
    j["overall"] = summary_json(overall);
    j["failed"] = failed;
    return j.dump(2);
}

std::string EvalReport::to_csv(char d) const {
    std::ostringstream out;
    out.precision(10);
    out << "group" << d << "label" << d << "semantic" << d << "chroma" << d << "avg" << d << "error\n";
    for (const auto& r : rows) {
        out << r.group << d << r.label << d << r.semantic << d << r.chroma << d << r.avg << d
            << (r.error ? *r.error : "") << '\n';
    }
    return out.str();
}

EvalReport evaluate_batch(std::span<const EvalPair> pairs, const SemanticScorer& scorer, int pitch_classes) {
    if (pairs.empty()) {
        throw ParameterError("evaluate_batch needs at least one pair");
    }
    EvalReport report;
    for (const auto& p : pairs) {
        EvalRow row;
        row.group = p.group;
        row.label = p.label;
        try {
            row.semantic = semantic_similarity(p.edited, p.target_text, &scorer);
            row.chroma = chroma_similarity(chromagram(p.original, pitch_classes), chromagram(p.edited, pitch_classes));
            row.avg = 0.5 * (row.semantic + row.chroma);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        report.rows.push_back(std::move(row));
    }
    report.finalize();
    return report;
}

}  // namespace magus
