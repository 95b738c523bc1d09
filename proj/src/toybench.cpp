#include "magus/toybench.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <random>

#include <json.hpp>

#include "magus/condition.hpp"
#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

namespace magus {
namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

int index_in(const std::vector<std::string>& list, const std::string& value) {
    const auto it = std::find(list.begin(), list.end(), value);
    return it == list.end() ? -1 : static_cast<int>(it - list.begin());
}

struct Nearest {
    int index = 0;
    double confidence = 0.0;
};

/// Nearest template by squared distance; confidence = d2 / (d1 + d2) using the
/// two closest distances, 1 when the best match is exact.
Nearest nearest(const std::vector<double>& v, const std::vector<std::vector<double>>& templates) {
    double best = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    int index = 0;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < v.size(); ++k) {
            d += (v[k] - templates[i][k]) * (v[k] - templates[i][k]);
        }
        if (d < best) {
            second = best;
            best = d;
            index = static_cast<int>(i);
        } else if (d < second) {
            second = d;
        }
    }
    double confidence = 1.0;
    if (std::isfinite(second) && best + second > 0.0) {
        confidence = second / (best + second);
    }
    return {index, confidence};
}

std::vector<double> normalized_by_max(std::vector<double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (m > 0.0) {
        for (auto& x : v) x /= m;
    }
    return v;
}

}  // namespace

std::string Attributes::caption() const {
    return "A " + mood + " " + genre + " music with " + timbre + " performance.";
}

AttributeSpace AttributeSpace::defaults() {
    AttributeSpace s;
    s.moods = {"upbeat", "relaxing", "peaceful"};
    s.gates = {{1, 0, 1, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}};
    s.genres = {"jazz", "classical", "rock"};
    s.envelopes = {{1.0, 0.6, 1.0, 0.6, 1.0, 0.6, 1.0, 0.6},
                   {0.6, 0.7, 0.8, 0.9, 1.0, 0.9, 0.8, 0.7},
                   {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0}};
    s.timbres = {"timbreA", "timbreB", "timbreC"};
    s.overtones = {{0.8, 0.4, 0.0}, {0.8, 0.0, 0.4}, {0.4, 0.8, 0.0}};
    return s;
}

void AttributeSpace::validate(const Attributes& a) const {
    if (index_in(moods, a.mood) < 0) throw ParameterError("unknown mood '" + a.mood + "'");
    if (index_in(genres, a.genre) < 0) throw ParameterError("unknown genre '" + a.genre + "'");
    if (index_in(timbres, a.timbre) < 0) throw ParameterError("unknown timbre '" + a.timbre + "'");
}

std::vector<Attributes> AttributeSpace::all() const {
    std::vector<Attributes> out;
    for (const auto& m : moods)
        for (const auto& g : genres)
            for (const auto& t : timbres) out.push_back({m, g, t});
    return out;
}

std::optional<std::string> AttributeSpace::canonical(const std::string& word, const std::string& category) const {
    const auto& list = category == "mood" ? moods : category == "genre" ? genres : timbres;
    for (const auto& x : list) {
        if (lower(x) == lower(word)) return x;
    }
    return std::nullopt;
}

ToyClip generate_clip(const Attributes& a, std::uint64_t melody_seed, const AttributeSpace& space) {
    space.validate(a);
    const int segments = space.segments();
    std::mt19937_64 rng(melody_seed);
    std::vector<int> melody(segments);
    melody[0] = static_cast<int>(rng() % space.pitch_classes);
    for (int s = 1; s < segments; ++s) {
        const int step = static_cast<int>(rng() % 5) - 2;
        melody[s] = ((melody[s - 1] + step) % space.pitch_classes + space.pitch_classes) % space.pitch_classes;
    }

    const auto& gate = space.gates[index_in(space.moods, a.mood)];
    const auto& envelope = space.envelopes[index_in(space.genres, a.genre)];
    const auto& overtone = space.overtones[index_in(space.timbres, a.timbre)];

    auto x = torch::zeros({1, space.freq_bins, space.time_frames}, torch::kFloat64);
    auto acc = x.accessor<double, 3>();
    std::vector<int> frame_pitch(space.time_frames, -1);
    for (int s = 0; s < segments; ++s) {
        for (int f = 0; f < space.segment_frames; ++f) {
            const int frame = s * space.segment_frames + f;
            const double amp = envelope[s] * gate[f];
            if (amp <= 0.0) continue;
            const int p = melody[s];
            frame_pitch[frame] = p;
            acc[0][p][frame] = amp;
            for (std::size_t k = 0; k < overtone.size(); ++k) {
                const int bin = p + space.pitch_classes * static_cast<int>(k + 1);
                if (bin < space.freq_bins && overtone[k] > 0.0) acc[0][bin][frame] = amp * overtone[k];
            }
        }
    }
    return {LatentClip(x), std::move(melody), std::move(frame_pitch)};
}

ProbeResult attribute_probe(const torch::Tensor& spectrogram, const AttributeSpace& space) {
    if (spectrogram.dim() != 3 || spectrogram.size(0) != 1 || spectrogram.size(1) != space.freq_bins ||
        spectrogram.size(2) != space.time_frames) {
        throw ShapeError("attribute_probe expects a (1, " + std::to_string(space.freq_bins) + ", " +
                         std::to_string(space.time_frames) + ") spectrogram");
    }
    const auto x = spectrogram[0].to(torch::kFloat64).clamp_min(0.0).contiguous();
    const auto a = x.accessor<double, 2>();
    const int P = space.pitch_classes;
    const int frames = space.time_frames;

    ProbeResult r;
    std::vector<double> frame_max(frames, 0.0);
    std::vector<int> pitch(frames, 0);
    double global = 0.0;
    for (int t = 0; t < frames; ++t) {
        for (int p = 0; p < P; ++p) {
            if (a[p][t] > frame_max[t]) {
                frame_max[t] = a[p][t];
                pitch[t] = p;
            }
        }
        global = std::max(global, frame_max[t]);
    }
    r.frame_pitch.assign(frames, -1);
    if (global <= 1e-6) {
        r.silence = true;
        r.attributes = {"silence", "silence", "silence"};
        return r;
    }
    std::vector<bool> active(frames);
    for (int t = 0; t < frames; ++t) {
        active[t] = frame_max[t] > 0.25 * global;
        if (active[t]) r.frame_pitch[t] = pitch[t];
    }

    const auto harmonics = space.overtones.front().size();
    std::vector<double> ratios(harmonics, 0.0);
    int active_count = 0;
    for (int t = 0; t < frames; ++t) {
        if (!active[t]) continue;
        ++active_count;
        for (std::size_t k = 0; k < harmonics; ++k) {
            const int bin = pitch[t] + P * static_cast<int>(k + 1);
            if (bin < space.freq_bins) ratios[k] += a[bin][t] / frame_max[t];
        }
    }
    for (auto& v : ratios) v /= active_count;
    const auto timbre = nearest(ratios, space.overtones);

    std::vector<double> pattern(space.segment_frames, 0.0);
    for (int t = 0; t < frames; ++t) {
        if (active[t]) pattern[t % space.segment_frames] += 1.0 / space.segments();
    }
    const auto mood = nearest(pattern, space.gates);

    std::vector<double> envelope(space.segments(), 0.0);
    for (int s = 0; s < space.segments(); ++s) {
        double sum = 0.0;
        int n = 0;
        for (int f = 0; f < space.segment_frames; ++f) {
            const int t = s * space.segment_frames + f;
            if (active[t]) {
                sum += frame_max[t];
                ++n;
            }
        }
        envelope[s] = n > 0 ? sum / n : 0.0;
    }
    std::vector<std::vector<double>> envelope_templates;
    for (const auto& e : space.envelopes) envelope_templates.push_back(normalized_by_max(e));
    const auto genre = nearest(normalized_by_max(envelope), envelope_templates);

    r.attributes = {space.moods[mood.index], space.genres[genre.index], space.timbres[timbre.index]};
    r.mood_confidence = mood.confidence;
    r.genre_confidence = genre.confidence;
    r.timbre_confidence = timbre.confidence;
    return r;
}

void ToyDataset::save(const std::filesystem::path& dir) const {
    if (items.empty()) throw ParameterError("cannot save an empty dataset");
    std::vector<torch::Tensor> stack;
    nlohmann::json manifest;
    manifest["schema"] = "magus.toy_dataset";
    manifest["version"] = 1;
    manifest["seed"] = seed;
    manifest["items"] = nlohmann::json::array();
    for (const auto& item : items) {
        stack.push_back(item.spectrogram);
        manifest["items"].push_back({{"mood", item.attributes.mood},
                                     {"genre", item.attributes.genre},
                                     {"timbre", item.attributes.timbre},
                                     {"caption", item.caption},
                                     {"melody_seed", item.melody_seed},
                                     {"melody", item.melody}});
    }
    std::filesystem::create_directories(dir);
    write_f32t(dir / "spectrograms.f32t", torch::stack(stack));
    write_file_atomic(dir / "manifest.json", manifest.dump(2));
}

ToyDataset ToyDataset::load(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (manifest.value("schema", "") != "magus.toy_dataset") {
        throw FormatError("not a toy dataset manifest");
    }
    const auto tensors = read_f32t(dir / "spectrograms.f32t").to(torch::kFloat64);
    const auto& items = manifest.at("items");
    if (tensors.dim() != 4 || tensors.size(0) != static_cast<int64_t>(items.size())) {
        throw FormatError("dataset tensor count does not match the manifest");
    }
    ToyDataset ds;
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& j = items[i];
        ToyExample e;
        e.spectrogram = tensors[static_cast<int64_t>(i)].clone();
        e.attributes = {j.at("mood"), j.at("genre"), j.at("timbre")};
        e.caption = j.at("caption");
        e.melody_seed = j.at("melody_seed");
        e.melody = j.at("melody").get<std::vector<int>>();
        ds.items.push_back(std::move(e));
    }
    return ds;
}

ToyDataset build_toy_dataset(int size, std::uint64_t seed, const AttributeSpace& space) {
    if (size < 1) throw ParameterError("dataset size must be positive");
    const auto combos = space.all();
    std::mt19937_64 rng(seed);
    ToyDataset ds;
    ds.seed = seed;
    for (int i = 0; i < size; ++i) {
        const auto& attrs = combos[rng() % combos.size()];
        const std::uint64_t melody_seed = rng();
        auto clip = generate_clip(attrs, melody_seed, space);
        ds.items.push_back({clip.clip.data, attrs, attrs.caption(), melody_seed, clip.melody});
    }
    return ds;
}

Attributes parse_attributes(const std::string& text, const AttributeSpace& space) {
    Attributes out;
    for (const auto& token : tokenize(text)) {
        if (auto m = space.canonical(token, "mood"); m && out.mood.empty()) out.mood = *m;
        if (auto g = space.canonical(token, "genre"); g && out.genre.empty()) out.genre = *g;
        if (auto t = space.canonical(token, "timbre"); t && out.timbre.empty()) out.timbre = *t;
    }
    return out;
}

std::string ToyCaptioner::caption(const LatentClip& clip) const {
    const auto probe = attribute_probe(clip.data, space_);
    return probe.silence ? std::string() : probe.attributes.caption();
}

double ToyProbeScorer::score(const LatentClip& clip, const std::string& text) const {
    const auto wanted = parse_attributes(text, space_);
    const auto probe = attribute_probe(clip.data, space_);
    int slots = 0;
    int matched = 0;
    auto check = [&](const std::string& want, const std::string& got) {
        if (want.empty()) return;
        ++slots;
        if (!probe.silence && want == got) ++matched;
    };
    check(wanted.mood, probe.attributes.mood);
    check(wanted.genre, probe.attributes.genre);
    check(wanted.timbre, probe.attributes.timbre);
    return slots == 0 ? 0.0 : static_cast<double>(matched) / slots;
}

}  // namespace magus
