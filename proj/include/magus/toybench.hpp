#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/types.h>

#include "magus/inversion.hpp"
#include "magus/metrics.hpp"
#include "magus/schedule.hpp"

namespace magus {

struct Attributes {
    std::string mood;
    std::string genre;
    std::string timbre;

    bool operator==(const Attributes&) const = default;
    /// "A {mood} {genre} music with {timbre} performance."
    std::string caption() const;
};

/// Procedural spectrogram space. A clip is freq_bins x time_frames with the
/// melody's fundamental in bins [0, pitch_classes) and overtones at +8, +16,
/// +24 bins, so every overtone folds onto its fundamental's pitch class.
///   mood   -> per-frame gate inside each note segment
///   genre  -> per-segment loudness envelope
///   timbre -> overtone amplitudes relative to the fundamental
struct AttributeSpace {
    int freq_bins = 32;
    int time_frames = 32;
    int pitch_classes = 8;
    int segment_frames = 4;

    std::vector<std::string> moods;
    std::vector<std::vector<double>> gates;
    std::vector<std::string> genres;
    std::vector<std::vector<double>> envelopes;
    std::vector<std::string> timbres;
    std::vector<std::vector<double>> overtones;

    static AttributeSpace defaults();

    int segments() const { return time_frames / segment_frames; }
    void validate(const Attributes& a) const;
    std::vector<Attributes> all() const;
    /// Canonical spelling of an attribute word (case-insensitive lookup).
    std::optional<std::string> canonical(const std::string& word, const std::string& category) const;
};

struct ToyClip {
    LatentClip clip;
    /// Pitch class per segment.
    std::vector<int> melody;
    /// Pitch class per frame, -1 on gated (silent) frames.
    std::vector<int> frame_pitch;
};

ToyClip generate_clip(const Attributes& attributes, std::uint64_t melody_seed,
                      const AttributeSpace& space = AttributeSpace::defaults());

struct ProbeResult {
    bool silence = false;
    Attributes attributes;
    double mood_confidence = 0.0;
    double genre_confidence = 0.0;
    double timbre_confidence = 0.0;
    std::vector<int> frame_pitch;
};

/// Oracle attribute classifier for spectrograms of shape (1, freq_bins, time_frames).
ProbeResult attribute_probe(const torch::Tensor& spectrogram, const AttributeSpace& space = AttributeSpace::defaults());

struct ToyExample {
    torch::Tensor spectrogram;
    Attributes attributes;
    std::string caption;
    std::uint64_t melody_seed = 0;
    std::vector<int> melody;
};

/// Persisted as `spectrograms.f32t` (N x 1 x F x T) plus `manifest.json`:
///   { "schema": "magus.toy_dataset", "version": 1, "seed": n,
///     "items": [{mood, genre, timbre, caption, melody_seed, melody}] }
struct ToyDataset {
    std::vector<ToyExample> items;
    std::uint64_t seed = 0;

    void save(const std::filesystem::path& dir) const;
    static ToyDataset load(const std::filesystem::path& dir);
};

ToyDataset build_toy_dataset(int size, std::uint64_t seed, const AttributeSpace& space = AttributeSpace::defaults());

/// Fraction of attribute words in the text that the probe confirms on the clip.
class ToyProbeScorer final : public SemanticScorer {
public:
    explicit ToyProbeScorer(AttributeSpace space = AttributeSpace::defaults()) : space_(std::move(space)) {}
    double score(const LatentClip& clip, const std::string& text) const override;

private:
    AttributeSpace space_;
};

/// Caption = the prompt template filled with probed attributes; empty on silence.
class ToyCaptioner final : public Captioner {
public:
    explicit ToyCaptioner(AttributeSpace space = AttributeSpace::defaults()) : space_(std::move(space)) {}
    std::string caption(const LatentClip& clip) const override;

private:
    AttributeSpace space_;
};

/// Attributes named in a prompt (missing categories stay empty).
Attributes parse_attributes(const std::string& text, const AttributeSpace& space = AttributeSpace::defaults());

}  // namespace magus
