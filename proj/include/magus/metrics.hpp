#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

#include "magus/schedule.hpp"

namespace magus {

/// Pitch-class x frame energy matrix (float64, non-negative).
struct Chromagram {
    torch::Tensor energy;

    int64_t pitch_classes() const { return energy.size(0); }
    int64_t frames() const { return energy.size(1); }
};

/// Toy spectrogram space: frequency bins congruent modulo `pitch_classes` fold
/// into one class; channels are summed. Energy is max(x, 0), so column sums of
/// the result equal the column sums of the clamped input.
Chromagram chromagram(const LatentClip& clip, int pitch_classes = 8);

struct AudioChromaOptions {
    int frame_length = 2048;
    int hop_length = 512;
    double min_frequency = 27.5;
};

/// 12-class chromagram of a mono waveform: magnitude STFT, each bin mapped to
/// the nearest equal-tempered semitone (C = class 0).
Chromagram audio_chromagram(const torch::Tensor& samples, double sample_rate, const AudioChromaOptions& options = {});

/// Cosine similarity of the flattened chromagrams, clamped to [0, 1].
/// Two all-zero chromagrams count as identical (1).
double chroma_similarity(const Chromagram& a, const Chromagram& b);

/// Scores how well a clip matches a text description, in [0, 1].
class SemanticScorer {
public:
    virtual ~SemanticScorer() = default;
    virtual double score(const LatentClip& clip, const std::string& text) const = 0;
};

double semantic_similarity(const LatentClip& clip, const std::string& text, const SemanticScorer* scorer);

struct EvalPair {
    LatentClip original;
    LatentClip edited;
    std::string target_text;
    std::string group = "default";
    std::string label;
};

struct EvalRow {
    std::string group;
    std::string label;
    double semantic = 0.0;
    double chroma = 0.0;
    double avg = 0.0;
    std::optional<std::string> error;
    std::map<std::string, double> extras;
};

struct GroupSummary {
    int count = 0;
    double semantic = 0.0;
    double chroma = 0.0;
    /// Mean over rows of (semantic + chroma) / 2.
    double avg = 0.0;
    std::map<std::string, double> extras;
};

/// Report schema "magus.eval_report" version 1:
///   { "schema", "version", "config": {k: v}, "rows": [{group, label, semantic,
///     chroma, avg, error?, extras}], "groups": {name: summary}, "overall":
///     summary, "failed": n, "avg_definition": string }
struct EvalReport {
    std::vector<EvalRow> rows;
    std::map<std::string, GroupSummary> groups;
    GroupSummary overall;
    int failed = 0;
    std::map<std::string, std::string> config;

    /// Recomputes group and overall means from the rows (failed rows excluded).
    void finalize();
    std::string to_json() const;
    /// Delimiter-separated table: group,label,semantic,chroma,avg,error
    std::string to_csv(char delimiter = ',') const;
};

EvalReport evaluate_batch(std::span<const EvalPair> pairs, const SemanticScorer& scorer, int pitch_classes = 8);

}  // namespace magus
