#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <torch/types.h>

#include "magus/schedule.hpp"

namespace magus {

/// Boundary between signals and latents. The editor never sees a codec.
class Codec {
public:
    virtual ~Codec() = default;
    virtual LatentClip encode(const torch::Tensor& signal) const = 0;
    virtual torch::Tensor decode(const LatentClip& latent) const = 0;
    /// Latent shape for a signal of the given shape.
    virtual std::vector<int64_t> latent_shape(std::span<const int64_t> signal_shape) const = 0;
    virtual double sample_rate() const = 0;
};

/// Latent == signal. The toy pipeline edits spectrograms directly.
class IdentityCodec final : public Codec {
public:
    explicit IdentityCodec(double sample_rate = 16000.0) : sample_rate_(sample_rate) {}
    LatentClip encode(const torch::Tensor& signal) const override;
    torch::Tensor decode(const LatentClip& latent) const override;
    std::vector<int64_t> latent_shape(std::span<const int64_t> signal_shape) const override;
    double sample_rate() const override { return sample_rate_; }

private:
    double sample_rate_;
};

struct MelCodecConfig {
    double sample_rate = 16000.0;
    int n_mels = 64;
    int n_fft = 1024;
    int hop_length = 256;
    double f_min = 0.0;
    /// 0 means sample_rate / 2.
    double f_max = 0.0;
    int griffin_lim_iters = 32;
};

/// encode: mono waveform -> (1, n_mels, frames) magnitude mel spectrogram.
/// decode: pseudo-inverse mel projection + Griffin-Lim phase estimate (lossy).
class MelCodec final : public Codec {
public:
    explicit MelCodec(MelCodecConfig config = {});
    LatentClip encode(const torch::Tensor& signal) const override;
    torch::Tensor decode(const LatentClip& latent) const override;
    std::vector<int64_t> latent_shape(std::span<const int64_t> signal_shape) const override;
    double sample_rate() const override { return config_.sample_rate; }

    const MelCodecConfig& config() const { return config_; }
    /// (n_mels, n_fft / 2 + 1) triangular filters on the HTK mel scale.
    const torch::Tensor& filterbank() const { return filters_; }
    /// Center frequency in Hz of each mel band.
    std::vector<double> band_centers() const;

private:
    MelCodecConfig config_;
    torch::Tensor filters_;
    torch::Tensor inverse_;
    torch::Tensor window_;
};

std::unique_ptr<Codec> identity_codec();
std::unique_ptr<Codec> mel_codec(const MelCodecConfig& config = {});

struct Waveform {
    torch::Tensor samples;  // (N) float64 in [-1, 1]
    double sample_rate = 16000.0;
};

/// PCM16 little-endian mono only.
void write_wav(const std::filesystem::path& path, const Waveform& wave);
Waveform read_wav(const std::filesystem::path& path);

/// Renders a toy spectrogram (1, F, T) as a sum of sinusoids. Bin b sounds
/// pitch class b mod P at octave b / P above base_frequency; each frame lasts
/// duration / T seconds.
Waveform render_toy_audio(const torch::Tensor& spectrogram, double sample_rate = 16000.0, double duration = 5.0,
                          int pitch_classes = 8, double base_frequency = 220.0);

}  // namespace magus
