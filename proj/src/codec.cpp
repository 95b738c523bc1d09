#include "magus/codec.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <torch/torch.h>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

namespace magus {
namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

torch::Tensor spectrum(const torch::Tensor& x, const MelCodecConfig& c, const torch::Tensor& window) {
    return torch::stft(x, c.n_fft, c.hop_length, c.n_fft, window, /*center=*/true, "constant",
                       /*normalized=*/false, /*onesided=*/true, /*return_complex=*/true);
}

void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>(v >> 8));
}

void put_u32le(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_le(const std::string& s, std::size_t at, int bytes) {
    if (at + bytes > s.size()) throw FormatError("truncated WAV file");
    std::uint32_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

}  // namespace

LatentClip IdentityCodec::encode(const torch::Tensor& signal) const {
    if (!signal.defined() || signal.dim() != 3) throw ShapeError("identity codec expects a (C, F, T) tensor");
    return LatentClip(signal.clone(), sample_rate_);
}

torch::Tensor IdentityCodec::decode(const LatentClip& latent) const { return latent.data.clone(); }

std::vector<int64_t> IdentityCodec::latent_shape(std::span<const int64_t> signal_shape) const {
    return {signal_shape.begin(), signal_shape.end()};
}

MelCodec::MelCodec(MelCodecConfig config) : config_(config) {
    if (config_.sample_rate <= 0 || config_.n_mels < 1 || config_.n_fft < 2 || config_.hop_length < 1 ||
        config_.griffin_lim_iters < 0) {
        throw ConfigurationError("invalid mel codec configuration");
    }
    const double f_max = config_.f_max > 0 ? config_.f_max : config_.sample_rate / 2.0;
    if (!(config_.f_min >= 0 && config_.f_min < f_max && f_max <= config_.sample_rate / 2.0)) {
        throw ConfigurationError("mel frequency range must satisfy 0 <= f_min < f_max <= sample_rate / 2");
    }
    const int bins = config_.n_fft / 2 + 1;
    const double m_lo = hz_to_mel(config_.f_min);
    const double m_hi = hz_to_mel(f_max);
    std::vector<double> edges(config_.n_mels + 2);
    for (int i = 0; i < config_.n_mels + 2; ++i) edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (config_.n_mels + 1));
    filters_ = torch::zeros({config_.n_mels, bins}, torch::kFloat64);
    auto f = filters_.accessor<double, 2>();
    for (int m = 0; m < config_.n_mels; ++m) {
        for (int k = 0; k < bins; ++k) {
            const double hz = k * config_.sample_rate / config_.n_fft;
            const double up = (hz - edges[m]) / (edges[m + 1] - edges[m]);
            const double down = (edges[m + 2] - hz) / (edges[m + 2] - edges[m + 1]);
            f[m][k] = std::max(0.0, std::min(up, down));
        }
    }
    inverse_ = torch::linalg_pinv(filters_);
    window_ = torch::hann_window(config_.n_fft, torch::kFloat64);
}

std::vector<double> MelCodec::band_centers() const {
    const double f_max = config_.f_max > 0 ? config_.f_max : config_.sample_rate / 2.0;
    const double m_lo = hz_to_mel(config_.f_min);
    const double m_hi = hz_to_mel(f_max);
    std::vector<double> out(config_.n_mels);
    for (int m = 0; m < config_.n_mels; ++m) out[m] = mel_to_hz(m_lo + (m_hi - m_lo) * (m + 1) / (config_.n_mels + 1));
    return out;
}

LatentClip MelCodec::encode(const torch::Tensor& signal) const {
    if (!signal.defined() || signal.dim() != 1 || signal.numel() == 0) {
        throw ShapeError("mel codec expects a non-empty mono waveform");
    }
    const auto x = signal.to(torch::kFloat64);
    const auto mel = torch::matmul(filters_, spectrum(x, config_, window_).abs());
    return LatentClip(mel.unsqueeze(0), config_.sample_rate, static_cast<double>(x.numel()) / config_.sample_rate);
}

torch::Tensor MelCodec::decode(const LatentClip& latent) const {
    const auto& z = latent.data;
    if (!z.defined() || z.dim() != 3 || z.size(0) != 1 || z.size(1) != config_.n_mels) {
        throw ShapeError("mel codec expects a (1, " + std::to_string(config_.n_mels) + ", frames) latent");
    }
    const auto frames = z.size(2);
    auto length = static_cast<int64_t>(std::llround(latent.duration * config_.sample_rate));
    if (length / config_.hop_length + 1 != frames) length = (frames - 1) * config_.hop_length;
    const auto magnitude = torch::matmul(inverse_, z[0].to(torch::kFloat64)).clamp_min(0.0);
    auto phase = torch::zeros_like(magnitude);
    torch::Tensor y;
    for (int it = 0; it <= config_.griffin_lim_iters; ++it) {
        y = torch::istft(torch::polar(magnitude, phase), config_.n_fft, config_.hop_length, config_.n_fft, window_,
                         /*center=*/true, /*normalized=*/false, /*onesided=*/true, length);
        if (it < config_.griffin_lim_iters) phase = torch::angle(spectrum(y, config_, window_));
    }
    return y;
}

std::vector<int64_t> MelCodec::latent_shape(std::span<const int64_t> signal_shape) const {
    if (signal_shape.size() != 1) throw ShapeError("mel codec expects a mono waveform shape");
    return {1, config_.n_mels, signal_shape[0] / config_.hop_length + 1};
}

std::unique_ptr<Codec> identity_codec() { return std::make_unique<IdentityCodec>(); }
std::unique_ptr<Codec> mel_codec(const MelCodecConfig& config) { return std::make_unique<MelCodec>(config); }

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
    if (!wave.samples.defined() || wave.samples.dim() != 1) throw ShapeError("WAV output must be mono");
    if (wave.sample_rate <= 0 || wave.sample_rate > 4e9) throw ParameterError("invalid sample rate");
    const auto pcm = (wave.samples.to(torch::kFloat64).clamp(-1.0, 1.0) * 32767.0).round().to(torch::kInt16).contiguous();
    const auto n = static_cast<std::uint32_t>(pcm.numel());
    const auto rate = static_cast<std::uint32_t>(std::lround(wave.sample_rate));
    std::string out = "RIFF";
    put_u32le(out, 36 + 2 * n);
    out += "WAVEfmt ";
    put_u32le(out, 16);
    put_u16(out, 1);
    put_u16(out, 1);
    put_u32le(out, rate);
    put_u32le(out, rate * 2);
    put_u16(out, 2);
    put_u16(out, 16);
    out += "data";
    put_u32le(out, 2 * n);
    const auto* p = pcm.data_ptr<std::int16_t>();
    for (std::uint32_t i = 0; i < n; ++i) put_u16(out, static_cast<std::uint16_t>(p[i]));
    write_file_atomic(path, out);
}

Waveform read_wav(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) {
        throw FormatError("not a RIFF/WAVE file: " + path.string());
    }
    std::size_t at = 12;
    bool have_fmt = false;
    Waveform wave;
    while (at + 8 <= bytes.size()) {
        const auto id = bytes.substr(at, 4);
        const auto size = get_le(bytes, at + 4, 4);
        const auto body = at + 8;
        if (id == "fmt ") {
            if (get_le(bytes, body, 2) != 1) throw FormatError("only PCM WAV files are supported");
            if (get_le(bytes, body + 2, 2) != 1) throw FormatError("only mono WAV files are supported");
            if (get_le(bytes, body + 14, 2) != 16) throw FormatError("only 16-bit WAV files are supported");
            wave.sample_rate = get_le(bytes, body + 4, 4);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw FormatError("WAV data chunk precedes its format chunk");
            if (body + size > bytes.size()) throw FormatError("truncated WAV data");
            const auto n = static_cast<int64_t>(size / 2);
            auto samples = torch::empty({n}, torch::kInt16);
            std::memcpy(samples.data_ptr<std::int16_t>(), bytes.data() + body, n * 2);
            wave.samples = samples.to(torch::kFloat64) / 32767.0;
            return wave;
        }
        at = body + size + (size & 1);
    }
    throw FormatError("WAV file has no data chunk");
}

Waveform render_toy_audio(const torch::Tensor& spectrogram, double sample_rate, double duration, int pitch_classes,
                          double base_frequency) {
    if (!spectrogram.defined() || spectrogram.dim() != 3 || spectrogram.size(0) != 1) {
        throw ShapeError("toy audio rendering expects a (1, F, T) spectrogram");
    }
    if (sample_rate <= 0 || duration <= 0 || pitch_classes < 1) throw ParameterError("invalid rendering parameters");
    const auto F = spectrogram.size(1);
    const auto T = spectrogram.size(2);
    const auto n = static_cast<int64_t>(std::llround(duration * sample_rate));
    const auto amps = spectrogram[0].to(torch::kFloat64).clamp_min(0.0);
    const auto frame = torch::div(torch::arange(n, torch::kLong) * T, n, "floor").clamp_max(T - 1);
    const auto time = torch::arange(n, torch::kFloat64) / sample_rate;
    auto freqs = torch::empty({F, 1}, torch::kFloat64);
    for (int64_t b = 0; b < F; ++b) {
        const double octave = static_cast<double>(b / pitch_classes);
        const double pc = static_cast<double>(b % pitch_classes) / pitch_classes;
        freqs[b][0] = base_frequency * std::pow(2.0, octave + pc);
    }
    const auto tones = torch::sin(2.0 * std::numbers::pi * freqs * time.unsqueeze(0));
    auto y = (amps.index_select(1, frame) * tones).sum(0);
    const double peak = y.abs().max().item<double>();
    if (peak > 0) y = y * (0.9 / peak);
    return {y, sample_rate};
}

}  // namespace magus
