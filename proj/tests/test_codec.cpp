#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "magus/codec.hpp"
#include "magus/error.hpp"
#include "magus/metrics.hpp"
#include "magus/toybench.hpp"

using namespace magus;
namespace fs = std::filesystem;

TEST_CASE("identity codec is exact") {
    const auto codec = identity_codec();
    CHECK(codec->sample_rate() == 16000.0);
    auto g = at::detail::createCPUGenerator(1);
    for (int i = 0; i < 100; ++i) {
        const auto x = torch::randn({1, 32, 32}, g, torch::kFloat64);
        const auto z = codec->encode(x);
        CHECK(z.data.sizes() == x.sizes());
        CHECK(torch::equal(codec->decode(z), x));
    }
    const std::vector<int64_t> shape{2, 8, 5};
    CHECK((codec->latent_shape(shape) == shape));
    CHECK_THROWS_AS(codec->encode(torch::zeros({4})), ShapeError);
}

TEST_CASE("mel codec shapes and defaults") {
    const MelCodec codec;
    CHECK(codec.sample_rate() == 16000.0);
    const auto x = torch::zeros({16000}, torch::kFloat64);
    const auto z = codec.encode(x);
    const std::vector<int64_t> expected{1, 64, 16000 / 256 + 1};
    CHECK((z.data.sizes().vec() == expected));
    const std::vector<int64_t> n{16000};
    CHECK((codec.latent_shape(n) == expected));
    CHECK(codec.filterbank().size(0) == 64);
    CHECK(codec.filterbank().size(1) == 513);
    CHECK(codec.decode(z).size(0) == 16000);
    CHECK_THROWS_AS(MelCodec(MelCodecConfig{16000, 64, 1024, 256, 9000, 0, 4}), ConfigurationError);
    CHECK_THROWS_AS(codec.decode(LatentClip(torch::zeros({1, 10, 5}))), ShapeError);
}

TEST_CASE("a 440 Hz sine lands in the mel band around 440 Hz") {
    const MelCodec codec;
    const auto t = torch::arange(16000, torch::kFloat64) / 16000.0;
    const auto z = codec.encode(torch::sin(2 * std::numbers::pi * 440.0 * t));
    const auto band = z.data[0].sum(1).argmax().item<int64_t>();
    const auto centers = codec.band_centers();
    CHECK(std::abs(centers[band] - 440.0) < std::abs(centers[band] - centers[band > 0 ? band - 1 : band + 1]));
}

TEST_CASE("toy melody survives the mel round trip") {
    const MelCodec codec;
    const auto toy = generate_clip({"relaxing", "classical", "timbreA"}, 3);
    const auto audio = render_toy_audio(toy.clip.data, 16000.0, 2.0);
    const auto back = codec.decode(codec.encode(audio.samples));
    const auto a = audio_chromagram(audio.samples, 16000.0);
    const auto b = audio_chromagram(back.slice(0, 0, audio.samples.size(0)), 16000.0);
    CHECK(chroma_similarity(a, b) >= 0.9);
}

TEST_CASE("wav round trip") {
    const auto path = fs::temp_directory_path() / "magus_test.wav";
    const auto t = torch::arange(800, torch::kFloat64) / 8000.0;
    const Waveform w{0.5 * torch::sin(2 * std::numbers::pi * 300.0 * t), 8000.0};
    write_wav(path, w);
    const auto back = read_wav(path);
    CHECK(back.sample_rate == 8000.0);
    REQUIRE(back.samples.size(0) == 800);
    CHECK((back.samples - w.samples).abs().max().item<double>() <= 1.0 / 32767);
    CHECK(fs::file_size(path) == 44 + 2 * 800);
    CHECK_THROWS_AS(write_wav(path, Waveform{torch::zeros({2, 3}), 8000.0}), ShapeError);

    std::string junk = "RIFF1234WAVEjunk";
    const auto bad = fs::temp_directory_path() / "magus_bad.wav";
    {
        std::ofstream out(bad, std::ios::binary);
        out << junk;
    }
    CHECK_THROWS_AS(read_wav(bad), FormatError);
}

TEST_CASE("toy audio rendering maps bins to the pitch grid") {
    auto x = torch::zeros({1, 32, 4}, torch::kFloat64);
    x[0][0].fill_(1.0);
    const auto w = render_toy_audio(x, 16000.0, 1.0);
    CHECK(w.samples.size(0) == 16000);
    CHECK(w.samples.abs().max().item<double>() == doctest::Approx(0.9));
    // bin 0 is 220 Hz, an A
    CHECK(audio_chromagram(w.samples, 16000.0).energy.sum(1).argmax().item<int64_t>() == 9);
    const auto silent = render_toy_audio(torch::zeros({1, 32, 4}, torch::kFloat64), 16000.0, 0.5);
    CHECK(silent.samples.abs().sum().item<double>() == 0.0);
}
