#include "testing.hpp"

#include <cmath>
#include <numbers>

#include <json.hpp>

#include "magus/error.hpp"
#include "magus/metrics.hpp"
#include "magus/toybench.hpp"

using namespace magus;

namespace {

struct ConstantScorer final : SemanticScorer {
    double value;
    explicit ConstantScorer(double v) : value(v) {}
    double score(const LatentClip&, const std::string& text) const override {
        if (text == "explode") throw Error("scorer failure");
        return value;
    }
};

LatentClip random_clip(int seed) {
    auto g = at::detail::createCPUGenerator(seed);
    return LatentClip(torch::randn({1, 32, 32}, g, torch::kFloat64));
}

}  // namespace

TEST_CASE("single active bin row folds into one pitch class") {
    for (int r : {0, 5, 13, 31}) {
        auto x = torch::zeros({1, 32, 10}, torch::kFloat64);
        x[0][r].fill_(1.0);
        x[0][r][3] = 0.0;
        const auto chroma = chromagram(LatentClip(x)).energy;
        REQUIRE(chroma.size(0) == 8);
        for (int f = 0; f < 10; ++f) {
            const auto col = chroma.select(1, f);
            if (f == 3) {
                CHECK(col.sum().item<double>() == 0.0);
            } else {
                CHECK(col[r % 8].item<double>() == 1.0);
                CHECK(col.sum().item<double>() == 1.0);
            }
        }
    }
    CHECK(chromagram(LatentClip(torch::zeros({1, 32, 32}, torch::kFloat64))).energy.abs().sum().item<double>() == 0.0);
}

TEST_CASE("chromagram conserves clamped column energy") {
    for (int seed = 0; seed < 100; ++seed) {
        const auto clip = random_clip(seed);
        const auto chroma = chromagram(clip).energy;
        const auto expected = clip.data.clamp_min(0).sum({0, 1});
        CHECK((chroma.sum(0) - expected).abs().max().item<double>() < 1e-6);
    }
}

TEST_CASE("chromagram rejects malformed input") {
    CHECK_THROWS_AS(chromagram(LatentClip(torch::zeros({32, 32}, torch::kFloat64))), ShapeError);
    CHECK_THROWS_AS(chromagram(LatentClip(torch::zeros({1, 32, 32}, torch::kFloat64)), 0), ParameterError);
}

TEST_CASE("chroma similarity contracts") {
    for (int seed = 0; seed < 10; ++seed) {
        const auto a = chromagram(random_clip(seed));
        CHECK(chroma_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(chroma_similarity(a, Chromagram{a.energy * 2}) == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto x = torch::zeros({8, 4}, torch::kFloat64);
    auto y = torch::zeros({8, 4}, torch::kFloat64);
    x[1].fill_(1.0);
    y[2].fill_(1.0);
    CHECK(chroma_similarity(Chromagram{x}, Chromagram{y}) == 0.0);
    CHECK(chroma_similarity(Chromagram{torch::zeros({8, 4}, torch::kFloat64)},
                            Chromagram{torch::zeros({8, 4}, torch::kFloat64)}) == 1.0);
    CHECK_THROWS_AS(chroma_similarity(Chromagram{x}, Chromagram{torch::zeros({8, 5}, torch::kFloat64)}), ShapeError);
}

TEST_CASE("audio chromagram finds the pitch class of a sine") {
    const double sr = 16000;
    const auto t = torch::arange(16000, torch::kFloat64) / sr;
    const auto a440 = torch::sin(2 * std::numbers::pi * 440.0 * t);
    const auto chroma = audio_chromagram(a440, sr).energy;
    CHECK(chroma.size(0) == 12);
    CHECK(chroma.sum(1).argmax().item<int64_t>() == 9);
    const auto c = torch::sin(2 * std::numbers::pi * 261.63 * t);
    CHECK(audio_chromagram(c, sr).energy.sum(1).argmax().item<int64_t>() == 0);
}

TEST_CASE("semantic similarity needs a scorer") {
    CHECK_THROWS_AS(semantic_similarity(random_clip(0), "x", nullptr), ConfigurationError);
    const ConstantScorer half(0.5);
    CHECK(semantic_similarity(random_clip(0), "x", &half) == 0.5);
}

TEST_CASE("identity pair with matching text scores chroma 1") {
    const auto toy = generate_clip({"relaxing", "jazz", "timbreA"}, 3);
    const EvalPair pair{toy.clip, toy.clip, "A relaxing jazz music with timbreA performance."};
    const auto report = evaluate_batch(std::span(&pair, 1), ToyProbeScorer());
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].chroma == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.rows[0].semantic == 1.0);
    CHECK(report.rows[0].avg == doctest::Approx(1.0));
}

TEST_CASE("report means match an independent pass over the rows") {
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 12; ++i) {
        pairs.push_back({random_clip(i), random_clip(100 + i), i == 5 ? "explode" : "text", i % 3 ? "b" : "a",
                         "row" + std::to_string(i)});
    }
    const ConstantScorer scorer(0.25);
    auto report = evaluate_batch(pairs, scorer);
    CHECK(report.failed == 1);
    REQUIRE(report.rows.size() == 12);
    CHECK(report.rows[5].error.has_value());

    std::map<std::string, std::array<double, 4>> sums;  // count, semantic, chroma, avg
    double total[4] = {0, 0, 0, 0};
    for (const auto& row : report.rows) {
        if (row.error) continue;
        auto& s = sums[row.group];
        const double avg = (row.semantic + row.chroma) / 2;
        CHECK(row.avg == doctest::Approx(avg).epsilon(1e-12));
        s[0] += 1;
        s[1] += row.semantic;
        s[2] += row.chroma;
        s[3] += avg;
        total[0] += 1;
        total[1] += row.semantic;
        total[2] += row.chroma;
        total[3] += avg;
    }
    for (const auto& [group, s] : sums) {
        const auto& g = report.groups.at(group);
        CHECK(g.count == static_cast<int>(s[0]));
        CHECK(std::abs(g.semantic - s[1] / s[0]) < 1e-9);
        CHECK(std::abs(g.chroma - s[2] / s[0]) < 1e-9);
        CHECK(std::abs(g.avg - s[3] / s[0]) < 1e-9);
    }
    CHECK(report.overall.count == 11);
    CHECK(std::abs(report.overall.chroma - total[2] / total[0]) < 1e-9);
    CHECK(std::abs(report.overall.avg - total[3] / total[0]) < 1e-9);

    const auto doc = nlohmann::json::parse(report.to_json());
    CHECK(doc.at("schema") == "magus.eval_report");
    CHECK(doc.at("version") == 1);
    CHECK(doc.at("rows").size() == 12);
    CHECK(doc.at("failed") == 1);

    const auto csv = report.to_csv();
    CHECK(csv.rfind("group,label,semantic,chroma,avg,error", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
    CHECK(report.to_csv('\t').find('\t') != std::string::npos);
}
