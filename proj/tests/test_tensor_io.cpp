#include "testing.hpp"

#include <cstring>
#include <filesystem>

#include <torch/torch.h>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

using namespace magus;
namespace fs = std::filesystem;

namespace {

std::uint32_t u32_at(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "magus_test_tensor_io";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("f32t layout is magic, version, rank, dims, row-major floats") {
    const auto t = torch::tensor({1.0f, -2.5f, 3.25f, 0.0f, 7.0f, 1e-3f}).reshape({2, 3});
    const auto bytes = encode_f32t(t);
    REQUIRE(bytes.size() == 4 + 1 + 4 + 2 * 4 + 6 * 4);
    CHECK(bytes.substr(0, 4) == "F32T");
    CHECK(static_cast<int>(bytes[4]) == 1);
    CHECK(u32_at(bytes, 5) == 2);
    CHECK(u32_at(bytes, 9) == 2);
    CHECK(u32_at(bytes, 13) == 3);
    float third = 0;
    std::memcpy(&third, bytes.data() + 17 + 2 * 4, 4);
    CHECK(third == 3.25f);
}

TEST_CASE("f32t round trip preserves shape and float32 values") {
    torch::manual_seed(3);
    const auto t = torch::randn({2, 4, 5});
    const auto back = decode_f32t(encode_f32t(t));
    CHECK(back.sizes() == t.sizes());
    CHECK(torch::equal(back, t));

    const auto path = scratch("x.f32t");
    write_f32t(path, t);
    CHECK(torch::equal(read_f32t(path), t));
}

TEST_CASE("f32t decoding rejects damaged input") {
    auto bytes = encode_f32t(torch::ones({3}));
    CHECK_THROWS_AS(decode_f32t(std::string_view(bytes).substr(0, bytes.size() - 1)), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_f32t(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_f32t(bad_version), FormatError);
}

TEST_CASE("checkpoint stores config and named tensors") {
    Checkpoint ck;
    ck.config_json = R"({"a":1})";
    ck.tensors.push_back({"w", torch::arange(6, torch::kFloat32).reshape({2, 3})});
    ck.tensors.push_back({"b", torch::ones({4})});
    const auto path = scratch("ck.mgck");
    write_checkpoint(path, ck);
    const auto back = read_checkpoint(path);
    CHECK(back.config_json == ck.config_json);
    REQUIRE(back.tensors.size() == 2);
    CHECK(torch::equal(back.at("w"), ck.tensors[0].second));
    CHECK(torch::equal(back.at("b"), ck.tensors[1].second));
    CHECK_THROWS(back.at("missing"));
}

TEST_CASE("atomic write leaves no temporary files behind") {
    const auto path = scratch("atomic.txt");
    write_file_atomic(path, "first");
    write_file_atomic(path, "second");
    CHECK(read_file(path) == "second");
    int entries = 0;
    for (const auto& e : fs::directory_iterator(path.parent_path())) {
        if (e.path().filename().string().find("atomic.txt") != std::string::npos) ++entries;
    }
    CHECK(entries == 1);
}
