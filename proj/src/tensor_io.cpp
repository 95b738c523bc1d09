#include "magus/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "magus/error.hpp"

namespace magus {
namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t value) {
    char bytes[4];
    std::memcpy(bytes, &value, 4);
    out.append(bytes, 4);
}

std::uint32_t get_u32(std::string_view bytes, std::size_t& offset) {
    if (offset + 4 > bytes.size()) {
        throw FormatError("truncated container: expected 4 more bytes at offset " + std::to_string(offset));
    }
    std::uint32_t value = 0;
    std::memcpy(&value, bytes.data() + offset, 4);
    offset += 4;
    return value;
}

void expect_magic(std::string_view bytes, std::size_t& offset, std::string_view magic, std::uint8_t version) {
    if (offset + magic.size() + 1 > bytes.size() || bytes.substr(offset, magic.size()) != magic) {
        throw FormatError("bad magic: expected '" + std::string(magic) + "'");
    }
    offset += magic.size();
    const auto found = static_cast<std::uint8_t>(bytes[offset]);
    if (found != version) {
        throw FormatError("unsupported " + std::string(magic) + " version " + std::to_string(found));
    }
    offset += 1;
}

}  // namespace

std::string encode_f32t(const torch::Tensor& tensor) {
    if (!tensor.defined()) {
        throw ParameterError("cannot encode an undefined tensor");
    }
    const auto data = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    std::string out = "F32T";
    out.push_back(static_cast<char>(kF32TVersion));
    put_u32(out, static_cast<std::uint32_t>(data.dim()));
    for (const auto d : data.sizes()) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    out.append(reinterpret_cast<const char*>(data.data_ptr<float>()), data.numel() * sizeof(float));
    return out;
}

torch::Tensor decode_f32t(std::string_view bytes, std::size_t& offset) {
    expect_magic(bytes, offset, "F32T", kF32TVersion);
    const auto rank = get_u32(bytes, offset);
    std::vector<int64_t> dims(rank);
    int64_t count = 1;
    for (auto& d : dims) {
        d = get_u32(bytes, offset);
        count *= d;
    }
    const auto payload = static_cast<std::size_t>(count) * sizeof(float);
    if (offset + payload > bytes.size()) {
        throw FormatError("truncated F32T payload");
    }
    auto tensor = torch::empty(dims, torch::kFloat32);
    std::memcpy(tensor.data_ptr<float>(), bytes.data() + offset, payload);
    offset += payload;
    return tensor;
}

torch::Tensor decode_f32t(std::string_view bytes) {
    std::size_t offset = 0;
    auto tensor = decode_f32t(bytes, offset);
    if (offset != bytes.size()) {
        throw FormatError("trailing bytes after F32T record");
    }
    return tensor;
}

void write_f32t(const std::filesystem::path& path, const torch::Tensor& tensor) {
    write_file_atomic(path, encode_f32t(tensor));
}

torch::Tensor read_f32t(const std::filesystem::path& path) {
    return decode_f32t(read_file(path));
}

const torch::Tensor& Checkpoint::at(const std::string& name) const {
    for (const auto& [key, value] : tensors) {
        if (key == name) {
            return value;
        }
    }
    throw FormatError("checkpoint has no tensor named '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    std::string out = "MGCK";
    out.push_back(static_cast<char>(kCheckpointVersion));
    put_u32(out, static_cast<std::uint32_t>(checkpoint.config_json.size()));
    out += checkpoint.config_json;
    put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
    for (const auto& [name, tensor] : checkpoint.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out += encode_f32t(tensor);
    }
    write_file_atomic(path, out);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::string_view view(bytes);
    std::size_t offset = 0;
    expect_magic(view, offset, "MGCK", kCheckpointVersion);
    Checkpoint checkpoint;
    const auto config_size = get_u32(view, offset);
    if (offset + config_size > view.size()) {
        throw FormatError("truncated checkpoint config");
    }
    checkpoint.config_json = std::string(view.substr(offset, config_size));
    offset += config_size;
    const auto count = get_u32(view, offset);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_size = get_u32(view, offset);
        if (offset + name_size > view.size()) {
            throw FormatError("truncated tensor name");
        }
        std::string name(view.substr(offset, name_size));
        offset += name_size;
        checkpoint.tensors.emplace_back(std::move(name), decode_f32t(view, offset));
    }
    return checkpoint;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error("short write to '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path.string() + "'");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

}  // namespace magus
