#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dml/model.hpp"
#include "dml/serialization.hpp"

// Layout (all integers little-endian):
//   magic[8] | u32 version | u64 config digest | u64 config JSON length |
//   config JSON bytes | u64 parameter count | f64 parameters...

namespace dml {

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    const std::string cfg = to_json(params.config()).dump();
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_u32(os, kCheckpointVersion);
    put_u64(os, params.config().digest());
    put_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put_u64(os, params.size());
    for (double v : params.flat()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[sizeof(kCheckpointMagic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw std::runtime_error("checkpoint: " + path.string() + " is not a parameter checkpoint");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
    }
    const std::uint64_t digest = get_u64(is, "digest");
    const std::uint64_t cfg_len = get_u64(is, "config length");
    if (cfg_len > (1u << 24)) throw std::runtime_error("checkpoint: implausible config length");
    std::string cfg_text(cfg_len, '\0');
    if (!is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len))) {
        throw std::runtime_error("checkpoint: truncated config");
    }
    const EncoderConfig cfg = encoder_config_from_json(json::parse(cfg_text));
    if (cfg.digest() != digest) throw std::runtime_error("checkpoint: config digest mismatch in " + path.string());
    EncoderParams params(cfg);
    const std::uint64_t count = get_u64(is, "parameter count");
    if (count != params.size()) {
        throw std::runtime_error("checkpoint: stores " + std::to_string(count) + " parameters, config needs " +
                                 std::to_string(params.size()));
    }
    auto values = params.mutable_flat();
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(get_u64(is, "parameters"));
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
    return params;
}

EncoderParams load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
    EncoderParams params = load_checkpoint(path);
    if (params.config().digest() != expected.digest()) {
        throw std::runtime_error("checkpoint: " + path.string() + " was written for a different encoder config");
    }
    return params;
}

}  // namespace dml
