#include <bit>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dml/data.hpp"
#include "dml/serialization.hpp"

namespace fs = std::filesystem;

namespace dml {

namespace {

static_assert(std::endian::native == std::endian::little, "volume files are written in native little-endian order");

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s, const std::string& id) {
    if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
        throw std::runtime_error("dataset: sample '" + id + "' has a malformed checksum '" + s + "'");
    }
    return std::stoull(s, nullptr, 16);
}

void write_raw(const fs::path& path, const Volume& v) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto bytes = std::as_bytes(v.values());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

Volume read_raw(const fs::path& path, const Shape3& shape, const std::string& id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("dataset: sample '" + id + "': missing file " + path.string());
    const auto expected = static_cast<std::uintmax_t>(shape.voxels() * sizeof(double));
    const auto actual = fs::file_size(path);
    if (actual != expected) {
        throw std::runtime_error("dataset: sample '" + id + "': " + path.filename().string() + " holds " +
                                 std::to_string(actual) + " bytes, shape " + shape.str() + " needs " +
                                 std::to_string(expected));
    }
    std::vector<double> values(shape.voxels());
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(expected));
    if (!in) throw std::runtime_error("dataset: sample '" + id + "': read failed for " + path.string());
    return Volume(shape, std::move(values));
}

// Checksum covers the volume bytes, then the mask bytes when present.
std::uint64_t sample_checksum(const Sample& s) {
    std::uint64_t h = fnv1a64(std::as_bytes(s.volume.values()));
    if (s.mask) h = fnv1a64(std::as_bytes(s.mask->values()), h);
    return h;
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
    ds.validate(false);
    fs::create_directories(dir / "volumes");
    json samples = json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06zu", i);
        json entry;
        entry["id"] = s.id;
        entry["label"] = s.label;
        entry["split"] = to_string(s.split);
        entry["shape"] = to_json(s.volume.shape());
        const std::string vpath = std::string("volumes/") + stem + ".f64";
        write_raw(dir / vpath, s.volume);
        entry["volume_path"] = vpath;
        if (s.mask) {
            const std::string mpath = std::string("volumes/") + stem + ".mask.f64";
            write_raw(dir / mpath, *s.mask);
            entry["mask_path"] = mpath;
        }
        entry["checksum"] = hex64(sample_checksum(s));
        samples.push_back(std::move(entry));
    }
    json manifest;
    manifest["format_version"] = kManifestFormatVersion;
    manifest["class_count"] = ds.class_count;
    manifest["rare_threshold"] = ds.rare_threshold;
    manifest["seed"] = ds.seed ? json(*ds.seed) : json(nullptr);
    if (ds.generator_json) manifest["generator"] = json::parse(*ds.generator_json);
    manifest["samples"] = std::move(samples);

    const fs::path tmp = dir / "manifest.json.tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << manifest.dump(1) << '\n';
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, dir / "manifest.json");
}

Dataset load_dataset(const fs::path& path) {
    const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
    const fs::path dir = manifest_path.parent_path();
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("dataset: cannot open manifest " + manifest_path.string());
    json m;
    try {
        m = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("dataset: malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    require_known_keys(m, {"format_version", "class_count", "rare_threshold", "seed", "generator", "samples"},
                       "manifest");
    const int version = m.at("format_version").get<int>();
    if (version != kManifestFormatVersion) {
        throw std::runtime_error("dataset: unsupported manifest format_version " + std::to_string(version));
    }
    Dataset ds;
    ds.class_count = m.at("class_count").get<int>();
    ds.rare_threshold = m.at("rare_threshold").get<double>();
    if (m.contains("seed") && !m["seed"].is_null()) ds.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("generator")) ds.generator_json = m["generator"].dump();

    const json& entries = m.at("samples");
    ds.samples.resize(entries.size());
    parallel_for(entries.size(), [&](std::size_t i) {
        const json& e = entries[i];
        require_known_keys(e, {"id", "label", "split", "shape", "volume_path", "mask_path", "checksum"},
                           "manifest sample");
        Sample s;
        s.id = e.at("id").get<std::string>();
        s.label = e.at("label").get<ClassId>();
        s.split = split_from_string(e.at("split").get<std::string>());
        const Shape3 shape = shape_from_json(e.at("shape"));
        s.volume = read_raw(dir / e.at("volume_path").get<std::string>(), shape, s.id);
        if (e.contains("mask_path")) s.mask = read_raw(dir / e["mask_path"].get<std::string>(), shape, s.id);
        const std::uint64_t expected = parse_hex64(e.at("checksum").get<std::string>(), s.id);
        if (sample_checksum(s) != expected) {
            throw std::runtime_error("dataset: sample '" + s.id + "': checksum mismatch");
        }
        ds.samples[i] = std::move(s);
    });
    ds.validate();
    return ds;
}

}  // namespace dml
