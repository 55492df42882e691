#include "cllab/tensor_io.hpp"

#include <fstream>

#include <json.hpp>

#include "cllab/errors.hpp"

namespace cllab {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + p.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("short write: " + p.string());
}

std::string read_text_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + p.string());
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

void write_tensor_dir(const fs::path& dir, const NamedTensors& tensors) {
    fs::create_directories(dir);
    json manifest = json::array();
    for (const auto& [name, t] : tensors) {
        const std::string file = name + ".bin";
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = dtype_name(t.dtype());
        entry["file"] = file;
        entry["byte_len"] = t.byte_size();
        manifest.push_back(entry);

        std::ofstream blob(dir / file, std::ios::binary | std::ios::trunc);
        if (!blob) throw IoError("cannot open blob for writing: " + (dir / file).string());
        blob.write(reinterpret_cast<const char*>(t.raw()),
                   static_cast<std::streamsize>(t.byte_size()));
        if (!blob) throw IoError("short write on blob: " + (dir / file).string());
    }
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

NamedTensors read_tensor_dir(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw FormatError("missing manifest.json in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(read_text_file(mpath));
    } catch (const json::exception& e) {
        throw FormatError("manifest.json in " + dir.string() + " is not valid JSON: " + e.what());
    }
    if (!manifest.is_array()) throw FormatError("manifest.json must be a JSON array");

    NamedTensors out;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const DType dt = dtype_from_name(entry.at("dtype").get<std::string>());
        const std::string file = entry.at("file").get<std::string>();
        const uint64_t byte_len = entry.at("byte_len").get<uint64_t>();

        const uint64_t expected =
            static_cast<uint64_t>(shape_numel(shape)) * dtype_size(dt);
        if (byte_len != expected)
            throw FormatError("tensor '" + name + "': manifest byte_len " +
                              std::to_string(byte_len) + " does not match shape " +
                              shape_to_string(shape));

        const fs::path bpath = dir / file;
        std::ifstream blob(bpath, std::ios::binary);
        if (!blob) throw FormatError("tensor '" + name + "': missing blob " + bpath.string());
        blob.seekg(0, std::ios::end);
        const uint64_t fsize = static_cast<uint64_t>(blob.tellg());
        if (fsize != byte_len)
            throw FormatError("tensor '" + name + "': blob is " + std::to_string(fsize) +
                              " bytes, manifest says " + std::to_string(byte_len));
        blob.seekg(0);

        Tensor t(shape, dt);
        blob.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(byte_len));
        if (!blob) throw FormatError("tensor '" + name + "': truncated read");
        out.emplace_back(name, std::move(t));
    }
    return out;
}

}  // namespace cllab
