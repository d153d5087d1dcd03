#include "mw/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mw {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

std::string file_name_for(const std::string& name) {
    std::string out;
    for (char c : name) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '.';
    return out + ".wpt";
}

}  // namespace

void write_tensor_file(const fs::path& path, const Tensor<float>& t) {
    if (t.rank() > 255) throw ShapeError("tensor rank too large for checkpoint");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write("WPT0", 4);
    const auto rank = static_cast<std::uint8_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::size_t d : t.shape()) {
        const auto e = static_cast<std::uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&e), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) throw std::runtime_error("short write to " + path.string());
}

Tensor<float> read_tensor_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "WPT0", 4) != 0) throw std::runtime_error("bad tensor magic in " + path.string());
    std::uint8_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 1);
    Shape shape(rank);
    for (auto& d : shape) {
        std::uint32_t e = 0;
        f.read(reinterpret_cast<char*>(&e), 4);
        d = e;
    }
    Tensor<float> t(shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated tensor file " + path.string());
    return t;
}

void save_checkpoint(const fs::path& dir, const std::vector<const Param<float>*>& params,
                     const std::string& config_hash, const nlohmann::json& meta) {
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::object();
    for (const Param<float>* p : params) {
        const std::string fname = file_name_for(p->name);
        if (files.contains(p->name)) throw std::runtime_error("duplicate parameter name " + p->name);
        write_tensor_file(dir / fname, p->value);
        files[p->name] = fname;
    }
    nlohmann::json man{{"format", "WPT0"}, {"config_hash", config_hash}, {"params", files}, {"meta", meta}};
    const fs::path tmp = dir / "manifest.json.tmp";
    {
        std::ofstream f(tmp);
        f << man.dump(2) << "\n";
        if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
    }
    fs::rename(tmp, dir / "manifest.json");
}

nlohmann::json read_manifest(const fs::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    return nlohmann::json::parse(f);
}

nlohmann::json load_checkpoint(const fs::path& dir, const std::vector<Param<float>*>& params) {
    nlohmann::json man = read_manifest(dir);
    const auto& files = man.at("params");
    for (Param<float>* p : params) {
        if (!files.contains(p->name)) throw std::runtime_error("checkpoint lacks parameter " + p->name);
        Tensor<float> t = read_tensor_file(dir / files[p->name].get<std::string>());
        if (t.shape() != p->value.shape()) {
            throw ShapeError("checkpoint parameter " + p->name + " has shape " + shape_str(t.shape()) +
                             ", model expects " + shape_str(p->value.shape()));
        }
        p->value = std::move(t);
        p->zero_grad();
    }
    return man;
}

}  // namespace mw
