#include "marcos/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace marcos {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'M', 'R', 'C', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_tensor_file(const std::string& path, const json& meta,
                       const std::vector<std::pair<std::string, const Mat<Real>*>>& tensors) {
    json header;
    header["version"] = kVersion;
    header["meta"] = meta;
    json dir = json::array();
    for (const auto& [name, m] : tensors) {
        dir.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    }
    header["tensors"] = dir;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "cannot write checkpoint: " + path);
    f.write(kMagic, sizeof(kMagic));
    std::uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, m] : tensors) {
        (void)name;
        f.write(reinterpret_cast<const char*>(m->data()),
                static_cast<std::streamsize>(static_cast<std::size_t>(m->size()) * sizeof(Real)));
    }
    require(f.good(), ErrorKind::io, "checkpoint write failed: " + path);
}

NamedTensors read_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "cannot read checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    require(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::parse,
            "not a checkpoint file: " + path);
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    require(ver == kVersion, ErrorKind::parse,
            "unsupported checkpoint version " + std::to_string(ver));
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    require(f.good() && hlen > 0 && hlen < (1ull << 30), ErrorKind::parse, "corrupt checkpoint header");
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    require(f.good(), ErrorKind::parse, "truncated checkpoint header");

    json header;
    try {
        header = json::parse(hs);
    } catch (const std::exception& e) {
        fail(ErrorKind::parse, std::string("bad checkpoint header: ") + e.what());
    }

    NamedTensors out;
    out.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
        Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
        Mat<Real> m(rows, cols);
        f.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(static_cast<std::size_t>(m.size()) * sizeof(Real)));
        require(f.good() || m.size() == 0, ErrorKind::parse, "truncated tensor data: " + name);
        out.tensors.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

std::uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "cannot read file: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
        if (f.eof()) break;
    }
    return h;
}

}  // namespace marcos
