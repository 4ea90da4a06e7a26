#include "robnas/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace robnas {

namespace {

constexpr char kMagic[8] = {'R', 'B', 'N', 'S', 'T', 'N', 'S', 'R'};

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

void put_f64(std::string& out, double d) {
    auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(bits >> (8 * i)));
}

}  // namespace

const Tensor& TensorFile::at(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.value;
    throw FormatError("tensor file has no entry '" + name + "'");
}

bool TensorFile::contains(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

void save_tensors(const std::filesystem::path& path, const TensorFile& file) {
    nlohmann::json header;
    header["format"] = "robnas-tensors/1";
    header["dtype"] = "f64le";
    header["tensors"] = nlohmann::json::array();
    header["meta"] = file.meta;
    std::string data;
    for (const auto& t : file.tensors) {
        header["tensors"].push_back(
            {{"name", t.name}, {"shape", t.value.shape()}, {"offset", data.size()}, {"count", t.value.size()}});
        for (Real v : t.value.data()) put_f64(data, static_cast<double>(v));
    }
    const std::string h = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os.write(kMagic, 8);
    put_u64(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    os.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

TensorFile load_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError("'" + path.string() + "' is not a tensor container");
    const std::uint64_t hlen = get_u64(reinterpret_cast<const unsigned char*>(bytes.data() + 8));
    if (hlen > bytes.size() - 16) throw FormatError("truncated header in '" + path.string() + "'");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad container header: ") + e.what());
    }
    if (header.value("format", "") != "robnas-tensors/1" || header.value("dtype", "") != "f64le")
        throw FormatError("unsupported container format in '" + path.string() + "'");
    const std::size_t base = 16 + hlen;
    TensorFile out;
    out.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header.at("tensors")) {
        Shape shape = e.at("shape").get<Shape>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        if (shape_numel(shape) != count) throw FormatError("container entry shape/count mismatch");
        if (base + offset + 8 * count > bytes.size()) throw FormatError("truncated data in '" + path.string() + "'");
        std::vector<Real> vals(count);
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + base + offset);
        for (std::size_t i = 0; i < count; ++i) vals[i] = static_cast<Real>(std::bit_cast<double>(get_u64(p + 8 * i)));
        out.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(vals))});
    }
    return out;
}

}  // namespace robnas
