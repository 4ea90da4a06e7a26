#include "robnas/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "robnas/checkpoint.hpp"
#include "robnas/rng.hpp"

namespace robnas {

void Dataset::validate() const {
    if (labels.empty()) throw FormatError("dataset '" + name + "' is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size())
        throw FormatError("dataset '" + name + "': images " + shape_str(images.shape()) + " do not match " +
                          std::to_string(labels.size()) + " labels");
    for (Real v : images.data())
        if (!(v >= 0 && v <= 1)) throw FormatError("dataset '" + name + "': pixel outside [0, 1]");
    for (std::size_t y : labels)
        if (y >= classes) throw FormatError("dataset '" + name + "': label out of range");
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    const std::size_t d = images.size() / std::max<std::size_t>(size(), 1);
    Shape s = images.shape();
    s[0] = rows.size();
    Dataset out{Tensor(s), {}, classes, name};
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        if (r >= size()) throw ShapeError("dataset row out of range");
        std::copy(images.ptr() + r * d, images.ptr() + (r + 1) * d, out.images.ptr() + i * d);
        out.labels.push_back(labels[r]);
    }
    return out;
}

Batch Dataset::batch(const std::vector<std::size_t>& rows) const {
    Dataset s = subset(rows);
    return {std::move(s.images), std::move(s.labels)};
}

// ---------------------------------------------------------------- IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
    if (off + 4 > b.size()) throw FormatError("truncated IDX header");
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
           std::uint32_t(b[off + 3]);
}

// 1-D area weights: out x in, rows sum to 1.
std::vector<Real> area_weights(std::size_t in, std::size_t out) {
    std::vector<Real> w(out * in, 0);
    const Real scale = static_cast<Real>(in) / static_cast<Real>(out);
    for (std::size_t o = 0; o < out; ++o) {
        const Real a = o * scale, b = (o + 1) * scale;
        for (std::size_t i = static_cast<std::size_t>(std::floor(a)); i < in && static_cast<Real>(i) < b; ++i) {
            const Real ov = std::min<Real>(b, i + 1) - std::max<Real>(a, i);
            if (ov > 0) w[o * in + i] = ov / scale;
        }
    }
    return w;
}

}  // namespace

Tensor downsample(const Tensor& images, std::size_t hw) {
    if (images.rank() != 4) throw ShapeError("downsample expects N x C x H x W");
    if (hw == 0) throw ConfigError("downsample: target size must be positive");
    const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const auto wh = area_weights(h, hw), ww = area_weights(w, hw);
    Tensor out({n, c, hw, hw});
    std::vector<Real> tmp(hw * w);
    for (std::size_t p = 0; p < n * c; ++p) {
        const Real* src = images.ptr() + p * h * w;
        std::fill(tmp.begin(), tmp.end(), 0);
        for (std::size_t o = 0; o < hw; ++o)
            for (std::size_t i = 0; i < h; ++i) {
                const Real a = wh[o * h + i];
                if (a == 0) continue;
                for (std::size_t j = 0; j < w; ++j) tmp[o * w + j] += a * src[i * w + j];
            }
        Real* dst = out.ptr() + p * hw * hw;
        for (std::size_t o = 0; o < hw; ++o)
            for (std::size_t q = 0; q < hw; ++q) {
                Real s = 0;
                for (std::size_t j = 0; j < w; ++j) s += ww[q * w + j] * tmp[o * w + j];
                dst[o * hw + q] = std::clamp<Real>(s, 0, 1);
            }
    }
    return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t target_hw,
                 std::size_t limit) {
    const auto ib = read_file(images), lb = read_file(labels);
    if (be32(ib, 0) != 2051) throw FormatError("'" + images.string() + "' is not an IDX image file (magic 2051)");
    if (be32(lb, 0) != 2049) throw FormatError("'" + labels.string() + "' is not an IDX label file (magic 2049)");
    const std::size_t n = be32(ib, 4), rows = be32(ib, 8), cols = be32(ib, 12);
    const std::size_t nl = be32(lb, 4);
    if (ib.size() != 16 + n * rows * cols)
        throw FormatError("IDX image file declares " + std::to_string(n) + " records but holds " +
                          std::to_string((ib.size() - 16) / std::max<std::size_t>(rows * cols, 1)));
    if (lb.size() != 8 + nl)
        throw FormatError("IDX label file declares " + std::to_string(nl) + " records but holds " +
                          std::to_string(lb.size() - 8));
    if (n != nl) throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (n == 0) throw FormatError("IDX files hold no records");
    const std::size_t keep = limit > 0 ? std::min(limit, n) : n;
    Dataset d{Tensor({keep, 1, rows, cols}), std::vector<std::size_t>(keep), 0, images.parent_path().filename().string()};
    for (std::size_t i = 0; i < keep * rows * cols; ++i) d.images[i] = static_cast<Real>(ib[16 + i]) / 255;
    for (std::size_t i = 0; i < keep; ++i) {
        d.labels[i] = lb[8 + i];
        d.classes = std::max(d.classes, d.labels[i] + 1);
    }
    if (target_hw > 0 && (target_hw != rows || target_hw != cols)) d.images = downsample(d.images, target_hw);
    d.validate();
    return d;
}

// ---------------------------------------------------------------- synthetic

SyntheticKind parse_synthetic_kind(std::string_view s) {
    if (s == "blobs") return SyntheticKind::blobs;
    if (s == "stripes") return SyntheticKind::stripes;
    throw ConfigError("unknown synthetic dataset '" + std::string(s) + "'");
}

Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t hw, std::size_t classes, Real noise,
                       std::uint64_t seed) {
    if (classes < 2) throw ConfigError("synthetic: need at least two classes");
    if (n < classes) throw ConfigError("synthetic: n must be >= classes");
    if (hw == 0) throw ConfigError("synthetic: image size must be positive");
    if (!(noise >= 0)) throw ConfigError("synthetic: noise must be non-negative");
    Rng proto(seed, "synthetic/prototypes"), rng(seed, "synthetic/examples");
    const std::size_t d = hw * hw;
    Dataset out{Tensor({n, 1, hw, hw}), std::vector<std::size_t>(n), classes,
                kind == SyntheticKind::blobs ? "blobs" : "stripes"};
    std::vector<Tensor> protos;
    for (std::size_t c = 0; c < classes; ++c) protos.push_back(proto.uniform_tensor({d}, 0.2, 0.8));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = i % classes;
        out.labels[i] = y;
        Real* img = out.images.ptr() + i * d;
        if (kind == SyntheticKind::blobs) {
            for (std::size_t j = 0; j < d; ++j) img[j] = protos[y][j] + noise * rng.normal();
        } else {
            const Real theta = std::numbers::pi_v<Real> * static_cast<Real>(y) / static_cast<Real>(classes);
            const Real freq = 2 * std::numbers::pi_v<Real> / std::max<Real>(Real(hw) / 2, 2);
            const Real phase = noise * std::numbers::pi_v<Real> * rng.normal();
            for (std::size_t r = 0; r < hw; ++r)
                for (std::size_t c = 0; c < hw; ++c) {
                    const Real t = freq * (c * std::cos(theta) + r * std::sin(theta)) + phase;
                    img[r * hw + c] = Real(0.5) + Real(0.4) * std::sin(t) + noise * rng.normal();
                }
        }
        for (std::size_t j = 0; j < d; ++j) img[j] = std::clamp<Real>(img[j], 0, 1);
    }
    return out;
}

// ---------------------------------------------------------------- splits and cache

Splits split(const Dataset& d, std::array<Real, 3> fractions, std::uint64_t seed) {
    Real total = 0;
    for (Real f : fractions) {
        if (!(f > 0)) throw ConfigError("split fractions must be positive");
        total += f;
    }
    if (total > 1 + 1e-12) throw ConfigError("split fractions sum above 1");
    const std::size_t n = d.size();
    std::array<std::size_t, 3> sizes{};
    std::size_t used = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        sizes[k] = static_cast<std::size_t>(std::floor(fractions[k] * static_cast<Real>(n) + 1e-9));
        used += sizes[k];
    }
    const std::size_t want = std::min<std::size_t>(n, static_cast<std::size_t>(std::floor(total * static_cast<Real>(n) + 1e-9)));
    if (want > used) sizes[0] += want - used;
    for (std::size_t k = 0; k < 3; ++k)
        if (sizes[k] == 0) throw ConfigError("split: dataset of " + std::to_string(n) + " examples leaves a split empty");

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed, "splits");
    rng.shuffle(idx);
    Splits s;
    std::size_t at = 0;
    Dataset* parts[3] = {&s.train, &s.val, &s.test};
    const char* tags[3] = {"/train", "/val", "/test"};
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<std::size_t> rows(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                      idx.begin() + static_cast<std::ptrdiff_t>(at + sizes[k]));
        at += sizes[k];
        *parts[k] = d.subset(rows);
        parts[k]->name = d.name + tags[k];
    }
    return s;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
    TensorFile f;
    Tensor labels({d.size()});
    for (std::size_t i = 0; i < d.size(); ++i) labels[i] = static_cast<Real>(d.labels[i]);
    f.tensors.push_back({"images", d.images});
    f.tensors.push_back({"labels", labels});
    f.meta = {{"kind", "dataset"}, {"name", d.name}, {"classes", d.classes}};
    save_tensors(path, f);
}

Dataset load_dataset(const std::filesystem::path& path) {
    TensorFile f = load_tensors(path);
    if (f.meta.value("kind", "") != "dataset" || !f.contains("images") || !f.contains("labels"))
        throw FormatError("'" + path.string() + "' is not a dataset cache");
    Dataset d{f.at("images"), {}, f.meta.value("classes", std::size_t{0}), f.meta.value("name", std::string())};
    const Tensor& l = f.at("labels");
    for (Real v : l.data()) {
        if (v < 0 || v != std::floor(v)) throw FormatError("dataset cache: bad label");
        d.labels.push_back(static_cast<std::size_t>(v));
    }
    d.validate();
    return d;
}

}  // namespace robnas
