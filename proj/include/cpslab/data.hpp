#pragma once

// Synthetic shape-segmentation data and the labeled/unlabeled split.
//
// Each image is a textured background with 1-4 painted shapes. A class is a
// (shape kind, colour family) pair: kind = (c-1) mod 3 over
// {rectangle, ellipse, triangle}, family = (c-1) mod 4 over
// {red, green, blue, yellow}. With probability `distractor_prob` a shape is
// painted in a random family instead of its own, so colour alone does not
// determine the class.
//
// Generator contract (documented bounds, checked by tests):
//   - class 0 (background) covers at least 20% of every sample: a shape that
//     would push it below is not painted;
//   - each shape's bounding box side lies in [min_size*H, max_size*H] (resp. W);
//   - foreground classes are drawn uniformly, so over many samples each
//     foreground class receives between 0.5x and 1.5x the mean foreground
//     class share (triangles fill half their box, ellipses pi/4).
//
// Dataset cache layout (little-endian):
//   magic "CPSDATA1", u32 version = 1, u64 n, u32 H, u32 W, u32 K, u64 seed,
//   then per sample: 3*H*W f64 image values (CHW order), H*W u8 labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cpslab/io.hpp"
#include "cpslab/losses.hpp"
#include "cpslab/rng.hpp"
#include "cpslab/tensor.hpp"

namespace cpslab {

struct ToySample {
    Tensor image;          // [3,H,W] in [0,1]
    GroundTruthMap labels; // [1,H,W]
    std::size_t id = 0;
};

struct ToyDataOptions {
    real distractor_prob = 0; // chance a shape is painted in a foreign family
    real pixel_noise = 0.08;
    real color_jitter = 0.12;
    // Shape bounding-box side as a fraction of the frame side.
    real min_size = 0.25;
    real max_size = 0.55;
};

struct Dataset {
    std::size_t height = 0, width = 0, num_classes = 0;
    std::uint64_t seed = 0;
    std::vector<ToySample> samples;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

inline constexpr std::array<std::array<real, 3>, 4> kFamilies{{
    {0.85, 0.25, 0.20}, // red
    {0.20, 0.75, 0.30}, // green
    {0.25, 0.35, 0.90}, // blue
    {0.90, 0.80, 0.20}, // yellow
}};

enum class ShapeKind { Rectangle, Ellipse, Triangle };

inline bool shape_covers(ShapeKind kind, real y, real x, real top, real left, real h, real w, bool point_up) {
    const real u = (y - top) / h, v = (x - left) / w; // in [0,1) when inside the box
    if (u < 0 || u >= 1 || v < 0 || v >= 1) return false;
    switch (kind) {
    case ShapeKind::Rectangle: return true;
    case ShapeKind::Ellipse: {
        const real dy = 2 * u - 1, dx = 2 * v - 1;
        return dy * dy + dx * dx <= 1;
    }
    case ShapeKind::Triangle: {
        const real depth = point_up ? u : 1 - u; // 0 at the apex row
        return std::abs(2 * v - 1) <= depth;
    }
    }
    return false;
}

inline ToySample render_sample(std::size_t id, std::size_t H, std::size_t W, std::size_t K, std::uint64_t seed,
                               const ToyDataOptions& opt) {
    Rng rng = derive(seed, "toy.sample", id);
    ToySample s{Tensor(Shape{3, H, W}), GroundTruthMap(1, H, W, 0), id};

    // Background: dim base colour, linear gradient and a sinusoidal texture.
    std::array<real, 3> base{};
    for (real& c : base) c = uniform(rng, 0.15, 0.55);
    const real gy = uniform(rng, -0.15, 0.15), gx = uniform(rng, -0.15, 0.15);
    const real freq = uniform(rng, 0.15, 0.6), phase = uniform(rng, 0, 6.283185307179586);
    const real amp = uniform(rng, 0.02, 0.1);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const real fy = static_cast<real>(y) / static_cast<real>(H), fx = static_cast<real>(x) / static_cast<real>(W);
            const real tex = amp * std::sin(freq * static_cast<real>(x + y) + phase);
            for (std::size_t c = 0; c < 3; ++c) s.image[(c * H + y) * W + x] = base[c] + gy * fy + gx * fx + tex;
        }

    // Shapes, painted in order; later shapes occlude earlier ones.
    const int count = uniform_int(rng, 1, 4);
    std::size_t background = H * W;
    const real min_h = static_cast<real>(H) * opt.min_size, max_h = static_cast<real>(H) * opt.max_size;
    const real min_w = static_cast<real>(W) * opt.min_size, max_w = static_cast<real>(W) * opt.max_size;
    for (int k = 0; k < count; ++k) {
        const int cls = uniform_int(rng, 1, static_cast<int>(K) - 1);
        const auto kind = static_cast<ShapeKind>((cls - 1) % 3);
        std::size_t family = static_cast<std::size_t>(cls - 1) % kFamilies.size();
        if (coin(rng, opt.distractor_prob)) family = static_cast<std::size_t>(uniform_int(rng, 0, 3));
        std::array<real, 3> colour = kFamilies[family];
        for (real& c : colour) c += uniform(rng, -opt.color_jitter, opt.color_jitter);
        const real h = uniform(rng, min_h, max_h), w = uniform(rng, min_w, max_w);
        const real top = uniform(rng, 0, static_cast<real>(H) - h), left = uniform(rng, 0, static_cast<real>(W) - w);
        const bool point_up = coin(rng);
        std::vector<std::size_t> covered;
        std::size_t newly_covered = 0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (shape_covers(kind, static_cast<real>(y) + 0.5, static_cast<real>(x) + 0.5, top, left, h, w, point_up)) {
                    covered.push_back(y * W + x);
                    newly_covered += s.labels.labels[y * W + x] == 0;
                }
        if (5 * (background - newly_covered) < H * W) continue;
        background -= newly_covered;
        for (std::size_t i : covered) {
            s.labels.labels[i] = cls;
            for (std::size_t c = 0; c < 3; ++c) s.image[c * H * W + i] = colour[c];
        }
    }

    std::normal_distribution<real> noise(0, opt.pixel_noise);
    for (real& v : s.image.data()) v = std::clamp(v + noise(rng), real(0), real(1));
    return s;
}

} // namespace detail

inline Dataset generate_toy_dataset(std::size_t n, std::size_t H, std::size_t W, std::size_t K, std::uint64_t seed,
                                    const ToyDataOptions& opt = {}) {
    if (K < 2) throw ArgumentError("generate_toy_dataset: need at least 2 classes");
    if (H < 16 || W < 16) throw ArgumentError("generate_toy_dataset: frame must be at least 16x16");
    if (n < 1) throw ArgumentError("generate_toy_dataset: need at least one sample");
    if (K > 254) throw ArgumentError("generate_toy_dataset: at most 254 classes");
    if (!(opt.min_size > 0 && opt.min_size <= opt.max_size && opt.max_size <= 1))
        throw ArgumentError("generate_toy_dataset: shape sizes must satisfy 0 < min_size <= max_size <= 1");
    if (!(opt.distractor_prob >= 0 && opt.distractor_prob <= 1))
        throw ArgumentError("generate_toy_dataset: distractor_prob must lie in [0, 1]");
    Dataset d{H, W, K, seed, {}};
    d.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.samples.push_back(detail::render_sample(i, H, W, K, seed, opt));
    return d;
}

// ---- partition protocol ----

struct PartitionProtocol {
    real ratio = 1;
    std::uint64_t seed = 0;
    std::vector<std::size_t> labeled_ids;   // sorted
    std::vector<std::size_t> unlabeled_ids; // sorted
};

// Number of labeled samples: round-half-up of ratio*n, at least 1.
inline std::size_t labeled_count(std::size_t n, real ratio) {
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<real>(n) + 0.5));
    return std::clamp<std::size_t>(k, 1, n);
}

inline PartitionProtocol partition(std::size_t n, real ratio, std::uint64_t seed) {
    if (!(ratio > 0 && ratio <= 1)) throw ArgumentError("partition: ratio must lie in (0, 1]");
    if (n == 0) throw ArgumentError("partition: empty dataset");
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = derive(seed, "partition");
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::size_t k = labeled_count(n, ratio);
    PartitionProtocol p{ratio, seed, {ids.begin(), ids.begin() + static_cast<long>(k)},
                        {ids.begin() + static_cast<long>(k), ids.end()}};
    std::sort(p.labeled_ids.begin(), p.labeled_ids.end());
    std::sort(p.unlabeled_ids.begin(), p.unlabeled_ids.end());
    return p;
}

// Parses "1/8", "0.125" or "1".
inline real parse_ratio(const std::string& text) {
    try {
        std::size_t used = 0;
        const auto slash = text.find('/');
        real value;
        if (slash == std::string::npos) {
            value = std::stod(text, &used);
            if (used != text.size()) throw ArgumentError("");
        } else {
            const std::string num = text.substr(0, slash), den = text.substr(slash + 1);
            const real a = std::stod(num, &used);
            if (used != num.size()) throw ArgumentError("");
            const real b = std::stod(den, &used);
            if (used != den.size() || b == 0) throw ArgumentError("");
            value = a / b;
        }
        if (!(value > 0 && value <= 1)) throw ArgumentError("");
        return value;
    } catch (const std::exception&) {
        throw ArgumentError("invalid partition ratio '" + text + "' (expected a value in (0,1], e.g. 1/8)");
    }
}

// ---- batch streams ----

// An endless stream of ids: consecutive seeded permutations of `ids`,
// consumed `batch` at a time. Batch t covers stream positions
// [t*batch, (t+1)*batch), so every id appears once per pass before repeating.
class IdStream {
public:
    IdStream(std::vector<std::size_t> ids, std::size_t batch, std::uint64_t seed, std::string tag)
        : ids_(std::move(ids)), batch_(batch), seed_(seed), tag_(std::move(tag)) {
        if (batch_ < 1) throw ArgumentError("IdStream: batch size must be >= 1");
    }

    bool empty() const { return ids_.empty(); }
    std::size_t batch_size() const { return batch_; }
    std::size_t population() const { return ids_.size(); }

    std::vector<std::size_t> batch(std::size_t t) {
        std::vector<std::size_t> out;
        if (ids_.empty()) return out;
        out.reserve(batch_);
        for (std::size_t pos = t * batch_; pos < (t + 1) * batch_; ++pos)
            out.push_back(permutation(pos / ids_.size())[pos % ids_.size()]);
        return out;
    }

private:
    const std::vector<std::size_t>& permutation(std::size_t pass) {
        if (pass != cached_pass_ || cached_.empty()) {
            cached_ = ids_;
            Rng rng = derive(seed_, tag_, pass);
            std::shuffle(cached_.begin(), cached_.end(), rng);
            cached_pass_ = pass;
        }
        return cached_;
    }

    std::vector<std::size_t> ids_;
    std::size_t batch_;
    std::uint64_t seed_;
    std::string tag_;
    std::vector<std::size_t> cached_;
    std::size_t cached_pass_ = 0;
};

struct BatchIds {
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> unlabeled;
};

// Paired labeled/unlabeled batches. Iterations per epoch are set by the
// labeled stream: ceil(|labeled| / batch_labeled).
class BatchIterator {
public:
    BatchIterator(const PartitionProtocol& protocol, std::size_t batch_labeled, std::size_t batch_unlabeled,
                  std::uint64_t seed)
        : labeled_(protocol.labeled_ids, batch_labeled, seed, "batches.labeled"),
          unlabeled_(protocol.unlabeled_ids, batch_unlabeled, seed, "batches.unlabeled") {
        if (labeled_.empty()) throw ArgumentError("BatchIterator: no labeled samples");
    }

    std::size_t iterations_per_epoch() const {
        return (labeled_.population() + labeled_.batch_size() - 1) / labeled_.batch_size();
    }

    // Batch for global iteration t (0-based).
    BatchIds at(std::size_t t) { return {labeled_.batch(t), unlabeled_.batch(t)}; }

private:
    IdStream labeled_;
    IdStream unlabeled_;
};

// ---- access guard ----

// Read-only view of the training set that counts ground-truth reads of
// unlabeled samples. Semi-supervised methods must finish with a count of 0.
class GuardedDataset {
public:
    GuardedDataset(const Dataset& data, const PartitionProtocol& protocol) : data_(&data) {
        unlabeled_.assign(data.size(), false);
        for (std::size_t id : protocol.unlabeled_ids) unlabeled_.at(id) = true;
    }

    const Dataset& info() const { return *data_; }
    const Tensor& image(std::size_t id) const { return data_->samples.at(id).image; }

    const GroundTruthMap& labels(std::size_t id) const {
        if (unlabeled_.at(id)) ++unlabeled_reads_;
        return data_->samples.at(id).labels;
    }

    std::size_t unlabeled_gt_reads() const { return unlabeled_reads_; }

private:
    const Dataset* data_;
    std::vector<bool> unlabeled_;
    mutable std::size_t unlabeled_reads_ = 0;
};

// ---- cache file / exports ----

inline void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    io::put_bytes(os, "CPSDATA1");
    io::put_u32(os, 1);
    io::put_u64(os, d.size());
    io::put_u32(os, static_cast<std::uint32_t>(d.height));
    io::put_u32(os, static_cast<std::uint32_t>(d.width));
    io::put_u32(os, static_cast<std::uint32_t>(d.num_classes));
    io::put_u64(os, d.seed);
    for (const auto& s : d.samples) {
        for (real v : s.image.values()) io::put_f64(os, v);
        for (int l : s.labels.labels) io::put_u8(os, static_cast<std::uint8_t>(l));
    }
    if (!os) throw Error("failed writing " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    if (io::get_bytes(is, 8) != "CPSDATA1") throw DataError("dataset cache: bad magic");
    if (const auto v = io::get_u32(is); v != 1) throw DataError("dataset cache: unsupported version " + std::to_string(v));
    const std::uint64_t n = io::get_u64(is);
    Dataset d;
    d.height = io::get_u32(is);
    d.width = io::get_u32(is);
    d.num_classes = io::get_u32(is);
    d.seed = io::get_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        ToySample s{Tensor(Shape{3, d.height, d.width}), GroundTruthMap(1, d.height, d.width), i};
        for (real& v : s.image.data()) v = io::get_f64(is);
        for (int& l : s.labels.labels) {
            l = io::get_u8(is);
            if (l != kIgnoreLabel && static_cast<std::size_t>(l) >= d.num_classes)
                throw DataError("dataset cache: label out of range");
        }
        d.samples.push_back(std::move(s));
    }
    return d;
}

// Binary PPM (P6) of a [3,H,W] image in [0,1].
inline void write_ppm(const Tensor& image, const std::string& path) {
    const std::size_t H = image.dim(1), W = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os << "P6\n" << W << ' ' << H << "\n255\n";
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const real v = std::clamp(image[(c * H + y) * W + x], real(0), real(1));
                os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
            }
}

// Binary PGM (P5) of a label map, classes spread over the grey range.
inline void write_label_pgm(const LabelMap& labels, std::size_t num_classes, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os << "P5\n" << labels.width << ' ' << labels.height << "\n255\n";
    const std::size_t step = 255 / std::max<std::size_t>(1, num_classes - 1);
    for (std::size_t y = 0; y < labels.height; ++y)
        for (std::size_t x = 0; x < labels.width; ++x) {
            const int l = labels.at(0, y, x);
            os.put(static_cast<char>(l == kIgnoreLabel ? 255 : static_cast<int>(static_cast<std::size_t>(l) * step)));
        }
}

} // namespace cpslab
