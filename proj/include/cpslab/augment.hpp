#pragma once

// CutMix masks, weak/strong augmentation and multi-scale training crops.
//
// Images are [C,H,W] (one sample) or [B,C,H,W]; masks and flips act on the
// last two axes. Every random choice is captured in an AugRecord so that a
// transform can be replayed exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "cpslab/losses.hpp"
#include "cpslab/rng.hpp"
#include "cpslab/tensor.hpp"

namespace cpslab {

struct CutMixOptions {
    real min_area = 0.25;
    real max_area = 0.5;
    real min_aspect = 0.5;
    real max_aspect = 2.0;
};

// Rectangular binary mask, 1 inside [top, top+height) x [left, left+width).
struct CutMixMask {
    std::size_t H = 0, W = 0;
    std::size_t top = 0, left = 0, height = 0, width = 0;

    bool inside(std::size_t y, std::size_t x) const {
        return y >= top && y < top + height && x >= left && x < left + width;
    }
    std::size_t area() const { return height * width; }

    // Degenerate masks for reductions and tests: everything from the first
    // source, or everything from the second.
    static CutMixMask all_ones(std::size_t H, std::size_t W) { return {H, W, 0, 0, H, W}; }
    static CutMixMask all_zeros(std::size_t H, std::size_t W) { return {H, W, 0, 0, 0, 0}; }
};

inline CutMixMask sample_cutmix_mask(std::size_t H, std::size_t W, Rng& rng, const CutMixOptions& opt = {}) {
    if (H < 4 || W < 4) throw ArgumentError("sample_cutmix_mask: frame must be at least 4x4");
    const real frame = static_cast<real>(H * W);
    const real area = uniform(rng, opt.min_area, opt.max_area) * frame;
    const real aspect = uniform(rng, opt.min_aspect, opt.max_aspect); // height / width
    auto h = static_cast<std::size_t>(std::clamp(std::lround(std::sqrt(area * aspect)), 1L, static_cast<long>(H)));
    auto w = static_cast<std::size_t>(
        std::clamp(std::lround(area / static_cast<real>(h)), 1L, static_cast<long>(W)));
    // Rounding and clamping may push the area outside the band; nudge back.
    while (static_cast<real>(h * w) < opt.min_area * frame) {
        if (w < W) ++w;
        else ++h;
    }
    while (static_cast<real>(h * w) > opt.max_area * frame) {
        if (w > 1 && (w >= h || h == 1)) --w;
        else --h;
    }
    CutMixMask m{H, W, 0, 0, h, w};
    m.top = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(H - h)));
    m.left = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(W - w)));
    return m;
}

namespace detail {

inline void require_masks(const Tensor& t, std::span<const CutMixMask> masks, const char* op) {
    if (t.rank() < 2) throw DimensionError(std::string(op) + ": tensor needs spatial axes");
    const std::size_t H = t.dim(t.rank() - 2), W = t.dim(t.rank() - 1);
    const std::size_t batch = t.rank() == 4 ? t.dim(0) : 1;
    if (masks.size() != 1 && masks.size() != batch)
        throw DimensionError(std::string(op) + ": need 1 or " + std::to_string(batch) + " masks");
    for (const auto& m : masks)
        if (m.H != H || m.W != W) throw DimensionError(std::string(op) + ": mask frame does not match tensor");
}

} // namespace detail

// out = M*a + (1-M)*b, mask broadcast over channels. For a [B,C,H,W] batch,
// pass one mask for all samples or one per sample.
inline Tensor apply_cutmix(const Tensor& a, const Tensor& b, std::span<const CutMixMask> masks) {
    if (a.shape() != b.shape())
        throw DimensionError("apply_cutmix: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " differ");
    detail::require_masks(a, masks, "apply_cutmix");
    const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1), plane = H * W;
    const std::size_t batch = a.rank() == 4 ? a.dim(0) : 1;
    const std::size_t per_sample = a.size() / batch;
    Tensor out(a.shape());
    for (std::size_t s = 0; s < batch; ++s) {
        const CutMixMask& m = masks[masks.size() == 1 ? 0 : s];
        for (std::size_t c = 0; c < per_sample / plane; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const std::size_t i = s * per_sample + c * plane + y * W + x;
                    out[i] = m.inside(y, x) ? a[i] : b[i];
                }
    }
    return out;
}

inline Tensor apply_cutmix(const Tensor& a, const Tensor& b, const CutMixMask& mask) {
    return apply_cutmix(a, b, std::span<const CutMixMask>(&mask, 1));
}

inline PseudoLabelMap mix_pseudo_maps(const PseudoLabelMap& ya, const PseudoLabelMap& yb,
                                      std::span<const CutMixMask> masks) {
    if (!ya.same_shape(yb)) throw DimensionError("mix_pseudo_maps: label maps differ in shape");
    if (masks.size() != 1 && masks.size() != ya.batch)
        throw DimensionError("mix_pseudo_maps: need 1 or " + std::to_string(ya.batch) + " masks");
    PseudoLabelMap out(ya.batch, ya.height, ya.width);
    for (std::size_t b = 0; b < ya.batch; ++b) {
        const CutMixMask& m = masks[masks.size() == 1 ? 0 : b];
        if (m.H != ya.height || m.W != ya.width) throw DimensionError("mix_pseudo_maps: mask frame mismatch");
        for (std::size_t y = 0; y < ya.height; ++y)
            for (std::size_t x = 0; x < ya.width; ++x) out.at(b, y, x) = m.inside(y, x) ? ya.at(b, y, x) : yb.at(b, y, x);
    }
    return out;
}

inline PseudoLabelMap mix_pseudo_maps(const PseudoLabelMap& ya, const PseudoLabelMap& yb, const CutMixMask& mask) {
    return mix_pseudo_maps(ya, yb, std::span<const CutMixMask>(&mask, 1));
}

// ---- weak / strong augmentation ----

inline constexpr std::array<real, 6> kTrainingScales{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};

struct AugRecord {
    bool flip = false;
    real scale = 1.0;
    // Offset of the output window inside the rescaled frame; negative values
    // mean the rescaled frame was padded.
    long crop_y = 0, crop_x = 0;
    std::uint64_t noise_seed = 0;
};

inline Tensor hflip(const Tensor& img) {
    const std::size_t W = img.dim(img.rank() - 1);
    Tensor out(img.shape());
    for (std::size_t r = 0; r < img.size() / W; ++r)
        for (std::size_t x = 0; x < W; ++x) out[r * W + x] = img[r * W + (W - 1 - x)];
    return out;
}

template <typename Map>
Map hflip(const Map& m) {
    Map out = m;
    for (std::size_t b = 0; b < m.batch; ++b)
        for (std::size_t y = 0; y < m.height; ++y)
            for (std::size_t x = 0; x < m.width; ++x) out.at(b, y, x) = m.at(b, y, m.width - 1 - x);
    return out;
}

struct WeakResult {
    Tensor image;
    std::optional<GroundTruthMap> labels;
    AugRecord record;
};

inline WeakResult replay_weak(const Tensor& img, const std::optional<GroundTruthMap>& labels, const AugRecord& rec) {
    WeakResult r{rec.flip ? hflip(img) : img, std::nullopt, rec};
    if (labels) r.labels = rec.flip ? hflip(*labels) : *labels;
    return r;
}

// Horizontal flip with probability 1/2; labels follow the image.
inline WeakResult weak_augment(const Tensor& img, const std::optional<GroundTruthMap>& labels, Rng& rng) {
    AugRecord rec;
    rec.flip = coin(rng);
    return replay_weak(img, labels, rec);
}

struct StrongOptions {
    real noise_sigma = 0.1; // fraction of the [0,1] dynamic range
    real min_brightness = 0.7;
    real max_brightness = 1.3;
};

// Per-channel brightness scale then additive Gaussian noise; both drawn from
// the record's noise seed. Geometry is untouched.
inline Tensor photometric(const Tensor& img, const AugRecord& rec, const StrongOptions& opt) {
    Rng rng(rec.noise_seed);
    const std::size_t C = img.dim(img.rank() - 3);
    const std::size_t plane = img.dim(img.rank() - 2) * img.dim(img.rank() - 1);
    Tensor out(img.shape());
    std::normal_distribution<real> noise(0, 1);
    const std::size_t groups = img.size() / (C * plane);
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t c = 0; c < C; ++c) {
            const real beta = opt.min_brightness == opt.max_brightness
                                  ? opt.min_brightness
                                  : uniform(rng, opt.min_brightness, opt.max_brightness);
            const std::size_t base = (g * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                real v = beta * img[base + i];
                if (opt.noise_sigma > 0) v += opt.noise_sigma * noise(rng);
                out[base + i] = v;
            }
        }
    return out;
}

struct StrongResult {
    Tensor image;
    AugRecord record;
};

inline StrongResult strong_augment(const Tensor& img, Rng& rng, const StrongOptions& opt = {}) {
    WeakResult w = weak_augment(img, std::nullopt, rng);
    w.record.noise_seed = rng();
    return {photometric(w.image, w.record, opt), w.record};
}

// ---- multi-scale crops ----

namespace detail {

// Bilinear (align-corners-false) resize of a [C,H,W] image.
inline Tensor resize_bilinear(const Tensor& img, std::size_t Ho, std::size_t Wo) {
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out(Shape{C, Ho, Wo});
    auto src_coord = [](std::size_t o, std::size_t in, std::size_t outn) {
        real s = (static_cast<real>(o) + real(0.5)) * static_cast<real>(in) / static_cast<real>(outn) - real(0.5);
        return std::clamp(s, real(0), static_cast<real>(in - 1));
    };
    for (std::size_t y = 0; y < Ho; ++y) {
        const real sy = src_coord(y, H, Ho);
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const real fy = sy - static_cast<real>(y0);
        for (std::size_t x = 0; x < Wo; ++x) {
            const real sx = src_coord(x, W, Wo);
            const auto x0 = static_cast<std::size_t>(sx);
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const real fx = sx - static_cast<real>(x0);
            for (std::size_t c = 0; c < C; ++c) {
                const real* p = &img[c * H * W];
                out[(c * Ho + y) * Wo + x] = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                                             fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
            }
        }
    }
    return out;
}

} // namespace detail

struct ScaledSample {
    Tensor image;
    GroundTruthMap labels;
    AugRecord record;
};

// Rescale by rec.scale (bilinear image, nearest labels) and take the HxW
// window at (crop_y, crop_x). Padding is 0 in the image and ignore in labels.
inline ScaledSample replay_multiscale(const Tensor& img, const GroundTruthMap& labels, const AugRecord& rec) {
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const auto Hs = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<real>(H) * rec.scale)));
    const auto Ws = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<real>(W) * rec.scale)));
    Tensor scaled = (Hs == H && Ws == W) ? img : detail::resize_bilinear(img, Hs, Ws);
    ScaledSample out{Tensor(Shape{C, H, W}), GroundTruthMap(1, H, W, kIgnoreLabel), rec};
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const long sy = static_cast<long>(y) + rec.crop_y, sx = static_cast<long>(x) + rec.crop_x;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(Hs) || sx >= static_cast<long>(Ws)) continue;
            for (std::size_t c = 0; c < C; ++c)
                out.image[(c * H + y) * W + x] = scaled[(c * Hs + static_cast<std::size_t>(sy)) * Ws + static_cast<std::size_t>(sx)];
            // nearest source label for the scaled pixel centre
            const auto ly = std::min(H - 1, static_cast<std::size_t>((static_cast<real>(sy) + 0.5) * static_cast<real>(H) / static_cast<real>(Hs)));
            const auto lx = std::min(W - 1, static_cast<std::size_t>((static_cast<real>(sx) + 0.5) * static_cast<real>(W) / static_cast<real>(Ws)));
            out.labels.at(0, y, x) = labels.at(0, ly, lx);
        }
    return out;
}

inline ScaledSample multiscale_augment(const Tensor& img, const GroundTruthMap& labels, Rng& rng) {
    const std::size_t H = img.dim(1), W = img.dim(2);
    AugRecord rec;
    rec.scale = kTrainingScales[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(kTrainingScales.size()) - 1))];
    const long Hs = std::max(1L, std::lround(static_cast<real>(H) * rec.scale));
    const long Ws = std::max(1L, std::lround(static_cast<real>(W) * rec.scale));
    auto offset = [&](long scaled, long frame) {
        return scaled >= frame ? static_cast<long>(uniform_int(rng, 0, static_cast<int>(scaled - frame)))
                               : -static_cast<long>(uniform_int(rng, 0, static_cast<int>(frame - scaled)));
    };
    rec.crop_y = offset(Hs, static_cast<long>(H));
    rec.crop_x = offset(Ws, static_cast<long>(W));
    return replay_multiscale(img, labels, rec);
}

} // namespace cpslab
