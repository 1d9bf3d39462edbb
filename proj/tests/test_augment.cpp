#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracle.hpp"

using namespace cpslab;

namespace {

Tensor random_image(std::mt19937_64& rng, std::size_t C = 3, std::size_t H = 8, std::size_t W = 10) {
    return oracle::random_tensor({C, H, W}, rng, 0, 1);
}

PseudoLabelMap random_map(std::mt19937_64& rng, std::size_t B, std::size_t H, std::size_t W, int K) {
    PseudoLabelMap m(B, H, W);
    std::uniform_int_distribution<int> d(0, K - 1);
    for (int& v : m.labels) v = d(rng);
    return m;
}

CutMixMask random_mask(std::mt19937_64& seed_rng, std::size_t H, std::size_t W) {
    Rng rng(seed_rng());
    return sample_cutmix_mask(H, W, rng);
}

// Explicit per-pixel mask for the rectangle, built independently of CutMixMask::inside.
std::vector<int> dense_mask(const CutMixMask& m) {
    std::vector<int> d(m.H * m.W, 0);
    for (std::size_t y = m.top; y < m.top + m.height; ++y)
        for (std::size_t x = m.left; x < m.left + m.width; ++x) d[y * m.W + x] = 1;
    return d;
}

} // namespace

// ---- masks ----

TEST(CutMixMask, SameSeedSameMask) {
    Rng a(42), b(42);
    const auto m1 = sample_cutmix_mask(32, 48, a), m2 = sample_cutmix_mask(32, 48, b);
    EXPECT_EQ(m1.top, m2.top);
    EXPECT_EQ(m1.left, m2.left);
    EXPECT_EQ(m1.height, m2.height);
    EXPECT_EQ(m1.width, m2.width);
}

TEST(CutMixMask, AreaAndBoundsHoldOverManyDraws) {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t H = 4 + static_cast<std::size_t>(i % 61), W = 4 + static_cast<std::size_t>((i * 7) % 61);
        const auto m = sample_cutmix_mask(H, W, rng);
        const double ratio = static_cast<double>(m.area()) / static_cast<double>(H * W);
        EXPECT_GE(ratio, 0.25) << H << "x" << W;
        EXPECT_LE(ratio, 0.5) << H << "x" << W;
        EXPECT_GT(m.area(), 0u);
        EXPECT_LT(m.area(), H * W);
        EXPECT_LE(m.top + m.height, H);
        EXPECT_LE(m.left + m.width, W);
    }
}

TEST(CutMixMask, IsABinaryContiguousRectangle) {
    std::mt19937_64 seeds(8);
    for (int i = 0; i < 200; ++i) {
        const auto m = random_mask(seeds, 16, 20);
        // Rows with any ones form one contiguous run, each with the same column span.
        std::size_t ones = 0;
        long first_row = -1, last_row = -1;
        for (std::size_t y = 0; y < 16; ++y) {
            long lo = -1, hi = -1;
            for (std::size_t x = 0; x < 20; ++x)
                if (m.inside(y, x)) {
                    if (lo < 0) lo = static_cast<long>(x);
                    hi = static_cast<long>(x);
                    ++ones;
                }
            if (lo < 0) continue;
            if (first_row < 0) first_row = static_cast<long>(y);
            EXPECT_EQ(last_row < 0 ? static_cast<long>(y) : last_row + 1, static_cast<long>(y));
            last_row = static_cast<long>(y);
            EXPECT_EQ(lo, static_cast<long>(m.left));
            EXPECT_EQ(hi - lo + 1, static_cast<long>(m.width));
        }
        EXPECT_EQ(ones, m.area());
    }
}

TEST(CutMixMask, TinyFrameIsArgumentError) {
    Rng rng(1);
    EXPECT_THROW(sample_cutmix_mask(3, 10, rng), ArgumentError);
    EXPECT_THROW(sample_cutmix_mask(10, 2, rng), ArgumentError);
}

// ---- apply_cutmix ----

TEST(ApplyCutmix, DegenerateMasksSelectOneSource) {
    std::mt19937_64 rng(9);
    Tensor a = random_image(rng), b = random_image(rng);
    EXPECT_EQ(apply_cutmix(a, b, CutMixMask::all_ones(8, 10)), a);
    EXPECT_EQ(apply_cutmix(a, b, CutMixMask::all_zeros(8, 10)), b);
}

TEST(ApplyCutmix, EveryPixelComesFromTheMaskedSource) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_image(rng), b = random_image(rng);
        const auto m = random_mask(rng, 8, 10);
        const auto d = dense_mask(m);
        Tensor out = apply_cutmix(a, b, m);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 80; ++i) {
                const std::size_t k = c * 80 + i;
                EXPECT_TRUE(out[k] == a[k] || out[k] == b[k]);
                EXPECT_EQ(out[k], d[i] ? a[k] : b[k]);
            }
    }
}

TEST(ApplyCutmix, MixingAnImageWithItselfIsIdentity) {
    std::mt19937_64 rng(11);
    Tensor a = random_image(rng);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(apply_cutmix(a, a, random_mask(rng, 8, 10)), a);
}

TEST(ApplyCutmix, PerSampleMasksOnABatch) {
    std::mt19937_64 rng(12);
    Tensor a = oracle::random_tensor({2, 3, 8, 8}, rng), b = oracle::random_tensor({2, 3, 8, 8}, rng);
    std::vector<CutMixMask> masks{random_mask(rng, 8, 8), CutMixMask::all_zeros(8, 8)};
    Tensor out = apply_cutmix(a, b, masks);
    const auto d = dense_mask(masks[0]);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 64; ++i) {
            EXPECT_EQ(out[c * 64 + i], d[i] ? a[c * 64 + i] : b[c * 64 + i]);
            EXPECT_EQ(out[192 + c * 64 + i], b[192 + c * 64 + i]);
        }
}

TEST(ApplyCutmix, ShapeMismatchIsDimensionError) {
    std::mt19937_64 rng(13);
    EXPECT_THROW(apply_cutmix(random_image(rng, 3, 8, 8), random_image(rng, 3, 8, 10), CutMixMask::all_ones(8, 8)),
                 DimensionError);
    EXPECT_THROW(apply_cutmix(random_image(rng, 3, 8, 8), random_image(rng, 3, 8, 8), CutMixMask::all_ones(8, 10)),
                 DimensionError);
}

// ---- mix_pseudo_maps ----

TEST(MixPseudoMaps, EqualMapsAndDegenerateMasks) {
    std::mt19937_64 rng(14);
    auto ya = random_map(rng, 1, 8, 8, 5), yb = random_map(rng, 1, 8, 8, 5);
    EXPECT_EQ(mix_pseudo_maps(ya, ya, random_mask(rng, 8, 8)), ya);
    EXPECT_EQ(mix_pseudo_maps(ya, yb, CutMixMask::all_ones(8, 8)), ya);
    EXPECT_EQ(mix_pseudo_maps(ya, yb, CutMixMask::all_zeros(8, 8)), yb);
}

TEST(MixPseudoMaps, MatchesPerPixelSelectAndImageMixing) {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 100; ++trial) {
        auto ya = random_map(rng, 1, 12, 9, 5), yb = random_map(rng, 1, 12, 9, 5);
        const auto m = random_mask(rng, 12, 9);
        const auto d = dense_mask(m);
        const auto mixed = mix_pseudo_maps(ya, yb, m);
        // Encode each source's labels as a single-channel image and mix it with the same mask.
        Tensor ia({1, 12, 9}), ib({1, 12, 9});
        for (std::size_t i = 0; i < 108; ++i) {
            ia[i] = ya.labels[i];
            ib[i] = 100 + yb.labels[i];
        }
        Tensor im = apply_cutmix(ia, ib, m);
        for (std::size_t i = 0; i < 108; ++i) {
            EXPECT_EQ(mixed.labels[i], d[i] ? ya.labels[i] : yb.labels[i]);
            EXPECT_EQ(im[i] < 100, d[i] == 1);
        }
    }
}

TEST(MixPseudoMaps, ShapeMismatchIsDimensionError) {
    std::mt19937_64 rng(16);
    auto ya = random_map(rng, 1, 8, 8, 3), yb = random_map(rng, 1, 8, 6, 3);
    EXPECT_THROW(mix_pseudo_maps(ya, yb, CutMixMask::all_ones(8, 8)), DimensionError);
    EXPECT_THROW(mix_pseudo_maps(ya, ya, CutMixMask::all_ones(8, 6)), DimensionError);
}

// ---- weak / strong ----

TEST(WeakAugment, FlipIsAnInvolutionAndNoFlipIsIdentity) {
    std::mt19937_64 rng(17);
    Tensor img = random_image(rng);
    AugRecord flip;
    flip.flip = true;
    EXPECT_EQ(replay_weak(replay_weak(img, std::nullopt, flip).image, std::nullopt, flip).image, img);
    EXPECT_EQ(replay_weak(img, std::nullopt, AugRecord{}).image, img);
}

TEST(WeakAugment, LabelsStayAlignedWithMirroredPixels) {
    std::mt19937_64 rng(18);
    Tensor img = random_image(rng, 3, 6, 7);
    GroundTruthMap gt(1, 6, 7);
    std::uniform_int_distribution<int> d(0, 4);
    for (int& v : gt.labels) v = d(rng);
    AugRecord flip;
    flip.flip = true;
    auto r = replay_weak(img, gt, flip);
    ASSERT_TRUE(r.labels);
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 7; ++x) {
            EXPECT_EQ(r.labels->at(0, y, x), gt.at(0, y, 6 - x));
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r.image[(c * 6 + y) * 7 + x], img[(c * 6 + y) * 7 + 6 - x]);
        }
}

TEST(WeakAugment, FlipsAboutHalfTheTimeAndReplays) {
    Rng rng(19);
    std::mt19937_64 gen(19);
    Tensor img = random_image(gen);
    int flips = 0;
    for (int i = 0; i < 1000; ++i) {
        auto r = weak_augment(img, std::nullopt, rng);
        flips += r.record.flip;
        EXPECT_EQ(replay_weak(img, std::nullopt, r.record).image, r.image);
    }
    EXPECT_GT(flips, 430);
    EXPECT_LT(flips, 570);
}

TEST(StrongAugment, NullStrengthReducesToWeak) {
    std::mt19937_64 gen(20);
    Tensor img = random_image(gen);
    StrongOptions none{0, 1, 1};
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng a(s), b(s);
        auto strong = strong_augment(img, a, none);
        auto weak = weak_augment(img, std::nullopt, b);
        EXPECT_EQ(strong.image, weak.image);
        EXPECT_EQ(strong.record.flip, weak.record.flip);
    }
}

TEST(StrongAugment, BrightnessBoundsMeanShiftOnConstantImages) {
    StrongOptions bright_only{0, 0.7, 1.3};
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s);
        Tensor img({3, 8, 8}, 0.5);
        auto r = strong_augment(img, rng, bright_only);
        for (std::size_t c = 0; c < 3; ++c) {
            real mean = 0;
            for (std::size_t i = 0; i < 64; ++i) mean += r.image[c * 64 + i];
            mean /= 64;
            EXPECT_GE(mean, 0.5 * 0.7 - 1e-12);
            EXPECT_LE(mean, 0.5 * 1.3 + 1e-12);
            // Brightness is one scale per channel: the plane stays constant.
            for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(r.image[c * 64 + i], r.image[c * 64]);
        }
    }
}

TEST(StrongAugment, NoiseHasTheConfiguredSpread) {
    Rng rng(21);
    Tensor img({3, 32, 32}, 0.5);
    auto r = strong_augment(img, rng, StrongOptions{0.1, 1, 1});
    real s = 0, s2 = 0;
    for (real v : r.image.data()) {
        s += v - 0.5;
        s2 += (v - 0.5) * (v - 0.5);
    }
    const real n = static_cast<real>(r.image.size());
    EXPECT_NEAR(s / n, 0, 0.01);
    EXPECT_NEAR(std::sqrt(s2 / n), 0.1, 0.01);
}

TEST(StrongAugment, DeterministicAndReplayable) {
    std::mt19937_64 gen(22);
    Tensor img = random_image(gen);
    Rng a(5), b(5);
    auto r1 = strong_augment(img, a), r2 = strong_augment(img, b);
    EXPECT_EQ(r1.image, r2.image);
    const Tensor base = replay_weak(img, std::nullopt, r1.record).image;
    EXPECT_EQ(photometric(base, r1.record, StrongOptions{}), r1.image);
}

// ---- multi-scale ----

TEST(Multiscale, ScalesComeFromTheTrainingList) {
    std::mt19937_64 gen(23);
    Tensor img = random_image(gen, 3, 16, 16);
    GroundTruthMap gt(1, 16, 16, 1);
    Rng rng(23);
    std::set<real> seen;
    for (int i = 0; i < 300; ++i) {
        auto r = multiscale_augment(img, gt, rng);
        EXPECT_NE(std::find(kTrainingScales.begin(), kTrainingScales.end(), r.record.scale), kTrainingScales.end());
        seen.insert(r.record.scale);
        EXPECT_EQ(r.image.shape(), img.shape());
        EXPECT_EQ(replay_multiscale(img, gt, r.record).image, r.image);
        for (int v : r.labels.labels) EXPECT_TRUE(v == 1 || v == kIgnoreLabel);
    }
    EXPECT_EQ(seen.size(), kTrainingScales.size());
}

TEST(Multiscale, UnitScaleWithoutOffsetIsIdentity) {
    std::mt19937_64 gen(24);
    Tensor img = random_image(gen, 3, 8, 8);
    GroundTruthMap gt(1, 8, 8);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) gt.labels[i] = static_cast<int>(i % 5);
    auto r = replay_multiscale(img, gt, AugRecord{});
    EXPECT_EQ(r.image, img);
    EXPECT_EQ(r.labels, gt);
}

TEST(Multiscale, DownscalePadsWithIgnore) {
    std::mt19937_64 gen(25);
    Tensor img = random_image(gen, 3, 8, 8);
    GroundTruthMap gt(1, 8, 8, 2);
    AugRecord rec;
    rec.scale = 0.5;
    auto r = replay_multiscale(img, gt, rec);
    std::size_t ignored = 0, labeled = 0;
    for (int v : r.labels.labels) (v == kIgnoreLabel ? ignored : labeled)++;
    EXPECT_EQ(labeled, 16u);
    EXPECT_EQ(ignored, 48u);
}
