#pragma once

// Segmentation metrics: streaming confusion matrix, mean IoU, and the
// agreement ("overlap ratio") between two networks' predictions.

#include <cstdint>
#include <optional>
#include <vector>

#include "cpslab/losses.hpp"

namespace cpslab {

// counts[gt][pred]; ignored pixels are never counted.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes = 0) : k_(num_classes), counts_(k_ * k_, 0) {}

    std::size_t num_classes() const { return k_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * k_ + pred]; }

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.k_ != k_) throw DimensionError("ConfusionMatrix: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

inline void accumulate(ConfusionMatrix& conf, const LabelMap& pred, const LabelMap& gt, int ignore = kIgnoreLabel) {
    if (!pred.same_shape(gt)) throw DimensionError("accumulate: prediction and ground truth shapes differ");
    const auto K = static_cast<int>(conf.num_classes());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int g = gt.labels[i];
        if (g == ignore) continue;
        const int p = pred.labels[i];
        if (g < 0 || g >= K || p < 0 || p >= K)
            throw DataError("accumulate: class out of range (gt " + std::to_string(g) + ", pred " +
                            std::to_string(p) + ", K " + std::to_string(K) + ")");
        ++conf.at(static_cast<std::size_t>(g), static_cast<std::size_t>(p));
    }
}

struct MiouResult {
    // nullopt for classes absent from both ground truth and prediction.
    std::vector<std::optional<real>> per_class;
    real mean = 0;
};

// IoU_k = diag / (row + col - diag); classes with a zero denominator are
// excluded from the mean.
inline MiouResult miou(const ConfusionMatrix& conf) {
    const std::size_t K = conf.num_classes();
    if (K == 0) throw EvaluationError("miou: empty confusion matrix");
    MiouResult r;
    r.per_class.resize(K);
    real sum = 0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < K; ++k) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < K; ++j) {
            row += conf.at(k, j);
            col += conf.at(j, k);
        }
        const std::uint64_t diag = conf.at(k, k);
        const std::uint64_t denom = row + col - diag;
        if (denom == 0) continue;
        const real iou = static_cast<real>(diag) / static_cast<real>(denom);
        r.per_class[k] = iou;
        sum += iou;
        ++present;
    }
    if (present == 0) throw EvaluationError("miou: no class present in ground truth or prediction");
    r.mean = sum / static_cast<real>(present);
    return r;
}

enum class OverlapRegion {
    GroundTruthObjects, // gt is neither background nor ignore
    PredictedObjects,   // either prediction is not background
};

struct OverlapResult {
    real ratio = 0;
    std::uint64_t region_pixels = 0;
    bool empty_region = false;
};

// Fraction of object pixels on which the two pseudo maps agree. Background is
// class 0. Returns 0 with empty_region set when the region has no pixels.
inline OverlapResult overlap_ratio(const PseudoLabelMap& y1, const PseudoLabelMap& y2, const GroundTruthMap& gt,
                                   OverlapRegion region = OverlapRegion::GroundTruthObjects, int background = 0,
                                   int ignore = kIgnoreLabel) {
    if (!y1.same_shape(y2) || !y1.same_shape(gt)) throw DimensionError("overlap_ratio: map shapes differ");
    std::uint64_t inside = 0, agree = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        bool in;
        if (region == OverlapRegion::GroundTruthObjects)
            in = gt.labels[i] != background && gt.labels[i] != ignore;
        else
            in = gt.labels[i] != ignore && (y1.labels[i] != background || y2.labels[i] != background);
        if (!in) continue;
        ++inside;
        if (y1.labels[i] == y2.labels[i]) ++agree;
    }
    OverlapResult r;
    r.region_pixels = inside;
    r.empty_region = inside == 0;
    r.ratio = inside == 0 ? 0 : static_cast<real>(agree) / static_cast<real>(inside);
    return r;
}

} // namespace cpslab
