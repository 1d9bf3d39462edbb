#pragma once

// Supervision and consistency objectives.
//
// All cross-entropy terms are computed from log-softmax outputs, never from
// the log of a stored probability. Pseudo labels are plain integer maps and
// so carry no tape linkage: supervising with them never routes gradient back
// into the network that produced them.
//
// Normalization follows the per-image, per-pixel mean form: a consistency
// term is the mean over all B*H*W positions of the sum of its two directions.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "cpslab/ops.hpp"
#include "cpslab/tensor.hpp"

namespace cpslab {

inline constexpr int kIgnoreLabel = 255;
inline constexpr real kProbFloor = 1e-12;

// Integer map [B,H,W].
struct LabelMap {
    std::size_t batch = 0, height = 0, width = 0;
    std::vector<int> labels;

    LabelMap() = default;
    LabelMap(std::size_t b, std::size_t h, std::size_t w, int fill = 0)
        : batch(b), height(h), width(w), labels(b * h * w, fill) {}

    std::size_t size() const { return labels.size(); }
    int& at(std::size_t b, std::size_t y, std::size_t x) { return labels[(b * height + y) * width + x]; }
    int at(std::size_t b, std::size_t y, std::size_t x) const { return labels[(b * height + y) * width + x]; }
    bool same_shape(const LabelMap& o) const { return batch == o.batch && height == o.height && width == o.width; }
    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Argmax map of a confidence map; detached by construction.
struct PseudoLabelMap : LabelMap {
    using LabelMap::LabelMap;
};

// Ground truth; entries are classes in [0,K) or kIgnoreLabel.
struct GroundTruthMap : LabelMap {
    using LabelMap::LabelMap;
};

// Per-pixel class distribution, held as log-probabilities on a tape.
class ConfidenceMap {
public:
    ConfidenceMap() = default;
    explicit ConfidenceMap(Var log_probs) : logp_(log_probs) {
        detail::require_rank(logp_.value(), 4, "ConfidenceMap", "log-probabilities");
    }

    static ConfidenceMap from_logits(Var logits) { return ConfidenceMap(log_softmax_channels(logits)); }

    // Wrap fixed probabilities (tests, frozen maps). Entries are floored at
    // kProbFloor before taking the log.
    static ConfidenceMap from_probs(Tape& tape, const Tensor& probs) {
        Tensor lp(probs.shape());
        for (std::size_t i = 0; i < probs.size(); ++i) lp[i] = std::log(std::max(probs[i], kProbFloor));
        return ConfidenceMap(tape.constant(std::move(lp)));
    }

    Var log_probs() const { return logp_; }
    const Shape& shape() const { return logp_.value().shape(); }
    std::size_t batch() const { return shape()[0]; }
    std::size_t classes() const { return shape()[1]; }
    std::size_t height() const { return shape()[2]; }
    std::size_t width() const { return shape()[3]; }
    std::size_t pixels() const { return batch() * height() * width(); }

    Tensor probs() const {
        Tensor p = logp_.value();
        for (real& v : p.data()) v = std::exp(v);
        return p;
    }

private:
    Var logp_;
};

// Per-pixel argmax; ties resolve to the lowest class index.
inline PseudoLabelMap pseudo_label(const ConfidenceMap& map) {
    const Tensor& lp = map.log_probs().value();
    const std::size_t B = map.batch(), K = map.classes(), H = map.height(), W = map.width(), n = H * W;
    PseudoLabelMap out(B, H, W);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            real best_v = lp[b * K * n + i];
            for (std::size_t k = 1; k < K; ++k) {
                const real v = lp[(b * K + k) * n + i];
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            out.labels[b * n + i] = static_cast<int>(best);
        }
    return out;
}

namespace detail {

inline void require_map_shape(const ConfidenceMap& p, const LabelMap& t, const char* op) {
    if (t.batch != p.batch() || t.height != p.height() || t.width != p.width())
        throw DimensionError(std::string(op) + ": label map [" + std::to_string(t.batch) + "," +
                             std::to_string(t.height) + "," + std::to_string(t.width) +
                             "] does not match confidence map " + shape_str(p.shape()));
}

inline void require_same_maps(const ConfidenceMap& a, const ConfidenceMap& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": confidence maps " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

inline Var zero_loss(const ConfidenceMap& p) { return p.log_probs().tape().constant(Tensor::scalar(0)); }

} // namespace detail

// Mean cross-entropy over non-ignored pixels. When every pixel is ignored the
// result is 0 and *all_ignored (if given) is set.
inline Var pixel_ce(const ConfidenceMap& p, const LabelMap& target, int ignore = kIgnoreLabel,
                    bool* all_ignored = nullptr) {
    detail::require_map_shape(p, target, "pixel_ce");
    const auto K = static_cast<int>(p.classes());
    std::vector<real> weight(target.size(), 0);
    std::size_t counted = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const int t = target.labels[i];
        if (t == ignore) continue;
        if (t < 0 || t >= K)
            throw DataError("pixel_ce: label " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
        weight[i] = 1;
        ++counted;
    }
    if (all_ignored) *all_ignored = counted == 0;
    if (counted == 0) return detail::zero_loss(p);
    const real inv = real(1) / static_cast<real>(counted);
    for (real& w : weight) w *= inv;
    return weighted_nll(p.log_probs(), target.labels, weight);
}

// Cross-entropy of each network against ground truth, summed over the two.
inline Var supervision_loss(const ConfidenceMap& p1, const ConfidenceMap& p2, const GroundTruthMap& gt) {
    detail::require_same_maps(p1, p2, "supervision_loss");
    return add(pixel_ce(p1, gt), pixel_ce(p2, gt));
}

// p1 supervised by y2 and p2 supervised by y1, given explicit pseudo maps.
inline Var cross_supervision(const ConfidenceMap& p1, const PseudoLabelMap& y2, const ConfidenceMap& p2,
                             const PseudoLabelMap& y1) {
    detail::require_same_maps(p1, p2, "cross_supervision");
    return add(pixel_ce(p1, y2), pixel_ce(p2, y1));
}

inline Var cps_loss(const ConfidenceMap& p1, const ConfidenceMap& p2) {
    detail::require_same_maps(p1, p2, "cps_loss");
    const PseudoLabelMap y1 = pseudo_label(p1);
    const PseudoLabelMap y2 = pseudo_label(p2);
    return cross_supervision(p1, y2, p2, y1);
}

// Same formula as cps_loss, applied to labeled-batch outputs. Ground truth is
// deliberately not an argument.
inline Var cps_loss_labeled(const ConfidenceMap& p1, const ConfidenceMap& p2) { return cps_loss(p1, p2); }

// Mean over pixels of ||p1 - p2||^2 + ||p2 - p1||^2.
inline Var cpc_loss(const ConfidenceMap& p1, const ConfidenceMap& p2) {
    detail::require_same_maps(p1, p2, "cpc_loss");
    Var q1 = exp(p1.log_probs());
    Var q2 = exp(p2.log_probs());
    Var both = add(sum(square(sub(q1, q2))), sum(square(sub(q2, q1))));
    return scale(both, real(1) / static_cast<real>(p1.pixels()));
}

// Mean over pixels of ||p - target||^2 where target is a fixed probability
// map (mean-teacher consistency; the target never receives gradient).
inline Var probability_consistency(const ConfidenceMap& p, const Tensor& target_probs) {
    if (target_probs.shape() != p.shape())
        throw DimensionError("probability_consistency: target " + shape_str(target_probs.shape()) +
                             " does not match " + shape_str(p.shape()));
    Var q = exp(p.log_probs());
    Var t = q.tape().constant(target_probs);
    return scale(sum(square(sub(q, t))), real(1) / static_cast<real>(p.pixels()));
}

struct OhemOptions {
    real threshold = 0.7;
    // Minimum kept pixels; 0 selects 1/16 of the scored pixels.
    std::size_t min_kept = 0;
};

// Indices of pixels OHEM keeps: those whose true-class probability is below
// the threshold, topped up with the hardest remaining pixels to reach
// min_kept. Order of the result is ascending index.
inline std::vector<std::size_t> ohem_selection(const ConfidenceMap& p, const LabelMap& target, real threshold,
                                               std::size_t min_kept, int ignore = kIgnoreLabel) {
    if (!(threshold > 0 && threshold <= 1)) throw ArgumentError("ohem: threshold must lie in (0, 1]");
    if (min_kept < 1) throw ArgumentError("ohem: min_kept must be >= 1");
    detail::require_map_shape(p, target, "ohem");
    const Tensor& lp = p.log_probs().value();
    const std::size_t K = p.classes(), n = p.height() * p.width();
    struct Scored {
        real prob;
        std::size_t index;
    };
    std::vector<Scored> valid;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const int t = target.labels[i];
        if (t == ignore) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= K)
            throw DataError("ohem: label " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
        const std::size_t b = i / n, pix = i % n;
        valid.push_back({std::exp(lp[(b * K + static_cast<std::size_t>(t)) * n + pix]), i});
    }
    std::vector<std::size_t> keep;
    for (const auto& s : valid)
        if (s.prob < threshold) keep.push_back(s.index);
    if (keep.size() < min_kept) {
        std::stable_sort(valid.begin(), valid.end(), [](const Scored& a, const Scored& b) { return a.prob < b.prob; });
        keep.clear();
        for (std::size_t k = 0; k < std::min(min_kept, valid.size()); ++k) keep.push_back(valid[k].index);
        std::sort(keep.begin(), keep.end());
    }
    return keep;
}

inline Var ohem_ce(const ConfidenceMap& p, const LabelMap& target, real threshold, std::size_t min_kept,
                   int ignore = kIgnoreLabel) {
    const std::vector<std::size_t> keep = ohem_selection(p, target, threshold, min_kept, ignore);
    if (keep.empty()) return detail::zero_loss(p);
    std::vector<real> weight(target.size(), 0);
    const real inv = real(1) / static_cast<real>(keep.size());
    for (std::size_t i : keep) weight[i] = inv;
    return weighted_nll(p.log_probs(), target.labels, weight);
}

// A network supervised by its own argmax.
inline Var sps_loss(const ConfidenceMap& p) { return pixel_ce(p, pseudo_label(p)); }

struct LossBreakdown {
    real l_s = 0;
    real l_cps_labeled = 0;
    real l_cps_unlabeled = 0;
    real l_cpc = 0;
    real total = 0;
    real lambda = 0;
};

// l_s + lambda * (l_cps_labeled + l_cps_unlabeled)
inline real total_loss(const LossBreakdown& parts) {
    if (parts.lambda < 0) throw ConfigError("total_loss: lambda must be non-negative");
    return parts.l_s + parts.lambda * (parts.l_cps_labeled + parts.l_cps_unlabeled);
}

} // namespace cpslab
