#pragma once

// Small batches, networks and whole-step checks shared by the unit tests and
// the acceptance runner.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpslab/cpslab.hpp"

namespace fixtures {

using namespace cpslab;

struct Batches {
    LabeledBatch lab;
    UnlabeledBatch unl;
};

// The first `labeled` toy samples form the labeled batch, the next
// `unlabeled` the unlabeled one (unaugmented).
inline Batches micro_batches(std::size_t labeled, std::size_t unlabeled, std::uint64_t seed, std::size_t K = 3) {
    const auto d = generate_toy_dataset(labeled + unlabeled, 16, 16, K, seed);
    std::vector<const Tensor*> li, ui;
    std::vector<GroundTruthMap> maps;
    for (std::size_t i = 0; i < labeled; ++i) {
        li.push_back(&d.samples[i].image);
        maps.push_back(d.samples[i].labels);
    }
    UnlabeledBatch u;
    for (std::size_t i = labeled; i < labeled + unlabeled; ++i) {
        ui.push_back(&d.samples[i].image);
        u.records.push_back({});
        u.ids.push_back(i);
    }
    if (!ui.empty()) {
        u.images = stack_images(ui);
        u.raw = u.images;
    }
    return {{stack_images(li), stack_labels(maps)}, std::move(u)};
}

inline SegNetConfig small_net(std::size_t K = 3) {
    SegNetConfig c;
    c.num_classes = K;
    c.widths = {3, 4};
    return c;
}

inline Learner learner(std::uint64_t seed, std::size_t K = 3) {
    SegNetConfig c = small_net(K);
    c.seed = seed;
    return Learner(build_segnet(c), SgdOptions{});
}

inline std::vector<real> flat(const std::vector<Tensor>& ts) {
    std::vector<real> out;
    for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
}

inline std::vector<real> flat(const SegNet& net) { return flat(net.values()); }

inline real max_abs_diff(const std::vector<real>& a, const std::vector<real>& b) {
    if (a.size() != b.size()) return INFINITY;
    real worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

struct StepGradientCheck {
    real rel_error = 0;          // ||analytic - numeric|| / max norm, over compared coordinates
    std::size_t coordinates = 0; // parameters of both networks
    std::size_t skipped = 0;     // perturbation flipped a pseudo label
};

// Central differences of the full CPS objective (both networks' parameters)
// on a 2+2 micro-batch against the reverse-mode gradient. The objective is
// piecewise smooth (argmax maps are locally constant), so a coordinate whose
// perturbation flips any pseudo label is left out and counted.
inline StepGradientCheck cps_step_gradient_check(std::uint64_t data_seed, std::uint64_t seed1, std::uint64_t seed2,
                                                 real lambda = 1.5, real h = 1e-5) {
    const Batches batches = micro_batches(2, 2, data_seed);
    const Learner l1 = learner(seed1), l2 = learner(seed2);
    const std::size_t n1 = l1.net.parameters().size();

    Tape tape;
    BoundNet b1(l1.net, tape), b2(l2.net, tape);
    tape.backward(cps_objective(b1, b2, batches.lab, batches.unl, lambda, {}).total);
    std::vector<real> analytic = flat(b1.gradients());
    for (real g : flat(b2.gradients())) analytic.push_back(g);

    auto pseudo_maps = [&](const SegNet& a, const SegNet& b) {
        return std::vector<std::vector<int>>{predict(a, batches.lab.images).labels, predict(b, batches.lab.images).labels,
                                             predict(a, batches.unl.images).labels, predict(b, batches.unl.images).labels};
    };
    const auto base_maps = pseudo_maps(l1.net, l2.net);
    auto value_at = [&](const std::vector<Tensor>& vals, bool& flipped) {
        SegNet a = l1.net, b = l2.net;
        a.set_values({vals.begin(), vals.begin() + static_cast<long>(n1)});
        b.set_values({vals.begin() + static_cast<long>(n1), vals.end()});
        flipped = flipped || pseudo_maps(a, b) != base_maps;
        Tape t;
        BoundNet x(a, t), y(b, t);
        return cps_objective(x, y, batches.lab, batches.unl, lambda, {}).parts.total;
    };

    std::vector<Tensor> vals = l1.net.values();
    for (auto& t : l2.net.values()) vals.push_back(t);
    StepGradientCheck out;
    real diff = 0, na = 0, nn = 0;
    for (std::size_t k = 0; k < vals.size(); ++k)
        for (std::size_t i = 0; i < vals[k].size(); ++i, ++out.coordinates) {
            const real keep = vals[k][i];
            bool flipped = false;
            vals[k][i] = keep + h;
            const real up = value_at(vals, flipped);
            vals[k][i] = keep - h;
            const real down = value_at(vals, flipped);
            vals[k][i] = keep;
            if (flipped) {
                ++out.skipped;
                continue;
            }
            const real a = analytic[out.coordinates], n = (up - down) / (2 * h);
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
    out.rel_error = std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nn));
    return out;
}

// Largest difference between net1's gradient from the CPS objective and the
// gradient obtained when net2's pseudo maps are computed on a separate tape
// and supplied as frozen constants.
inline real stop_gradient_gap(std::uint64_t data_seed, std::uint64_t seed1, std::uint64_t seed2, real lambda = 1.5) {
    const Batches batches = micro_batches(2, 2, data_seed);
    const Learner l1 = learner(seed1), l2 = learner(seed2);

    Tape tape;
    BoundNet b1(l1.net, tape), b2(l2.net, tape);
    tape.backward(cps_objective(b1, b2, batches.lab, batches.unl, lambda, {}).total);
    const auto full = flat(b1.gradients());

    const PseudoLabelMap y2_lab = predict(l2.net, batches.lab.images);
    const PseudoLabelMap y2_unl = predict(l2.net, batches.unl.images);
    Tape solo;
    BoundNet c1(l1.net, solo);
    ConfidenceMap p1 = run(c1, batches.lab.images), q1 = run(c1, batches.unl.images);
    solo.backward(add(pixel_ce(p1, batches.lab.labels), scale(add(pixel_ce(p1, y2_lab), pixel_ce(q1, y2_unl)), lambda)));
    return max_abs_diff(full, flat(c1.gradients()));
}

} // namespace fixtures
