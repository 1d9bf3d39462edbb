#pragma once

// Training algorithms.
//
// Each scheme is split in two layers:
//   *_objective(...)  builds the loss on a tape for given bound networks and
//                     batches, and reports its parts. Gradient checks and
//                     replay tests work at this level.
//   step_*(...)       builds the objective, back-propagates, and applies one
//                     SGD step to every trained network.
// train() drives a full run: batches, poly learning rate, per-epoch
// evaluation of the first network on the validation split.

#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpslab/augment.hpp"
#include "cpslab/data.hpp"
#include "cpslab/losses.hpp"
#include "cpslab/metrics.hpp"
#include "cpslab/model.hpp"
#include "cpslab/optim.hpp"

namespace cpslab {

enum class MethodKind {
    Supervised,
    CPS,
    CPS_CutMix,
    CPC,
    MeanTeacher,
    SPS,
    SPS_CutMix,
    PseudoSegStyle,
    SelfTraining,
    CPS_SelfTraining,
};

inline constexpr MethodKind kAllMethods[] = {
    MethodKind::Supervised, MethodKind::CPS,           MethodKind::CPS_CutMix,     MethodKind::CPC,
    MethodKind::MeanTeacher, MethodKind::SPS,          MethodKind::SPS_CutMix,     MethodKind::PseudoSegStyle,
    MethodKind::SelfTraining, MethodKind::CPS_SelfTraining,
};

inline std::string method_name(MethodKind m) {
    switch (m) {
    case MethodKind::Supervised: return "supervised";
    case MethodKind::CPS: return "cps";
    case MethodKind::CPS_CutMix: return "cps-cutmix";
    case MethodKind::CPC: return "cpc";
    case MethodKind::MeanTeacher: return "mean-teacher";
    case MethodKind::SPS: return "sps";
    case MethodKind::SPS_CutMix: return "sps-cutmix";
    case MethodKind::PseudoSegStyle: return "pseudoseg";
    case MethodKind::SelfTraining: return "self-training";
    case MethodKind::CPS_SelfTraining: return "cps-self-training";
    }
    return "?";
}

inline MethodKind parse_method(const std::string& name) {
    for (MethodKind m : kAllMethods)
        if (method_name(m) == name) return m;
    throw ConfigError("unknown method '" + name + "'");
}

// Methods that train two differently initialized networks.
inline bool is_dual(MethodKind m) {
    return m == MethodKind::CPS || m == MethodKind::CPS_CutMix || m == MethodKind::CPC ||
           m == MethodKind::CPS_SelfTraining;
}

inline bool uses_cutmix(MethodKind m) { return m == MethodKind::CPS_CutMix || m == MethodKind::SPS_CutMix; }

struct TrainConfig {
    MethodKind method = MethodKind::CPS;
    real lambda = 0.5; // higher weights collapse both untrained nets onto background
    std::size_t epochs = 30;
    real base_lr = 0.02;
    real lr_power = 0.9;
    real momentum = 0.9;
    real weight_decay = 0.0005;
    std::size_t batch_labeled = 4;
    std::size_t batch_unlabeled = 4;

    std::uint64_t data_seed = 2021;
    std::uint64_t partition_seed = 1;
    std::uint64_t net1_seed = 11;
    std::uint64_t net2_seed = 12;
    std::uint64_t aug_seed = 21;

    bool ohem = false;
    OhemOptions ohem_options;
    bool cps_on_labeled = true;
    real ema_alpha = 0.99;
    real self_train_threshold = 0; // 0 keeps every pseudo label
    bool multiscale = true;         // labeled batches only
    StrongOptions strong;
    CutMixOptions cutmix;
    OverlapRegion overlap_region = OverlapRegion::GroundTruthObjects;

    // dataset and partition
    std::size_t train_size = 256;
    std::size_t val_size = 64;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t num_classes = 5;
    real ratio = 0.125;
    ToyDataOptions data;
    std::vector<std::size_t> widths{16, 32};

    void validate() const {
        if (lambda < 0) throw ConfigError("lambda must be non-negative");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (!(base_lr >= 0)) throw ConfigError("base_lr must be non-negative");
        if (batch_labeled < 1 || batch_unlabeled < 1) throw ConfigError("batch sizes must be >= 1");
        if (is_dual(method) && net1_seed == net2_seed)
            throw ConfigError("net1_seed and net2_seed must differ for " + method_name(method));
        if (uses_cutmix(method) && batch_unlabeled % 2 != 0)
            throw ConfigError("CutMix methods need an even unlabeled batch (pairs)");
        if (!(ratio > 0 && ratio <= 1)) throw ConfigError("ratio must lie in (0, 1]");
        if (!(ema_alpha >= 0 && ema_alpha < 1)) throw ConfigError("ema_alpha must lie in [0, 1)");
        if (self_train_threshold < 0 || self_train_threshold >= 1)
            throw ConfigError("self_train_threshold must lie in [0, 1)");
        if (train_size < 1 || val_size < 1) throw ConfigError("dataset sizes must be >= 1");
        if (widths.empty()) throw ConfigError("widths must be non-empty");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        const std::size_t mult = std::size_t{1} << widths.size();
        if (height % mult != 0 || width % mult != 0)
            throw ConfigError("image size must be divisible by 2^depth");
        if (height < 16 || width < 16) throw ConfigError("image size must be at least 16x16");
    }

    SegNetConfig net_config(std::uint64_t seed) const {
        SegNetConfig c;
        c.in_channels = 3;
        c.num_classes = num_classes;
        c.widths = widths;
        c.depth = widths.size();
        c.seed = seed;
        return c;
    }

    SgdOptions sgd() const { return {momentum, weight_decay}; }
};

// ---- batches ----

struct LabeledBatch {
    Tensor images; // [B,3,H,W]
    GroundTruthMap labels;
};

struct UnlabeledBatch {
    Tensor images; // weakly augmented (flip) views, [B,3,H,W]; empty when there is no unlabeled data
    Tensor raw;    // the same samples without augmentation
    std::vector<AugRecord> records;
    std::vector<std::size_t> ids;
    // Fixed supervision targets (self-training stage 3), aligned with `images`.
    std::optional<GroundTruthMap> targets;

    bool empty() const { return images.empty(); }
    std::size_t size() const { return empty() ? 0 : images.dim(0); }
};

inline Tensor stack_images(const std::vector<const Tensor*>& images) {
    const Shape& s = images.at(0)->shape();
    Tensor out(Shape{images.size(), s[0], s[1], s[2]});
    const std::size_t per = images[0]->size();
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b]->shape() != s) throw DimensionError("stack_images: inconsistent sample shapes");
        std::copy(images[b]->data().begin(), images[b]->data().end(), out.data().begin() + static_cast<long>(b * per));
    }
    return out;
}

inline GroundTruthMap stack_labels(const std::vector<GroundTruthMap>& maps) {
    GroundTruthMap out(maps.size(), maps.at(0).height, maps.at(0).width);
    const std::size_t per = maps[0].size();
    for (std::size_t b = 0; b < maps.size(); ++b)
        std::copy(maps[b].labels.begin(), maps[b].labels.end(), out.labels.begin() + static_cast<long>(b * per));
    return out;
}

// Select samples [start, start+count) of a [B,...] tensor, stepping by `stride`.
inline Tensor slice_batch(const Tensor& t, std::size_t start, std::size_t stride, std::size_t count) {
    Shape s = t.shape();
    const std::size_t per = t.size() / s[0];
    s[0] = count;
    Tensor out(s);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t src = start + k * stride;
        std::copy_n(t.data().begin() + static_cast<long>(src * per), per, out.data().begin() + static_cast<long>(k * per));
    }
    return out;
}

// Builds augmented batches. Every random draw is keyed by (aug_seed, role,
// global sample slot), so the labeled batch at iteration t is the same no
// matter which method consumes it.
class BatchMaker {
public:
    BatchMaker(const GuardedDataset& data, const TrainConfig& cfg) : data_(&data), cfg_(&cfg) {}

    LabeledBatch labeled(const std::vector<std::size_t>& ids, std::size_t t) const {
        std::vector<Tensor> imgs;
        std::vector<GroundTruthMap> maps;
        for (std::size_t j = 0; j < ids.size(); ++j) {
            Rng rng = derive(cfg_->aug_seed, "aug.labeled", t * ids.size() + j);
            WeakResult w = weak_augment(data_->image(ids[j]), data_->labels(ids[j]), rng);
            if (cfg_->multiscale) {
                ScaledSample s = multiscale_augment(w.image, *w.labels, rng);
                imgs.push_back(std::move(s.image));
                maps.push_back(std::move(s.labels));
            } else {
                imgs.push_back(std::move(w.image));
                maps.push_back(std::move(*w.labels));
            }
        }
        std::vector<const Tensor*> ptrs;
        for (const auto& i : imgs) ptrs.push_back(&i);
        return {stack_images(ptrs), stack_labels(maps)};
    }

    // Ground truth of unlabeled samples is never touched here; optional
    // pseudo targets (indexed by sample id) are flipped along with the image.
    UnlabeledBatch unlabeled(const std::vector<std::size_t>& ids, std::size_t t,
                             const std::map<std::size_t, GroundTruthMap>* pseudo = nullptr) const {
        UnlabeledBatch u;
        if (ids.empty()) return u;
        std::vector<Tensor> views;
        std::vector<GroundTruthMap> targets;
        std::vector<const Tensor*> raw;
        for (std::size_t j = 0; j < ids.size(); ++j) {
            Rng rng = derive(cfg_->aug_seed, "aug.unlabeled", t * ids.size() + j);
            std::optional<GroundTruthMap> tgt;
            if (pseudo) tgt = pseudo->at(ids[j]);
            WeakResult w = weak_augment(data_->image(ids[j]), tgt, rng);
            w.record.noise_seed = derive_seed(cfg_->aug_seed, "aug.strong", t * ids.size() + j);
            views.push_back(std::move(w.image));
            u.records.push_back(w.record);
            if (w.labels) targets.push_back(std::move(*w.labels));
            raw.push_back(&data_->image(ids[j]));
        }
        std::vector<const Tensor*> ptrs;
        for (const auto& v : views) ptrs.push_back(&v);
        u.images = stack_images(ptrs);
        u.raw = stack_images(raw);
        u.ids = ids;
        if (pseudo) u.targets = stack_labels(targets);
        return u;
    }

private:
    const GuardedDataset* data_;
    const TrainConfig* cfg_;
};

// ---- objectives ----

struct LossOptions {
    bool ohem = false;
    OhemOptions ohem_options;
    bool cps_on_labeled = true;

    static LossOptions from(const TrainConfig& c) { return {c.ohem, c.ohem_options, c.cps_on_labeled}; }
};

struct Objective {
    Var total;
    LossBreakdown parts;
};

inline real scalar_of(Var v) { return v.value().item(); }

inline Var supervised_term(const ConfidenceMap& p, const LabelMap& gt, const LossOptions& opt) {
    if (!opt.ohem) return pixel_ce(p, gt);
    const std::size_t min_kept =
        opt.ohem_options.min_kept ? opt.ohem_options.min_kept : std::max<std::size_t>(1, p.pixels() / 16);
    return ohem_ce(p, gt, opt.ohem_options.threshold, min_kept);
}

inline ConfidenceMap run(const BoundNet& net, const Tensor& images) {
    return ConfidenceMap::from_logits(forward(net, net.tape().constant(images)));
}

// Argmax of a network on images, computed on a private tape.
inline PseudoLabelMap predict(const SegNet& net, const Tensor& images) {
    Tape tape;
    BoundNet bound(net, tape);
    return pseudo_label(run(bound, images));
}

inline Objective supervised_objective(const BoundNet& net, const LabeledBatch& lab, const LossOptions& opt) {
    Var l_s = supervised_term(run(net, lab.images), lab.labels, opt);
    Objective o{l_s, {}};
    o.parts.l_s = o.parts.total = scalar_of(l_s);
    return o;
}

// L = L_s + lambda * (L_cps^l + L_cps^u). When the unlabeled batch carries
// fixed targets, they join the supervision term for both networks.
inline Objective cps_objective(const BoundNet& n1, const BoundNet& n2, const LabeledBatch& lab,
                               const UnlabeledBatch& unl, real lambda, const LossOptions& opt) {
    Tape& tape = n1.tape();
    ConfidenceMap p1 = run(n1, lab.images), p2 = run(n2, lab.images);
    Var l_s = add(supervised_term(p1, lab.labels, opt), supervised_term(p2, lab.labels, opt));
    Var l_cps_l = opt.cps_on_labeled ? cps_loss_labeled(p1, p2) : tape.constant(Tensor::scalar(0));
    Var l_cps_u = tape.constant(Tensor::scalar(0));
    if (!unl.empty()) {
        ConfidenceMap q1 = run(n1, unl.images), q2 = run(n2, unl.images);
        l_cps_u = cps_loss(q1, q2);
        if (unl.targets)
            l_s = add(l_s, add(supervised_term(q1, *unl.targets, opt), supervised_term(q2, *unl.targets, opt)));
    }
    Objective o{add(l_s, scale(add(l_cps_l, l_cps_u), lambda)), {}};
    o.parts = {scalar_of(l_s), scalar_of(l_cps_l), scalar_of(l_cps_u), 0, 0, lambda};
    o.parts.total = scalar_of(o.total);
    return o;
}

struct CutMixPairs {
    Tensor a, b; // [P,3,H,W] first and second sources of each pair
    Tensor mixed;
};

// Consecutive unlabeled samples form the pairs (0,1), (2,3), ...
inline CutMixPairs make_pairs(const UnlabeledBatch& unl, std::span<const CutMixMask> masks) {
    if (unl.size() % 2 != 0) throw ArgumentError("CutMix needs an even unlabeled batch");
    const std::size_t P = unl.size() / 2;
    if (masks.size() != P) throw ArgumentError("CutMix needs one mask per pair");
    CutMixPairs p{slice_batch(unl.images, 0, 2, P), slice_batch(unl.images, 1, 2, P), Tensor()};
    p.mixed = apply_cutmix(p.a, p.b, masks);
    return p;
}

// Each network's pseudo maps come from the two source images (no gradient),
// mixed with the pair's mask; each network's output on the mixed image is
// supervised by the other network's mixed map.
inline Objective cps_cutmix_objective(const BoundNet& n1, const BoundNet& n2, const LabeledBatch& lab,
                                      const UnlabeledBatch& unl, std::span<const CutMixMask> masks, real lambda,
                                      const LossOptions& opt) {
    Tape& tape = n1.tape();
    ConfidenceMap p1 = run(n1, lab.images), p2 = run(n2, lab.images);
    Var l_s = add(supervised_term(p1, lab.labels, opt), supervised_term(p2, lab.labels, opt));
    Var l_cps_l = opt.cps_on_labeled ? cps_loss_labeled(p1, p2) : tape.constant(Tensor::scalar(0));
    Var l_cps_u = tape.constant(Tensor::scalar(0));
    if (!unl.empty()) {
        CutMixPairs pairs = make_pairs(unl, masks);
        const PseudoLabelMap y1 = mix_pseudo_maps(predict(n1.net(), pairs.a), predict(n1.net(), pairs.b), masks);
        const PseudoLabelMap y2 = mix_pseudo_maps(predict(n2.net(), pairs.a), predict(n2.net(), pairs.b), masks);
        ConfidenceMap m1 = run(n1, pairs.mixed), m2 = run(n2, pairs.mixed);
        l_cps_u = cross_supervision(m1, y2, m2, y1);
    }
    Objective o{add(l_s, scale(add(l_cps_l, l_cps_u), lambda)), {}};
    o.parts = {scalar_of(l_s), scalar_of(l_cps_l), scalar_of(l_cps_u), 0, 0, lambda};
    o.parts.total = scalar_of(o.total);
    return o;
}

// Cross probability consistency on labeled and unlabeled outputs.
inline Objective cpc_objective(const BoundNet& n1, const BoundNet& n2, const LabeledBatch& lab,
                               const UnlabeledBatch& unl, real lambda, const LossOptions& opt) {
    ConfidenceMap p1 = run(n1, lab.images), p2 = run(n2, lab.images);
    Var l_s = add(supervised_term(p1, lab.labels, opt), supervised_term(p2, lab.labels, opt));
    Var l_cpc = cpc_loss(p1, p2);
    if (!unl.empty()) l_cpc = add(l_cpc, cpc_loss(run(n1, unl.images), run(n2, unl.images)));
    Objective o{add(l_s, scale(l_cpc, lambda)), {}};
    o.parts.l_s = scalar_of(l_s);
    o.parts.l_cpc = scalar_of(l_cpc);
    o.parts.lambda = lambda;
    o.parts.total = scalar_of(o.total);
    return o;
}

// Single network supervised by its own argmax on the unlabeled batch.
inline Objective sps_objective(const BoundNet& net, const LabeledBatch& lab, const UnlabeledBatch& unl, real lambda,
                               const LossOptions& opt) {
    Tape& tape = net.tape();
    Var l_s = supervised_term(run(net, lab.images), lab.labels, opt);
    Var l_u = unl.empty() ? tape.constant(Tensor::scalar(0)) : sps_loss(run(net, unl.images));
    Objective o{add(l_s, scale(l_u, lambda)), {}};
    o.parts = {scalar_of(l_s), 0, scalar_of(l_u), 0, 0, lambda};
    o.parts.total = scalar_of(o.total);
    return o;
}

// Pseudo maps of both sources through the same network (detached), mixed,
// supervising the network's output on the mixed image only.
inline Objective sps_cutmix_objective(const BoundNet& net, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                      std::span<const CutMixMask> masks, real lambda, const LossOptions& opt) {
    Tape& tape = net.tape();
    Var l_s = supervised_term(run(net, lab.images), lab.labels, opt);
    Var l_u = tape.constant(Tensor::scalar(0));
    if (!unl.empty()) {
        CutMixPairs pairs = make_pairs(unl, masks);
        const PseudoLabelMap y = mix_pseudo_maps(predict(net.net(), pairs.a), predict(net.net(), pairs.b), masks);
        l_u = pixel_ce(run(net, pairs.mixed), y);
    }
    Objective o{add(l_s, scale(l_u, lambda)), {}};
    o.parts = {scalar_of(l_s), 0, scalar_of(l_u), 0, 0, lambda};
    o.parts.total = scalar_of(o.total);
    return o;
}

// Strong views share the weak view's flip, so pseudo labels transfer pixel to
// pixel. The weak branch runs on a private tape and never receives gradient.
inline Tensor strong_views(const UnlabeledBatch& unl, const StrongOptions& opt) {
    if (unl.empty()) return {};
    Tensor out(unl.images.shape());
    const std::size_t per = unl.images.size() / unl.size();
    for (std::size_t j = 0; j < unl.size(); ++j) {
        Tensor view = photometric(slice_batch(unl.images, j, 1, 1), unl.records[j], opt);
        std::copy(view.data().begin(), view.data().end(), out.data().begin() + static_cast<long>(j * per));
    }
    return out;
}

inline Objective pseudoseg_objective(const BoundNet& net, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                     const Tensor& strong, real lambda, const LossOptions& opt) {
    Tape& tape = net.tape();
    Var l_s = supervised_term(run(net, lab.images), lab.labels, opt);
    Var l_u = tape.constant(Tensor::scalar(0));
    if (!unl.empty()) {
        const PseudoLabelMap y_w = predict(net.net(), unl.images);
        l_u = pixel_ce(run(net, strong), y_w);
    }
    Objective o{add(l_s, scale(l_u, lambda)), {}};
    o.parts = {scalar_of(l_s), 0, scalar_of(l_u), 0, 0, lambda};
    o.parts.total = scalar_of(o.total);
    return o;
}

// Teacher probabilities for `view` (flipped per `view_flips`), mapped into the
// student's frame given by `student_flips`.
inline Tensor teacher_targets(const SegNet& teacher, const Tensor& view, const std::vector<bool>& view_flips,
                              const std::vector<bool>& student_flips) {
    Tape tape;
    BoundNet bound(teacher, tape);
    Tensor probs = run(bound, view).probs();
    const std::size_t per = probs.size() / probs.dim(0);
    for (std::size_t j = 0; j < probs.dim(0); ++j) {
        if (view_flips[j] == student_flips[j]) continue;
        Tensor flipped = hflip(slice_batch(probs, j, 1, 1));
        std::copy(flipped.data().begin(), flipped.data().end(), probs.data().begin() + static_cast<long>(j * per));
    }
    return probs;
}

// Student sees the unlabeled batch's weak view; the teacher's aligned
// probabilities are fixed targets.
inline Objective mean_teacher_objective(const BoundNet& student, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                        const Tensor& teacher_probs, real lambda, const LossOptions& opt) {
    Tape& tape = student.tape();
    Var l_s = supervised_term(run(student, lab.images), lab.labels, opt);
    Var l_u = unl.empty() ? tape.constant(Tensor::scalar(0))
                          : probability_consistency(run(student, unl.images), teacher_probs);
    Objective o{add(l_s, scale(l_u, lambda)), {}};
    o.parts.l_s = scalar_of(l_s);
    o.parts.l_cpc = scalar_of(l_u);
    o.parts.lambda = lambda;
    o.parts.total = scalar_of(o.total);
    return o;
}

// ---- steps ----

struct Learner {
    SegNet net;
    OptimizerState opt;

    Learner() = default;
    Learner(SegNet n, SgdOptions sgd) : net(std::move(n)), opt(net.values(), sgd) {}
};

inline void apply_gradients(Learner& l, const BoundNet& bound, real lr) {
    std::vector<Tensor> params = l.net.values();
    sgd_step(params, bound.gradients(), l.opt, lr);
    l.net.set_values(std::move(params));
}

inline LossBreakdown step_supervised(Learner& l, const LabeledBatch& lab, real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet b(l.net, tape);
    Objective o = supervised_objective(b, lab, opt);
    tape.backward(o.total);
    apply_gradients(l, b, lr);
    return o.parts;
}

// Self-training stage 3: labeled ground truth plus fixed pseudo targets.
inline LossBreakdown step_supervised_with_targets(Learner& l, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                                  real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet b(l.net, tape);
    Var l_s = supervised_term(run(b, lab.images), lab.labels, opt);
    if (!unl.empty() && unl.targets) l_s = add(l_s, supervised_term(run(b, unl.images), *unl.targets, opt));
    tape.backward(l_s);
    apply_gradients(l, b, lr);
    LossBreakdown parts;
    parts.l_s = parts.total = scalar_of(l_s);
    return parts;
}

inline LossBreakdown step_cps(Learner& a, Learner& b, const LabeledBatch& lab, const UnlabeledBatch& unl, real lambda,
                              real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet n1(a.net, tape), n2(b.net, tape);
    Objective o = cps_objective(n1, n2, lab, unl, lambda, opt);
    tape.backward(o.total);
    apply_gradients(a, n1, lr);
    apply_gradients(b, n2, lr);
    return o.parts;
}

inline LossBreakdown step_cps_cutmix(Learner& a, Learner& b, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                     std::span<const CutMixMask> masks, real lambda, real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet n1(a.net, tape), n2(b.net, tape);
    Objective o = cps_cutmix_objective(n1, n2, lab, unl, masks, lambda, opt);
    tape.backward(o.total);
    apply_gradients(a, n1, lr);
    apply_gradients(b, n2, lr);
    return o.parts;
}

inline LossBreakdown step_cpc(Learner& a, Learner& b, const LabeledBatch& lab, const UnlabeledBatch& unl, real lambda,
                              real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet n1(a.net, tape), n2(b.net, tape);
    Objective o = cpc_objective(n1, n2, lab, unl, lambda, opt);
    tape.backward(o.total);
    apply_gradients(a, n1, lr);
    apply_gradients(b, n2, lr);
    return o.parts;
}

inline LossBreakdown step_sps(Learner& l, const LabeledBatch& lab, const UnlabeledBatch& unl,
                              std::span<const CutMixMask> masks, bool cutmix, real lambda, real lr,
                              const LossOptions& opt) {
    Tape tape;
    BoundNet b(l.net, tape);
    Objective o = cutmix ? sps_cutmix_objective(b, lab, unl, masks, lambda, opt) : sps_objective(b, lab, unl, lambda, opt);
    tape.backward(o.total);
    apply_gradients(l, b, lr);
    return o.parts;
}

inline LossBreakdown step_pseudoseg_style(Learner& l, const LabeledBatch& lab, const UnlabeledBatch& unl,
                                          const StrongOptions& strong, real lambda, real lr, const LossOptions& opt) {
    Tape tape;
    BoundNet b(l.net, tape);
    Objective o = pseudoseg_objective(b, lab, unl, strong_views(unl, strong), lambda, opt);
    tape.backward(o.total);
    apply_gradients(l, b, lr);
    return o.parts;
}

// One student update followed by the teacher's moving-average update.
inline LossBreakdown step_mean_teacher(Learner& student, SegNet& teacher, const LabeledBatch& lab,
                                       const UnlabeledBatch& unl, const Tensor& teacher_view,
                                       const std::vector<bool>& teacher_flips, real lambda, real alpha, real lr,
                                       const LossOptions& opt) {
    Tensor targets;
    if (!unl.empty()) {
        std::vector<bool> student_flips;
        for (const auto& r : unl.records) student_flips.push_back(r.flip);
        targets = teacher_targets(teacher, teacher_view, teacher_flips, student_flips);
    }
    Tape tape;
    BoundNet b(student.net, tape);
    Objective o = mean_teacher_objective(b, lab, unl, targets, lambda, opt);
    tape.backward(o.total);
    apply_gradients(student, b, lr);
    ema_update(teacher, student.net, alpha);
    return o.parts;
}

// ---- evaluation ----

struct EvalResult {
    ConfusionMatrix confusion;
    real miou = 0;
    std::vector<PseudoLabelMap> predictions; // one [1,H,W] map per sample
};

inline constexpr std::size_t kEvalBatch = 16;

inline std::vector<PseudoLabelMap> predict_all(const SegNet& net, const Dataset& data) {
    std::vector<PseudoLabelMap> out;
    for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < std::min(data.size(), start + kEvalBatch); ++i)
            imgs.push_back(&data.samples[i].image);
        PseudoLabelMap pred = predict(net, stack_images(imgs));
        const std::size_t per = pred.height * pred.width;
        for (std::size_t b = 0; b < imgs.size(); ++b) {
            PseudoLabelMap one(1, pred.height, pred.width);
            std::copy_n(pred.labels.begin() + static_cast<long>(b * per), per, one.labels.begin());
            out.push_back(std::move(one));
        }
    }
    return out;
}

// Single-scale evaluation of one network.
inline EvalResult evaluate(const SegNet& net, const Dataset& data) {
    EvalResult r{ConfusionMatrix(data.num_classes), 0, predict_all(net, data)};
    for (std::size_t i = 0; i < data.size(); ++i) accumulate(r.confusion, r.predictions[i], data.samples[i].labels);
    r.miou = miou(r.confusion).mean;
    return r;
}

inline real dataset_overlap(const std::vector<PseudoLabelMap>& a, const std::vector<PseudoLabelMap>& b,
                            const Dataset& data, OverlapRegion region) {
    std::uint64_t inside = 0;
    real agree = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        OverlapResult r = overlap_ratio(a[i], b[i], data.samples[i].labels, region);
        inside += r.region_pixels;
        agree += r.ratio * static_cast<real>(r.region_pixels);
    }
    return inside == 0 ? 0 : agree / static_cast<real>(inside);
}

// ---- runs ----

struct EpochRecord {
    std::size_t epoch = 0;
    real lr = 0;
    LossBreakdown losses;
    real miou = 0;
    std::optional<real> overlap;
};

struct RunResult {
    MethodKind method = MethodKind::Supervised;
    std::vector<EpochRecord> records;
    SegNet final_net; // the evaluated network
    std::optional<SegNet> second_net;
    double wall_seconds = 0;
    std::size_t unlabeled_gt_reads = 0;
    std::size_t second_net_eval_reads = 0;
    std::vector<std::string> notes;

    real final_miou() const { return records.empty() ? 0 : records.back().miou; }
};

struct PreparedData {
    Dataset train;
    Dataset val;
    PartitionProtocol protocol;
};

inline PreparedData prepare_data(const TrainConfig& cfg) {
    PreparedData d{generate_toy_dataset(cfg.train_size, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed, cfg.data),
                   generate_toy_dataset(cfg.val_size, cfg.height, cfg.width, cfg.num_classes,
                                        derive_seed(cfg.data_seed, "validation"), cfg.data),
                   {}};
    d.protocol = partition(cfg.train_size, cfg.ratio, cfg.partition_seed);
    return d;
}

namespace detail {

// Mutable state of a single-stage run.
struct RunState {
    const TrainConfig* cfg;
    std::vector<Learner> nets; // nets[0] is always the evaluated one
    std::optional<SegNet> teacher;
    const std::map<std::size_t, GroundTruthMap>* pseudo = nullptr;
};

using StepFn = std::function<LossBreakdown(RunState&, const BatchMaker&, const BatchIds&, std::size_t t, real lr)>;

inline std::vector<CutMixMask> draw_masks(const TrainConfig& cfg, std::size_t pairs, std::size_t t) {
    std::vector<CutMixMask> masks;
    for (std::size_t k = 0; k < pairs; ++k) {
        Rng rng = derive(cfg.aug_seed, "aug.cutmix", t * pairs + k);
        masks.push_back(sample_cutmix_mask(cfg.height, cfg.width, rng, cfg.cutmix));
    }
    return masks;
}

inline StepFn step_for(MethodKind m) {
    switch (m) {
    case MethodKind::Supervised:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            return step_supervised(s.nets[0], bm.labeled(ids.labeled, t), lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::CPS:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            return step_cps(s.nets[0], s.nets[1], bm.labeled(ids.labeled, t), bm.unlabeled(ids.unlabeled, t, s.pseudo),
                            s.cfg->lambda, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::CPS_CutMix:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            const auto masks = draw_masks(*s.cfg, ids.unlabeled.size() / 2, t);
            return step_cps_cutmix(s.nets[0], s.nets[1], bm.labeled(ids.labeled, t), bm.unlabeled(ids.unlabeled, t),
                                   masks, s.cfg->lambda, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::CPC:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            return step_cpc(s.nets[0], s.nets[1], bm.labeled(ids.labeled, t), bm.unlabeled(ids.unlabeled, t),
                            s.cfg->lambda, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::MeanTeacher:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            UnlabeledBatch unl = bm.unlabeled(ids.unlabeled, t);
            Tensor view;
            std::vector<bool> flips;
            if (!unl.empty()) {
                // Teacher gets an independent weak draw of the same samples.
                view = Tensor(unl.raw.shape());
                const std::size_t per = view.size() / view.dim(0);
                for (std::size_t j = 0; j < unl.size(); ++j) {
                    Rng rng = derive(s.cfg->aug_seed, "aug.teacher", t * unl.size() + j);
                    WeakResult w = weak_augment(slice_batch(unl.raw, j, 1, 1), std::nullopt, rng);
                    flips.push_back(w.record.flip);
                    std::copy(w.image.data().begin(), w.image.data().end(), view.data().begin() + static_cast<long>(j * per));
                }
            }
            return step_mean_teacher(s.nets[0], *s.teacher, bm.labeled(ids.labeled, t), unl, view, flips,
                                     s.cfg->lambda, s.cfg->ema_alpha, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::SPS:
    case MethodKind::SPS_CutMix:
        return [m](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            const bool cutmix = m == MethodKind::SPS_CutMix;
            const auto masks = cutmix ? draw_masks(*s.cfg, ids.unlabeled.size() / 2, t) : std::vector<CutMixMask>{};
            return step_sps(s.nets[0], bm.labeled(ids.labeled, t), bm.unlabeled(ids.unlabeled, t), masks, cutmix,
                            s.cfg->lambda, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::PseudoSegStyle:
        return [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            return step_pseudoseg_style(s.nets[0], bm.labeled(ids.labeled, t), bm.unlabeled(ids.unlabeled, t),
                                        s.cfg->strong, s.cfg->lambda, lr, LossOptions::from(*s.cfg));
        };
    case MethodKind::SelfTraining:
    case MethodKind::CPS_SelfTraining:
        break;
    }
    throw ConfigError("no single-stage step for " + method_name(m));
}

inline void add_parts(LossBreakdown& acc, const LossBreakdown& p) {
    acc.l_s += p.l_s;
    acc.l_cps_labeled += p.l_cps_labeled;
    acc.l_cps_unlabeled += p.l_cps_unlabeled;
    acc.l_cpc += p.l_cpc;
    acc.total += p.total;
    acc.lambda = p.lambda;
}

// Runs cfg.epochs of `step` and appends one record per epoch, numbered from
// first_epoch.
inline void run_stage(RunState& state, const StepFn& step, const GuardedDataset& data, const PartitionProtocol& protocol,
                      const Dataset& val, std::size_t first_epoch, bool consumes_unlabeled, RunResult& result) {
    const TrainConfig& cfg = *state.cfg;
    PartitionProtocol view = protocol;
    if (!consumes_unlabeled) view.unlabeled_ids.clear();
    BatchIterator iter(view, cfg.batch_labeled, cfg.batch_unlabeled, cfg.aug_seed);
    BatchMaker maker(data, cfg);
    const std::size_t ipe = iter.iterations_per_epoch();
    const std::size_t total = cfg.epochs * ipe;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        EpochRecord rec;
        rec.epoch = first_epoch + e;
        for (std::size_t k = 0; k < ipe; ++k) {
            const std::size_t t = e * ipe + k;
            const real lr = poly_lr(cfg.base_lr, static_cast<long>(t), static_cast<long>(total), cfg.lr_power);
            if (k == 0) rec.lr = lr;
            add_parts(rec.losses, step(state, maker, iter.at(t), t, lr));
        }
        const real inv = real(1) / static_cast<real>(ipe);
        rec.losses.l_s *= inv;
        rec.losses.l_cps_labeled *= inv;
        rec.losses.l_cps_unlabeled *= inv;
        rec.losses.l_cpc *= inv;
        rec.losses.total *= inv;

        // Evaluation sees only the first network.
        const SegNet* second = state.nets.size() > 1 ? &state.nets[1].net : (state.teacher ? &*state.teacher : nullptr);
        const std::size_t second_reads = second ? second->reads() : 0;
        EvalResult ev = evaluate(state.nets[0].net, val);
        if (second && state.nets.size() > 1) result.second_net_eval_reads += second->reads() - second_reads;
        rec.miou = ev.miou;

        // Agreement diagnostic between the two networks, outside evaluation.
        if (second) rec.overlap = dataset_overlap(ev.predictions, predict_all(*second, val), val, cfg.overlap_region);
        result.records.push_back(rec);
    }
}

inline RunState make_state(const TrainConfig& cfg, MethodKind m, std::uint64_t seed1, std::uint64_t seed2) {
    RunState s{&cfg, {}, std::nullopt, nullptr};
    if (is_dual(m)) {
        DualNetworks d = init_dual(cfg.net_config(seed1), seed1, seed2);
        s.nets.emplace_back(std::move(d.net1), cfg.sgd());
        s.nets.emplace_back(std::move(d.net2), cfg.sgd());
    } else {
        s.nets.emplace_back(build_segnet(cfg.net_config(seed1)), cfg.sgd());
        if (m == MethodKind::MeanTeacher) s.teacher = s.nets[0].net;
    }
    return s;
}

inline void finish(RunState& s, const GuardedDataset& data, RunResult& r) {
    r.final_net = s.nets[0].net;
    if (s.nets.size() > 1) r.second_net = s.nets[1].net;
    else if (s.teacher) r.second_net = *s.teacher;
    r.unlabeled_gt_reads = data.unlabeled_gt_reads();
}

inline RunResult train_single_stage(const TrainConfig& cfg, const Dataset& train, const PartitionProtocol& protocol,
                                    const Dataset& val) {
    RunResult r;
    r.method = cfg.method;
    GuardedDataset data(train, protocol);
    RunState s = make_state(cfg, cfg.method, cfg.net1_seed, cfg.net2_seed);
    run_stage(s, step_for(cfg.method), data, protocol, val, 1, cfg.method != MethodKind::Supervised, r);
    finish(s, data, r);
    return r;
}

// Pseudo-label every unlabeled image with `net` (argmax; pixels below the
// confidence threshold become ignore). Reads images only.
inline std::map<std::size_t, GroundTruthMap> pseudo_label_set(const SegNet& net, const GuardedDataset& data,
                                                              const PartitionProtocol& protocol, real threshold) {
    std::map<std::size_t, GroundTruthMap> out;
    for (std::size_t id : protocol.unlabeled_ids) {
        const Tensor& img = data.image(id);
        Tensor batch(Shape{1, img.dim(0), img.dim(1), img.dim(2)}, img.data());
        Tape tape;
        BoundNet bound(net, tape);
        ConfidenceMap p = run(bound, batch);
        PseudoLabelMap y = pseudo_label(p);
        GroundTruthMap g(1, y.height, y.width);
        g.labels = y.labels;
        if (threshold > 0) {
            const Tensor probs = p.probs();
            const std::size_t n = y.height * y.width;
            for (std::size_t i = 0; i < n; ++i)
                if (probs[static_cast<std::size_t>(y.labels[i]) * n + i] < threshold) g.labels[i] = kIgnoreLabel;
        }
        out.emplace(id, std::move(g));
    }
    return out;
}

// Train on D^l -> pseudo-label D^u -> retrain from a fresh initialization on
// D^l plus pseudo-labeled D^u. Records of the retraining stage continue the
// epoch numbering.
inline RunResult train_self_training(const TrainConfig& cfg, const Dataset& train, const PartitionProtocol& protocol,
                                     const Dataset& val) {
    const bool with_cps = cfg.method == MethodKind::CPS_SelfTraining;
    RunResult r;
    r.method = cfg.method;
    GuardedDataset data(train, protocol);

    RunState stage1 = make_state(cfg, with_cps ? MethodKind::CPS : MethodKind::Supervised, cfg.net1_seed, cfg.net2_seed);
    run_stage(stage1, step_for(with_cps ? MethodKind::CPS : MethodKind::Supervised), data, protocol, val, 1, with_cps, r);

    const auto pseudo = pseudo_label_set(stage1.nets[0].net, data, protocol, cfg.self_train_threshold);

    RunState stage3 = make_state(cfg, with_cps ? MethodKind::CPS : MethodKind::Supervised,
                                 derive_seed(cfg.net1_seed, "self-training.retrain"),
                                 derive_seed(cfg.net2_seed, "self-training.retrain"));
    stage3.pseudo = &pseudo;
    StepFn step;
    if (with_cps) {
        step = step_for(MethodKind::CPS);
    } else {
        step = [](RunState& s, const BatchMaker& bm, const BatchIds& ids, std::size_t t, real lr) {
            return step_supervised_with_targets(s.nets[0], bm.labeled(ids.labeled, t),
                                                bm.unlabeled(ids.unlabeled, t, s.pseudo), lr, LossOptions::from(*s.cfg));
        };
    }
    run_stage(stage3, step, data, protocol, val, cfg.epochs + 1, true, r);
    finish(stage3, data, r);
    return r;
}

} // namespace detail

using RunFn = std::function<RunResult(const TrainConfig&, const Dataset&, const PartitionProtocol&, const Dataset&)>;

// Trainer registered for every method.
inline const std::map<MethodKind, RunFn>& trainers() {
    static const std::map<MethodKind, RunFn> table = [] {
        std::map<MethodKind, RunFn> t;
        for (MethodKind m : kAllMethods) t[m] = detail::train_single_stage;
        t[MethodKind::SelfTraining] = detail::train_self_training;
        t[MethodKind::CPS_SelfTraining] = detail::train_self_training;
        return t;
    }();
    return table;
}

inline RunResult train(const TrainConfig& cfg, const Dataset& train_set, const PartitionProtocol& protocol,
                       const Dataset& val) {
    cfg.validate();
    if (protocol.labeled_ids.size() + protocol.unlabeled_ids.size() != train_set.size())
        throw ConfigError("partition does not cover the training set");
    const auto start = std::chrono::steady_clock::now();
    RunResult r = trainers().at(cfg.method)(cfg, train_set, protocol, val);
    if (cfg.method == MethodKind::Supervised && cfg.lambda > 0)
        r.notes.push_back("lambda=" + std::to_string(cfg.lambda) + " ignored for the supervised baseline");
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

inline RunResult train(const TrainConfig& cfg) {
    cfg.validate();
    PreparedData d = prepare_data(cfg);
    return train(cfg, d.train, d.protocol, d.val);
}

} // namespace cpslab
