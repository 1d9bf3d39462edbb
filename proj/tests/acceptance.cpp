// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Training outputs go to $CPSLAB_ACCEPTANCE_OUT (default
// ./acceptance_out).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "oracle.hpp"

using namespace cpslab;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s  %d. %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    failures += !pass;
}

std::string num(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            std::ifstream is(e.path(), std::ios::binary);
            std::ostringstream ss;
            ss << is.rdbuf();
            out[fs::relative(e.path(), root).string()] = ss.str();
        }
    return out;
}

// ---- 1 ----

void gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(1);
    using oracle::random_tensor;
    struct Case {
        const char* name;
        std::vector<Tensor> inputs;
        oracle::Builder build;
    };
    const Tensor c4 = random_tensor({2, 3, 6, 6}, rng);
    std::vector<int> target(2 * 6 * 6);
    std::vector<real> weight(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        target[i] = static_cast<int>(rng() % 3);
        weight[i] = i % 5 == 0 ? 0 : 1.0 / static_cast<real>(target.size());
    }
    std::vector<Case> cases{
        {"conv2d", {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(conv2d(v[0], v[1], v[2], 1, 1), c4); }},
        {"conv2d stride 2",
         {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
         [&](Tape&, const std::vector<Var>& v) {
             return oracle::probe(conv2d(v[0], v[1], v[2], 2, 1), Tensor({2, 3, 3, 3}, 0.1));
         }},
        {"relu", {oracle::off_kink_tensor({2, 3, 6, 6}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(relu(v[0]), c4); }},
        {"channel_norm",
         {random_tensor({2, 3, 6, 6}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(channel_norm(v[0], v[1], v[2], 1e-5), c4); }},
        {"bilinear_upsample", {random_tensor({2, 3, 3, 3}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(bilinear_upsample(v[0], 2), c4); }},
        {"log_softmax", {random_tensor({2, 3, 6, 6}, rng, -2, 2)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(log_softmax_channels(v[0]), c4); }},
        {"add/sub", {random_tensor({2, 3, 6, 6}, rng), random_tensor({2, 3, 6, 6}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return oracle::probe(sub(add(v[0], v[1]), scale(v[1], 3)), c4); }},
        {"exp/square", {random_tensor({2, 3, 6, 6}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return sum(square(exp(v[0]))); }},
        {"mean", {random_tensor({2, 3, 6, 6}, rng)},
         [&](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }},
        {"weighted_nll", {random_tensor({2, 3, 6, 6}, rng, -2, 2)},
         [&](Tape&, const std::vector<Var>& v) { return weighted_nll(log_softmax_channels(v[0]), target, weight); }},
    };
    real worst = 0;
    std::string worst_op;
    for (const auto& c : cases) {
        const auto r = oracle::check_gradients(c.inputs, c.build);
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_op = c.name;
        }
    }
    const auto step = fixtures::cps_step_gradient_check(11, 21, 22);
    const double elapsed = seconds_since(t0);
    const bool ok = worst < 1e-4 && step.rel_error < 1e-4 && step.skipped * 20 < step.coordinates && elapsed < 60;
    report(1, "gradient fidelity", ok,
           "ops max rel error " + num("%.2e", worst) + " (" + worst_op + "), CPS step " + num("%.2e", step.rel_error) +
               " over " + std::to_string(step.coordinates - step.skipped) + "/" + std::to_string(step.coordinates) +
               " coordinates (rest flip a pseudo label), " + num("%.1f", elapsed) + " s (limit 1e-4, 60 s)");
}

// ---- 2 ----

void stop_gradient() {
    real worst = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) worst = std::max(worst, fixtures::stop_gradient_gap(seed, 100 + seed, 200 + seed));
    report(2, "stop-gradient contract", worst <= 1e-12,
           "max |grad(theta1) - grad with frozen pseudo maps| = " + num("%.2e", worst) + " over 5 micro-batches (limit 1e-12)");
}

// ---- 3 ----

TrainConfig tiny(MethodKind m) {
    TrainConfig c;
    c.method = m;
    c.epochs = 3;
    c.train_size = 16;
    c.val_size = 8;
    c.height = c.width = 16;
    c.ratio = 0.25;
    c.batch_labeled = c.batch_unlabeled = 2;
    c.widths = {4, 6};
    c.num_classes = 3;
    return c;
}

real parts_gap(const LossBreakdown& a, const LossBreakdown& b) {
    return std::max({std::abs(a.l_s - b.l_s), std::abs(a.l_cps_labeled - b.l_cps_labeled),
                     std::abs(a.l_cps_unlabeled - b.l_cps_unlabeled), std::abs(a.l_cpc - b.l_cpc),
                     std::abs(a.total - b.total)});
}

void reductions() {
    using namespace fixtures;
    // CPS with lambda = 0 against the supervised baseline, whole run.
    TrainConfig cps = tiny(MethodKind::CPS);
    cps.lambda = 0;
    const auto a = train(cps), b = train(tiny(MethodKind::Supervised));
    bool bitwise = flat(a.final_net) == flat(b.final_net);
    for (std::size_t e = 0; e < a.records.size(); ++e) bitwise = bitwise && a.records[e].miou == b.records[e].miou;

    // PseudoSeg-style with null strong augmentation against SPS.
    real pseudoseg_gap = 0;
    {
        const auto batches = micro_batches(2, 2, 5);
        Learner p = learner(4), s = learner(4);
        for (int k = 0; k < 5; ++k) {
            const auto x = step_pseudoseg_style(p, batches.lab, batches.unl, StrongOptions{0, 1, 1}, 1.5, 0.05, {});
            const auto y = step_sps(s, batches.lab, batches.unl, {}, false, 1.5, 0.05, {});
            pseudoseg_gap = std::max({pseudoseg_gap, parts_gap(x, y), max_abs_diff(flat(p.net), flat(s.net))});
        }
        TrainConfig ps = tiny(MethodKind::PseudoSegStyle);
        ps.strong = {0, 1, 1};
        const auto r1 = train(ps), r2 = train(tiny(MethodKind::SPS));
        for (std::size_t e = 0; e < r1.records.size(); ++e)
            pseudoseg_gap = std::max(pseudoseg_gap, parts_gap(r1.records[e].losses, r2.records[e].losses));
        pseudoseg_gap = std::max(pseudoseg_gap, max_abs_diff(flat(r1.final_net), flat(r2.final_net)));
    }

    // CutMix with all-ones masks against the plain step on the first sources.
    real cutmix_gap = 0;
    {
        const auto batches = micro_batches(2, 4, 7);
        UnlabeledBatch firsts;
        firsts.images = slice_batch(batches.unl.images, 0, 2, 2);
        const std::vector<CutMixMask> ones(2, CutMixMask::all_ones(16, 16));
        Learner a1 = learner(1), a2 = learner(2), b1 = learner(1), b2 = learner(2), s1 = learner(3), s2 = learner(3);
        for (int k = 0; k < 5; ++k) {
            cutmix_gap = std::max(cutmix_gap, parts_gap(step_cps_cutmix(a1, a2, batches.lab, batches.unl, ones, 1.5, 0.05, {}),
                                                       step_cps(b1, b2, batches.lab, firsts, 1.5, 0.05, {})));
            cutmix_gap = std::max(cutmix_gap, parts_gap(step_sps(s1, batches.lab, batches.unl, ones, true, 1.5, 0.05, {}),
                                                       step_sps(s2, batches.lab, firsts, {}, false, 1.5, 0.05, {})));
        }
        cutmix_gap = std::max({cutmix_gap, max_abs_diff(flat(a1.net), flat(b1.net)), max_abs_diff(flat(a2.net), flat(b2.net)),
                               max_abs_diff(flat(s1.net), flat(s2.net))});
    }
    report(3, "reduction suite", bitwise && pseudoseg_gap <= 1e-12 && cutmix_gap <= 1e-12,
           std::string("CPS(lambda=0) vs supervised trajectory ") + (bitwise ? "bitwise equal" : "DIFFERS") +
               "; PseudoSeg(null strong) vs SPS max gap " + num("%.2e", pseudoseg_gap) +
               "; all-ones CutMix vs plain max gap " + num("%.2e", cutmix_gap) + " (limit 1e-12)");
}

// ---- 4, 5, 6, 9 ----

struct MethodStats {
    std::vector<real> mious;
    real mean() const { return mean_std(mious).mean; }
};

std::string seeds_text(const std::vector<real>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + num("%.4f", v[i]);
    return s;
}

void directional(const fs::path& out) {
    ExperimentSpec spec;
    spec.methods = {MethodKind::Supervised, MethodKind::CPS, MethodKind::SPS};
    spec.ratios = {"1/8"};
    spec.seeds = {1, 2, 3};
    spec.out_dir = (out / "ablation").string();
    std::printf("running %zu x %zu training runs (toy set n=%zu, %zux%zu, K=%zu, %zu epochs)...\n", spec.methods.size(),
                spec.seeds.size(), spec.base.train_size, spec.base.height, spec.base.width, spec.base.num_classes,
                spec.base.epochs);
    std::fflush(stdout);
    auto t0 = std::chrono::steady_clock::now();
    const ExperimentReport rep = run_experiments(spec, worker_threads(), &std::cout);
    const double ablation_seconds = seconds_since(t0);

    ExperimentSpec cpc = spec;
    cpc.methods = {MethodKind::CPC};
    cpc.out_dir = (out / "cpc").string();
    t0 = std::chrono::steady_clock::now();
    const ExperimentReport cpc_rep = run_experiments(cpc, worker_threads(), &std::cout);
    const double cpc_seconds = seconds_since(t0);

    const auto sup = rep.final_mious(MethodKind::Supervised, "1/8");
    const auto cps = rep.final_mious(MethodKind::CPS, "1/8");
    const auto sps = rep.final_mious(MethodKind::SPS, "1/8");
    const auto cpcm = cpc_rep.final_mious(MethodKind::CPC, "1/8");
    const bool complete = sup.size() == 3 && cps.size() == 3 && sps.size() == 3 && cpcm.size() == 3;
    const real m_sup = mean_std(sup).mean, m_cps = mean_std(cps).mean, m_sps = mean_std(sps).mean,
               m_cpc = mean_std(cpcm).mean;

    const bool margin = m_cps - m_sup >= 0.02;
    const bool beats_sps = m_cps > m_sps;
    report(4, "directional ablation (CPS vs supervised, CPS vs SPS)",
           complete && margin && beats_sps && ablation_seconds < 20 * 60,
           "mean mIoU supervised " + num("%.4f", m_sup) + " [" + seeds_text(sup) + "], CPS " + num("%.4f", m_cps) +
               " [" + seeds_text(cps) + "], SPS " + num("%.4f", m_sps) + " [" + seeds_text(sps) + "]; CPS - supervised = " +
               num("%+.2f", 100 * (m_cps - m_sup)) + " points (need >= +2.00), CPS - SPS = " +
               num("%+.2f", 100 * (m_cps - m_sps)) + " points (need > 0); " + num("%.0f", ablation_seconds) +
               " s (limit 1200 s)");

    const real gap = m_cps - m_cpc;
    const bool tie = std::abs(gap) < 0.005;
    report(5, "CPS vs CPC ordering", complete && (gap >= 0 || tie),
           "mean mIoU CPS " + num("%.4f", m_cps) + ", CPC " + num("%.4f", m_cpc) + " [" + seeds_text(cpcm) + "]; CPS - CPC = " +
               num("%+.2f", 100 * gap) + " points" + (tie ? " (tie within 0.5 points)" : "") + "; CPC runs " +
               num("%.0f", cpc_seconds) + " s");

    const RunSummary* run = rep.find(MethodKind::CPS, "1/8", 1);
    bool rising = false;
    std::string detail = "default CPS run missing";
    if (run && run->ok && run->records.front().overlap && run->records.back().overlap) {
        const real first = *run->records.front().overlap, last = *run->records.back().overlap;
        rising = last > first;
        detail = "default CPS run (seed 1): overlap epoch 1 = " + num("%.4f", first) + ", epoch " +
                 std::to_string(run->records.back().epoch) + " = " + num("%.4f", last);
    }
    report(6, "overlap-ratio dynamics", rising, detail);

    // Isolation, across every semi-supervised and dual run above.
    std::size_t gt_reads = 0, net2_reads = 0, runs = 0;
    for (const auto* r : {&rep, &cpc_rep})
        for (const auto& s : r->runs) {
            if (s.method != MethodKind::Supervised) gt_reads += s.unlabeled_gt_reads;
            net2_reads += s.second_net_eval_reads;
            ++runs;
        }
    // The guard itself must be live: one deliberate read is counted.
    const Dataset probe = generate_toy_dataset(4, 16, 16, 3, 1);
    const PartitionProtocol protocol = partition(4, 0.5, 1);
    GuardedDataset guard(probe, protocol);
    (void)guard.labels(protocol.unlabeled_ids.front());
    const bool live = guard.unlabeled_gt_reads() == 1;
    report(9, "isolation guards", gt_reads == 0 && net2_reads == 0 && live,
           std::to_string(gt_reads) + " unlabeled ground-truth reads and " + std::to_string(net2_reads) +
               " second-network reads during evaluation over " + std::to_string(runs) + " runs; guard " +
               (live ? "counts a deliberate read" : "DID NOT count a deliberate read"));
}

// ---- 7 ----

void metric_oracles() {
    std::mt19937_64 rng(7);
    const int K = 5;
    std::size_t mismatches = 0;
    ConfusionMatrix stream(K);
    std::vector<int> all_pred, all_gt;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t H = 1 + rng() % 8, W = 1 + rng() % 8;
        PseudoLabelMap y1(1, H, W), y2(1, H, W);
        GroundTruthMap gt(1, H, W);
        for (std::size_t i = 0; i < H * W; ++i) {
            y1.labels[i] = static_cast<int>(rng() % K);
            y2.labels[i] = rng() % 3 ? y1.labels[i] : static_cast<int>(rng() % K);
            gt.labels[i] = rng() % 10 == 0 ? kIgnoreLabel : static_cast<int>(rng() % K);
        }
        accumulate(stream, y1, gt);
        all_pred.insert(all_pred.end(), y1.labels.begin(), y1.labels.end());
        all_gt.insert(all_gt.end(), gt.labels.begin(), gt.labels.end());
        const auto iou = oracle::iou_loop(all_pred, all_gt, K);
        real s = 0;
        int n = 0;
        for (real v : iou)
            if (v >= 0) {
                s += v;
                ++n;
            }
        mismatches += miou(stream).mean != s / n;

        std::size_t in = 0, agree = 0;
        for (std::size_t i = 0; i < H * W; ++i)
            if (gt.labels[i] != kIgnoreLabel && gt.labels[i] != 0) {
                ++in;
                agree += y1.labels[i] == y2.labels[i];
            }
        const auto ov = overlap_ratio(y1, y2, gt);
        mismatches += in ? ov.ratio != static_cast<real>(agree) / static_cast<real>(in) : !ov.empty_region;
    }
    report(7, "metric oracle equivalence", mismatches == 0,
           std::to_string(mismatches) + " mismatches between streaming mIoU / overlap ratio and loop oracles on 100 random maps (exact)");
}

// ---- 8 ----

void determinism(const fs::path& out) {
    auto spec_at = [](const fs::path& dir) {
        ExperimentSpec s;
        s.base = tiny(MethodKind::CPS);
        s.methods = {MethodKind::Supervised, MethodKind::CPS, MethodKind::CPS_CutMix, MethodKind::MeanTeacher};
        s.ratios = {"1/4", "1/2"};
        s.seeds = {1, 2};
        s.out_dir = dir.string();
        return s;
    };
    fs::remove_all(out / "det_a");
    fs::remove_all(out / "det_b");
    run_experiments(spec_at(out / "det_a"));
    run_experiments(spec_at(out / "det_b"), 1);
    const auto a = tree(out / "det_a"), b = tree(out / "det_b");
    std::size_t csv = 0, md = 0, svg = 0;
    for (const auto& [name, _] : a) {
        csv += name.ends_with(".csv");
        md += name.ends_with(".md");
        svg += name.ends_with(".svg");
    }
    report(8, "determinism", a == b && csv > 0 && md > 0 && svg > 0,
           std::to_string(a.size()) + " files (" + std::to_string(csv) + " CSV, " + std::to_string(md) + " markdown, " +
               std::to_string(svg) + " SVG) " + (a == b ? "byte-identical" : "DIFFER") + " across two executions");
}

} // namespace

// Optional arguments select criteria by number; 4, 5, 6 and 9 share one sweep.
int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    auto want = [&](std::initializer_list<int> ids) {
        if (wanted.empty()) return true;
        for (int id : ids)
            if (wanted.count(id)) return true;
        return false;
    };
    const char* env = std::getenv("CPSLAB_ACCEPTANCE_OUT");
    const fs::path out = env ? fs::path(env) : fs::path("acceptance_out");
    fs::create_directories(out);
    try {
        if (want({1})) gradient_fidelity();
        if (want({2})) stop_gradient();
        if (want({3})) reductions();
        if (want({7})) metric_oracles();
        if (want({8})) determinism(out);
        if (want({4, 5, 6, 9})) directional(out);
    } catch (const std::exception& e) {
        std::printf("FAIL  aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%s: %d criterion(s) failed\n", failures ? "FAILED" : "ALL PASSED", failures);
    return failures ? 1 : 0;
}
