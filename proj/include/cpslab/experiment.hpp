#pragma once

// Configuration files, experiment sweeps and their reports.
//
// Config format: one `key = value` per line, `#` starts a comment. Lists are
// comma separated. Every output file is a pure function of the ExperimentSpec, so two
// runs of the same sweep produce byte-identical files.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cpslab/methods.hpp"

namespace cpslab {

// ---- text helpers ----

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

namespace detail {

inline double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        const unsigned long long u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& train_setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto real_field = [&t](const char* name, real TrainConfig::*f) {
            t[name] = [f](TrainConfig& c, const std::string& k, const std::string& v) { c.*f = to_real(k, v); };
        };
        auto size_field = [&t](const char* name, std::size_t TrainConfig::*f) {
            t[name] = [f](TrainConfig& c, const std::string& k, const std::string& v) { c.*f = to_uint(k, v); };
        };
        auto seed_field = [&t](const char* name, std::uint64_t TrainConfig::*f) {
            t[name] = [f](TrainConfig& c, const std::string& k, const std::string& v) { c.*f = to_uint(k, v); };
        };
        auto bool_field = [&t](const char* name, bool TrainConfig::*f) {
            t[name] = [f](TrainConfig& c, const std::string& k, const std::string& v) { c.*f = to_bool(k, v); };
        };
        t["method"] = [](TrainConfig& c, const std::string&, const std::string& v) { c.method = parse_method(v); };
        t["ratio"] = [](TrainConfig& c, const std::string&, const std::string& v) {
            try {
                c.ratio = parse_ratio(v);
            } catch (const ArgumentError& e) {
                throw ConfigError(e.what());
            }
        };
        t["widths"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.widths.clear();
            for (const auto& w : split_list(v)) c.widths.push_back(to_uint(k, w));
        };
        t["overlap_region"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            if (v == "gt") c.overlap_region = OverlapRegion::GroundTruthObjects;
            else if (v == "pred") c.overlap_region = OverlapRegion::PredictedObjects;
            else throw ConfigError("'" + k + "': expected gt or pred, got '" + v + "'");
        };
        real_field("lambda", &TrainConfig::lambda);
        real_field("base_lr", &TrainConfig::base_lr);
        real_field("lr_power", &TrainConfig::lr_power);
        real_field("momentum", &TrainConfig::momentum);
        real_field("weight_decay", &TrainConfig::weight_decay);
        real_field("ema_alpha", &TrainConfig::ema_alpha);
        real_field("self_train_threshold", &TrainConfig::self_train_threshold);
        size_field("epochs", &TrainConfig::epochs);
        size_field("batch_labeled", &TrainConfig::batch_labeled);
        size_field("batch_unlabeled", &TrainConfig::batch_unlabeled);
        size_field("train_size", &TrainConfig::train_size);
        size_field("val_size", &TrainConfig::val_size);
        size_field("height", &TrainConfig::height);
        size_field("width", &TrainConfig::width);
        size_field("num_classes", &TrainConfig::num_classes);
        seed_field("data_seed", &TrainConfig::data_seed);
        seed_field("partition_seed", &TrainConfig::partition_seed);
        seed_field("net1_seed", &TrainConfig::net1_seed);
        seed_field("net2_seed", &TrainConfig::net2_seed);
        seed_field("aug_seed", &TrainConfig::aug_seed);
        bool_field("ohem", &TrainConfig::ohem);
        bool_field("cps_on_labeled", &TrainConfig::cps_on_labeled);
        bool_field("multiscale", &TrainConfig::multiscale);
        t["ohem_threshold"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.ohem_options.threshold = to_real(k, v);
        };
        t["ohem_min_kept"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.ohem_options.min_kept = to_uint(k, v);
        };
        t["noise_sigma"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.strong.noise_sigma = to_real(k, v);
        };
        t["min_brightness"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.strong.min_brightness = to_real(k, v);
        };
        t["max_brightness"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.strong.max_brightness = to_real(k, v);
        };
        t["cutmix_min_area"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.cutmix.min_area = to_real(k, v);
        };
        t["cutmix_max_area"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.cutmix.max_area = to_real(k, v);
        };
        t["distractor_prob"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.data.distractor_prob = to_real(k, v);
        };
        t["pixel_noise"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.data.pixel_noise = to_real(k, v);
        };
        t["color_jitter"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.data.color_jitter = to_real(k, v);
        };
        t["shape_min_size"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.data.min_size = to_real(k, v);
        };
        t["shape_max_size"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.data.max_size = to_real(k, v);
        };
        return t;
    }();
    return table;
}

} // namespace detail

using Settings = std::vector<std::pair<std::string, std::string>>;

inline Settings parse_settings(std::istream& is, const std::string& source = "config") {
    Settings out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

inline Settings read_settings(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    return parse_settings(is, path);
}

// Per-run seeds follow from one experiment seed; the dataset seed does not.
inline void apply_seed(TrainConfig& cfg, std::uint64_t seed) {
    cfg.partition_seed = derive_seed(seed, "partition");
    cfg.net1_seed = derive_seed(seed, "net1");
    cfg.net2_seed = derive_seed(seed, "net2");
    cfg.aug_seed = derive_seed(seed, "aug");
}

inline bool is_train_key(const std::string& key) { return detail::train_setters().count(key) || key == "seed"; }

inline void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") {
        apply_seed(cfg, detail::to_uint(key, value));
        return;
    }
    const auto& t = detail::train_setters();
    const auto it = t.find(key);
    if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(cfg, key, value);
}

// Writes the settings that reproduce cfg.
inline void write_config(std::ostream& os, const TrainConfig& c) {
    auto line = [&os](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
    auto num = [](real v) { return fmt("%.17g", v); };
    std::string widths;
    for (std::size_t i = 0; i < c.widths.size(); ++i) widths += (i ? "," : "") + std::to_string(c.widths[i]);
    line("method", method_name(c.method));
    line("lambda", num(c.lambda));
    line("epochs", std::to_string(c.epochs));
    line("base_lr", num(c.base_lr));
    line("lr_power", num(c.lr_power));
    line("momentum", num(c.momentum));
    line("weight_decay", num(c.weight_decay));
    line("batch_labeled", std::to_string(c.batch_labeled));
    line("batch_unlabeled", std::to_string(c.batch_unlabeled));
    line("data_seed", std::to_string(c.data_seed));
    line("partition_seed", std::to_string(c.partition_seed));
    line("net1_seed", std::to_string(c.net1_seed));
    line("net2_seed", std::to_string(c.net2_seed));
    line("aug_seed", std::to_string(c.aug_seed));
    line("ohem", c.ohem ? "true" : "false");
    line("ohem_threshold", num(c.ohem_options.threshold));
    line("ohem_min_kept", std::to_string(c.ohem_options.min_kept));
    line("cps_on_labeled", c.cps_on_labeled ? "true" : "false");
    line("ema_alpha", num(c.ema_alpha));
    line("self_train_threshold", num(c.self_train_threshold));
    line("multiscale", c.multiscale ? "true" : "false");
    line("noise_sigma", num(c.strong.noise_sigma));
    line("min_brightness", num(c.strong.min_brightness));
    line("max_brightness", num(c.strong.max_brightness));
    line("cutmix_min_area", num(c.cutmix.min_area));
    line("cutmix_max_area", num(c.cutmix.max_area));
    line("overlap_region", c.overlap_region == OverlapRegion::GroundTruthObjects ? "gt" : "pred");
    line("train_size", std::to_string(c.train_size));
    line("val_size", std::to_string(c.val_size));
    line("height", std::to_string(c.height));
    line("width", std::to_string(c.width));
    line("num_classes", std::to_string(c.num_classes));
    line("ratio", num(c.ratio));
    line("widths", widths);
    line("distractor_prob", num(c.data.distractor_prob));
    line("pixel_noise", num(c.data.pixel_noise));
    line("color_jitter", num(c.data.color_jitter));
    line("shape_min_size", num(c.data.min_size));
    line("shape_max_size", num(c.data.max_size));
}

// ---- sweeps ----

struct ExperimentSpec {
    TrainConfig base;
    std::vector<MethodKind> methods{MethodKind::Supervised, MethodKind::CPS};
    std::vector<std::string> ratios{"1/8"}; // kept as written for table headers
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string out_dir = "sweep_out";

    void validate() const {
        if (methods.empty()) throw ConfigError("experiment: no methods");
        if (ratios.empty()) throw ConfigError("experiment: no ratios");
        if (seeds.empty()) throw ConfigError("experiment: no seeds");
        for (const auto& r : ratios) {
            try {
                parse_ratio(r);
            } catch (const ArgumentError& e) {
                throw ConfigError(std::string("experiment: ") + e.what());
            }
        }
        for (MethodKind m : methods) {
            TrainConfig c = base;
            c.method = m;
            apply_seed(c, seeds.front());
            c.validate();
        }
    }
};

inline void apply_experiment_setting(ExperimentSpec& spec, const std::string& key, const std::string& value) {
    if (key == "methods") {
        spec.methods.clear();
        for (const auto& m : split_list(value)) spec.methods.push_back(parse_method(m));
    } else if (key == "ratios") {
        spec.ratios = split_list(value);
    } else if (key == "seeds") {
        spec.seeds.clear();
        for (const auto& s : split_list(value)) spec.seeds.push_back(detail::to_uint(key, s));
    } else if (key == "out") {
        spec.out_dir = value;
    } else {
        apply_setting(spec.base, key, value);
    }
}

struct RunSummary {
    MethodKind method = MethodKind::Supervised;
    std::string ratio;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::vector<EpochRecord> records;
    std::size_t unlabeled_gt_reads = 0;
    std::size_t second_net_eval_reads = 0;
    std::vector<std::string> notes;

    real final_miou() const { return records.empty() ? 0 : records.back().miou; }
};

struct ExperimentReport {
    std::vector<RunSummary> runs; // method-major, then ratio, then seed
    std::size_t failures() const {
        std::size_t n = 0;
        for (const auto& r : runs) n += !r.ok;
        return n;
    }
    // Final mIoU of every successful run matching (method, ratio).
    std::vector<real> final_mious(MethodKind m, const std::string& ratio) const {
        std::vector<real> out;
        for (const auto& r : runs)
            if (r.ok && r.method == m && r.ratio == ratio) out.push_back(r.final_miou());
        return out;
    }
    const RunSummary* find(MethodKind m, const std::string& ratio, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.method == m && r.ratio == ratio && r.seed == seed) return &r;
        return nullptr;
    }
};

struct MeanStd {
    real mean = 0, stdev = 0;
};

// Sample standard deviation (n-1); 0 for a single value.
inline MeanStd mean_std(const std::vector<real>& v) {
    MeanStd m;
    if (v.empty()) return m;
    for (real x : v) m.mean += x;
    m.mean /= static_cast<real>(v.size());
    if (v.size() > 1) {
        real ss = 0;
        for (real x : v) ss += (x - m.mean) * (x - m.mean);
        m.stdev = std::sqrt(ss / static_cast<real>(v.size() - 1));
    }
    return m;
}

inline std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CPSLAB_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    }
    return n;
}

inline std::string run_label(MethodKind m, const std::string& ratio, std::uint64_t seed) {
    std::string r = ratio;
    for (char& ch : r)
        if (ch == '/') ch = '_';
    return method_name(m) + "_r" + r + "_s" + std::to_string(seed);
}

inline constexpr char kCurveHeader[] = "epoch,lr,l_s,l_cps_l,l_cps_u,l_cpc,total,miou,overlap";

inline void write_curve_csv(std::ostream& os, const std::vector<EpochRecord>& records) {
    os << kCurveHeader << '\n';
    for (const auto& r : records) {
        os << r.epoch << ',' << fmt("%.8f", r.lr) << ',' << fmt("%.6f", r.losses.l_s) << ','
           << fmt("%.6f", r.losses.l_cps_labeled) << ',' << fmt("%.6f", r.losses.l_cps_unlabeled) << ','
           << fmt("%.6f", r.losses.l_cpc) << ',' << fmt("%.6f", r.losses.total) << ',' << fmt("%.6f", r.miou) << ','
           << (r.overlap ? fmt("%.6f", *r.overlap) : "") << '\n';
    }
}

// Rows = methods, columns = ratios, cells = mean ± stdev of final mIoU in
// percentage points over the seeds that finished.
inline void write_table(std::ostream& os, const ExperimentSpec& spec, const ExperimentReport& rep) {
    os << "| method |";
    for (const auto& r : spec.ratios) os << ' ' << r << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < spec.ratios.size(); ++i) os << "---|";
    os << '\n';
    for (MethodKind m : spec.methods) {
        os << "| " << method_name(m) << " |";
        for (const auto& r : spec.ratios) {
            const auto v = rep.final_mious(m, r);
            if (v.empty()) {
                os << " failed |";
                continue;
            }
            const MeanStd s = mean_std(v);
            os << ' ' << fmt("%.2f", 100 * s.mean) << " ± " << fmt("%.2f", 100 * s.stdev);
            if (v.size() < spec.seeds.size()) os << " (" << v.size() << '/' << spec.seeds.size() << " seeds)";
            os << " |";
        }
        os << '\n';
    }
    os << "\nmIoU (%) on the validation split, mean ± sample stdev over seeds";
    for (std::size_t i = 0; i < spec.seeds.size(); ++i) os << (i ? ", " : " ") << spec.seeds[i];
    os << ".\n";
}

struct Series {
    std::string name;
    std::vector<std::pair<real, real>> points;
};

// Self-contained line plot. x tick labels are optional (categorical axes).
inline void write_svg_plot(std::ostream& os, const std::string& title, const std::string& xlabel,
                           const std::string& ylabel, const std::vector<Series>& series,
                           const std::vector<std::pair<real, std::string>>& xticks = {}) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    constexpr real W = 640, H = 400, L = 70, R = 170, T = 40, B = 60;
    real x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool first = true;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            if (first) {
                x0 = x1 = x;
                y0 = y1 = y;
                first = false;
            }
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const real pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](real x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](real y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const real y = y0 + (y1 - y0) * i / 4;
        os << "<text x=\"" << L - 6 << "\" y=\"" << fmt("%.1f", py(y) + 4) << "\" text-anchor=\"end\">"
           << fmt("%.3f", y) << "</text>\n";
    }
    if (xticks.empty()) {
        for (int i = 0; i <= 4; ++i) {
            const real x = x0 + (x1 - x0) * i / 4;
            os << "<text x=\"" << fmt("%.1f", px(x)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
               << fmt("%g", x) << "</text>\n";
        }
    } else {
        for (const auto& [x, label] : xticks)
            os << "<text x=\"" << fmt("%.1f", px(x)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
               << label << "</text>\n";
    }
    os << "<text x=\"" << fmt("%.1f", (L + W - R) / 2) << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xlabel
       << "</text>\n";
    os << "<text x=\"18\" y=\"" << fmt("%.1f", (T + H - B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
       << fmt("%.1f", (T + H - B) / 2) << ")\">" << ylabel << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* colour = palette[i % std::size(palette)];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (std::size_t k = 0; k < series[i].points.size(); ++k)
            os << (k ? " " : "") << fmt("%.1f", px(series[i].points[k].first)) << ','
               << fmt("%.1f", py(series[i].points[k].second));
        os << "\"/>\n";
        for (auto [x, y] : series[i].points)
            os << "<circle cx=\"" << fmt("%.1f", px(x)) << "\" cy=\"" << fmt("%.1f", py(y)) << "\" r=\"3\" fill=\""
               << colour << "\"/>\n";
        const real ly = T + 10 + 18 * static_cast<real>(i);
        os << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 35 << "\" y2=\"" << ly
           << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << W - R + 40 << "\" y=\"" << ly + 4 << "\">" << series[i].name << "</text>\n";
    }
    os << "</svg>\n";
}

inline void write_plots(const std::filesystem::path& dir, const ExperimentSpec& spec, const ExperimentReport& rep) {
    std::vector<Series> miou_series;
    std::vector<std::pair<real, std::string>> ticks;
    for (std::size_t i = 0; i < spec.ratios.size(); ++i) ticks.emplace_back(static_cast<real>(i), spec.ratios[i]);
    for (MethodKind m : spec.methods) {
        Series s{method_name(m), {}};
        for (std::size_t i = 0; i < spec.ratios.size(); ++i) {
            const auto v = rep.final_mious(m, spec.ratios[i]);
            if (!v.empty()) s.points.emplace_back(static_cast<real>(i), 100 * mean_std(v).mean);
        }
        miou_series.push_back(std::move(s));
    }
    {
        std::ofstream os(dir / "miou_vs_ratio.svg", std::ios::binary);
        write_svg_plot(os, "mIoU vs labeled ratio", "labeled ratio", "mIoU (%)", miou_series, ticks);
    }

    // Mean overlap per epoch over seeds, one line per (method, ratio) that has
    // a second network.
    std::vector<Series> overlap_series;
    for (MethodKind m : spec.methods)
        for (const auto& ratio : spec.ratios) {
            std::map<std::size_t, std::pair<real, std::size_t>> acc;
            for (const auto& r : rep.runs) {
                if (!r.ok || r.method != m || r.ratio != ratio) continue;
                for (const auto& e : r.records)
                    if (e.overlap) {
                        acc[e.epoch].first += *e.overlap;
                        ++acc[e.epoch].second;
                    }
            }
            if (acc.empty()) continue;
            Series s{method_name(m) + " " + ratio, {}};
            for (const auto& [epoch, sum] : acc)
                s.points.emplace_back(static_cast<real>(epoch), sum.first / static_cast<real>(sum.second));
            overlap_series.push_back(std::move(s));
        }
    std::ofstream os(dir / "overlap_vs_epoch.svg", std::ios::binary);
    write_svg_plot(os, "Prediction overlap on object pixels", "epoch", "overlap ratio", overlap_series);
}

// Runs every (method, ratio, seed) combination and writes:
//   table.md, runs.csv, runs/<label>.csv, miou_vs_ratio.svg, overlap_vs_epoch.svg
// A failed run is recorded and the rest continue.
inline ExperimentReport run_experiments(const ExperimentSpec& spec, std::size_t threads = worker_threads(),
                                        std::ostream* log = nullptr) {
    spec.validate();
    const TrainConfig& base = spec.base;
    const Dataset train_set =
        generate_toy_dataset(base.train_size, base.height, base.width, base.num_classes, base.data_seed, base.data);
    const Dataset val = generate_toy_dataset(base.val_size, base.height, base.width, base.num_classes,
                                             derive_seed(base.data_seed, "validation"), base.data);

    ExperimentReport rep;
    for (MethodKind m : spec.methods)
        for (const auto& ratio : spec.ratios)
            for (std::uint64_t seed : spec.seeds) {
                RunSummary r;
                r.method = m;
                r.ratio = ratio;
                r.seed = seed;
                rep.runs.push_back(std::move(r));
            }

    std::mutex log_mutex;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < rep.runs.size(); i = next++) {
            RunSummary& r = rep.runs[i];
            try {
                TrainConfig cfg = base;
                cfg.method = r.method;
                cfg.ratio = parse_ratio(r.ratio);
                apply_seed(cfg, r.seed);
                const PartitionProtocol protocol = partition(cfg.train_size, cfg.ratio, cfg.partition_seed);
                RunResult res = train(cfg, train_set, protocol, val);
                r.records = std::move(res.records);
                r.unlabeled_gt_reads = res.unlabeled_gt_reads;
                r.second_net_eval_reads = res.second_net_eval_reads;
                r.notes = std::move(res.notes);
                r.ok = true;
                if (log) {
                    std::lock_guard lock(log_mutex);
                    *log << run_label(r.method, r.ratio, r.seed) << ": mIoU " << fmt("%.4f", r.final_miou()) << " ("
                         << fmt("%.1f", res.wall_seconds) << " s)\n";
                }
            } catch (const std::exception& e) {
                r.error = e.what();
                if (log) {
                    std::lock_guard lock(log_mutex);
                    *log << run_label(r.method, r.ratio, r.seed) << ": FAILED: " << r.error << '\n';
                }
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(threads, rep.runs.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    const std::filesystem::path dir(spec.out_dir);
    std::filesystem::create_directories(dir / "runs");
    for (const auto& r : rep.runs) {
        if (!r.ok) continue;
        std::ofstream os(dir / "runs" / (run_label(r.method, r.ratio, r.seed) + ".csv"), std::ios::binary);
        write_curve_csv(os, r.records);
    }
    {
        std::ofstream os(dir / "runs.csv", std::ios::binary);
        os << "method,ratio,seed,status,final_miou\n";
        for (const auto& r : rep.runs)
            os << method_name(r.method) << ',' << r.ratio << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ','
               << (r.ok ? fmt("%.6f", r.final_miou()) : "") << '\n';
    }
    {
        std::ofstream os(dir / "table.md", std::ios::binary);
        write_table(os, spec, rep);
    }
    write_plots(dir, spec, rep);
    return rep;
}

} // namespace cpslab
