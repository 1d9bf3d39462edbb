#pragma once

// A small encoder-decoder segmentation network and the dual-network pair.
//
// Layout for depth D and widths w[0..D-1]:
//   enc{i}: conv3x3 stride 2 -> channel_norm -> relu      (w[i] channels)
//   dec{j}: upsample x2 -> conv3x3 -> channel_norm -> relu (w[D-2-j] channels, w[0] for the last)
//   head:   conv1x1 -> K logits
// Output resolution equals input resolution whenever H and W are divisible
// by 2^D.
//
// Checkpoint file layout (all integers little-endian):
//   magic "CPSCKPT1" (8 bytes), u32 version = 1, u32 entry count,
//   then per entry: u32 key length, key bytes, u32 rank, rank x u64 extents,
//   product(extents) x f64 values.
// Keys are layer paths ("enc0.conv.weight", ...). Architecture fields are
// stored as one-element arrays under "meta.*".

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cpslab/io.hpp"
#include "cpslab/ops.hpp"
#include "cpslab/rng.hpp"
#include "cpslab/tensor.hpp"

namespace cpslab {

struct SegNetConfig {
    std::size_t in_channels = 3;
    std::size_t num_classes = 5;
    std::vector<std::size_t> widths{16, 32};
    std::size_t depth = 2;
    std::uint64_t seed = 1;
    real norm_eps = 1e-5;

    void validate() const {
        if (num_classes < 2) throw ConfigError("SegNetConfig: num_classes must be >= 2");
        if (in_channels < 1) throw ConfigError("SegNetConfig: in_channels must be >= 1");
        if (widths.empty()) throw ConfigError("SegNetConfig: widths must be non-empty");
        for (std::size_t w : widths)
            if (w == 0) throw ConfigError("SegNetConfig: widths must be positive");
        if (depth != widths.size())
            throw ConfigError("SegNetConfig: depth " + std::to_string(depth) + " does not match " +
                              std::to_string(widths.size()) + " widths");
        if (!(norm_eps > 0)) throw ConfigError("SegNetConfig: norm_eps must be positive");
    }
};

struct Parameter {
    std::string name;
    Tensor value;
};

class SegNet {
public:
    SegNet() = default;
    SegNet(SegNetConfig config, std::vector<Parameter> params)
        : config_(std::move(config)), params_(std::move(params)) {}

    const SegNetConfig& config() const { return config_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<Parameter>& parameters() { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    Parameter& parameter(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw ArgumentError("SegNet: no parameter named " + name);
    }

    std::vector<Tensor> values() const {
        std::vector<Tensor> v;
        v.reserve(params_.size());
        for (const auto& p : params_) v.push_back(p.value);
        return v;
    }

    void set_values(std::vector<Tensor> values) {
        if (values.size() != params_.size()) throw DimensionError("SegNet::set_values: parameter count mismatch");
        for (std::size_t k = 0; k < values.size(); ++k) {
            if (values[k].shape() != params_[k].value.shape())
                throw DimensionError("SegNet::set_values: shape mismatch for " + params_[k].name);
            params_[k].value = std::move(values[k]);
        }
    }

    // Number of times the network has been run (bound or inferred). Used by
    // isolation guards to prove a network was not consulted.
    std::size_t reads() const { return reads_; }
    void note_read() const { ++reads_; }

    friend bool operator==(const SegNet& a, const SegNet& b) {
        if (a.params_.size() != b.params_.size()) return false;
        for (std::size_t k = 0; k < a.params_.size(); ++k)
            if (a.params_[k].name != b.params_[k].name || !(a.params_[k].value == b.params_[k].value))
                return false;
        return true;
    }

private:
    SegNetConfig config_;
    std::vector<Parameter> params_;
    mutable std::size_t reads_ = 0;
};

namespace detail {

inline void add_conv(std::vector<Parameter>& out, const std::string& prefix, std::size_t cout, std::size_t cin,
                     std::size_t k, Rng& rng) {
    // Kaiming fan-in: variance 2 / (cin*k*k).
    std::normal_distribution<real> normal(0, std::sqrt(real(2) / static_cast<real>(cin * k * k)));
    Tensor w(Shape{cout, cin, k, k});
    for (real& v : w.data()) v = normal(rng);
    out.push_back({prefix + ".conv.weight", std::move(w)});
    out.push_back({prefix + ".conv.bias", Tensor(Shape{cout})});
}

inline void add_norm(std::vector<Parameter>& out, const std::string& prefix, std::size_t c) {
    out.push_back({prefix + ".norm.gain", Tensor(Shape{c}, 1.0)});
    out.push_back({prefix + ".norm.shift", Tensor(Shape{c})});
}

inline std::size_t decoder_width(const SegNetConfig& cfg, std::size_t j) {
    const std::size_t level = cfg.depth - 1 - j; // decoder j undoes encoder `level`
    return level == 0 ? cfg.widths[0] : cfg.widths[level - 1];
}

} // namespace detail

inline SegNet build_segnet(const SegNetConfig& config) {
    config.validate();
    Rng rng = derive(config.seed, "segnet.init");
    std::vector<Parameter> params;
    std::size_t c = config.in_channels;
    for (std::size_t i = 0; i < config.depth; ++i) {
        const std::string name = "enc" + std::to_string(i);
        detail::add_conv(params, name, config.widths[i], c, 3, rng);
        detail::add_norm(params, name, config.widths[i]);
        c = config.widths[i];
    }
    for (std::size_t j = 0; j < config.depth; ++j) {
        const std::string name = "dec" + std::to_string(j);
        const std::size_t out = detail::decoder_width(config, j);
        detail::add_conv(params, name, out, c, 3, rng);
        detail::add_norm(params, name, out);
        c = out;
    }
    detail::add_conv(params, "head", config.num_classes, c, 1, rng);
    return SegNet(config, std::move(params));
}

// A network whose parameters have been placed on a tape as differentiable
// leaves. Every forward through the same BoundNet accumulates into the same
// parameter gradients.
class BoundNet {
public:
    BoundNet(const SegNet& net, Tape& tape) : net_(&net), tape_(&tape) {
        net.note_read();
        params_.reserve(net.parameters().size());
        for (const auto& p : net.parameters()) params_.push_back(tape.leaf(p.value));
    }

    const SegNet& net() const { return *net_; }
    Tape& tape() const { return *tape_; }
    const std::vector<Var>& params() const { return params_; }

    std::vector<Tensor> gradients() const {
        std::vector<Tensor> g;
        g.reserve(params_.size());
        for (const Var& v : params_) g.push_back(v.grad());
        return g;
    }

private:
    const SegNet* net_;
    Tape* tape_;
    std::vector<Var> params_;
};

// Per-pixel class logits [B,K,H,W] for images [B,Cin,H,W].
inline Var forward(const BoundNet& bound, Var images) {
    const SegNetConfig& cfg = bound.net().config();
    const Tensor& x = images.value();
    detail::require_rank(x, 4, "forward", "images");
    if (x.dim(1) != cfg.in_channels)
        throw DimensionError("forward: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                             std::to_string(x.dim(1)));
    const std::size_t mult = std::size_t{1} << cfg.depth;
    if (x.dim(2) % mult != 0 || x.dim(3) % mult != 0)
        throw ArgumentError("forward: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                            " not divisible by " + std::to_string(mult));

    const auto& p = bound.params();
    std::size_t k = 0;
    Var h = images;
    auto block = [&](Var in, std::size_t stride) {
        Var y = conv2d(in, p[k], p[k + 1], stride, 1);
        y = channel_norm(y, p[k + 2], p[k + 3], cfg.norm_eps);
        k += 4;
        return relu(y);
    };
    for (std::size_t i = 0; i < cfg.depth; ++i) h = block(h, 2);
    for (std::size_t j = 0; j < cfg.depth; ++j) h = block(bilinear_upsample(h, 2), 1);
    return conv2d(h, p[k], p[k + 1], 1, 0);
}

// Gradient-free forward pass on a private tape.
inline Tensor infer(const SegNet& net, const Tensor& images) {
    Tape tape;
    BoundNet bound(net, tape);
    return forward(bound, tape.constant(images)).value();
}

struct DualNetworks {
    SegNet net1;
    SegNet net2;
};

inline DualNetworks init_dual(SegNetConfig config, std::uint64_t seed1, std::uint64_t seed2) {
    if (seed1 == seed2)
        throw ArgumentError("init_dual: identical seeds would make both networks the same");
    config.seed = seed1;
    SegNet a = build_segnet(config);
    config.seed = seed2;
    SegNet b = build_segnet(config);
    return {std::move(a), std::move(b)};
}

// teacher <- alpha*teacher + (1-alpha)*student, parameter-wise.
inline void ema_update(SegNet& teacher, const SegNet& student, real alpha) {
    if (!(alpha >= 0 && alpha < 1)) throw ArgumentError("ema_update: alpha must lie in [0, 1)");
    auto& tp = teacher.parameters();
    const auto& sp = student.parameters();
    if (tp.size() != sp.size()) throw DimensionError("ema_update: parameter count mismatch");
    for (std::size_t k = 0; k < tp.size(); ++k) {
        if (tp[k].value.shape() != sp[k].value.shape())
            throw DimensionError("ema_update: shape mismatch for " + tp[k].name + ": " +
                                 shape_str(tp[k].value.shape()) + " vs " + shape_str(sp[k].value.shape()));
        Tensor& t = tp[k].value;
        const Tensor& s = sp[k].value;
        // Equal entries are left alone so a converged teacher is an exact fixed point.
        for (std::size_t i = 0; i < t.size(); ++i)
            if (t[i] != s[i]) t[i] = alpha * t[i] + (1 - alpha) * s[i];
    }
}

// ---- checkpoints ----

inline constexpr char kCheckpointMagic[] = "CPSCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

using ArrayMap = std::map<std::string, Tensor>;

inline void write_array_map(std::ostream& os, const std::vector<std::pair<std::string, const Tensor*>>& entries) {
    io::put_bytes(os, std::string(kCheckpointMagic, 8));
    io::put_u32(os, kCheckpointVersion);
    io::put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [key, t] : entries) {
        io::put_u32(os, static_cast<std::uint32_t>(key.size()));
        io::put_bytes(os, key);
        io::put_u32(os, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) io::put_u64(os, d);
        for (real v : t->values()) io::put_f64(os, v);
    }
}

inline ArrayMap read_array_map(std::istream& is) {
    if (io::get_bytes(is, 8) != std::string(kCheckpointMagic, 8)) throw DataError("checkpoint: bad magic");
    const std::uint32_t version = io::get_u32(is);
    if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = io::get_u32(is);
    ArrayMap out;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::string key = io::get_bytes(is, io::get_u32(is));
        Shape shape(io::get_u32(is));
        for (auto& d : shape) d = io::get_u64(is);
        Tensor t(shape);
        for (real& v : t.data()) v = io::get_f64(is);
        out.emplace(std::move(key), std::move(t));
    }
    return out;
}

inline void save_checkpoint(const SegNet& net, const std::string& path) {
    const SegNetConfig& c = net.config();
    std::vector<Tensor> meta{Tensor::scalar(static_cast<real>(c.in_channels)),
                             Tensor::scalar(static_cast<real>(c.num_classes)),
                             Tensor::scalar(c.norm_eps),
                             Tensor(Shape{c.widths.size()})};
    for (std::size_t i = 0; i < c.widths.size(); ++i) meta[3][i] = static_cast<real>(c.widths[i]);
    std::vector<std::pair<std::string, const Tensor*>> entries{{"meta.in_channels", &meta[0]},
                                                               {"meta.num_classes", &meta[1]},
                                                               {"meta.norm_eps", &meta[2]},
                                                               {"meta.widths", &meta[3]}};
    for (const auto& p : net.parameters()) entries.emplace_back(p.name, &p.value);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    write_array_map(os, entries);
    if (!os) throw Error("failed writing " + path);
}

inline SegNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    ArrayMap m = read_array_map(is);
    auto meta = [&](const std::string& k) -> const Tensor& {
        auto it = m.find("meta." + k);
        if (it == m.end()) throw DataError("checkpoint: missing meta." + k);
        return it->second;
    };
    SegNetConfig cfg;
    cfg.in_channels = static_cast<std::size_t>(meta("in_channels").item());
    cfg.num_classes = static_cast<std::size_t>(meta("num_classes").item());
    cfg.norm_eps = meta("norm_eps").item();
    cfg.widths.clear();
    for (real w : meta("widths").values()) cfg.widths.push_back(static_cast<std::size_t>(w));
    cfg.depth = cfg.widths.size();
    SegNet net = build_segnet(cfg);
    for (auto& p : net.parameters()) {
        auto it = m.find(p.name);
        if (it == m.end()) throw DataError("checkpoint: missing " + p.name);
        if (it->second.shape() != p.value.shape()) throw DataError("checkpoint: shape mismatch for " + p.name);
        p.value = it->second;
    }
    return net;
}

} // namespace cpslab
