#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "facl/autodiff.hpp"
#include "facl/error.hpp"
#include "facl/optim.hpp"
#include "facl/rng.hpp"
#include "facl/tensor.hpp"

namespace facl {

// Fully connected rectifier encoder: input -> hidden_dims... -> feature_dim.
// The feature layer itself is linear.
struct EncoderSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    std::size_t feature_dim = 0;
    std::size_t projection_dim = 0;

    void validate() const {
        if (input_dim == 0 || feature_dim == 0 || projection_dim == 0) {
            throw ValueError("encoder spec: every dimension must be at least 1");
        }
        for (std::size_t h : hidden_dims)
            if (h == 0) throw ValueError("encoder spec: hidden widths must be at least 1");
    }

    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

struct DenseLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
};

// Feature extractor plus contrastive projection head. Exists twice in a model:
// the online copy trained by SGD and the momentum copy tracking it by EMA.
struct Backbone {
    std::vector<DenseLayer> layers;
    Tensor projection;  // [feature_dim x projection_dim], no bias

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for (DenseLayer& l : layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        out.push_back(&projection);
        return out;
    }

    std::vector<const Tensor*> tensors() const {
        std::vector<const Tensor*> out;
        for (const DenseLayer& l : layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        out.push_back(&projection);
        return out;
    }

    friend bool operator==(const Backbone& a, const Backbone& b) {
        const auto ta = a.tensors(), tb = b.tensors();
        if (ta.size() != tb.size()) return false;
        for (std::size_t k = 0; k < ta.size(); ++k)
            if (!(*ta[k] == *tb[k])) return false;
        return true;
    }
};

struct ModelParams {
    EncoderSpec spec;
    Backbone online;
    Tensor classifier;  // [rows x feature_dim]; row index = proxy label
    Backbone momentum;
    double ema = 0.999;

    // Declaration order shared by the optimizer and the checkpoint writer.
    std::vector<Tensor*> trainable() {
        auto out = online.tensors();
        out.push_back(&classifier);
        return out;
    }

    std::vector<const Tensor*> trainable() const {
        auto out = online.tensors();
        out.push_back(&classifier);
        return out;
    }

    std::size_t classifier_rows() const { return classifier.rank() == 2 ? classifier.rows() : 0; }
};

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

/// Deterministic in `seed`. The momentum copy starts equal to the online copy.
inline ModelParams init_params(const EncoderSpec& spec, std::uint64_t seed, std::size_t classifier_rows = 0,
                               double ema = 0.999) {
    spec.validate();
    if (!(ema >= 0.0 && ema <= 1.0)) throw ValueError("init_params: ema coefficient must lie in [0, 1]");
    Rng rng(stream_seed(seed, Stream::Init));
    ModelParams p;
    p.spec = spec;
    p.ema = ema;
    std::size_t in = spec.input_dim;
    std::vector<std::size_t> widths = spec.hidden_dims;
    widths.push_back(spec.feature_dim);
    for (std::size_t k = 0; k < widths.size(); ++k) {
        const bool last = k + 1 == widths.size();
        const double sd = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(in));
        p.online.layers.push_back(DenseLayer{random_normal({in, widths[k]}, sd, rng), Tensor(Shape{widths[k]})});
        in = widths[k];
    }
    p.online.projection =
        random_normal({spec.feature_dim, spec.projection_dim}, 1.0 / std::sqrt(double(spec.feature_dim)), rng);
    p.classifier = random_normal({classifier_rows, spec.feature_dim}, 1.0 / std::sqrt(double(spec.feature_dim)), rng);
    p.momentum = p.online;
    return p;
}

// Parameters as tape nodes.
struct BoundBackbone {
    std::vector<std::pair<ad::Var, ad::Var>> layers;
    ad::Var projection;
};

inline BoundBackbone bind(ad::Tape& tape, const Backbone& b, bool requires_grad) {
    BoundBackbone out;
    for (const DenseLayer& l : b.layers)
        out.layers.emplace_back(tape.leaf(l.weight, requires_grad), tape.leaf(l.bias, requires_grad));
    out.projection = tape.leaf(b.projection, requires_grad);
    return out;
}

inline ad::Var forward_features(const BoundBackbone& b, ad::Var x) {
    const std::size_t expected = b.layers.front().first.rows();
    if (x.value().rank() != 2 || x.cols() != expected) {
        throw ShapeError("forward_features: expected input width " + std::to_string(expected) + ", got shape " +
                         shape_string(x.shape()));
    }
    ad::Var h = x;
    for (std::size_t k = 0; k < b.layers.size(); ++k) {
        h = ad::add_row_bias(ad::matmul(h, b.layers[k].first), b.layers[k].second);
        if (k + 1 < b.layers.size()) h = ad::relu(h);
    }
    return h;
}

/// Linear projection followed by row-wise L2 normalization.
inline ad::Var forward_projection(const BoundBackbone& b, ad::Var embeddings) {
    if (embeddings.value().rank() != 2 || embeddings.cols() != b.projection.rows()) {
        throw ShapeError("forward_projection: embedding width mismatch");
    }
    return ad::l2_normalize_rows(ad::matmul(embeddings, b.projection));
}

inline ad::Var forward_classifier(ad::Var classifier, ad::Var features) {
    if (features.value().rank() != 2 || features.cols() != classifier.cols()) {
        throw ShapeError("forward_classifier: feature width mismatch");
    }
    return ad::matmul_nt(features, classifier);
}

// Untaped conveniences. They run the taped ops on constants, so results match
// training-time values bit for bit.

inline Tensor forward_features(const ModelParams& p, const Tensor& batch, bool use_momentum = false) {
    ad::Tape tape;
    const BoundBackbone b = bind(tape, use_momentum ? p.momentum : p.online, false);
    return forward_features(b, tape.constant(batch)).value();
}

inline Tensor forward_projection(const ModelParams& p, const Tensor& embeddings, bool use_momentum) {
    ad::Tape tape;
    const BoundBackbone b = bind(tape, use_momentum ? p.momentum : p.online, false);
    return forward_projection(b, tape.constant(embeddings)).value();
}

inline Tensor forward_classifier(const ModelParams& p, const Tensor& features) {
    ad::Tape tape;
    return forward_classifier(tape.constant(p.classifier), tape.constant(features)).value();
}

/// momentum <- ema * momentum + (1 - ema) * online, extractor and projection only.
inline void momentum_sync(ModelParams& p) {
    auto targets = p.momentum.tensors();
    auto sources = p.online.tensors();
    std::vector<const Tensor*> src(sources.begin(), sources.end());
    ema_update(std::span<Tensor* const>(targets), std::span<const Tensor* const>(src), p.ema);
}

// FNV-1a over the raw bytes of the given tensors.
inline std::uint64_t checksum(std::span<const Tensor* const> tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor* t : tensors) {
        for (double v : t->data()) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffU;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoint: "FACL1", spec, then every tensor in declaration order
// (online layers, online projection, classifier, momentum layers, momentum
// projection). Integers are u64 and reals f64, all little-endian.

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
    out.write(b, 8);
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_magic(std::string_view magic) {
        if (remaining() < magic.size() || std::string_view(bytes_).substr(pos_, magic.size()) != magic) {
            throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", pos_);
        }
        pos_ += magic.size();
    }

    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    double f64() { return std::bit_cast<double>(u64()); }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw FormatError(std::string("truncated data while reading ") + what, pos_);
    }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void put_tensor(std::ostream& out, const Tensor& t) {
    for (double v : t.data()) put_f64(out, v);
}

inline Tensor get_tensor(ByteReader& in, Shape shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e != 0 && n > in.remaining() / 8 / e) throw FormatError("truncated data while reading tensor", in.offset());
        n *= e;
    }
    in.need(8 * n, "tensor");
    std::vector<double> v(n);
    for (double& x : v) x = in.f64();
    return Tensor(std::move(shape), std::move(v));
}

inline Backbone get_backbone(ByteReader& in, const EncoderSpec& spec) {
    Backbone b;
    std::size_t width = spec.input_dim;
    std::vector<std::size_t> widths = spec.hidden_dims;
    widths.push_back(spec.feature_dim);
    for (std::size_t w : widths) {
        Tensor weight = get_tensor(in, {width, w});
        Tensor bias = get_tensor(in, {w});
        b.layers.push_back(DenseLayer{std::move(weight), std::move(bias)});
        width = w;
    }
    b.projection = get_tensor(in, {spec.feature_dim, spec.projection_dim});
    return b;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, std::ostream& out) {
    out.write("FACL1", 5);
    detail::put_u64(out, p.spec.input_dim);
    detail::put_u64(out, p.spec.hidden_dims.size());
    for (std::size_t h : p.spec.hidden_dims) detail::put_u64(out, h);
    detail::put_u64(out, p.spec.feature_dim);
    detail::put_u64(out, p.spec.projection_dim);
    detail::put_u64(out, p.classifier_rows());
    detail::put_f64(out, p.ema);
    for (const Tensor* t : p.trainable()) detail::put_tensor(out, *t);
    for (const Tensor* t : p.momentum.tensors()) detail::put_tensor(out, *t);
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    save_checkpoint(p, out);
}

inline ModelParams parse_checkpoint(std::string bytes) {
    detail::ByteReader in(std::move(bytes));
    in.expect_magic("FACL1");
    ModelParams p;
    p.spec.input_dim = in.u64();
    const std::uint64_t depth = in.u64();
    if (depth > in.remaining() / 8) throw FormatError("implausible hidden layer count", in.offset() - 8);
    for (std::uint64_t k = 0; k < depth; ++k) p.spec.hidden_dims.push_back(in.u64());
    p.spec.feature_dim = in.u64();
    p.spec.projection_dim = in.u64();
    const std::uint64_t rows = in.u64();
    p.ema = in.f64();
    try {
        p.spec.validate();
    } catch (const ValueError& e) {
        throw FormatError(std::string("invalid encoder spec: ") + e.what(), in.offset());
    }
    p.online = detail::get_backbone(in, p.spec);
    p.classifier = detail::get_tensor(in, {rows, p.spec.feature_dim});
    p.momentum = detail::get_backbone(in, p.spec);
    if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint", in.offset());
    return p;
}

inline ModelParams load_checkpoint(const std::string& path) { return parse_checkpoint(detail::read_file(path)); }

}  // namespace facl
