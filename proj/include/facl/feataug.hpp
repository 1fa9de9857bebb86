#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facl/autodiff.hpp"
#include "facl/encoder.hpp"
#include "facl/error.hpp"
#include "facl/rng.hpp"
#include "facl/tensor.hpp"

namespace facl {

// ---------------------------------------------------------------------------
// Proxy labels: real class y owns slots y*P + p for p in [0, P).

inline constexpr int kProxyFactor = 2;

inline int proxy_encode(int y, int p, int factor = kProxyFactor) {
    if (y < 0) throw ValueError("proxy_encode: negative class " + std::to_string(y));
    if (p < 0 || p >= factor) {
        throw ValueError("proxy_encode: slot " + std::to_string(p) + " outside [0, " + std::to_string(factor) + ")");
    }
    return y * factor + p;
}

inline std::pair<int, int> proxy_decode(int yp, int factor = kProxyFactor) {
    if (yp < 0) throw ValueError("proxy_decode: negative proxy label");
    return {yp / factor, yp % factor};
}

struct ProxyLabelMap {
    int factor = kProxyFactor;
    int classes = 0;

    int size() const { return factor * classes; }
    int encode(int y, int p) const {
        if (y >= classes) throw ValueError("ProxyLabelMap: class " + std::to_string(y) + " not registered");
        return proxy_encode(y, p, factor);
    }
    std::pair<int, int> decode(int yp) const {
        if (yp >= size()) throw ValueError("ProxyLabelMap: proxy label out of range");
        return proxy_decode(yp, factor);
    }
};

// ---------------------------------------------------------------------------
// Input transforms. Each is a scaled coordinate permutation,
// out[k] = scale[k] * in[perm[k]], hence a bijection whenever no scale is 0.

struct Transform {
    std::vector<std::size_t> perm;
    std::vector<double> scale;

    static Transform identity(std::size_t dim) {
        Transform t;
        t.perm.resize(dim);
        std::iota(t.perm.begin(), t.perm.end(), std::size_t{0});
        t.scale.assign(dim, 1.0);
        return t;
    }

    void apply(std::span<const double> in, std::span<double> out) const {
        for (std::size_t k = 0; k < perm.size(); ++k) out[k] = scale[k] * in[perm[k]];
    }
};

class TransformSet {
public:
    TransformSet() = default;

    // Identity plus `m` seeded signed coordinate permutations (vector inputs).
    static TransformSet signed_permutations(std::size_t dim, std::size_t m, std::uint64_t seed) {
        TransformSet s(dim);
        Rng rng(stream_seed(seed, Stream::Transforms));
        for (std::size_t t = 0; t < m; ++t) {
            Transform tr = Transform::identity(dim);
            for (std::size_t k = dim; k > 1; --k) std::swap(tr.perm[k - 1], tr.perm[uniform_index(rng, k)]);
            for (double& sgn : tr.scale) sgn = (rng() & 1U) ? -1.0 : 1.0;
            s.transforms_.push_back(std::move(tr));
        }
        return s;
    }

    // Identity plus `m` transforms on channel-major images: transform t
    // rotates by 180 degrees and cycles channels by t (out channel c reads
    // input channel (c + t) mod channels).
    static TransformSet image_rotations(std::size_t channels, std::size_t height, std::size_t width, std::size_t m) {
        if (m >= channels && m > 0) throw ValueError("image transforms: need more channels than transforms");
        const std::size_t plane = height * width;
        TransformSet s(channels * plane);
        for (std::size_t t = 1; t <= m; ++t) {
            Transform tr = Transform::identity(channels * plane);
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t y = 0; y < height; ++y)
                    for (std::size_t x = 0; x < width; ++x)
                        tr.perm[c * plane + y * width + x] =
                            ((c + t) % channels) * plane + (height - 1 - y) * width + (width - 1 - x);
            s.transforms_.push_back(std::move(tr));
        }
        return s;
    }

    // Mild view augmentations for vectors: identity plus one fixed seeded
    // per-coordinate rescaling with factors in [1 - strength, 1 + strength].
    static TransformSet vector_views(std::size_t dim, double strength, std::uint64_t seed) {
        TransformSet s(dim);
        Rng rng(stream_seed(seed, Stream::Transforms, 1));
        std::uniform_real_distribution<double> u(1.0 - strength, 1.0 + strength);
        Transform tr = Transform::identity(dim);
        for (double& f : tr.scale) f = u(rng);
        s.transforms_.push_back(std::move(tr));
        return s;
    }

    // Identity plus horizontal flip.
    static TransformSet image_views(std::size_t channels, std::size_t height, std::size_t width) {
        const std::size_t plane = height * width;
        TransformSet s(channels * plane);
        Transform tr = Transform::identity(channels * plane);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x)
                    tr.perm[c * plane + y * width + x] = c * plane + y * width + (width - 1 - x);
        s.transforms_.push_back(std::move(tr));
        return s;
    }

    std::size_t input_dim() const { return dim_; }
    // Number of non-identity transforms (M).
    std::size_t count() const { return transforms_.size() - 1; }
    // Transform 0 is the identity.
    const Transform& operator[](std::size_t t) const { return transforms_.at(t); }

    Tensor apply(std::size_t t, const Tensor& rows) const {
        if (rows.cols() != dim_) throw ShapeError("transform: input width mismatch");
        Tensor out = Tensor::matrix(rows.rows(), dim_);
        for (std::size_t i = 0; i < rows.rows(); ++i) transforms_.at(t).apply(rows.row(i), out.row(i));
        return out;
    }

private:
    explicit TransformSet(std::size_t dim) : dim_(dim) { transforms_.push_back(Transform::identity(dim)); }

    std::size_t dim_ = 0;
    std::vector<Transform> transforms_;
};

// ---------------------------------------------------------------------------
// Batch expansion: B samples -> B' = B * (M + 1) rows laid out as
// [original block, transform-1 block, ...].

struct ExpandedBatch {
    Tensor rows;
    std::vector<int> labels;
    std::vector<std::size_t> source;  // row of the untransformed sample (q mod B)
    std::vector<std::size_t> block;   // transform index that produced the row
};

inline ExpandedBatch expand_batch(const Tensor& batch, std::span<const int> labels, const TransformSet& transforms) {
    if (batch.rank() != 2 || batch.rows() != labels.size()) throw ShapeError("expand_batch: one label per row required");
    if (batch.rows() == 0) throw ValueError("expand_batch: empty batch");
    const std::size_t b = batch.rows(), blocks = transforms.count() + 1;
    ExpandedBatch out;
    out.rows = Tensor::matrix(b * blocks, batch.cols());
    for (std::size_t t = 0; t < blocks; ++t) {
        for (std::size_t i = 0; i < b; ++i) {
            transforms[t].apply(batch.row(i), out.rows.row(t * b + i));
            out.labels.push_back(labels[i]);
            out.source.push_back(i);
            out.block.push_back(t);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pairing for the delta-mix.

// For each i a partner drawn uniformly from [0, n) \ {i}.
inline std::vector<std::size_t> draw_pairing(std::size_t n, std::uint64_t seed) {
    if (n < 2) throw ValueError("mix: need at least two rows to draw a partner");
    Rng rng(seed);
    std::vector<std::size_t> pairing(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t u = uniform_index(rng, n - 1);
        pairing[i] = u >= i ? u + 1 : u;
    }
    return pairing;
}

// Partner restricted to rows sharing i's label. A row alone in its group is
// paired with itself.
inline std::vector<std::size_t> draw_pairing_within(std::span<const int> groups, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> pairing(groups.size());
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        pool.clear();
        for (std::size_t j = 0; j < groups.size(); ++j)
            if (j != i && groups[j] == groups[i]) pool.push_back(j);
        pairing[i] = pool.empty() ? i : pool[uniform_index(rng, pool.size())];
    }
    return pairing;
}

struct MixResult {
    Tensor f_aug;
    std::vector<std::size_t> pairing;
};

namespace detail {
inline void check_delta(double delta) {
    if (!(delta >= 0.0 && delta <= 1.0)) throw ValueError("delta must lie in [0, 1]");
}
}  // namespace detail

/// F_aug[i] = delta * Z_aug[i] + (1 - delta) * Z_aug[pairing[i]].
inline ad::Var mix_rows(ad::Var z, std::span<const std::size_t> pairing, double delta) {
    detail::check_delta(delta);
    std::vector<std::size_t> self(pairing.size());
    std::iota(self.begin(), self.end(), std::size_t{0});
    return ad::add(ad::scale(ad::gather_rows(z, std::move(self)), delta),
                   ad::scale(ad::gather_rows(z, {pairing.begin(), pairing.end()}), 1.0 - delta));
}

inline MixResult mix_features(const Tensor& z_aug, double delta, std::uint64_t seed) {
    detail::check_delta(delta);
    MixResult r;
    r.pairing = draw_pairing(z_aug.rows(), seed);
    ad::Tape tape;
    r.f_aug = mix_rows(tape.constant(z_aug), r.pairing, delta).value();
    return r;
}

/// Row 2q = Z_ori[q], row 2q+1 = F_aug[q].
inline Tensor combine_interleave(const Tensor& z_ori, const Tensor& f_aug) {
    ad::Tape tape;
    return ad::interleave_rows(tape.constant(z_ori), tape.constant(f_aug)).value();
}

// ---------------------------------------------------------------------------
// Mixture variants: which stream supplies the anchor and the partner.
// "aug" is the feature of the expanded-batch row itself, "ori" the feature of
// its untransformed source sample, "noise" a N(0, noise_scale^2 I) draw.
// A "none" partner switches mixing off: F_aug is the anchor feature itself.

enum class MixSource { Aug, Ori, Noise, None };

struct MixtureMode {
    MixSource anchor = MixSource::Aug;
    MixSource partner = MixSource::Aug;

    friend bool operator==(const MixtureMode&, const MixtureMode&) = default;
};

inline std::string to_string(MixtureMode m) {
    auto name = [](MixSource s) {
        switch (s) {
            case MixSource::Aug: return "aug";
            case MixSource::Ori: return "ori";
            case MixSource::Noise: return "noise";
            case MixSource::None: break;
        }
        return "none";
    };
    return std::string(name(m.anchor)) + "+" + name(m.partner);
}

inline MixtureMode parse_mixture(const std::string& text) {
    if (text == "aug+aug") return {MixSource::Aug, MixSource::Aug};
    if (text == "ori+ori") return {MixSource::Ori, MixSource::Ori};
    if (text == "ori+aug") return {MixSource::Ori, MixSource::Aug};
    if (text == "ori+noise") return {MixSource::Ori, MixSource::Noise};
    if (text == "aug+noise") return {MixSource::Aug, MixSource::Noise};
    if (text == "aug+none") return {MixSource::Aug, MixSource::None};
    throw ValueError("unknown mixture mode \"" + text + "\"");
}

// How the features of an expanded batch become training rows.
struct AugmentOptions {
    bool use_proxy = true;
    bool use_feataug = true;
    MixtureMode mixture{};
    double delta = 0.5;
    double noise_scale = 1.0;
};

struct RowPlan {
    bool interleave = false;
    MixSource partner = MixSource::Aug;
    std::vector<std::size_t> ori_rows;  // untransformed source of each row
    std::vector<std::size_t> anchor_rows;
    std::vector<std::size_t> partner_rows;  // only for aug/ori partners
    Tensor noise;
    std::vector<std::size_t> pairing;
    double delta = 1.0;
    std::vector<int> labels;  // one per output row
};

// Without proxy classes the rows pass through unchanged with their real labels.
// Otherwise the output is the interleaved [Z_ori, F_aug] stream labelled
// 2y / 2y+1, where Z_ori row q is the feature of row q's untransformed source.
// Proxy classes without feature augmentation use F_aug = Z_aug (no partner).
inline RowPlan plan_rows(const ExpandedBatch& batch, const AugmentOptions& opt, std::size_t feature_dim,
                         std::vector<std::size_t> pairing, std::uint64_t noise_seed) {
    RowPlan plan;
    const std::size_t n = batch.labels.size();
    if (!opt.use_proxy) {
        if (opt.use_feataug) throw ValueError("feature augmentation requires proxy classes");
        plan.labels = batch.labels;
        return plan;
    }
    const MixtureMode mixture = opt.use_feataug ? opt.mixture : MixtureMode{MixSource::Aug, MixSource::None};
    const bool paired = mixture.partner == MixSource::Aug || mixture.partner == MixSource::Ori;
    if (opt.use_feataug) detail::check_delta(opt.delta);
    if (paired && pairing.size() != n) throw ShapeError("plan_rows: pairing length mismatch");
    plan.interleave = true;
    plan.partner = mixture.partner;
    plan.delta = mixture.partner == MixSource::None ? 1.0 : opt.delta;
    plan.pairing = std::move(pairing);
    plan.ori_rows = batch.source;
    for (std::size_t i = 0; i < n; ++i) {
        plan.anchor_rows.push_back(mixture.anchor == MixSource::Ori ? batch.source[i] : i);
        if (!paired) continue;
        const std::size_t j = plan.pairing[i];
        plan.partner_rows.push_back(mixture.partner == MixSource::Aug ? j : batch.source[j]);
    }
    if (mixture.partner == MixSource::Noise) {
        Rng rng(noise_seed);
        plan.noise = random_normal({n, feature_dim}, 1.0, rng);
        for (double& v : plan.noise.data()) v *= opt.noise_scale;
    }
    for (std::size_t i = 0; i < n; ++i) {
        plan.labels.push_back(proxy_encode(batch.labels[i], 0));
        plan.labels.push_back(proxy_encode(batch.labels[i], 1));
    }
    return plan;
}

struct PlannedRows {
    ad::Var rows;   // F_comb, or the plain rows
    ad::Var z_ori;  // valid only for interleaved plans
    ad::Var f_aug;  // valid only for interleaved plans
};

inline PlannedRows apply_plan(ad::Var features, const RowPlan& plan) {
    if (!plan.interleave) return {features, features, features};
    ad::Var z_ori = ad::gather_rows(features, plan.ori_rows);
    if (plan.partner == MixSource::None) {
        ad::Var f_aug = ad::gather_rows(features, plan.anchor_rows);
        return {ad::interleave_rows(z_ori, f_aug), z_ori, f_aug};
    }
    ad::Tape& tape = *features.tape();
    ad::Var anchor = ad::scale(ad::gather_rows(features, plan.anchor_rows), plan.delta);
    ad::Var partner = plan.partner == MixSource::Noise ? tape.constant(plan.noise)
                                                       : ad::gather_rows(features, plan.partner_rows);
    ad::Var f_aug = ad::add(anchor, ad::scale(partner, 1.0 - plan.delta));
    return {ad::interleave_rows(z_ori, f_aug), z_ori, f_aug};
}

// ---------------------------------------------------------------------------
// Stochastic views.

// Each row gets a uniformly drawn transform from `views` followed by
// N(0, jitter^2) noise.
inline Tensor perturb_inputs(const Tensor& rows, const TransformSet& views, double jitter, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Tensor out = Tensor::matrix(rows.rows(), rows.cols());
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        views[uniform_index(rng, views.count() + 1)].apply(rows.row(i), out.row(i));
        if (jitter > 0.0)
            for (double& v : out.row(i)) v += jitter * noise(rng);
    }
    return out;
}

struct CombinedFeatureBatch {
    Tensor z_ori;   // [B' x D] row q: feature of row q's untransformed source
    Tensor f_aug;   // [B' x D]
    Tensor f_comb;  // [2B' x D]
    std::vector<int> proxy_labels;
    std::vector<std::size_t> pairing;
    double delta = 0.5;
};

struct ViewSeeds {
    std::uint64_t pairing = 1;
    std::uint64_t view_a = 2;
    std::uint64_t view_b = 3;
    std::uint64_t noise = 4;
};

/// Two views of one batch: F_a from the online encoder on one perturbed copy,
/// F_b from the momentum encoder on an independently perturbed copy. Both
/// share the pairing and the proxy labels.
inline std::pair<CombinedFeatureBatch, CombinedFeatureBatch> make_views(
    const Tensor& batch, std::span<const int> labels, const ModelParams& params, const TransformSet& transforms,
    const TransformSet& views, const AugmentOptions& opt, const ViewSeeds& seeds, double jitter) {
    if (!opt.use_feataug) throw ValueError("make_views: builds combined batches, feature augmentation must be on");
    const ExpandedBatch expanded = expand_batch(batch, labels, transforms);
    const RowPlan plan = plan_rows(expanded, opt, params.spec.feature_dim,
                                   draw_pairing(expanded.labels.size(), seeds.pairing), seeds.noise);
    auto one_view = [&](const Backbone& encoder, std::uint64_t seed) {
        ad::Tape tape;
        const BoundBackbone b = bind(tape, encoder, false);
        ad::Var z = forward_features(b, tape.constant(perturb_inputs(expanded.rows, views, jitter, seed)));
        PlannedRows rows = apply_plan(z, plan);
        return CombinedFeatureBatch{rows.z_ori.value(), rows.f_aug.value(), rows.rows.value(), plan.labels, plan.pairing,
                                    opt.delta};
    };
    return {one_view(params.online, seeds.view_a), one_view(params.momentum, seeds.view_b)};
}

}  // namespace facl
