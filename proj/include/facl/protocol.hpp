#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facl/autodiff.hpp"
#include "facl/data.hpp"
#include "facl/encoder.hpp"
#include "facl/error.hpp"
#include "facl/feataug.hpp"
#include "facl/losses.hpp"
#include "facl/optim.hpp"
#include "facl/rng.hpp"
#include "facl/tensor.hpp"

namespace facl {

// ---------------------------------------------------------------------------
// Ablation variants. Canonical text form: components from {ce, sscl, pc, fa}
// joined by '+', optionally followed by "@<mixture>" (e.g. "ce+sscl+pc+fa@ori+noise").
// "facl" is shorthand for the full method.

struct AblationVariant {
    bool use_sscl = true;
    bool use_proxy = true;
    bool use_feataug = true;
    MixtureMode mixture{};

    void validate() const {
        if (use_feataug && !use_proxy) throw ValueError("ablation variant: fa requires pc");
        if (!use_feataug && !(mixture == MixtureMode{})) {
            throw ValueError("ablation variant: a mixture mode needs feature augmentation");
        }
    }

    int proxy_factor() const { return use_proxy ? kProxyFactor : 1; }

    friend bool operator==(const AblationVariant&, const AblationVariant&) = default;

    static AblationVariant full() { return {}; }
    static AblationVariant ce_only() { return {false, false, false, {}}; }
    static AblationVariant ce_sscl_pc() { return {true, true, false, {}}; }
};

inline std::string to_string(const AblationVariant& v) {
    std::string s = "ce";
    if (v.use_sscl) s += "+sscl";
    if (v.use_proxy) s += "+pc";
    if (v.use_feataug) s += "+fa";
    if (!(v.mixture == MixtureMode{})) s += "@" + to_string(v.mixture);
    return s;
}

inline AblationVariant parse_variant(const std::string& text) {
    std::string flags = text, mix;
    if (const auto at = text.find('@'); at != std::string::npos) {
        flags = text.substr(0, at);
        mix = text.substr(at + 1);
    }
    AblationVariant v{false, false, false, {}};
    if (flags == "facl") {
        v = AblationVariant::full();
    } else {
        bool ce = false;
        std::size_t start = 0;
        while (start <= flags.size()) {
            const auto plus = flags.find('+', start);
            const std::string part = flags.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
            if (part == "ce") {
                ce = true;
            } else if (part == "sscl") {
                v.use_sscl = true;
            } else if (part == "pc") {
                v.use_proxy = true;
            } else if (part == "fa") {
                v.use_feataug = true;
            } else {
                throw ValueError("unknown ablation component \"" + part + "\" in \"" + text + "\"");
            }
            if (plus == std::string::npos) break;
            start = plus + 1;
        }
        if (!ce) throw ValueError("ablation variant \"" + text + "\" must include ce");
    }
    if (!mix.empty()) v.mixture = parse_mixture(mix);
    v.validate();
    return v;
}

// The component grid followed by the mixture variants of the full method.
inline std::vector<AblationVariant> ablation_grid() {
    std::vector<AblationVariant> grid;
    for (const char* s : {"ce", "ce+pc", "ce+sscl", "ce+sscl+pc", "ce+pc+fa", "facl", "facl@aug+noise",
                          "facl@ori+noise", "facl@ori+aug", "facl@ori+ori"})
        grid.push_back(parse_variant(s));
    return grid;
}

enum class Aggregation { Sum, Max };

inline std::string to_string(Aggregation a) { return a == Aggregation::Sum ? "sum" : "max"; }

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "sum") return Aggregation::Sum;
    if (s == "max") return Aggregation::Max;
    throw ValueError("aggregation must be sum or max, got \"" + s + "\"");
}

// Engine settings for one run (dataset shape lives in DatasetSpec).
struct ProtocolConfig {
    std::vector<std::size_t> hidden_dims{64};
    std::size_t feature_dim = 32;
    std::size_t projection_dim = 32;
    std::size_t epochs_base = 20;
    std::size_t epochs_incremental = 10;
    bool finetune_incremental = false;
    std::size_t batch = 64;
    double lr = 0.1;
    double sgd_momentum = 0.9;
    std::size_t transforms = 1;  // M
    double delta = 0.5;
    double tau = 0.07;
    std::size_t queue = 1024;
    double ema = 0.999;
    double noise_scale = 1.0;
    double view_jitter = 0.05;
    double view_strength = 0.2;
    // Channel-major image geometry; all zero means plain vectors.
    std::size_t image_channels = 0, image_height = 0, image_width = 0;
    Aggregation aggregation = Aggregation::Sum;
    AblationVariant variant{};
    std::uint64_t seed = 1;

    void validate() const {
        variant.validate();
        if (feature_dim == 0 || projection_dim == 0) throw ValueError("feature_dim and projection_dim must be positive");
        if (batch < 2) throw ValueError("batch must be at least 2");
        if (!(lr > 0.0)) throw ValueError("lr must be positive");
        if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ValueError("momentum must lie in [0, 1)");
        if (!(delta >= 0.0 && delta <= 1.0)) throw ValueError("delta must lie in [0, 1]");
        if (!(tau > 0.0)) throw ValueError("tau must be positive");
        if (queue == 0) throw ValueError("queue must be positive");
        if (!(ema >= 0.0 && ema <= 1.0)) throw ValueError("ema must lie in [0, 1]");
        if (!(noise_scale >= 0.0) || !(view_jitter >= 0.0)) throw ValueError("noise_scale and view_jitter must be non-negative");
        if (!(view_strength >= 0.0 && view_strength < 1.0)) throw ValueError("view_strength must lie in [0, 1)");
        if (variant.use_proxy && transforms == 0) throw ValueError("proxy classes need at least one transform (M >= 1)");
        const bool any_image = image_channels || image_height || image_width;
        if (any_image && !(image_channels && image_height && image_width)) {
            throw ValueError("image geometry needs channels, height and width together");
        }
    }

    EncoderSpec encoder_spec(std::size_t input_dim) const {
        return EncoderSpec{input_dim, hidden_dims, feature_dim, projection_dim};
    }
};

// Transform sets and augmentation options derived from a config.
struct Pipeline {
    AblationVariant variant;
    TransformSet transforms;  // label-defining set M (identity only without proxy classes)
    TransformSet views;       // stochastic view set A
    AugmentOptions augment;

    int factor() const { return variant.proxy_factor(); }
};

inline Pipeline make_pipeline(const ProtocolConfig& cfg, std::size_t input_dim) {
    cfg.validate();
    Pipeline p;
    p.variant = cfg.variant;
    const std::size_t m = cfg.variant.use_proxy ? cfg.transforms : 0;
    if (cfg.image_channels) {
        if (cfg.image_channels * cfg.image_height * cfg.image_width != input_dim) {
            throw ShapeError("image geometry does not match input_dim " + std::to_string(input_dim));
        }
        p.transforms = TransformSet::image_rotations(cfg.image_channels, cfg.image_height, cfg.image_width, m);
        p.views = TransformSet::image_views(cfg.image_channels, cfg.image_height, cfg.image_width);
    } else {
        p.transforms = TransformSet::signed_permutations(input_dim, m, cfg.seed);
        p.views = TransformSet::vector_views(input_dim, cfg.view_strength, cfg.seed);
    }
    p.augment = AugmentOptions{cfg.variant.use_proxy, cfg.variant.use_feataug, cfg.variant.mixture, cfg.delta,
                               cfg.noise_scale};
    return p;
}

// ---------------------------------------------------------------------------
// Base session

struct StepSeeds {
    std::uint64_t pairing = 0, view_a = 0, view_b = 0, noise = 0;

    static StepSeeds at(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
        return {stream_seed(seed, Stream::Pairing, epoch, batch), stream_seed(seed, Stream::ViewA, epoch, batch),
                stream_seed(seed, Stream::ViewB, epoch, batch), stream_seed(seed, Stream::Noise, epoch, batch)};
    }
};

struct StepLoss {
    ad::Var total;
    ad::Var class_term;
    std::optional<ad::Var> sscl_term;
    Tensor keys;  // key embeddings to enqueue after the step (empty without SSCL)
    std::vector<int> key_labels;
};

/// Joint objective for one batch. `online` and `classifier` are bound by the
/// caller (as trainable leaves during training); the momentum copy in `params`
/// only produces constant keys.
inline StepLoss batch_loss(ad::Tape& tape, const BoundBackbone& online, ad::Var classifier, const ModelParams& params,
                           const Pipeline& pipe, const Tensor& rows, std::span<const int> labels,
                           const FeatureQueue& queue, const StepSeeds& seeds, const ProtocolConfig& cfg) {
    const ExpandedBatch expanded = expand_batch(rows, labels, pipe.transforms);
    const std::size_t n = expanded.labels.size();
    std::vector<std::size_t> pairing;
    if (pipe.augment.use_feataug) pairing = draw_pairing(n, seeds.pairing);
    const RowPlan plan = plan_rows(expanded, pipe.augment, params.spec.feature_dim, pairing, seeds.noise);

    const bool sscl = pipe.variant.use_sscl;
    const Tensor input_a = sscl ? perturb_inputs(expanded.rows, pipe.views, cfg.view_jitter, seeds.view_a) : expanded.rows;
    const PlannedRows a = apply_plan(forward_features(online, tape.constant(input_a)), plan);
    StepLoss out;
    out.class_term = class_loss(forward_classifier(classifier, a.rows), plan.labels);
    out.total = out.class_term;
    if (sscl) {
        ad::Tape key_tape;
        const BoundBackbone key = bind(key_tape, params.momentum, false);
        const Tensor input_b = perturb_inputs(expanded.rows, pipe.views, cfg.view_jitter, seeds.view_b);
        const PlannedRows b = apply_plan(forward_features(key, key_tape.constant(input_b)), plan);
        out.keys = forward_projection(key, b.rows).value();
        out.key_labels = plan.labels;
        const ad::Var anchors = forward_projection(online, a.rows);
        out.sscl_term = sscl_loss(anchors, plan.labels, out.keys, out.key_labels, queue, cfg.tau);
        out.total = joint_loss(out.class_term, *out.sscl_term);
    }
    return out;
}

struct BaseTrainResult {
    ModelParams params;
    FeatureQueue queue;
    std::vector<double> epoch_loss;  // mean batch loss per epoch
};

inline BaseTrainResult train_base(const ProtocolConfig& cfg, const Session& base, const Pipeline& pipe) {
    std::set<int> classes(base.train_labels.begin(), base.train_labels.end());
    if (classes.size() < 2) throw ValueError("train_base: the base session needs at least two classes");
    if (base.classes.empty() || *classes.rbegin() >= static_cast<int>(base.classes.size())) {
        throw ValueError("train_base: base labels must be 0..C_b-1");
    }
    const std::size_t rows = static_cast<std::size_t>(pipe.factor()) * base.classes.size();
    BaseTrainResult r{init_params(cfg.encoder_spec(base.train_rows.cols()), cfg.seed, rows, cfg.ema),
                      FeatureQueue(cfg.queue), {}};
    ModelParams& p = r.params;
    std::vector<Tensor*> trainable = p.trainable();
    std::vector<Tensor> shapes;
    for (const Tensor* t : trainable) shapes.push_back(*t);
    OptimizerState opt = make_sgd_state(shapes, cfg.lr, cfg.sgd_momentum);

    for (std::size_t epoch = 0; epoch < cfg.epochs_base; ++epoch) {
        const auto batches = make_batches(base.train_labels.size(), cfg.batch, stream_seed(cfg.seed, Stream::Batches, epoch));
        double total = 0.0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const Tensor x = kernels::gather_rows(base.train_rows, batches[bi]);
            std::vector<int> y;
            for (std::size_t i : batches[bi]) y.push_back(base.train_labels[i]);

            ad::Tape tape;
            const BoundBackbone online = bind(tape, p.online, true);
            const ad::Var cls = tape.leaf(p.classifier, true);
            StepLoss loss = batch_loss(tape, online, cls, p, pipe, x, y, r.queue, StepSeeds::at(cfg.seed, epoch, bi), cfg);
            tape.backward(loss.total);

            std::vector<Tensor> grads;
            for (const auto& [w, b] : online.layers) {
                grads.push_back(w.grad());
                grads.push_back(b.grad());
            }
            grads.push_back(online.projection.grad());
            grads.push_back(cls.grad());
            sgd_momentum_step(std::span<Tensor* const>(trainable), grads, opt);
            momentum_sync(p);
            if (pipe.variant.use_sscl) r.queue.push(loss.keys, loss.key_labels);
            total += loss.total.value().item();
        }
        r.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Sessions, prototypes and evaluation

struct SessionState {
    std::size_t session = 0;
    int factor = kProxyFactor;
    std::vector<std::vector<int>> session_classes;  // classes registered per session
    std::vector<int> classes;                       // all registered, ascending
    std::map<int, std::vector<std::vector<double>>> prototypes;  // class -> P unit vectors

    bool registered(int y) const { return prototypes.count(y) != 0; }

    // Rejects any class seen in an earlier session.
    void register_session(const std::vector<int>& new_classes) {
        std::set<int> fresh;
        for (int y : new_classes) {
            if (registered(y) || !fresh.insert(y).second) {
                throw ValueError("class " + std::to_string(y) + " is already registered; sessions must be disjoint");
            }
        }
        session_classes.push_back(new_classes);
        for (int y : new_classes) {
            prototypes[y];
            classes.insert(std::upper_bound(classes.begin(), classes.end(), y), y);
        }
    }

    // Prototype for proxy label y_p.
    const std::vector<double>& prototype(int yp) const {
        const auto [y, p] = proxy_decode(yp, factor);
        const auto it = prototypes.find(y);
        if (it == prototypes.end() || it->second.size() != static_cast<std::size_t>(factor)) {
            throw ValueError("no prototype for proxy label " + std::to_string(yp));
        }
        return it->second[static_cast<std::size_t>(p)];
    }
};

namespace detail {
inline std::vector<double> unit_mean(const Tensor& rows, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ValueError("prototype of an empty sample set");
    std::vector<double> m(rows.cols(), 0.0);
    for (std::size_t i : idx)
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += rows(i, k);
    for (double& v : m) v /= static_cast<double>(idx.size());
    const double n = kernels::norm(m);
    if (!(n > 0.0)) throw NumericError("prototype has zero norm");
    for (double& v : m) v /= n;
    return m;
}
}  // namespace detail

/// Registers the session's classes and stores P unit prototypes per class:
/// slot 0 is the mean feature of the class's original samples; slot 1 is the
/// mean of F_aug over the class's expanded rows (delta-mixed within the class
/// when feature augmentation is on, unmixed with proxy classes only).
inline void build_prototypes(SessionState& state, const ModelParams& params, const Pipeline& pipe, const Tensor& rows,
                             std::span<const int> labels, const std::vector<int>& classes, std::uint64_t seed) {
    if (state.factor != pipe.factor()) throw ValueError("build_prototypes: proxy factor differs from session state");
    std::set<int> wanted(classes.begin(), classes.end());
    for (int y : labels)
        if (!wanted.count(y)) throw ValueError("build_prototypes: sample label " + std::to_string(y) + " is not a session class");
    for (int y : classes)
        if (std::find(labels.begin(), labels.end(), y) == labels.end()) {
            throw ValueError("build_prototypes: class " + std::to_string(y) + " has no samples");
        }
    state.register_session(classes);

    const ExpandedBatch expanded = expand_batch(rows, labels, pipe.transforms);
    std::vector<std::size_t> pairing;
    if (pipe.augment.use_feataug) pairing = draw_pairing_within(expanded.labels, stream_seed(seed, Stream::Pairing));
    const RowPlan plan =
        plan_rows(expanded, pipe.augment, params.spec.feature_dim, pairing, stream_seed(seed, Stream::Noise));

    ad::Tape tape;
    const BoundBackbone online = bind(tape, params.online, false);
    const ad::Var z = forward_features(online, tape.constant(expanded.rows));
    const PlannedRows planned = apply_plan(z, plan);
    const Tensor& feats = z.value();
    const Tensor& mixed = planned.f_aug.value();

    for (int y : classes) {
        std::vector<std::size_t> originals, expanded_rows;
        for (std::size_t i = 0; i < expanded.labels.size(); ++i) {
            if (expanded.labels[i] != y) continue;
            if (expanded.block[i] == 0) originals.push_back(i);
            expanded_rows.push_back(i);
        }
        auto& slots = state.prototypes[y];
        slots.clear();
        slots.push_back(detail::unit_mean(feats, originals));
        if (state.factor > 1) slots.push_back(detail::unit_mean(mixed, expanded_rows));
    }
}

/// score(y) = sum (or max) over slots p of cos(q, c_{y,p}); argmax with ties
/// going to the smallest class id.
inline std::vector<int> ncm_integrated_predict(const SessionState& state, const Tensor& queries,
                                               Aggregation agg = Aggregation::Sum) {
    if (state.classes.empty()) throw ValueError("ncm_integrated_predict: no prototypes registered");
    std::vector<int> out(queries.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        const auto q = queries.row(i);
        const double qn = kernels::norm(q);
        int best = state.classes.front();
        double best_score = -std::numeric_limits<double>::infinity();
        for (int y : state.classes) {
            const auto& slots = state.prototypes.at(y);
            double score = agg == Aggregation::Sum ? 0.0 : -std::numeric_limits<double>::infinity();
            for (const auto& c : slots) {
                const double cs = qn > 0.0 ? kernels::dot(q, c) / qn : 0.0;
                score = agg == Aggregation::Sum ? score + cs : std::max(score, cs);
            }
            if (score > best_score) {
                best_score = score;
                best = y;
            }
        }
        out[i] = best;
    }
    return out;
}

struct EvalResult {
    double accuracy = 0.0;  // percent
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<int> labels;                        // registered classes, ascending
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted], indexed like `labels`
};

inline EvalResult evaluate_session(const SessionState& state, const ModelParams& params, const Tensor& test_rows,
                                   std::span<const int> test_labels, Aggregation agg = Aggregation::Sum) {
    if (test_rows.rows() != test_labels.size()) throw ShapeError("evaluate_session: one label per test row required");
    if (test_labels.empty()) throw ValueError("evaluate_session: empty test set");
    for (int y : test_labels)
        if (!state.registered(y)) throw ValueError("evaluate_session: test label " + std::to_string(y) + " is not registered");
    const std::vector<int> pred = ncm_integrated_predict(state, forward_features(params, test_rows), agg);
    EvalResult r;
    r.labels = state.classes;
    std::map<int, std::size_t> index;
    for (std::size_t k = 0; k < r.labels.size(); ++k) index[r.labels[k]] = k;
    r.confusion.assign(r.labels.size(), std::vector<std::size_t>(r.labels.size(), 0));
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ++r.confusion[index.at(test_labels[i])][index.at(pred[i])];
        r.correct += pred[i] == test_labels[i];
    }
    r.total = pred.size();
    r.accuracy = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.total);
    return r;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
    std::vector<double> accuracies;
    double average_acc = 0.0;
    double pd = 0.0;
    std::optional<double> delta_fi;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport compute_metrics(const std::vector<double>& acc, std::optional<double> baseline_final = std::nullopt) {
    if (acc.empty()) throw ValueError("compute_metrics: at least one session accuracy required");
    MetricsReport m;
    m.accuracies = acc;
    double s = 0.0;
    for (double a : acc) {
        if (!(a >= 0.0 && a <= 100.0)) throw ValueError("compute_metrics: accuracy outside [0, 100]");
        s += a;
    }
    m.average_acc = s / static_cast<double>(acc.size());
    m.pd = acc.front() - acc.back();
    if (baseline_final) m.delta_fi = acc.back() - *baseline_final;
    return m;
}

inline MetricsReport compute_metrics(const std::vector<double>& acc, const std::vector<double>& baseline) {
    if (baseline.empty()) return compute_metrics(acc);
    return compute_metrics(acc, std::optional<double>(baseline.back()));
}

// ---------------------------------------------------------------------------
// Full run

// Extractor, projection, momentum copy and the first `rows` classifier rows.
inline std::uint64_t frozen_checksum(const ModelParams& p, std::size_t rows) {
    std::vector<const Tensor*> parts = p.online.tensors();
    const auto mom = p.momentum.tensors();
    parts.insert(parts.end(), mom.begin(), mom.end());
    const std::size_t d = p.spec.feature_dim;
    const Tensor head(Shape{rows, d}, std::vector<double>(p.classifier.data().begin(),
                                                          p.classifier.data().begin() + static_cast<std::ptrdiff_t>(rows * d)));
    parts.push_back(&head);
    return checksum(parts);
}

namespace detail {

// Classifier rows for newly registered classes, initialised to their prototypes
// and optionally tuned on the session's shots with the backbone frozen.
inline void extend_classifier(ModelParams& p, const SessionState& state, const std::vector<int>& classes,
                              const Pipeline& pipe, const Session& session, const ProtocolConfig& cfg) {
    const std::size_t d = p.spec.feature_dim, old_rows = p.classifier_rows();
    const auto factor = static_cast<std::size_t>(state.factor);
    std::size_t max_class = 0;
    for (int y : state.classes) max_class = std::max<std::size_t>(max_class, static_cast<std::size_t>(y));
    const std::size_t rows = factor * (max_class + 1);
    Tensor grown = Tensor::matrix(rows, d);
    std::copy_n(p.classifier.data().begin(), old_rows * d, grown.data().begin());
    for (int y : classes)
        for (std::size_t s = 0; s < factor; ++s) {
            const auto& c = state.prototypes.at(y)[s];
            std::copy(c.begin(), c.end(), grown.row(static_cast<std::size_t>(y) * factor + s).begin());
        }
    p.classifier = std::move(grown);
    if (!cfg.finetune_incremental || cfg.epochs_incremental == 0) return;

    // Features are frozen, so they are computed once.
    const ExpandedBatch expanded = expand_batch(session.train_rows, session.train_labels, pipe.transforms);
    std::vector<std::size_t> pairing;
    if (pipe.augment.use_feataug) {
        pairing = draw_pairing_within(expanded.labels, stream_seed(cfg.seed, Stream::Finetune, session.index));
    }
    const RowPlan plan = plan_rows(expanded, pipe.augment, d, pairing, stream_seed(cfg.seed, Stream::Noise, session.index));
    ad::Tape ft;
    const Tensor feats = apply_plan(forward_features(bind(ft, p.online, false), ft.constant(expanded.rows)), plan).rows.value();
    const Tensor frozen(Shape{old_rows, d}, std::vector<double>(p.classifier.data().begin(),
                                                                 p.classifier.data().begin() + static_cast<std::ptrdiff_t>(old_rows * d)));
    Tensor fresh(Shape{rows - old_rows, d}, std::vector<double>(p.classifier.data().begin() + static_cast<std::ptrdiff_t>(old_rows * d),
                                                                 p.classifier.data().end()));
    std::vector<Tensor> one{fresh};
    OptimizerState opt = make_sgd_state(one, cfg.lr, cfg.sgd_momentum);
    for (std::size_t e = 0; e < cfg.epochs_incremental; ++e) {
        if (plan.labels.size() < 2) break;
        for (const auto& b : make_batches(plan.labels.size(), cfg.batch, stream_seed(cfg.seed, Stream::Finetune, session.index, e + 1))) {
            std::vector<int> y;
            for (std::size_t i : b) y.push_back(plan.labels[i]);
            ad::Tape tape;
            const ad::Var w_new = tape.leaf(fresh, true);
            const ad::Var w = ad::concat_rows(tape.constant(frozen), w_new);
            const ad::Var loss = class_loss(forward_classifier(w, tape.constant(kernels::gather_rows(feats, b))), y);
            tape.backward(loss);
            std::vector<Tensor> g{w_new.grad()};
            Tensor* target = &fresh;
            sgd_momentum_step(std::span<Tensor* const>(&target, 1), g, opt);
        }
    }
    std::copy(fresh.data().begin(), fresh.data().end(), p.classifier.data().begin() + static_cast<std::ptrdiff_t>(old_rows * d));
}

}  // namespace detail

struct RunResult {
    MetricsReport metrics;
    std::vector<double> epoch_loss;
    ModelParams params;
    SessionState state;
    EvalResult final_eval;
    std::vector<std::uint64_t> frozen_before, frozen_after;  // per incremental session
    std::vector<std::size_t> classifier_rows;                // after each session

    bool frozen_ok() const { return frozen_before == frozen_after; }
};

/// Base training, then per session: register classes, build prototypes,
/// extend the classifier, and evaluate on the test pools of sessions 0..s.
inline RunResult run_protocol(const std::vector<Session>& sessions, const ProtocolConfig& cfg,
                              std::optional<double> baseline_final = std::nullopt) {
    if (sessions.empty()) throw ValueError("run_protocol: no sessions");
    const Pipeline pipe = make_pipeline(cfg, sessions.front().train_rows.cols());
    BaseTrainResult base = train_base(cfg, sessions.front(), pipe);
    RunResult r;
    r.epoch_loss = std::move(base.epoch_loss);
    r.params = std::move(base.params);
    r.state.factor = pipe.factor();

    Tensor test_rows = Tensor::matrix(0, sessions.front().test_rows.cols());
    std::vector<int> test_labels;
    std::vector<double> acc;
    for (const Session& s : sessions) {
        const std::size_t old_rows = r.params.classifier_rows();
        if (s.index > 0) r.frozen_before.push_back(frozen_checksum(r.params, old_rows));
        build_prototypes(r.state, r.params, pipe, s.train_rows, s.train_labels, s.classes,
                         stream_seed(cfg.seed, Stream::Prototypes, s.index));
        if (s.index > 0) {
            detail::extend_classifier(r.params, r.state, s.classes, pipe, s, cfg);
            r.frozen_after.push_back(frozen_checksum(r.params, old_rows));
        }
        const std::size_t expected = static_cast<std::size_t>(r.state.factor) * r.state.classes.size();
        if (r.params.classifier_rows() != expected) {
            throw Error("classifier width " + std::to_string(r.params.classifier_rows()) + " differs from P x classes = " +
                        std::to_string(expected));
        }
        r.classifier_rows.push_back(r.params.classifier_rows());
        test_rows = kernels::concat_rows(test_rows, s.test_rows);
        test_labels.insert(test_labels.end(), s.test_labels.begin(), s.test_labels.end());
        r.final_eval = evaluate_session(r.state, r.params, test_rows, test_labels, cfg.aggregation);
        acc.push_back(r.final_eval.accuracy);
    }
    r.state.session = sessions.size() - 1;
    r.metrics = compute_metrics(acc, baseline_final);
    return r;
}

struct AblationRow {
    AblationVariant variant;
    MetricsReport metrics;
    RunResult run;
};

/// Runs `variants` in order; ΔFI is taken against the CE-only run, which is
/// executed first when the list does not contain it.
inline std::vector<AblationRow> run_ablation(const std::vector<Session>& sessions, ProtocolConfig cfg,
                                             const std::vector<AblationVariant>& variants) {
    const auto ce = AblationVariant::ce_only();
    cfg.variant = ce;
    const RunResult baseline = run_protocol(sessions, cfg);
    const double base_final = baseline.metrics.accuracies.back();
    std::vector<AblationRow> rows;
    for (const AblationVariant& v : variants) {
        if (v == ce) {
            rows.push_back({v, baseline.metrics, baseline});
            continue;
        }
        cfg.variant = v;
        RunResult run = run_protocol(sessions, cfg, base_final);
        rows.push_back({v, run.metrics, std::move(run)});
    }
    return rows;
}

struct SweepRow {
    double delta = 0.0;
    std::vector<double> final_acc;  // one per seed
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation (0 for a single seed)
};

/// One full run per (delta, seed). `make_sessions` rebuilds the stream for a
/// seed so data, split and training all follow it; `on_run(delta, seed, run)`
/// sees every finished run.
template <class MakeSessions, class OnRun>
std::vector<SweepRow> sweep_delta(const std::vector<double>& deltas, const std::vector<std::uint64_t>& seeds,
                                  ProtocolConfig cfg, MakeSessions&& make_sessions, OnRun&& on_run) {
    if (seeds.empty()) throw ValueError("sweep_delta: at least one seed required");
    for (double d : deltas)
        if (!(d >= 0.0 && d <= 1.0)) throw ValueError("sweep_delta: delta " + std::to_string(d) + " outside [0, 1]");
    std::vector<SweepRow> rows;
    for (double d : deltas) rows.push_back({d, {}, 0.0, 0.0});
    for (std::uint64_t seed : seeds) {
        const std::vector<Session> sessions = make_sessions(seed);
        for (SweepRow& row : rows) {
            cfg.delta = row.delta;
            cfg.seed = seed;
            const RunResult run = run_protocol(sessions, cfg);
            row.final_acc.push_back(run.metrics.accuracies.back());
            on_run(row.delta, seed, run);
        }
    }
    for (SweepRow& row : rows) {
        const double n = static_cast<double>(row.final_acc.size());
        for (double a : row.final_acc) row.mean += a / n;
        if (row.final_acc.size() > 1) {
            double ss = 0.0;
            for (double a : row.final_acc) ss += (a - row.mean) * (a - row.mean);
            row.sd = std::sqrt(ss / (n - 1.0));
        }
    }
    return rows;
}

template <class MakeSessions>
std::vector<SweepRow> sweep_delta(const std::vector<double>& deltas, const std::vector<std::uint64_t>& seeds,
                                  const ProtocolConfig& cfg, MakeSessions&& make_sessions) {
    return sweep_delta(deltas, seeds, cfg, std::forward<MakeSessions>(make_sessions),
                       [](double, std::uint64_t, const RunResult&) {});
}

}  // namespace facl
