#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "facl/autodiff.hpp"
#include "facl/error.hpp"
#include "facl/tensor.hpp"

namespace facl {

inline constexpr double kUnitNormTolerance = 1e-9;

namespace detail {
inline void require_unit_rows(const Tensor& t, const char* op) {
    for (std::size_t i = 0; i < t.rows(); ++i) {
        if (std::abs(kernels::norm(t.row(i)) - 1.0) > kUnitNormTolerance) {
            throw ValueError(std::string(op) + ": row " + std::to_string(i) + " is not unit-norm");
        }
    }
}
}  // namespace detail

/// Fixed-capacity FIFO of unit-norm key embeddings with their proxy labels.
/// Once full, each push evicts the oldest entries.
class FeatureQueue {
public:
    explicit FeatureQueue(std::size_t capacity = 1024) : capacity_(capacity) {
        if (capacity == 0) throw ValueError("FeatureQueue: capacity must be positive");
    }

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return size_; }
    std::size_t width() const noexcept { return width_; }
    bool empty() const noexcept { return size_ == 0; }

    void push(const Tensor& keys, std::span<const int> labels) {
        if (keys.rank() != 2 || keys.rows() != labels.size()) throw ShapeError("queue_push: one label per key required");
        if (keys.rows() == 0) return;
        if (width_ == 0) {
            width_ = keys.cols();
            store_ = Tensor::matrix(capacity_, width_);
            labels_.assign(capacity_, 0);
        } else if (keys.cols() != width_) {
            throw ShapeError("queue_push: key width " + std::to_string(keys.cols()) + " differs from queue width " +
                             std::to_string(width_));
        }
        detail::require_unit_rows(keys, "queue_push");
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            const std::size_t slot = (head_ + size_) % capacity_;
            std::copy_n(keys.row(i).begin(), width_, store_.row(slot).begin());
            labels_[slot] = labels[i];
            if (size_ < capacity_) {
                ++size_;
            } else {
                head_ = (head_ + 1) % capacity_;
            }
        }
    }

    // Oldest first.
    Tensor embeddings() const {
        Tensor out = Tensor::matrix(size_, width_);
        for (std::size_t i = 0; i < size_; ++i)
            std::copy_n(store_.row((head_ + i) % capacity_).begin(), width_, out.row(i).begin());
        return out;
    }

    std::vector<int> labels() const {
        std::vector<int> out(size_);
        for (std::size_t i = 0; i < size_; ++i) out[i] = labels_[(head_ + i) % capacity_];
        return out;
    }

private:
    std::size_t capacity_;
    std::size_t width_ = 0;
    std::size_t head_ = 0;
    std::size_t size_ = 0;
    Tensor store_;
    std::vector<int> labels_;
};

inline void queue_push(FeatureQueue& queue, const Tensor& keys, std::span<const int> labels) {
    queue.push(keys, labels);
}

/// Supervised contrastive loss against a candidate set of keys and queue
/// entries. For anchor a with positives S (candidates sharing its label):
///
///   l_a = -(1/|S|) sum_{k in S} log( exp(z_a.z_k / tau) / sum_{k'} exp(z_a.z_k' / tau) )
///
/// averaged over anchors with |S| > 0; anchors without a positive contribute
/// nothing. Gradients reach the anchors only.
inline ad::Var sscl_loss(ad::Var anchors, std::span<const int> anchor_labels, const Tensor& keys,
                         std::span<const int> key_labels, const FeatureQueue& queue, double tau) {
    if (!(tau > 0.0)) throw ValueError("sscl_loss: temperature must be positive");
    const Tensor& a = anchors.value();
    if (a.rank() != 2 || a.rows() != anchor_labels.size()) throw ShapeError("sscl_loss: one label per anchor required");
    if (keys.rank() != 2 || keys.rows() != key_labels.size()) throw ShapeError("sscl_loss: one label per key required");
    if (keys.cols() != a.cols()) throw ShapeError("sscl_loss: key width differs from anchor width");

    Tensor cand = keys;
    std::vector<int> cand_labels(key_labels.begin(), key_labels.end());
    if (!queue.empty()) {
        if (queue.width() != a.cols()) throw ShapeError("sscl_loss: queue width differs from anchor width");
        cand = kernels::concat_rows(keys, queue.embeddings());
        const auto ql = queue.labels();
        cand_labels.insert(cand_labels.end(), ql.begin(), ql.end());
    }
    detail::require_unit_rows(a, "sscl_loss anchors");
    detail::require_unit_rows(cand, "sscl_loss candidates");

    const std::size_t n = a.rows(), k = cand.rows();
    const Tensor sims = kernels::matmul_nt(a, cand);
    Tensor coef = Tensor::matrix(n, k);  // d(sum of per-anchor losses)/d(logit), before 1/(tau * n_valid)
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t npos = 0;
        for (std::size_t j = 0; j < k; ++j) npos += cand_labels[j] == anchor_labels[i];
        if (npos == 0) continue;
        ++valid;
        auto s = sims.row(i);
        auto c = coef.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : s) mx = std::max(mx, v / tau);
        double se = 0.0;
        for (std::size_t j = 0; j < k; ++j) se += c[j] = std::exp(s[j] / tau - mx);
        const double lse = mx + std::log(se);
        double pos = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            c[j] /= se;
            if (cand_labels[j] == anchor_labels[i]) {
                pos += s[j] / tau;
                c[j] -= 1.0 / static_cast<double>(npos);
            }
        }
        total += lse - pos / static_cast<double>(npos);
    }
    const double loss = valid ? total / static_cast<double>(valid) : 0.0;
    const double factor = valid ? 1.0 / (tau * static_cast<double>(valid)) : 0.0;
    for (double& v : coef.data()) v *= factor;

    const std::size_t ia = anchors.id();
    return anchors.tape()->record(
        Tensor::scalar(loss), {anchors},
        [ia, coef = std::move(coef), cand = std::move(cand)](ad::Tape& t, std::size_t self) {
            Tensor g = kernels::matmul(coef, cand);
            const double up = t.output_grad(self)[0];
            for (double& v : g.data()) v *= up;
            t.accumulate(ia, g);
        },
        "sscl_loss");
}

inline double sscl_loss(const Tensor& anchors, std::span<const int> anchor_labels, const Tensor& keys,
                        std::span<const int> key_labels, const FeatureQueue& queue, double tau) {
    ad::Tape tape;
    return sscl_loss(tape.constant(anchors), anchor_labels, keys, key_labels, queue, tau).value().item();
}

/// Mean cross-entropy over every row of F_a against its proxy label; each
/// sample contributes its P rows, so the row mean carries the 1/P average.
inline ad::Var class_loss(ad::Var logits, std::span<const int> proxy_labels) {
    return ad::softmax_cross_entropy(logits, proxy_labels);
}

inline ad::Var joint_loss(ad::Var class_term, ad::Var sscont_term) {
    if (!class_term.value().all_finite() || !sscont_term.value().all_finite()) {
        throw NumericError("joint_loss: non-finite term");
    }
    if (class_term.value().size() != 1 || sscont_term.value().size() != 1) throw ShapeError("joint_loss: scalar terms required");
    return ad::add(class_term, sscont_term);
}

inline double joint_loss(double class_term, double sscont_term) {
    if (!std::isfinite(class_term) || !std::isfinite(sscont_term)) throw NumericError("joint_loss: non-finite term");
    return class_term + sscont_term;
}

}  // namespace facl
