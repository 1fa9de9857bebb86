#pragma once

// Helpers and independent reference implementations shared by the unit and
// acceptance suites. The oracles deliberately avoid the engine's kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <random>
#include <utility>
#include <vector>

#include "facl/tensor.hpp"

namespace facl::testing {

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = d(rng);
    return t;
}

inline Tensor random_unit_rows(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    Tensor t = random_matrix(r, c, rng);
    for (std::size_t i = 0; i < r; ++i) {
        double n = 0.0;
        for (std::size_t k = 0; k < c; ++k) n += t(i, k) * t(i, k);
        n = std::sqrt(n);
        for (std::size_t k = 0; k < c; ++k) t(i, k) /= n;
    }
    return t;
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(0, classes - 1);
    std::vector<int> out(n);
    for (int& y : out) y = d(rng);
    return out;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// Direct transcription of the per-anchor contrastive loss: for every anchor,
// loop over its positives and, for each, over the whole candidate set.
inline double sscl_oracle(const Tensor& anchors, const std::vector<int>& anchor_labels,
                          const std::vector<std::vector<double>>& candidates, const std::vector<int>& candidate_labels,
                          double tau) {
    double total = 0.0;
    int counted = 0;
    for (std::size_t a = 0; a < anchors.rows(); ++a) {
        auto sim = [&](const std::vector<double>& c) {
            double s = 0.0;
            for (std::size_t k = 0; k < c.size(); ++k) s += anchors(a, k) * c[k];
            return s / tau;
        };
        std::vector<std::size_t> positives;
        for (std::size_t j = 0; j < candidates.size(); ++j)
            if (candidate_labels[j] == anchor_labels[a]) positives.push_back(j);
        if (positives.empty()) continue;
        double per_anchor = 0.0;
        for (std::size_t p : positives) {
            double denom = 0.0;
            for (const auto& c : candidates) denom += std::exp(sim(c));
            per_anchor += -std::log(std::exp(sim(candidates[p])) / denom);
        }
        total += per_anchor / static_cast<double>(positives.size());
        ++counted;
    }
    return counted ? total / counted : 0.0;
}

// Reference FIFO: a deque trimmed from the front.
struct QueueReplay {
    std::size_t capacity;
    std::deque<std::pair<std::vector<double>, int>> items;

    void push(const Tensor& keys, const std::vector<int>& labels) {
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            items.emplace_back(std::vector<double>(keys.row(i).begin(), keys.row(i).end()), labels[i]);
            if (items.size() > capacity) items.pop_front();
        }
    }
};

// Nearest-prototype rule written out longhand: cosine against every slot of
// every class, summed or maxed, strict improvement keeps the earlier class.
inline std::vector<int> ncm_oracle(const std::vector<int>& classes,
                                   const std::vector<std::vector<std::vector<double>>>& slots, const Tensor& queries,
                                   bool use_max) {
    std::vector<int> out;
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        int best = classes.front();
        double best_score = -1e300;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            double score = use_max ? -1e300 : 0.0;
            for (const auto& proto : slots[c]) {
                double dot = 0.0, qq = 0.0, pp = 0.0;
                for (std::size_t k = 0; k < proto.size(); ++k) {
                    dot += queries(i, k) * proto[k];
                    qq += queries(i, k) * queries(i, k);
                    pp += proto[k] * proto[k];
                }
                const double cosv = dot / std::sqrt(qq * pp);
                score = use_max ? std::max(score, cosv) : score + cosv;
            }
            if (score > best_score) best_score = score, best = classes[c];
        }
        out.push_back(best);
    }
    return out;
}

inline std::vector<double> unit_mean_oracle(const std::vector<std::vector<double>>& rows) {
    std::vector<double> m(rows.front().size(), 0.0);
    for (const auto& r : rows)
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += r[k];
    double n = 0.0;
    for (double v : m) n += v * v;
    n = std::sqrt(n);
    for (double& v : m) v /= n;
    return m;
}

}  // namespace facl::testing
