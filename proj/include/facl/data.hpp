#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "facl/encoder.hpp"
#include "facl/error.hpp"
#include "facl/rng.hpp"
#include "facl/tensor.hpp"

namespace facl {

// Class counts and sampling sizes of an FSCIL stream.
struct DatasetSpec {
    std::size_t base_classes = 10;
    std::size_t inc_classes = 6;
    std::size_t sessions = 3;
    std::size_t ways = 2;
    std::size_t shots = 5;
    std::size_t input_dim = 32;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 50;
    double noise_sd = 1.0;

    std::size_t total_classes() const { return base_classes + inc_classes; }

    void validate() const {
        if (base_classes == 0 || inc_classes == 0 || sessions == 0 || ways == 0 || shots == 0 || input_dim == 0 ||
            train_per_class == 0 || test_per_class == 0) {
            throw ValueError("dataset spec: all counts must be positive");
        }
        if (ways * sessions != inc_classes) {
            throw ValueError("dataset spec: ways x sessions (" + std::to_string(ways * sessions) +
                             ") must equal the incremental class count (" + std::to_string(inc_classes) + ")");
        }
        if (!(noise_sd >= 0.0)) throw ValueError("dataset spec: noise_sd must be non-negative");
    }

    // Session that introduces `label`.
    std::size_t session_of(int label) const {
        const auto y = static_cast<std::size_t>(label);
        return y < base_classes ? 0 : 1 + (y - base_classes) / ways;
    }

    // Benchmark schemas (class counts only; sample sizes stay desk-scale).
    static DatasetSpec cifar100() { return schema(60, 40, 8, 5, 5); }
    static DatasetSpec mini_imagenet() { return schema(60, 40, 8, 5, 5); }
    static DatasetSpec cub200() { return schema(100, 100, 10, 10, 5); }

private:
    static DatasetSpec schema(std::size_t cb, std::size_t ci, std::size_t s, std::size_t w, std::size_t k) {
        DatasetSpec d;
        d.base_classes = cb;
        d.inc_classes = ci;
        d.sessions = s;
        d.ways = w;
        d.shots = k;
        d.train_per_class = k;
        d.test_per_class = 2;
        return d;
    }
};

enum Split : std::uint8_t { kTrain = 0, kTest = 1 };

struct SampleStore {
    Tensor rows;  // [N x input_dim]
    std::vector<int> labels;
    std::vector<std::uint8_t> split;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t input_dim() const { return rows.cols(); }

    void validate() const {
        if (rows.rank() != 2 || rows.rows() != labels.size() || labels.size() != split.size()) {
            throw ShapeError("sample store: rows, labels and split flags disagree in length");
        }
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ValueError("sample store: label out of range");
        for (std::uint8_t s : split)
            if (s > kTest) throw ValueError("sample store: split flag must be 0 (train) or 1 (test)");
    }

    friend bool operator==(const SampleStore&, const SampleStore&) = default;
};

/// Isotropic Gaussian cloud per class around a seeded random unit direction
/// scaled by `separation`. Rows are grouped by class, train before test.
inline SampleStore gen_synthetic(const DatasetSpec& spec, std::uint64_t seed, double separation) {
    spec.validate();
    if (!(separation >= 0.0)) throw ValueError("gen_synthetic: separation must be non-negative");
    Rng rng(stream_seed(seed, Stream::Data));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t classes = spec.total_classes(), d = spec.input_dim;
    const std::size_t per_class = spec.train_per_class + spec.test_per_class;
    SampleStore store;
    store.num_classes = classes;
    store.rows = Tensor::matrix(classes * per_class, d);
    std::vector<double> mean(d);
    std::size_t r = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (double& m : mean) m = gauss(rng);
        const double nrm = std::sqrt(std::inner_product(mean.begin(), mean.end(), mean.begin(), 0.0));
        for (double& m : mean) m = nrm > 0.0 ? separation * m / nrm : 0.0;
        for (std::size_t i = 0; i < per_class; ++i, ++r) {
            auto row = store.rows.row(r);
            for (std::size_t k = 0; k < d; ++k) row[k] = mean[k] + spec.noise_sd * gauss(rng);
            store.labels.push_back(static_cast<int>(c));
            store.split.push_back(i < spec.train_per_class ? kTrain : kTest);
        }
    }
    return store;
}

// ---------------------------------------------------------------------------
// FACLDS1: magic, u64 row count, u64 input_dim, u64 class count, then the
// rows as f64, then u32 labels, then u8 split flags. Little-endian throughout.

inline void save_store(const SampleStore& s, std::ostream& out) {
    s.validate();
    out.write("FACLDS1", 7);
    detail::put_u64(out, s.size());
    detail::put_u64(out, s.input_dim());
    detail::put_u64(out, s.num_classes);
    detail::put_tensor(out, s.rows);
    for (int y : s.labels) {
        const auto v = static_cast<std::uint32_t>(y);
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
        out.write(b, 4);
    }
    for (std::uint8_t f : s.split) out.put(static_cast<char>(f));
}

inline void save_store(const SampleStore& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    save_store(s, out);
}

inline SampleStore parse_store(std::string bytes) {
    detail::ByteReader in(std::move(bytes));
    in.expect_magic("FACLDS1");
    SampleStore s;
    const std::uint64_t n = in.u64();
    const std::uint64_t d = in.u64();
    s.num_classes = in.u64();
    if (d == 0) throw FormatError("input_dim must be positive", in.offset() - 16);
    s.rows = detail::get_tensor(in, {n, d});
    s.labels.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::size_t at = in.offset();
        const std::uint32_t y = in.u32();
        if (y >= s.num_classes) throw FormatError("label " + std::to_string(y) + " out of range", at);
        s.labels.push_back(static_cast<int>(y));
    }
    s.split.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::size_t at = in.offset();
        const std::uint8_t f = in.u8();
        if (f > kTest) throw FormatError("split flag must be 0 or 1", at);
        s.split.push_back(f);
    }
    if (in.remaining() != 0) throw FormatError("trailing bytes after sample store", in.offset());
    if (!s.rows.all_finite()) throw FormatError("non-finite feature value", 7 + 24);
    return s;
}

// CSV variant: one sample per line, "label,split,v0,...,v{d-1}". Split is
// 0/1 or train/test. An optional header line starting with "label" is skipped.
inline SampleStore parse_store_csv(const std::string& text) {
    SampleStore s;
    std::vector<double> values;
    std::size_t width = 0, line_no = 0, offset = 0;
    int max_label = -1;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        const std::size_t line_offset = offset;
        offset += line.size() + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("label", 0) == 0) continue;
        std::vector<std::string_view> cells;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            cells.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (cells.size() < 3) throw FormatError("csv line " + std::to_string(line_no) + " has no feature columns", line_offset);
        if (width == 0) width = cells.size() - 2;
        if (cells.size() - 2 != width) throw FormatError("csv line " + std::to_string(line_no) + " has a ragged row", line_offset);
        int y = 0;
        auto [p, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), y);
        if (ec != std::errc{} || p != cells[0].data() + cells[0].size() || y < 0) {
            throw FormatError("csv line " + std::to_string(line_no) + ": bad label", line_offset);
        }
        std::uint8_t flag;
        if (cells[1] == "0" || cells[1] == "train") {
            flag = kTrain;
        } else if (cells[1] == "1" || cells[1] == "test") {
            flag = kTest;
        } else {
            throw FormatError("csv line " + std::to_string(line_no) + ": bad split flag", line_offset);
        }
        for (std::size_t k = 2; k < cells.size(); ++k) {
            double v = 0.0;
            auto [q, ec2] = std::from_chars(cells[k].data(), cells[k].data() + cells[k].size(), v);
            if (ec2 != std::errc{} || q != cells[k].data() + cells[k].size() || !std::isfinite(v)) {
                throw FormatError("csv line " + std::to_string(line_no) + ": bad value in column " + std::to_string(k),
                                  line_offset);
            }
            values.push_back(v);
        }
        s.labels.push_back(y);
        s.split.push_back(flag);
        max_label = std::max(max_label, y);
    }
    s.num_classes = static_cast<std::size_t>(max_label + 1);
    s.rows = Tensor(Shape{s.labels.size(), width}, std::move(values));
    return s;
}

/// Reads FACLDS1, or the CSV variant when the file does not carry the magic
/// and its name ends in ".csv".
inline SampleStore load_store(const std::string& path) {
    std::string bytes = detail::read_file(path);
    const bool is_csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
    if (is_csv && bytes.rfind("FACLDS1", 0) != 0) return parse_store_csv(bytes);
    return parse_store(std::move(bytes));
}

// ---------------------------------------------------------------------------
// Sessions

struct Session {
    std::size_t index = 0;
    std::vector<int> classes;
    Tensor train_rows;
    std::vector<int> train_labels;
    Tensor test_rows;  // test samples of this session's own classes
    std::vector<int> test_labels;
};

/// Session 0 holds every training sample of the first `base_classes` labels;
/// session s >= 1 introduces the next `ways` labels with `shots` samples each,
/// picked by a seeded class-local shuffle.
inline std::vector<Session> split_sessions(const SampleStore& store, const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    store.validate();
    if (store.num_classes < spec.total_classes()) {
        throw ValueError("split_sessions: store holds " + std::to_string(store.num_classes) + " classes, spec needs " +
                         std::to_string(spec.total_classes()));
    }
    if (store.input_dim() != spec.input_dim) throw ShapeError("split_sessions: store width differs from spec input_dim");
    const std::size_t classes = spec.total_classes();
    std::vector<std::vector<std::size_t>> train_of(classes), test_of(classes);
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto y = static_cast<std::size_t>(store.labels[i]);
        if (y >= classes) continue;
        (store.split[i] == kTrain ? train_of : test_of)[y].push_back(i);
    }
    for (std::size_t y = 0; y < classes; ++y) {
        if (test_of[y].empty()) throw ValueError("split_sessions: class " + std::to_string(y) + " has no test samples");
    }

    auto gather = [&](const std::vector<std::size_t>& idx, Tensor& rows, std::vector<int>& labels) {
        rows = kernels::gather_rows(store.rows, idx);
        labels.clear();
        for (std::size_t i : idx) labels.push_back(store.labels[i]);
    };

    std::vector<Session> sessions(spec.sessions + 1);
    for (std::size_t s = 0; s <= spec.sessions; ++s) {
        Session& sess = sessions[s];
        sess.index = s;
        const std::size_t first = s == 0 ? 0 : spec.base_classes + (s - 1) * spec.ways;
        const std::size_t count = s == 0 ? spec.base_classes : spec.ways;
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t y = first; y < first + count; ++y) {
            sess.classes.push_back(static_cast<int>(y));
            if (s == 0) {
                if (train_of[y].empty()) throw ValueError("split_sessions: base class " + std::to_string(y) + " has no training samples");
                train_idx.insert(train_idx.end(), train_of[y].begin(), train_of[y].end());
            } else {
                if (train_of[y].size() < spec.shots) {
                    throw ValueError("split_sessions: class " + std::to_string(y) + " has " +
                                     std::to_string(train_of[y].size()) + " training samples, needs " +
                                     std::to_string(spec.shots) + " shots");
                }
                std::vector<std::size_t> pool = train_of[y];
                Rng rng(stream_seed(seed, Stream::FewShot, y));
                for (std::size_t k = pool.size(); k > 1; --k) std::swap(pool[k - 1], pool[uniform_index(rng, k)]);
                train_idx.insert(train_idx.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.shots));
            }
            test_idx.insert(test_idx.end(), test_of[y].begin(), test_of[y].end());
        }
        if (s == 0) std::sort(train_idx.begin(), train_idx.end());
        gather(train_idx, sess.train_rows, sess.train_labels);
        gather(test_idx, sess.test_rows, sess.test_labels);
    }
    return sessions;
}

/// Seeded shuffle cut into batches of `batch` indices. A trailing batch of
/// fewer than two samples is merged into the one before it.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, std::uint64_t seed) {
    if (batch < 2) throw ValueError("make_batches: batch size must be at least 2");
    if (n < 2) throw ValueError("make_batches: a session needs at least 2 samples");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(n, start + batch);
        if (end - start < 2 && !out.empty()) {
            out.back().insert(out.back().end(), order.begin() + static_cast<std::ptrdiff_t>(start), order.end());
            break;
        }
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

}  // namespace facl
