#pragma once

// Dense numeric primitives shared by every differentiable component:
// a row-major matrix, a counter-based RNG, a handful of row-wise kernels and
// the central-difference gradient used as a test oracle.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace dml {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool all_finite() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Counter-based generator (Philox4x32-10). A stream is fully determined by
/// (seed, stream_id); the counter advances by one block per four 32-bit words.
/// Streams are cheap values; derive one per task instead of sharing.
class RngStream {
public:
    using result_type = std::uint64_t;

    RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    /// Child stream keyed by `sub`; independent of the parent's counter.
    RngStream derive(std::uint64_t sub) const;
    RngStream derive(std::string_view label) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n);
    /// Standard normal via Box-Muller (no cached second value).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }
    result_type operator()() { return next_u64(); }

    /// Raw block function, exposed for known-answer tests.
    static std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                                   std::array<std::uint32_t, 2> key);

private:
    void refill();

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> buf_{};
    int buf_pos_ = 4;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::byte> bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);

/// Distances between all row pairs; symmetric with an exact zero diagonal.
Matrix pairwise_euclidean(const Matrix& e);

inline constexpr double kNormalizeEps = 1e-12;

/// Unit-normalizes each row. Rows with norm below kNormalizeEps become e_0.
Matrix l2_normalize_rows(const Matrix& e);

Matrix softmax_rows(const Matrix& z);

using ScalarFn = std::function<double(const Matrix&)>;

/// Central differences, one entry at a time.
Matrix finite_diff_grad(const ScalarFn& f, const Matrix& x, double h);

/// Relative error used by the gradient checks: |a-b| / max(1, |a|, |b|)
/// computed over the whole array as max-norm ratio.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-8);

void set_thread_count(int n);
int thread_count();

/// Runs body(i) for i in [0, n) over the configured worker count. Bodies must
/// write to disjoint state.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace dml
