#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mic/error.hpp"

namespace mic {

using Vec = std::vector<double>;
using Rng = std::mt19937_64;

// Dense row-major matrix. Rows are exposed as spans so kernels never copy.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Mat from_rows(const std::vector<Vec>& rows) {
    if (rows.empty()) return {};
    Mat m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      assert(rows[i].size() == m.cols_);
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vec row_vec(std::size_t r) const { return {data_.begin() + r * cols_, data_.begin() + (r + 1) * cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void scale(std::span<double> x, double a) {
  for (double& v : x) v *= a;
}

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline Vec normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateError("cannot normalize a zero-norm vector");
  Vec out(a.begin(), a.end());
  scale(out, 1.0 / n);
  return out;
}

// Gradient of normalize(u) contracted with an upstream vector g:
// (g - <g, t> t) / |u| where t = u / |u|.
inline Vec normalize_vjp(std::span<const double> t, double u_norm, std::span<const double> g) {
  const double gt = dot(g, t);
  Vec out(g.begin(), g.end());
  axpy(-gt, t, out);
  scale(out, 1.0 / u_norm);
  return out;
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// d cos(a, b) / d a = b / (|a||b|) - cos(a, b) * a / |a|^2. The unclamped
// cosine is used so the derivative stays consistent with the forward pass.
inline Vec cosine_sim_grad(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
  const double c = dot(a, b) / (na * nb);
  Vec g(b.begin(), b.end());
  scale(g, 1.0 / (na * nb));
  axpy(-c / (na * na), a, g);
  return g;
}

inline Vec row_norms(const Mat& m) {
  Vec n(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    n[r] = norm(m.row(r));
    if (!(n[r] > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
  }
  return n;
}

inline Vec matvec(const Mat& m, std::span<const double> x) {
  assert(m.cols() == x.size());
  Vec y(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

// m^T * y
inline Vec matvec_t(const Mat& m, std::span<const double> y) {
  assert(m.rows() == y.size());
  Vec x(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(y[r], m.row(r), x);
  return x;
}

// m += a * u v^T
inline void add_outer(Mat& m, double a, std::span<const double> u, std::span<const double> v) {
  assert(m.rows() == u.size() && m.cols() == v.size());
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(a * u[r], v, m.row(r));
}

inline double logsumexp(std::span<const double> x) {
  assert(!x.empty());
  const double mx = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be positive and finite");
}

inline Vec log_softmax(std::span<const double> logits, double tau) {
  check_temperature(tau);
  if (logits.empty()) throw ConfigError("softmax over an empty logit vector");
  Vec scaled(logits.begin(), logits.end());
  scale(scaled, 1.0 / tau);
  const double lse = logsumexp(scaled);
  for (double& v : scaled) v -= lse;
  return scaled;
}

inline Vec tempered_softmax(std::span<const double> logits, double tau) {
  Vec p = log_softmax(logits, tau);
  double total = 0.0;
  for (double& v : p) total += (v = std::exp(v));
  // Renormalize so the sum is exact to rounding rather than exp/log rounding.
  scale(p, 1.0 / total);
  return p;
}

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <typename F>
Vec finite_diff_grad(F&& f, Vec x, double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(std::as_const(x));
    x[i] = saved - h;
    const double down = f(std::as_const(x));
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw DegenerateError("non-finite function value during finite differencing");
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor) in the Euclidean norm; zero when both vanish.
// The floor keeps identically-zero gradients from amplifying rounding noise.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 0.0) {
  assert(a.size() == b.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double denom = std::max({norm(a), norm(b), floor});
  if (denom < 1e-300) return 0.0;
  return std::sqrt(diff) / denom;
}

// FNV-1a over the raw bytes; used to prove frozen tensors are untouched.
inline std::uint64_t content_hash(std::span<const double> values, std::uint64_t seed = 1469598103934665603ULL) {
  std::uint64_t h = seed;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// Independent stream seed for a named purpose (data, init, test split...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Vec gaussian_vec(Rng& rng, std::size_t n, double sd) {
  std::normal_distribution<double> dist(0.0, sd);
  Vec v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline Vec random_unit(Rng& rng, std::size_t n) {
  for (;;) {
    Vec v = gaussian_vec(rng, n, 1.0);
    if (norm(v) > 1e-12) return normalized(v);
  }
}

// Text serialization helpers. %.17g round-trips every double exactly.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_values(std::ostream& os, std::span<const double> v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << format_double(v[i]);
  }
  os << '\n';
}

inline Vec read_values(std::istream& is, std::size_t n) {
  Vec v(n);
  for (double& x : v) {
    std::string tok;
    if (!(is >> tok)) throw ArtifactError("truncated numeric block");
    x = std::stod(tok);
  }
  return v;
}

inline void expect_token(std::istream& is, const std::string& want) {
  std::string tok;
  if (!(is >> tok) || tok != want) throw ArtifactError("expected '" + want + "' but found '" + tok + "'");
}

template <typename T>
T read_field(std::istream& is, const std::string& key) {
  expect_token(is, key);
  T v{};
  if (!(is >> v)) throw ArtifactError("missing value for '" + key + "'");
  return v;
}

}  // namespace mic
