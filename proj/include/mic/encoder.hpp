#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mic/numerics.hpp"

namespace mic {

// Stand-in for a frozen pretrained text tower: mean-pool the token sequence,
// apply a fixed affine map, and project onto the unit sphere.
//
//   t = normalize(W * mean(sequence) + offset)
//
// W has orthonormal rows (W W^T = I), so cosine structure of pooled inputs is
// preserved. The offset is a fixed template bias shared by every prompt; a
// zero offset gives the pure linear encoder.
class FrozenTextEncoder {
 public:
  FrozenTextEncoder() = default;
  FrozenTextEncoder(Mat weights, Vec offset, std::uint64_t seed = 0)
      : weights_(std::move(weights)), offset_(std::move(offset)), seed_(seed) {
    if (offset_.empty()) offset_.assign(weights_.rows(), 0.0);
    if (offset_.size() != weights_.rows()) throw ConfigError("encoder offset has the wrong dimension");
  }
  explicit FrozenTextEncoder(Mat weights) : FrozenTextEncoder(std::move(weights), Vec{}) {}

  // Gaussian(0, 1/d_in) entries, rows orthonormalized by Gram-Schmidt; the
  // offset is a random direction of length `offset_norm`.
  static FrozenTextEncoder random(std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                                  double offset_norm = 0.0) {
    if (d_out > d_in) throw ConfigError("encoder output dimension cannot exceed input dimension");
    if (d_in == 0 || d_out == 0) throw ConfigError("encoder dimensions must be positive");
    Rng rng(seed);
    Mat w(d_out, d_in);
    for (std::size_t r = 0; r < d_out; ++r) {
      for (;;) {
        Vec v = gaussian_vec(rng, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
        for (std::size_t p = 0; p < r; ++p) axpy(-dot(v, w.row(p)), w.row(p), v);
        if (norm(v) > 1e-8) {
          Vec u = normalized(v);
          std::copy(u.begin(), u.end(), w.row(r).begin());
          break;
        }
      }
    }
    Vec offset(d_out, 0.0);
    if (offset_norm > 0.0) {
      offset = random_unit(rng, d_out);
      scale(offset, offset_norm);
    }
    return FrozenTextEncoder(std::move(w), std::move(offset), seed);
  }

  const Mat& weights() const { return weights_; }
  const Vec& offset() const { return offset_; }
  std::size_t input_dim() const { return weights_.cols(); }
  std::size_t output_dim() const { return weights_.rows(); }
  std::uint64_t seed() const { return seed_; }

  std::uint64_t fingerprint() const { return content_hash(offset_, content_hash(weights_.values())); }

 private:
  Mat weights_;
  Vec offset_;
  std::uint64_t seed_ = 0;
};

// Fixed per-class word embeddings w_c, unit norm.
class WordEmbeddingTable {
 public:
  WordEmbeddingTable() = default;
  WordEmbeddingTable(std::vector<Vec> entries, std::uint64_t seed) : entries_(std::move(entries)), seed_(seed) {
    for (const Vec& e : entries_)
      if (std::abs(norm(e) - 1.0) > 1e-12) throw ConfigError("word embeddings must be unit norm");
  }

  const Vec& operator[](std::size_t c) const { return entries_.at(c); }
  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return entries_.empty() ? 0 : entries_.front().size(); }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Vec>& entries() const { return entries_; }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Vec& e : entries_) h = content_hash(e, h);
    return h;
  }

 private:
  std::vector<Vec> entries_;
  std::uint64_t seed_ = 0;
};

namespace detail {

struct Encoded {
  Vec embedding;  // unit norm
  double pre_norm = 0.0;
};

inline Vec mean_pool(std::span<const Vec> sequence, std::size_t dim) {
  if (sequence.empty()) throw ConfigError("cannot encode an empty token sequence");
  Vec mean(dim, 0.0);
  for (const Vec& v : sequence) {
    if (v.size() != dim) throw ConfigError("token dimension does not match the encoder");
    axpy(1.0, v, mean);
  }
  scale(mean, 1.0 / static_cast<double>(sequence.size()));
  return mean;
}

inline Encoded encode(const FrozenTextEncoder& enc, std::span<const Vec> sequence) {
  Vec u = matvec(enc.weights(), mean_pool(sequence, enc.input_dim()));
  axpy(1.0, enc.offset(), u);
  const double n = norm(u);
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateError("text encoding collapsed to a zero vector");
  scale(u, 1.0 / n);
  return {std::move(u), n};
}

}  // namespace detail

inline Vec encode_text(const FrozenTextEncoder& enc, std::span<const Vec> sequence) {
  return detail::encode(enc, sequence).embedding;
}

// Gradient of <upstream, encode_text(sequence)> with respect to one token.
// Mean pooling makes it identical for every position, so it is returned once.
inline Vec encode_text_token_vjp(const FrozenTextEncoder& enc, std::span<const Vec> sequence,
                                 std::span<const double> upstream) {
  const detail::Encoded e = detail::encode(enc, sequence);
  Vec g = matvec_t(enc.weights(), normalize_vjp(e.embedding, e.pre_norm, upstream));
  scale(g, 1.0 / static_cast<double>(sequence.size()));
  return g;
}

inline std::vector<Vec> encode_text_vjp(const FrozenTextEncoder& enc, std::span<const Vec> sequence,
                                        std::span<const double> upstream) {
  return std::vector<Vec>(sequence.size(), encode_text_token_vjp(enc, sequence, upstream));
}

inline void write_encoder(std::ostream& os, const FrozenTextEncoder& enc) {
  os << "encoder " << enc.output_dim() << ' ' << enc.input_dim() << ' ' << enc.seed() << '\n';
  for (std::size_t r = 0; r < enc.output_dim(); ++r) write_values(os, enc.weights().row(r));
  os << "offset\n";
  write_values(os, enc.offset());
}

inline FrozenTextEncoder read_encoder(std::istream& is) {
  expect_token(is, "encoder");
  std::size_t rows = 0, cols = 0;
  std::uint64_t seed = 0;
  if (!(is >> rows >> cols >> seed)) throw ArtifactError("bad encoder header");
  Mat w(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    Vec v = read_values(is, cols);
    std::copy(v.begin(), v.end(), w.row(r).begin());
  }
  expect_token(is, "offset");
  Vec offset = read_values(is, rows);
  return FrozenTextEncoder(std::move(w), std::move(offset), seed);
}

}  // namespace mic
