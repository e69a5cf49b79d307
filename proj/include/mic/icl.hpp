#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mic/membank.hpp"
#include "mic/numerics.hpp"

namespace mic {

// z = normalize(W2 relu(W1 f + b1) + b2)
struct ProjectionNet {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;

  // He-scaled Gaussian weights, zero biases.
  static ProjectionNet random(std::size_t d_in, std::size_t d_hidden, std::size_t d_proj, std::uint64_t seed) {
    if (d_in == 0 || d_hidden == 0 || d_proj == 0) throw ConfigError("projection dimensions must be positive");
    Rng rng(seed);
    ProjectionNet net{Mat(d_hidden, d_in), Vec(d_hidden, 0.0), Mat(d_proj, d_hidden), Vec(d_proj, 0.0)};
    std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / static_cast<double>(d_in)));
    std::normal_distribution<double> n2(0.0, std::sqrt(1.0 / static_cast<double>(d_hidden)));
    for (double& v : net.w1.values()) v = n1(rng);
    for (double& v : net.w2.values()) v = n2(rng);
    return net;
  }

  static ProjectionNet zeros_like(const ProjectionNet& o) {
    return {Mat(o.w1.rows(), o.w1.cols()), Vec(o.b1.size(), 0.0), Mat(o.w2.rows(), o.w2.cols()),
            Vec(o.b2.size(), 0.0)};
  }

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t output_dim() const { return w2.rows(); }
  std::size_t parameter_count() const { return w1.values().size() + b1.size() + w2.values().size() + b2.size(); }

  // Flat parameter views in a fixed order (w1, b1, w2, b2).
  std::vector<std::span<double>> blocks() { return {w1.values(), b1, w2.values(), b2}; }
  std::vector<std::span<const double>> blocks() const { return {w1.values(), b1, w2.values(), b2}; }

  Vec flatten() const {
    Vec out;
    for (auto b : blocks()) out.insert(out.end(), b.begin(), b.end());
    return out;
  }
  void assign(std::span<const double> flat) {
    std::size_t off = 0;
    for (auto b : blocks()) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + b.size()),
                b.begin());
      off += b.size();
    }
  }
};

struct ProjectionTrace {
  Vec input;
  Vec hidden_pre;
  Vec hidden;
  double out_norm = 0.0;
  Vec z;
};

inline ProjectionTrace project_trace(const ProjectionNet& net, std::span<const double> f) {
  if (f.size() != net.input_dim()) throw ConfigError("projection input dimension mismatch");
  ProjectionTrace t;
  t.input.assign(f.begin(), f.end());
  t.hidden_pre = matvec(net.w1, f);
  axpy(1.0, net.b1, t.hidden_pre);
  t.hidden = t.hidden_pre;
  for (double& v : t.hidden) v = std::max(v, 0.0);
  Vec out = matvec(net.w2, t.hidden);
  axpy(1.0, net.b2, out);
  t.out_norm = norm(out);
  if (!(t.out_norm > 0.0)) throw DegenerateError("projection output collapsed to zero");
  scale(out, 1.0 / t.out_norm);
  t.z = std::move(out);
  return t;
}

inline Vec project(const ProjectionNet& net, std::span<const double> f) { return project_trace(net, f).z; }

// Accumulates parameter gradients into `grads` and returns d/df.
inline Vec project_backward(const ProjectionNet& net, const ProjectionTrace& t, std::span<const double> grad_z,
                            ProjectionNet& grads) {
  const Vec g_out = normalize_vjp(t.z, t.out_norm, grad_z);
  add_outer(grads.w2, 1.0, g_out, t.hidden);
  axpy(1.0, g_out, grads.b2);
  Vec g_hidden = matvec_t(net.w2, g_out);
  for (std::size_t i = 0; i < g_hidden.size(); ++i)
    if (t.hidden_pre[i] <= 0.0) g_hidden[i] = 0.0;
  add_outer(grads.w1, 1.0, g_hidden, t.input);
  axpy(1.0, g_hidden, grads.b1);
  return matvec_t(net.w1, g_hidden);
}

inline void write_projection(std::ostream& os, const ProjectionNet& net) {
  os << "projection " << net.input_dim() << ' ' << net.hidden_dim() << ' ' << net.output_dim() << '\n';
  for (auto b : net.blocks()) write_values(os, b);
}

inline ProjectionNet read_projection(std::istream& is) {
  expect_token(is, "projection");
  std::size_t di = 0, dh = 0, dp = 0;
  if (!(is >> di >> dh >> dp)) throw ArtifactError("bad projection header");
  ProjectionNet net{Mat(dh, di), Vec(dh), Mat(dp, dh), Vec(dp)};
  for (auto b : net.blocks()) {
    const Vec v = read_values(is, b.size());
    std::copy(v.begin(), v.end(), b.begin());
  }
  return net;
}

struct Anchor {
  Vec z;
  ClassId label = kBackground;
};

struct IclOptions {
  double gamma = 0.1;
  // Printed form: the positive pair is missing from its own denominator.
  bool literal_denominator = false;
};

struct IclForward {
  double loss = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;
  std::vector<Vec> grad_z;  // per anchor; empty for skipped anchors
};

// Contiguous copy of the bank: rows grouped by queue, queues in class order.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BankSnapshot {
  RowMatrix z;
  std::map<ClassId, std::pair<Eigen::Index, Eigen::Index>> range;  // [begin, end)
};

inline BankSnapshot snapshot(const MemoryBank& bank) {
  BankSnapshot b;
  Eigen::Index n = 0, dim = 0;
  for (ClassId c : bank.classes()) {
    const auto& q = bank.queue(c);
    if (!q.empty()) dim = static_cast<Eigen::Index>(q.front().embedding.size());
    b.range[c] = {n, n + static_cast<Eigen::Index>(q.size())};
    n += static_cast<Eigen::Index>(q.size());
  }
  b.z.resize(n, dim);
  Eigen::Index r = 0;
  for (ClassId c : bank.classes())
    for (const ProposalSample& e : bank.queue(c)) {
      if (static_cast<Eigen::Index>(e.embedding.size()) != dim) throw ConfigError("bank embedding dimension mismatch");
      b.z.row(r++) = Eigen::Map<const Eigen::RowVectorXd>(e.embedding.data(), dim);
    }
  return b;
}

// Per anchor i with positives P = Q_c(i) and negatives A = Q \ Q_c(i):
//   l_i = (1/|P|) sum_j -log( e^{s_j} / (e^{s_j} + sum_k e^{s_k}) ),  s = z_i.z / gamma
// which equals (1/|P|) sum_j softplus(lse_A - s_j). The loss is the mean of
// l_i over scored anchors. Anchors with an empty P or A are skipped.
inline IclForward icl_forward(std::span<const Anchor> anchors, const MemoryBank& bank, const IclOptions& opt,
                              bool with_grad = true) {
  using Eigen::Index;
  check_temperature(opt.gamma);
  IclForward out;
  out.grad_z.resize(anchors.size());
  if (anchors.empty()) return out;
  const BankSnapshot b = snapshot(bank);
  const Index n = b.z.rows();
  const Index dim = static_cast<Index>(anchors.front().z.size());
  if (n > 0 && b.z.cols() != dim) throw ConfigError("anchor and bank dimensions differ");

  RowMatrix za(static_cast<Index>(anchors.size()), dim);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (static_cast<Index>(anchors[i].z.size()) != dim) throw ConfigError("anchor dimension mismatch");
    za.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(anchors[i].z.data(), dim);
  }
  const RowMatrix s = (za * b.z.transpose()) / opt.gamma;
  // d l_i / d s_ik, later contracted with the bank rows.
  RowMatrix w = RowMatrix::Zero(s.rows(), s.cols());

  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Index r = static_cast<Index>(i);
    const auto it = b.range.find(anchors[i].label);
    if (it == b.range.end())
      throw std::out_of_range("memory bank has no queue for class " + std::to_string(anchors[i].label));
    const auto [pb, pe] = it->second;
    const Index n_pos = pe - pb;
    if (n_pos == 0 || n_pos == n) {
      ++out.skipped;
      continue;
    }
    ++out.scored;
    const auto row = s.row(r).array();
    const auto head = row.head(pb);
    const auto tail = row.tail(n - pe);
    double m = -std::numeric_limits<double>::infinity();
    if (pb > 0) m = head.maxCoeff();
    if (pe < n) m = std::max(m, tail.maxCoeff());
    const Eigen::ArrayXd e_head = (head - m).exp();
    const Eigen::ArrayXd e_tail = (tail - m).exp();
    const double z_neg = e_head.sum() + e_tail.sum();
    const double lse_neg = m + std::log(z_neg);
    const double inv_p = 1.0 / static_cast<double>(n_pos);

    const Eigen::ArrayXd x = lse_neg - row.segment(pb, n_pos);
    double neg_weight = 0.0;  // d l_i / d lse_neg
    if (opt.literal_denominator) {
      out.loss += x.sum() * inv_p;
      neg_weight = 1.0;
      if (with_grad) w.row(r).segment(pb, n_pos).setConstant(-inv_p);
    } else {
      // softplus(x) and its derivative sigmoid(x), overflow-safe.
      const Eigen::ArrayXd em = (-x.abs()).exp();
      const Eigen::ArrayXd sp = x.max(0.0) + em.log1p();
      const Eigen::ArrayXd sg = (x >= 0.0).select(1.0 / (1.0 + em), em / (1.0 + em));
      out.loss += sp.sum() * inv_p;
      neg_weight = sg.sum() * inv_p;
      if (with_grad) w.row(r).segment(pb, n_pos) = (-sg * inv_p).matrix().transpose();
    }
    if (with_grad) {
      const double k = neg_weight / z_neg;
      w.row(r).head(pb) = (k * e_head).matrix().transpose();
      w.row(r).tail(n - pe) = (k * e_tail).matrix().transpose();
    }
  }
  if (out.scored > 0) out.loss /= static_cast<double>(out.scored);
  if (with_grad && out.scored > 0) {
    const RowMatrix g = (w * b.z) / (opt.gamma * static_cast<double>(out.scored));
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto [pb, pe] = b.range.at(anchors[i].label);
      if (pe - pb == 0 || pe - pb == n) continue;
      out.grad_z[i].assign(g.row(static_cast<Index>(i)).begin(), g.row(static_cast<Index>(i)).end());
    }
  }
  return out;
}

inline double icl_loss(std::span<const Anchor> anchors, const MemoryBank& bank, const IclOptions& opt) {
  return icl_forward(anchors, bank, opt, false).loss;
}

struct IclGrads {
  ProjectionNet net;         // gradient w.r.t. every projection parameter
  std::vector<Vec> features;  // gradient w.r.t. each raw input feature
  double loss = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;
};

// Backward through the loss and the projection net. Bank entries are
// constants; only the anchors carry gradient.
inline IclGrads icl_grads(std::span<const LabeledEmbedding> features, const ProjectionNet& net,
                          const MemoryBank& bank, const IclOptions& opt) {
  std::vector<ProjectionTrace> traces;
  std::vector<Anchor> anchors;
  traces.reserve(features.size());
  for (const auto& f : features) {
    traces.push_back(project_trace(net, f.f));
    anchors.push_back({traces.back().z, f.label});
  }
  const IclForward fw = icl_forward(anchors, bank, opt, true);
  IclGrads out{ProjectionNet::zeros_like(net), {}, fw.loss, fw.scored, fw.skipped};
  out.features.resize(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (fw.grad_z[i].empty()) {
      out.features[i].assign(net.input_dim(), 0.0);
      continue;
    }
    out.features[i] = project_backward(net, traces[i], fw.grad_z[i], out.net);
  }
  return out;
}

}  // namespace mic
