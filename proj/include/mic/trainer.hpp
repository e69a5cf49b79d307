#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mic/config.hpp"
#include "mic/icl.hpp"
#include "mic/membank.hpp"
#include "mic/mpl.hpp"
#include "mic/numerics.hpp"
#include "mic/prompt.hpp"
#include "mic/synthtask.hpp"

namespace mic {

// Probability over the rows of `classes` followed by the background slot.
inline Vec classify(std::span<const double> f, const Mat& classes, std::span<const double> t_bg, double tau) {
  Vec s = similarity_logits(f, classes);
  s.push_back(cosine_sim(f, t_bg));
  return tempered_softmax(s, tau);
}

// `target` indexes the rows of the classifier; classes.rows() is background.
struct ClassificationExample {
  Vec f;
  std::size_t target = 0;
};

inline double loss_cls(std::span<const ClassificationExample> batch, const Mat& classes,
                       std::span<const double> t_bg, double tau) {
  if (batch.empty()) throw ConfigError("loss_cls needs a non-empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    Vec s = similarity_logits(ex.f, classes);
    s.push_back(cosine_sim(ex.f, t_bg));
    total -= log_softmax(s, tau)[ex.target];
  }
  return total / static_cast<double>(batch.size());
}

struct ClsGrads {
  double loss = 0.0;
  std::vector<Vec> features;  // d loss / d f per example
};

inline ClsGrads loss_cls_grads(std::span<const ClassificationExample> batch, const Mat& classes,
                               std::span<const double> t_bg, double tau) {
  if (batch.empty()) throw ConfigError("loss_cls needs a non-empty batch");
  ClsGrads out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t S = classes.rows();
  Vec rn = row_norms(classes);
  rn.push_back(norm(t_bg));
  if (!(rn.back() > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
  auto row = [&](std::size_t j) { return j < S ? classes.row(j) : t_bg; };
  Vec s(S + 1), raw(S + 1);
  for (const auto& ex : batch) {
    const double xn = norm(ex.f);
    if (!(xn > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
    for (std::size_t j = 0; j <= S; ++j) {
      raw[j] = dot(ex.f, row(j)) / (xn * rn[j]);
      s[j] = std::clamp(raw[j], -1.0, 1.0);
    }
    const Vec lp = log_softmax(s, tau);
    out.loss -= lp[ex.target] * inv_n;
    // d cos(x, t) / d x = t / (|x||t|) - cos * x / |x|^2
    Vec g(ex.f.size(), 0.0);
    double coef = 0.0;
    for (std::size_t j = 0; j <= S; ++j) {
      const double w = (std::exp(lp[j]) - (j == ex.target ? 1.0 : 0.0)) * inv_n / tau;
      axpy(w / (xn * rn[j]), row(j), g);
      coef += w * raw[j] / (xn * xn);
    }
    axpy(-coef, ex.f, g);
    out.features.push_back(std::move(g));
  }
  return out;
}

// Linear decay from alpha0 to zero over the run: alpha0 * (1 - iter / R).
inline double alpha_schedule(double alpha0, std::size_t iter, std::size_t total) {
  if (total == 0 || iter >= total) return 0.0;
  return alpha0 * (1.0 - static_cast<double>(iter) / static_cast<double>(total));
}

// The self-referential reading alpha <- alpha * (1 - iter / R) applied at
// every iteration. Kept for comparison; it collapses to ~0 within a few
// hundred steps.
inline double alpha_schedule_compounding(double alpha0, std::size_t iter, std::size_t total) {
  if (total == 0 || iter >= total) return 0.0;
  double a = alpha0;
  for (std::size_t i = 1; i <= iter; ++i) a *= 1.0 - static_cast<double>(i) / static_cast<double>(total);
  return a;
}

// Linear warmup from base * factor, then cosine decay to zero at `total`.
inline double warmup_cosine_lr(double base, std::size_t iter, std::size_t total, std::size_t warmup, double factor) {
  if (iter < warmup) {
    const double t = static_cast<double>(iter) / static_cast<double>(warmup);
    return base * (factor + (1.0 - factor) * t);
  }
  if (total <= warmup) return base;
  const double t = static_cast<double>(iter - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

// v <- momentum * v + g;  p <- p - lr * v
inline void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
                     double momentum) {
  assert(params.size() == grads.size() && params.size() == velocity.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

// Trainable state of procedure B. The classifier itself (class embeddings
// and t_bg) is frozen; features pass through a learnable linear adapter
// before classification and projection.
struct Detector {
  Mat adapter;
  ProjectionNet net;

  Vec adapt(std::span<const double> f) const { return matvec(adapter, f); }
};

inline void write_detector(std::ostream& os, const Detector& d) {
  os << "mic-detector 1\nadapter " << d.adapter.rows() << ' ' << d.adapter.cols() << '\n';
  for (std::size_t r = 0; r < d.adapter.rows(); ++r) write_values(os, d.adapter.row(r));
  write_projection(os, d.net);
}

inline Detector read_detector(std::istream& is) {
  expect_token(is, "mic-detector");
  expect_token(is, "1");
  expect_token(is, "adapter");
  std::size_t rows = 0, cols = 0;
  if (!(is >> rows >> cols)) throw ArtifactError("bad adapter header");
  Detector d{Mat(rows, cols), {}};
  for (std::size_t r = 0; r < rows; ++r) {
    const Vec v = read_values(is, cols);
    std::copy(v.begin(), v.end(), d.adapter.row(r).begin());
  }
  d.net = read_projection(is);
  return d;
}

struct TrainingData {
  std::vector<ProposalSample> positives;
  std::vector<ProposalSample> negatives;
};

// Seeded training proposals for the base classes plus a background pool.
inline TrainingData gen_training_data(const SyntheticWorld& w, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 1));
  TrainingData d;
  for (ClassId c : w.vocab.base) {
    auto s = gen_proposals(w, c, cfg.train_per_class, rng);
    d.positives.insert(d.positives.end(), s.begin(), s.end());
  }
  d.negatives = gen_background(w, cfg.train_background, rng);
  return d;
}

struct ProcedureAResult {
  PromptEnsemble prompts;
  std::vector<PromptLossRow> curve;
};

// Prompt learning: one prompt pair per IoU level (or a single pair) trained
// with meta-sampled vocabularies.
inline ProcedureAResult run_procedure_A(const SyntheticWorld& w, const TrainConfig& cfg) {
  cfg.validate();
  const TrainingData data = gen_training_data(w, cfg);
  ProcedureAResult out;
  if (cfg.iou_levels == kIouLevels) {
    const auto levels = gen_iou_level_datasets(data.positives);
    EnsembleTrainResult r = level_ensemble(levels, data.negatives, w.vocab.base, w.words, w.encoder, cfg);
    out.prompts = std::move(r.ensemble);
    out.curve = std::move(r.curve);
  } else {
    std::vector<ProposalSample> pos;
    for (const auto& s : data.positives)
      if (s.iou >= 0.5) pos.push_back(s);
    PromptTrainResult r = train_prompts(pos, data.negatives, w.vocab.base, w.words, w.encoder, cfg);
    out.prompts.seed = cfg.seed;
    out.prompts.members.push_back(std::move(r.prompts));
    out.curve = std::move(r.curve);
  }
  return out;
}

struct DetectorMetrics {
  std::size_t iter = 0;
  double loss_cls = 0.0;
  double loss_icl = 0.0;
  double alpha = 0.0;
  double loss_det = 0.0;
  double lr = 0.0;
  std::size_t icl_anchors = 0;
  std::size_t bank_size = 0;
};

// Loss and gradients of L_det = loss_cls + alpha * icl for one batch against
// a fixed memory bank. Anchors are the proposals that pass the IoU filter.
struct DetectorGrads {
  double loss_cls = 0.0;
  double loss_icl = 0.0;
  double loss_det = 0.0;
  std::size_t icl_anchors = 0;
  Mat adapter;  // d L_det / d adapter
  ProjectionNet net;  // d L_det / d net
};

inline bool is_icl_anchor(const ProposalSample& s, double u_pos, double u_neg) {
  return (!s.is_background() && s.iou > u_pos) || s.iou < u_neg;
}

// Foreground at IoU >= fg_iou_threshold keeps its class row, everything
// else is background (row `n_rows`).
inline std::vector<ClassificationExample> classification_batch(const Detector& det,
                                                               std::span<const ProposalSample> batch,
                                                               const std::map<ClassId, std::size_t>& row_of,
                                                               std::size_t n_rows, double fg_iou_threshold) {
  std::vector<ClassificationExample> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    const bool fg = !s.is_background() && s.iou >= fg_iou_threshold;
    out.push_back({det.adapt(s.embedding), fg ? row_of.at(s.label) : n_rows});
  }
  return out;
}

inline std::vector<LabeledEmbedding> icl_anchors(const Detector& det, std::span<const ProposalSample> batch,
                                                 double u_pos, double u_neg) {
  std::vector<LabeledEmbedding> out;
  for (const auto& s : batch)
    if (is_icl_anchor(s, u_pos, u_neg))
      out.push_back({det.adapt(s.embedding), s.is_background() || s.iou < u_neg ? kBackground : s.label});
  return out;
}

inline DetectorGrads detector_grads(const Detector& det, std::span<const ProposalSample> batch,
                                    const MemoryBank& bank, const Mat& classes, std::span<const double> t_bg,
                                    const std::map<ClassId, std::size_t>& row_of, const TrainConfig& cfg,
                                    double alpha) {
  DetectorGrads out;
  const auto cls_batch = classification_batch(det, batch, row_of, classes.rows(), cfg.fg_iou_threshold);
  const ClsGrads cls = loss_cls_grads(cls_batch, classes, t_bg, cfg.tau_cls);
  const auto anchors = icl_anchors(det, batch, cfg.u_pos, cfg.u_neg);
  IclGrads icl{ProjectionNet::zeros_like(det.net), {}, 0.0, 0, 0};
  if (!anchors.empty()) icl = icl_grads(anchors, det.net, bank, {cfg.gamma, cfg.literal_icl_denominator});

  out.loss_cls = cls.loss;
  out.loss_icl = icl.loss;
  out.loss_det = cls.loss + alpha * icl.loss;
  out.icl_anchors = icl.scored;
  out.adapter = Mat(det.adapter.rows(), det.adapter.cols());
  for (std::size_t i = 0; i < batch.size(); ++i) add_outer(out.adapter, 1.0, cls.features[i], batch[i].embedding);
  std::size_t a = 0;
  for (const auto& s : batch) {
    if (!is_icl_anchor(s, cfg.u_pos, cfg.u_neg)) continue;
    add_outer(out.adapter, alpha, icl.features[a], s.embedding);
    ++a;
  }
  out.net = std::move(icl.net);
  Vec g = out.net.flatten();
  scale(g, alpha);
  out.net.assign(g);
  return out;
}

// Procedure B as a resumable object so single iterations can be inspected.
class DetectorTrainer {
 public:
  DetectorTrainer(const SyntheticWorld& w, const PromptEnsemble& prompts, const TrainConfig& cfg)
      : world_(&w),
        cfg_(cfg),
        base_embeddings_(prompts.class_embeddings(w.vocab.base, w.words, w.encoder)),
        t_bg_(prompts.background_embedding(w.encoder)),
        bank_(w.vocab.base, cfg.bank_capacity),
        rng_(derive_seed(cfg.seed, 2)) {
    cfg_.validate();
    const std::size_t d = w.spec.dim;
    detector_.adapter = Mat::identity(d);
    detector_.net = ProjectionNet::random(d, cfg.proj_hidden ? cfg.proj_hidden : d, cfg.proj_dim,
                                          derive_seed(cfg.seed, 3));
    adapter_velocity_.assign(d * d, 0.0);
    net_velocity_.assign(detector_.net.parameter_count(), 0.0);
    for (std::size_t i = 0; i < w.vocab.base.size(); ++i) row_of_[w.vocab.base[i]] = i;
  }

  const Detector& detector() const { return detector_; }
  const MemoryBank& bank() const { return bank_; }
  const Mat& base_embeddings() const { return base_embeddings_; }
  const Vec& background_embedding() const { return t_bg_; }
  const std::map<ClassId, std::size_t>& class_rows() const { return row_of_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t iteration() const { return iter_; }

  std::vector<ProposalSample> sample_batch() {
    std::vector<ProposalSample> batch;
    std::uniform_int_distribution<std::size_t> pick(0, world_->vocab.base.size() - 1);
    for (std::size_t i = 0; i < cfg_.detector_batch; ++i) {
      auto s = gen_proposals(*world_, world_->vocab.base[pick(rng_)], 1, rng_);
      batch.push_back(std::move(s.front()));
    }
    auto bg = gen_background(*world_, cfg_.detector_bg, rng_);
    batch.insert(batch.end(), bg.begin(), bg.end());
    return batch;
  }

  // Candidates for the memory bank carry projected (detached) embeddings.
  std::vector<ProposalSample> bank_candidates(std::span<const ProposalSample> batch) const {
    std::vector<ProposalSample> out;
    for (const auto& s : batch) {
      ProposalSample c = s;
      c.embedding = project(detector_.net, detector_.adapt(s.embedding));
      out.push_back(std::move(c));
    }
    return out;
  }

  DetectorMetrics step(std::span<const ProposalSample> batch) {
    DetectorMetrics m;
    m.iter = iter_;
    m.alpha = alpha_schedule(cfg_.alpha0, iter_, cfg_.detector_steps);
    m.lr = warmup_cosine_lr(cfg_.detector_lr, iter_, cfg_.detector_steps, cfg_.effective_warmup(),
                            cfg_.warmup_factor);

    update(bank_, bank_candidates(batch), cfg_.u_pos, cfg_.u_neg, cfg_.bank_sample);
    DetectorGrads g = detector_grads(detector_, batch, bank_, base_embeddings_, t_bg_, row_of_, cfg_, m.alpha);

    m.loss_cls = g.loss_cls;
    m.loss_icl = g.loss_icl;
    m.loss_det = g.loss_det;
    m.icl_anchors = g.icl_anchors;
    m.bank_size = bank_.total_size();
    if (!std::isfinite(m.loss_det))
      throw DivergenceError("detector training diverged at iteration " + std::to_string(iter_));

    if (cfg_.use_adapter) sgd_step(detector_.adapter.values(), g.adapter.values(), adapter_velocity_, m.lr, cfg_.momentum);
    Vec params = detector_.net.flatten();
    sgd_step(params, g.net.flatten(), net_velocity_, m.lr, cfg_.momentum);
    detector_.net.assign(params);

    ++iter_;
    return m;
  }

 private:
  const SyntheticWorld* world_;
  TrainConfig cfg_;
  Mat base_embeddings_;
  Vec t_bg_;
  MemoryBank bank_;
  Detector detector_;
  Vec adapter_velocity_;
  Vec net_velocity_;
  std::map<ClassId, std::size_t> row_of_;
  Rng rng_;
  std::size_t iter_ = 0;
};

struct ProcedureBResult {
  Detector detector;
  MemoryBank bank;
  std::vector<DetectorMetrics> metrics;
};

inline ProcedureBResult run_procedure_B(const SyntheticWorld& w, const PromptEnsemble& prompts,
                                        const TrainConfig& cfg) {
  DetectorTrainer trainer(w, prompts, cfg);
  ProcedureBResult out;
  out.metrics.reserve(cfg.detector_steps);
  for (std::size_t r = 0; r < cfg.detector_steps; ++r) {
    const auto batch = trainer.sample_batch();
    out.metrics.push_back(trainer.step(batch));
  }
  out.detector = trainer.detector();
  out.bank = trainer.bank();
  return out;
}

}  // namespace mic
