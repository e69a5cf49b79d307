#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mic/config.hpp"
#include "mic/encoder.hpp"
#include "mic/numerics.hpp"
#include "mic/prompt.hpp"
#include "mic/synthtask.hpp"

namespace mic {

// Proposals of one prompt-learning step: labeled foreground positives and
// unlabeled background negatives.
struct MetaBatch {
  std::vector<LabeledEmbedding> positives;
  std::vector<Vec> negatives;

  std::vector<ClassId> present_classes() const {
    std::vector<ClassId> ids;
    for (const auto& p : positives) ids.push_back(p.label);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }
};

// The per-batch vocabulary C_S and its embedding stack T_S (row i <-> ids[i]).
struct SampledVocab {
  std::vector<ClassId> ids;
  Mat embeddings;

  std::size_t index_of(ClassId c) const {
    const auto it = std::find(ids.begin(), ids.end(), c);
    if (it == ids.end()) throw std::logic_error("class " + std::to_string(c) + " is not in the sampled vocabulary");
    return static_cast<std::size_t>(it - ids.begin());
  }
  std::size_t size() const { return ids.size(); }
};

// Keeps every class present in the batch and fills the remaining k - |present|
// slots uniformly without replacement from the other base classes. The
// result follows the order of `base`.
inline std::vector<ClassId> meta_sample(std::span<const ClassId> present, std::span<const ClassId> base,
                                        std::size_t k, Rng& rng) {
  for (ClassId c : present)
    if (std::find(base.begin(), base.end(), c) == base.end())
      throw ConfigError("batch class " + std::to_string(c) + " is not a base class");
  if (k < present.size())
    throw ConfigError("sampled vocabulary size " + std::to_string(k) + " is smaller than the " +
                      std::to_string(present.size()) + " classes present in the batch");
  if (k >= base.size()) return {base.begin(), base.end()};

  std::vector<ClassId> rest;
  for (ClassId c : base)
    if (std::find(present.begin(), present.end(), c) == present.end()) rest.push_back(c);
  const std::size_t extra = k - present.size();
  // Partial Fisher-Yates: the first `extra` slots are a uniform draw.
  for (std::size_t i = 0; i < extra; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rest.size() - 1);
    std::swap(rest[i], rest[pick(rng)]);
  }
  std::vector<ClassId> chosen(present.begin(), present.end());
  chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(extra));
  std::vector<ClassId> out;
  for (ClassId c : base)
    if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) out.push_back(c);
  return out;
}

inline Vec similarity_logits(std::span<const double> f, const Mat& classes) {
  Vec s(classes.rows());
  for (std::size_t i = 0; i < classes.rows(); ++i) s[i] = cosine_sim(f, classes.row(i));
  return s;
}

// Distribution over the |C_S| sampled classes plus the background slot (last).
inline Vec positive_distribution(std::span<const double> f, const Mat& sampled, std::span<const double> t_bg,
                                 double tau) {
  Vec s = similarity_logits(f, sampled);
  s.push_back(cosine_sim(f, t_bg));
  return tempered_softmax(s, tau);
}

// Distribution over the |C_S| sampled classes only; t_bg does not compete.
inline Vec negative_distribution(std::span<const double> f, const Mat& sampled, double tau) {
  return tempered_softmax(similarity_logits(f, sampled), tau);
}

inline double positive_prob(std::span<const double> f, const SampledVocab& vocab, std::span<const double> t_bg,
                            ClassId c, double tau) {
  const std::size_t idx = vocab.index_of(c);
  return positive_distribution(f, vocab.embeddings, t_bg, tau)[idx];
}

inline double negative_prob(std::span<const double> f, const SampledVocab& vocab, ClassId c, double tau) {
  const std::size_t idx = vocab.index_of(c);
  return negative_distribution(f, vocab.embeddings, tau)[idx];
}

// Mean over positives of -log p_c^p, evaluated as a log-softmax.
inline double loss_p(std::span<const LabeledEmbedding> positives, const SampledVocab& vocab,
                     std::span<const double> t_bg, double tau) {
  if (positives.empty()) throw ConfigError("loss_p needs at least one positive proposal");
  double total = 0.0;
  for (const auto& p : positives) {
    Vec s = similarity_logits(p.f, vocab.embeddings);
    s.push_back(cosine_sim(p.f, t_bg));
    total -= log_softmax(s, tau)[vocab.index_of(p.label)];
  }
  return total / static_cast<double>(positives.size());
}

// Mean over negatives of -(1/|C_S|) sum_c log p_c^n.
inline double loss_n(std::span<const Vec> negatives, const SampledVocab& vocab, double tau) {
  if (negatives.empty()) throw ConfigError("loss_n needs at least one negative proposal");
  const double inv = 1.0 / static_cast<double>(vocab.size());
  double total = 0.0;
  for (const Vec& f : negatives) {
    const Vec lp = log_softmax(similarity_logits(f, vocab.embeddings), tau);
    for (double v : lp) total -= inv * v;
  }
  return total / static_cast<double>(negatives.size());
}

// Gradients of loss_p and loss_n with respect to both context sets, kept
// separate so the caller decides which loss drives which prompt.
struct MplGrads {
  std::vector<Vec> fg_from_p;
  std::vector<Vec> fg_from_n;
  std::vector<Vec> bg_from_p;
  std::vector<Vec> bg_from_n;  // identically zero: t_bg is absent from the negative softmax
  double loss_p = 0.0;
  double loss_n = 0.0;
};

inline MplGrads mpl_grads(const MetaBatch& batch, std::span<const ClassId> sampled_ids, const PromptPair& prompts,
                          const WordEmbeddingTable& words, const FrozenTextEncoder& enc, double tau) {
  check_temperature(tau);
  const std::size_t S = sampled_ids.size();
  const std::size_t d_out = enc.output_dim();
  const std::size_t d_in = enc.input_dim();
  SampledVocab vocab{{sampled_ids.begin(), sampled_ids.end()}, class_embeddings(prompts.fg, sampled_ids, words, enc)};
  const Vec t_bg = background_embedding(prompts.bg, enc);

  // Upstream gradients on each encoded embedding.
  std::vector<Vec> up_p(S, Vec(d_out, 0.0)), up_n(S, Vec(d_out, 0.0));
  Vec up_bg(d_out, 0.0);

  MplGrads out;
  // d cos(t, f) / d t = f / (|t||f|) - cos * t / |t|^2; the first term is
  // accumulated per row, the second folded into one coefficient per row.
  const Vec rn = row_norms(vocab.embeddings);
  const double bg_norm = norm(t_bg);
  Vec coef_p(S, 0.0), coef_n(S, 0.0);
  double coef_bg = 0.0;

  if (!batch.positives.empty()) {
    const double inv_n = 1.0 / static_cast<double>(batch.positives.size());
    Vec s(S + 1), raw(S + 1);
    for (const auto& p : batch.positives) {
      const std::size_t target = vocab.index_of(p.label);
      const double fn = norm(p.f);
      if (!(fn > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
      for (std::size_t j = 0; j < S; ++j) raw[j] = dot(vocab.embeddings.row(j), p.f) / (rn[j] * fn);
      raw[S] = dot(t_bg, p.f) / (bg_norm * fn);
      for (std::size_t j = 0; j <= S; ++j) s[j] = std::clamp(raw[j], -1.0, 1.0);
      const Vec lp = log_softmax(s, tau);
      out.loss_p -= lp[target] * inv_n;
      for (std::size_t j = 0; j <= S; ++j) {
        const double g = (std::exp(lp[j]) - (j == target ? 1.0 : 0.0)) * inv_n / tau;
        if (j < S) {
          axpy(g / (rn[j] * fn), p.f, up_p[j]);
          coef_p[j] += g * raw[j] / (rn[j] * rn[j]);
        } else {
          axpy(g / (bg_norm * fn), p.f, up_bg);
          coef_bg += g * raw[j] / (bg_norm * bg_norm);
        }
      }
    }
  }
  if (!batch.negatives.empty()) {
    const double inv_n = 1.0 / static_cast<double>(batch.negatives.size());
    const double inv_s = 1.0 / static_cast<double>(S);
    Vec s(S), raw(S);
    for (const Vec& f : batch.negatives) {
      const double fn = norm(f);
      if (!(fn > 0.0)) throw DegenerateError("cosine similarity of a zero-norm embedding");
      for (std::size_t j = 0; j < S; ++j) {
        raw[j] = dot(vocab.embeddings.row(j), f) / (rn[j] * fn);
        s[j] = std::clamp(raw[j], -1.0, 1.0);
      }
      const Vec lp = log_softmax(s, tau);
      for (std::size_t j = 0; j < S; ++j) {
        out.loss_n -= inv_s * lp[j] * inv_n;
        const double g = (std::exp(lp[j]) - inv_s) * inv_n / tau;
        axpy(g / (rn[j] * fn), f, up_n[j]);
        coef_n[j] += g * raw[j] / (rn[j] * rn[j]);
      }
    }
  }
  for (std::size_t j = 0; j < S; ++j) {
    axpy(-coef_p[j], vocab.embeddings.row(j), up_p[j]);
    axpy(-coef_n[j], vocab.embeddings.row(j), up_n[j]);
  }
  axpy(-coef_bg, t_bg, up_bg);

  // Chain through the encoder. Every context token shares the mean-pool
  // gradient; the word-embedding slot's gradient is dropped.
  Vec fg_p(d_in, 0.0), fg_n(d_in, 0.0);
  for (std::size_t j = 0; j < S; ++j) {
    const auto seq = assemble_class_prompt(prompts.fg, words[static_cast<std::size_t>(sampled_ids[j])]);
    axpy(1.0, encode_text_token_vjp(enc, seq, up_p[j]), fg_p);
    axpy(1.0, encode_text_token_vjp(enc, seq, up_n[j]), fg_n);
  }
  const Vec bg_p = encode_text_token_vjp(enc, prompts.bg.context, up_bg);
  out.fg_from_p.assign(prompts.fg.length(), fg_p);
  out.fg_from_n.assign(prompts.fg.length(), fg_n);
  out.bg_from_p.assign(prompts.bg.length(), bg_p);
  out.bg_from_n.assign(prompts.bg.length(), Vec(d_in, 0.0));
  return out;
}

struct PromptLossRow {
  std::size_t level = 0;
  std::size_t step = 0;
  double loss_p = 0.0;
  double loss_n = 0.0;
};

struct PromptTrainResult {
  PromptPair prompts;
  std::vector<PromptLossRow> curve;
};

// Step-wise decay: the base rate until `decay_at * steps`, then scaled by
// `lr_decay`.
inline double prompt_learning_rate(const TrainConfig& cfg, std::size_t step) {
  const double boundary = cfg.prompt_decay_at * static_cast<double>(cfg.prompt_steps);
  return static_cast<double>(step) < boundary ? cfg.prompt_lr : cfg.prompt_lr * cfg.prompt_lr_decay;
}

// Draws `batch_classes` base classes, then positives only from those classes,
// the way an image batch contains a handful of object categories.
inline MetaBatch sample_meta_batch(const std::map<ClassId, std::vector<const ProposalSample*>>& by_class,
                                   std::span<const ProposalSample> negatives, const TrainConfig& cfg, Rng& rng) {
  std::vector<ClassId> classes;
  for (const auto& [c, v] : by_class)
    if (!v.empty()) classes.push_back(c);
  if (classes.empty()) throw ConfigError("prompt dataset has no positive proposals");
  const std::size_t n_classes = std::min(cfg.batch_classes, classes.size());
  for (std::size_t i = 0; i < n_classes; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, classes.size() - 1);
    std::swap(classes[i], classes[pick(rng)]);
  }
  const auto n_neg = negatives.empty()
                         ? std::size_t{0}
                         : static_cast<std::size_t>(std::lround(cfg.neg_fraction * static_cast<double>(cfg.prompt_batch)));
  const std::size_t n_pos = cfg.prompt_batch > n_neg ? cfg.prompt_batch - n_neg : 1;

  MetaBatch b;
  std::uniform_int_distribution<std::size_t> pick_class(0, n_classes - 1);
  for (std::size_t i = 0; i < n_pos; ++i) {
    const auto& pool = by_class.at(classes[pick_class(rng)]);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const ProposalSample* s = pool[pick(rng)];
    b.positives.push_back({s->embedding, s->label});
  }
  if (n_neg > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, negatives.size() - 1);
    for (std::size_t i = 0; i < n_neg; ++i) b.negatives.push_back(negatives[pick(rng)].embedding);
  }
  return b;
}

// Gradient descent on the context vectors. V_fg follows loss_p and V_bg
// follows loss_n, plus loss_p when bg_from_p is set (t_bg only enters the
// positive distribution). joint_grads sends loss_p + loss_n to both.
inline PromptTrainResult train_prompts(std::span<const ProposalSample> positives,
                                       std::span<const ProposalSample> negatives, std::span<const ClassId> base,
                                       const WordEmbeddingTable& words, const FrozenTextEncoder& enc,
                                       const TrainConfig& cfg, std::size_t level = 0) {
  cfg.validate();
  PromptTrainResult res;
  res.prompts = init_prompts(cfg.fg_length, cfg.bg_length, enc.input_dim(), cfg.seed, cfg.token_position);
  std::map<ClassId, std::vector<const ProposalSample*>> by_class;
  for (const ProposalSample& s : positives) {
    if (std::find(base.begin(), base.end(), s.label) == base.end())
      throw ConfigError("prompt learning received a non-base positive of class " + std::to_string(s.label));
    by_class[s.label].push_back(&s);
  }
  if (cfg.prompt_steps > 0 && by_class.empty()) throw ConfigError("prompt dataset has no positive proposals");
  const std::size_t k = cfg.sampled_classes(base.size());
  Rng rng(derive_seed(cfg.seed, 11));

  for (std::size_t step = 0; step < cfg.prompt_steps; ++step) {
    const MetaBatch batch = sample_meta_batch(by_class, negatives, cfg, rng);
    const std::vector<ClassId> present = batch.present_classes();
    const std::vector<ClassId> sampled = meta_sample(present, base, k, rng);
    const MplGrads g = mpl_grads(batch, sampled, res.prompts, words, enc, cfg.tau);
    if (!std::isfinite(g.loss_p) || !std::isfinite(g.loss_n))
      throw DivergenceError("prompt learning diverged at step " + std::to_string(step) + " (level " +
                            std::to_string(level) + ")");
    res.curve.push_back({level, step, g.loss_p, g.loss_n});

    const double lr = prompt_learning_rate(cfg, step);
    if (cfg.learn_fg) {
      for (std::size_t i = 0; i < res.prompts.fg.length(); ++i) {
        axpy(-lr, g.fg_from_p[i], res.prompts.fg.context[i]);
        if (cfg.joint_grads) axpy(-lr, g.fg_from_n[i], res.prompts.fg.context[i]);
      }
    }
    if (cfg.learn_bg) {
      for (std::size_t i = 0; i < res.prompts.bg.length(); ++i) {
        axpy(-lr, g.bg_from_n[i], res.prompts.bg.context[i]);
        if (cfg.joint_grads || cfg.bg_from_p) axpy(-lr, g.bg_from_p[i], res.prompts.bg.context[i]);
      }
    }
  }
  return res;
}

struct EnsembleTrainResult {
  PromptEnsemble ensemble;
  std::vector<PromptLossRow> curve;
};

// One prompt pair per IoU level, all from the same seed; the ensemble
// averages their class embeddings on the sphere.
inline EnsembleTrainResult level_ensemble(std::span<const std::vector<ProposalSample>> levels,
                                          std::span<const ProposalSample> negatives, std::span<const ClassId> base,
                                          const WordEmbeddingTable& words, const FrozenTextEncoder& enc,
                                          const TrainConfig& cfg) {
  if (levels.size() != kIouLevels) throw ConfigError("level ensemble needs exactly 5 IoU levels");
  EnsembleTrainResult out;
  out.ensemble.seed = cfg.seed;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].empty()) throw ConfigError("IoU level " + std::to_string(l) + " has no positive proposals");
    PromptTrainResult r = train_prompts(levels[l], negatives, base, words, enc, cfg, l);
    out.ensemble.members.push_back(std::move(r.prompts));
    out.curve.insert(out.curve.end(), r.curve.begin(), r.curve.end());
  }
  return out;
}

}  // namespace mic
