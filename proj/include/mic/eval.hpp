#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mic/config.hpp"
#include "mic/icl.hpp"
#include "mic/numerics.hpp"
#include "mic/prompt.hpp"
#include "mic/synthtask.hpp"
#include "mic/trainer.hpp"

namespace mic {

struct EvalReport {
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double overall_acc = 0.0;
  double novel_as_base = 0.0;
  double novel_correct = 0.0;
  double novel_as_other_novel = 0.0;
  double novel_as_background = 0.0;
  double bg_false_positive = 0.0;
  double intra_cos = 0.0;  // projection space; zero without a detector
  double inter_cos = 0.0;
  std::vector<std::size_t> row_counts;  // test samples per row of `confusion`
  // Rows and columns follow the vocabulary order (base then novel), with
  // background last.
  std::vector<std::vector<std::size_t>> confusion;
};

struct TestSet {
  std::vector<ProposalSample> foreground;
  std::vector<ProposalSample> background;
};

// Held-out proposals for every class, foreground kept at IoU >= 0.5.
inline TestSet gen_test_set(const SyntheticWorld& w, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 4));
  TestSet t;
  for (ClassId c : w.vocab.all())
    for (auto& s : gen_proposals(w, c, cfg.test_per_class, rng))
      if (s.iou >= cfg.fg_iou_threshold) t.foreground.push_back(std::move(s));
  t.background = gen_background(w, cfg.test_background, rng);
  return t;
}

// Mean pairwise cosine within and across classes, from per-class sums:
// sum over same-class pairs i != j of z_i.z_j is |S_c|^2 - n_c.
inline std::pair<double, double> intra_inter_cosine(std::span<const LabeledEmbedding> z) {
  std::map<ClassId, Vec> sums;
  std::map<ClassId, double> counts;
  if (z.empty()) return {0.0, 0.0};
  Vec total(z.front().f.size(), 0.0);
  for (const auto& e : z) {
    auto& s = sums[e.label];
    if (s.empty()) s.assign(e.f.size(), 0.0);
    axpy(1.0, e.f, s);
    axpy(1.0, e.f, total);
    counts[e.label] += 1.0;
  }
  double intra_sum = 0.0, intra_pairs = 0.0, sq_counts = 0.0, class_sq = 0.0;
  for (const auto& [c, s] : sums) {
    const double n = counts[c];
    const double ss = dot(s, s);
    intra_sum += ss - n;
    intra_pairs += n * (n - 1.0);
    class_sq += ss;
    sq_counts += n * n;
  }
  const double n = static_cast<double>(z.size());
  const double inter_pairs = n * n - sq_counts;
  return {intra_pairs > 0 ? intra_sum / intra_pairs : 0.0,
          inter_pairs > 0 ? (dot(total, total) - class_sq) / inter_pairs : 0.0};
}

// Classifies held-out proposals against base and novel class embeddings
// generated from the learned prompt. A detector, when given, supplies the
// adapter and the projection space for the cosine statistics.
inline EvalReport eval_classifier(const SyntheticWorld& w, const PromptEnsemble& prompts, const Detector* det,
                                  const TestSet& test, double tau_cls) {
  if (test.foreground.empty() && test.background.empty()) throw ConfigError("empty test set");
  const std::vector<ClassId> ids = w.vocab.all();
  const Mat T = prompts.class_embeddings(ids, w.words, w.encoder);
  const Vec t_bg = prompts.background_embedding(w.encoder);
  const std::size_t C = ids.size();
  std::map<ClassId, std::size_t> row_of;
  for (std::size_t i = 0; i < C; ++i) row_of[ids[i]] = i;

  EvalReport r;
  r.confusion.assign(C + 1, std::vector<std::size_t>(C + 1, 0));
  r.row_counts.assign(C + 1, 0);

  auto predict = [&](const Vec& f) {
    const Vec x = det ? det->adapt(f) : f;
    Vec s = similarity_logits(x, T);
    s.push_back(cosine_sim(x, t_bg));
    (void)tau_cls;  // argmax is temperature-free
    return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
  };

  std::size_t base_n = 0, base_ok = 0, novel_n = 0, novel_ok = 0, novel_base = 0, novel_other = 0, novel_bg = 0;
  std::vector<LabeledEmbedding> projected;
  for (const auto& s : test.foreground) {
    const std::size_t truth = row_of.at(s.label);
    const std::size_t pred = predict(s.embedding);
    ++r.confusion[truth][pred];
    ++r.row_counts[truth];
    const bool correct = pred == truth;
    if (w.vocab.is_base(s.label)) {
      ++base_n;
      base_ok += correct;
    } else {
      ++novel_n;
      if (correct) {
        ++novel_ok;
      } else if (pred == C) {
        ++novel_bg;
      } else if (w.vocab.is_base(ids[pred])) {
        ++novel_base;
      } else {
        ++novel_other;
      }
    }
    if (det) projected.push_back({project(det->net, det->adapt(s.embedding)), s.label});
  }
  std::size_t bg_fp = 0;
  for (const auto& s : test.background) {
    const std::size_t pred = predict(s.embedding);
    ++r.confusion[C][pred];
    ++r.row_counts[C];
    bg_fp += pred != C;
  }

  auto rate = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  r.base_acc = rate(base_ok, base_n);
  r.novel_acc = rate(novel_ok, novel_n);
  r.overall_acc = rate(base_ok + novel_ok, base_n + novel_n);
  r.novel_correct = r.novel_acc;
  r.novel_as_base = rate(novel_base, novel_n);
  r.novel_as_other_novel = rate(novel_other, novel_n);
  r.novel_as_background = rate(novel_bg, novel_n);
  r.bg_false_positive = rate(bg_fp, test.background.size());
  if (det) std::tie(r.intra_cos, r.inter_cos) = intra_inter_cosine(projected);
  return r;
}

struct PipelineResult {
  ProcedureAResult prompts;
  ProcedureBResult detector;
  EvalReport report;
};

// Procedure A, then procedure B, then evaluation, all from one config.
inline PipelineResult run_pipeline(const SyntheticWorld& w, const TrainConfig& cfg) {
  PipelineResult out;
  out.prompts = run_procedure_A(w, cfg);
  out.detector = run_procedure_B(w, out.prompts.prompts, cfg);
  out.report = eval_classifier(w, out.prompts.prompts, &out.detector.detector, gen_test_set(w, cfg), cfg.tau_cls);
  return out;
}

// Configurations of the component ablation, in table order.
enum class AblationRow { fixed_prompt, learnable_prompt, meta_sampling, background_prompt, full };

inline std::string to_string(AblationRow r) {
  switch (r) {
    case AblationRow::fixed_prompt: return "fixed_prompt";
    case AblationRow::learnable_prompt: return "learnable_prompt";
    case AblationRow::meta_sampling: return "mpl";
    case AblationRow::background_prompt: return "bg_prompt";
    case AblationRow::full: return "icl";
  }
  return "unknown";
}

inline constexpr AblationRow kAblationRows[] = {AblationRow::fixed_prompt, AblationRow::learnable_prompt,
                                                AblationRow::meta_sampling, AblationRow::background_prompt,
                                                AblationRow::full};

inline TrainConfig ablation_config(TrainConfig cfg, AblationRow row, std::size_t n_base) {
  const int level = static_cast<int>(row);
  cfg.learn_fg = level >= 1;
  if (level < 2) cfg.meta_k = n_base;
  cfg.learn_bg = level >= 3;
  if (level < 4) cfg.alpha0 = 0.0;
  return cfg;
}

struct AblationCell {
  AblationRow row;
  std::uint64_t seed;
  EvalReport report;
};

inline std::vector<AblationCell> ablation_grid(const SyntheticWorld& w, const TrainConfig& base,
                                               std::span<const AblationRow> rows, std::size_t seeds) {
  std::vector<AblationCell> out;
  for (AblationRow row : rows)
    for (std::size_t s = 0; s < seeds; ++s) {
      TrainConfig cfg = ablation_config(base, row, w.vocab.base.size());
      cfg.seed = base.seed + s;
      out.push_back({row, cfg.seed, run_pipeline(w, cfg).report});
    }
  return out;
}

struct SweepPoint {
  std::size_t k = 0;
  std::vector<double> novel_acc;  // one per seed
  std::vector<double> base_acc;
};

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator).
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<SweepPoint> sweep_sampled_classes(const SyntheticWorld& w, const TrainConfig& base,
                                                     std::span<const std::size_t> ks, std::size_t seeds) {
  std::vector<SweepPoint> out;
  for (std::size_t k : ks) {
    SweepPoint p{k, {}, {}};
    for (std::size_t s = 0; s < seeds; ++s) {
      TrainConfig cfg = base;
      cfg.meta_k = k;
      cfg.seed = base.seed + s;
      const EvalReport r = run_pipeline(w, cfg).report;
      p.novel_acc.push_back(r.novel_acc);
      p.base_acc.push_back(r.base_acc);
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepPoint> pts) {
  os << "k,novel_acc_mean,novel_acc_std,base_acc_mean\n";
  for (const auto& p : pts)
    os << p.k << ',' << format_double(mean(p.novel_acc)) << ',' << format_double(stddev(p.novel_acc)) << ','
       << format_double(mean(p.base_acc)) << '\n';
}

inline void write_ablation_csv(std::ostream& os, std::span<const AblationCell> cells) {
  os << "row,seed,novel_acc,base_acc,novel_as_base\n";
  for (const auto& c : cells)
    os << to_string(c.row) << ',' << c.seed << ',' << format_double(c.report.novel_acc) << ','
       << format_double(c.report.base_acc) << ',' << format_double(c.report.novel_as_base) << '\n';
}

// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
// Ties are dropped before calling.
inline double sign_test_p(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  double binom = 1.0;  // C(n, i)
  for (std::size_t i = 0; i <= n; ++i) {
    if (i >= wins) p += binom;
    binom = binom * static_cast<double>(n - i) / static_cast<double>(i + 1);
  }
  return p / std::ldexp(1.0, static_cast<int>(n));
}

}  // namespace mic
