#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mic/encoder.hpp"
#include "mic/icl.hpp"
#include "mic/membank.hpp"
#include "mic/mpl.hpp"
#include "mic/numerics.hpp"
#include "mic/prompt.hpp"
#include "mic/trainer.hpp"

namespace mic {

struct GradCheckEntry {
  std::string name;  // "<loss>/<wrt>"
  double max_rel_err = 0.0;
  std::size_t checks = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::size_t instances = 0;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  bool passed(double tol) const { return max_rel_err() < tol; }
};

// A small seeded problem touching every trainable quantity.
struct MicroInstance {
  std::size_t classes = 0;
  std::size_t dim = 0;
  double tau = 0.1;
  FrozenTextEncoder encoder;
  WordEmbeddingTable words;
  std::vector<ClassId> ids;
  PromptPair prompts;
  MetaBatch batch;
  ProjectionNet net;
  MemoryBank bank;
  Detector detector;
  std::vector<ProposalSample> proposals;
  TrainConfig cfg;
  double alpha = 0.5;
};

inline MicroInstance make_micro_instance(std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, 1000 + index));
  MicroInstance m;
  m.classes = 2 + index % 5;
  m.dim = index % 2 ? 16 : 8;
  static constexpr double kTaus[] = {0.05, 0.1, 0.5};
  m.tau = kTaus[index % 3];
  const std::size_t d = m.dim;

  m.encoder = FrozenTextEncoder::random(d, d, derive_seed(seed, 2000 + index), 0.3);
  std::vector<Vec> w;
  for (std::size_t c = 0; c < m.classes; ++c) {
    w.push_back(random_unit(rng, d));
    m.ids.push_back(static_cast<ClassId>(c));
  }
  m.words = WordEmbeddingTable(std::move(w), seed);

  m.prompts = init_prompts(3, 4, d, derive_seed(seed, 3000 + index));
  for (Vec& v : m.prompts.fg.context) v = gaussian_vec(rng, d, 0.3);
  for (Vec& v : m.prompts.bg.context) v = gaussian_vec(rng, d, 0.3);
  std::uniform_int_distribution<std::size_t> pick(0, m.classes - 1);
  for (std::size_t i = 0; i < 5; ++i) m.batch.positives.push_back({gaussian_vec(rng, d, 1.0), m.ids[pick(rng)]});
  for (std::size_t i = 0; i < 3; ++i) m.batch.negatives.push_back(gaussian_vec(rng, d, 1.0));

  m.cfg.tau_cls = m.tau;
  m.cfg.gamma = 0.2;
  m.cfg.literal_icl_denominator = index % 4 == 3;
  m.cfg.u_pos = 0.7;
  m.cfg.u_neg = 0.2;
  m.cfg.fg_iou_threshold = 0.5;

  const std::size_t proj = 4;
  m.net = ProjectionNet::random(d, 8, proj, derive_seed(seed, 4000 + index));
  for (double& b : m.net.b1) b = 0.1;
  m.bank = MemoryBank(m.ids, 8);
  std::uniform_int_distribution<std::size_t> fill(2, 4);
  for (ClassId c : m.ids) {
    std::vector<ProposalSample> q(fill(rng));
    for (auto& s : q) s = {random_unit(rng, proj), 0.9, c, 0};
    m.bank.push(c, q);
  }
  std::vector<ProposalSample> bg(fill(rng));
  for (auto& s : bg) s = {random_unit(rng, proj), 0.0, kBackground, 0};
  m.bank.push(kBackground, bg);

  m.detector.adapter = Mat::identity(d);
  for (double& v : m.detector.adapter.values()) v += std::normal_distribution<double>(0.0, 0.2)(rng);
  m.detector.net = m.net;
  static constexpr double kIous[] = {0.95, 0.85, 0.6, 0.3, 0.1, 0.05};
  for (std::size_t i = 0; i < 6; ++i) {
    const bool bg_sample = i >= 4;
    m.proposals.push_back({gaussian_vec(rng, d, 1.0), kIous[i], bg_sample ? kBackground : m.ids[pick(rng)], 0});
  }
  m.alpha = 0.5;
  return m;
}

namespace detail {

inline Vec flatten_vecs(const std::vector<Vec>& vs) {
  Vec out;
  for (const Vec& v : vs) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::vector<Vec> unflatten_vecs(std::span<const double> flat, std::size_t n, std::size_t d) {
  std::vector<Vec> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(flat.begin() + static_cast<std::ptrdiff_t>(i * d),
                                                    flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  return out;
}

inline void record(std::map<std::string, GradCheckEntry>& acc, const std::string& name, const Vec& analytic,
                   const Vec& numeric) {
  auto& e = acc[name];
  e.name = name;
  e.max_rel_err = std::max(e.max_rel_err, relative_error(analytic, numeric, 1e-8));
  ++e.checks;
}

}  // namespace detail

// Central differences against every analytic gradient on `instances` seeded
// micro-instances; reports the worst relative error per quantity.
inline GradCheckReport run_gradcheck(std::uint64_t seed, std::size_t instances = 20, double h = 1e-5) {
  std::map<std::string, GradCheckEntry> acc;
  for (std::size_t k = 0; k < instances; ++k) {
    const MicroInstance m = make_micro_instance(seed, k);
    const std::size_t d = m.dim;

    // Prompt losses against both context sets.
    const MplGrads g = mpl_grads(m.batch, m.ids, m.prompts, m.words, m.encoder, m.tau);
    auto prompt_loss = [&](bool positive, bool fg_side, std::span<const double> x) {
      PromptPair p = m.prompts;
      if (fg_side) p.fg.context = detail::unflatten_vecs(x, p.fg.length(), d);
      else p.bg.context = detail::unflatten_vecs(x, p.bg.length(), d);
      const SampledVocab vocab{m.ids, class_embeddings(p.fg, m.ids, m.words, m.encoder)};
      return positive ? loss_p(m.batch.positives, vocab, background_embedding(p.bg, m.encoder), m.tau)
                      : loss_n(m.batch.negatives, vocab, m.tau);
    };
    const Vec fg0 = detail::flatten_vecs(m.prompts.fg.context);
    const Vec bg0 = detail::flatten_vecs(m.prompts.bg.context);
    detail::record(acc, "loss_p/V_fg", detail::flatten_vecs(g.fg_from_p),
                   finite_diff_grad([&](const Vec& x) { return prompt_loss(true, true, x); }, fg0, h));
    detail::record(acc, "loss_p/V_bg", detail::flatten_vecs(g.bg_from_p),
                   finite_diff_grad([&](const Vec& x) { return prompt_loss(true, false, x); }, bg0, h));
    detail::record(acc, "loss_n/V_fg", detail::flatten_vecs(g.fg_from_n),
                   finite_diff_grad([&](const Vec& x) { return prompt_loss(false, true, x); }, fg0, h));
    detail::record(acc, "loss_n/V_bg", detail::flatten_vecs(g.bg_from_n),
                   finite_diff_grad([&](const Vec& x) { return prompt_loss(false, false, x); }, bg0, h));

    // Contrastive loss against the projection net and its inputs.
    std::vector<LabeledEmbedding> feats;
    for (const auto& s : m.proposals) feats.push_back({s.embedding, s.label});
    const IclOptions opt{m.cfg.gamma, m.cfg.literal_icl_denominator};
    const IclGrads ig = icl_grads(feats, m.net, m.bank, opt);
    auto icl_at = [&](const ProjectionNet& net, const std::vector<LabeledEmbedding>& fs) {
      std::vector<Anchor> anchors;
      for (const auto& f : fs) anchors.push_back({project(net, f.f), f.label});
      return icl_loss(anchors, m.bank, opt);
    };
    detail::record(acc, "icl/net", ig.net.flatten(), finite_diff_grad([&](const Vec& x) {
                     ProjectionNet net = m.net;
                     net.assign(x);
                     return icl_at(net, feats);
                   }, m.net.flatten(), h));
    Vec f0;
    for (const auto& f : feats) f0.insert(f0.end(), f.f.begin(), f.f.end());
    detail::record(acc, "icl/features", detail::flatten_vecs(ig.features), finite_diff_grad([&](const Vec& x) {
                     auto fs = feats;
                     const auto vs = detail::unflatten_vecs(x, fs.size(), d);
                     for (std::size_t i = 0; i < fs.size(); ++i) fs[i].f = vs[i];
                     return icl_at(m.net, fs);
                   }, f0, h));

    // Classification loss against its input features.
    const Mat T = class_embeddings(m.prompts.fg, m.ids, m.words, m.encoder);
    const Vec t_bg = background_embedding(m.prompts.bg, m.encoder);
    std::vector<ClassificationExample> ex;
    for (std::size_t i = 0; i < m.proposals.size(); ++i)
      ex.push_back({m.proposals[i].embedding, i < m.classes ? i : m.classes});
    const ClsGrads cg = loss_cls_grads(ex, T, t_bg, m.tau);
    detail::record(acc, "loss_cls/features", detail::flatten_vecs(cg.features), finite_diff_grad([&](const Vec& x) {
                     auto e = ex;
                     const auto vs = detail::unflatten_vecs(x, e.size(), d);
                     for (std::size_t i = 0; i < e.size(); ++i) e[i].f = vs[i];
                     return loss_cls(e, T, t_bg, m.tau);
                   }, f0, h));

    // The combined detector loss against the adapter and the projection net.
    std::map<ClassId, std::size_t> rows;
    for (std::size_t i = 0; i < m.ids.size(); ++i) rows[m.ids[i]] = i;
    const DetectorGrads dg = detector_grads(m.detector, m.proposals, m.bank, T, t_bg, rows, m.cfg, m.alpha);
    auto det_loss = [&](const Detector& det) {
      return detector_grads(det, m.proposals, m.bank, T, t_bg, rows, m.cfg, m.alpha).loss_det;
    };
    detail::record(acc, "loss_det/adapter", Vec(dg.adapter.values().begin(), dg.adapter.values().end()),
                   finite_diff_grad([&](const Vec& x) {
                     Detector det = m.detector;
                     std::copy(x.begin(), x.end(), det.adapter.values().begin());
                     return det_loss(det);
                   }, Vec(m.detector.adapter.values().begin(), m.detector.adapter.values().end()), h));
    detail::record(acc, "loss_det/net", dg.net.flatten(), finite_diff_grad([&](const Vec& x) {
                     Detector det = m.detector;
                     det.net.assign(x);
                     return det_loss(det);
                   }, m.detector.net.flatten(), h));
  }
  GradCheckReport r;
  r.instances = instances;
  for (auto& [name, e] : acc) r.entries.push_back(e);
  return r;
}

}  // namespace mic
