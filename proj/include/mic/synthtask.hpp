#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mic/encoder.hpp"
#include "mic/numerics.hpp"
#include "mic/prompt.hpp"

namespace mic {

// Parameters of a synthetic open-vocabulary world. Classes are grouped into
// clusters of look-alikes; novel classes share clusters with base classes.
struct TaskSpec {
  int n_base = 40;
  int n_novel = 10;
  std::size_t dim = 64;
  int cluster_count = 10;
  double spread = 0.5;           // radians between a class prototype and its cluster center
  double proposal_sigma = 0.12;  // per-coordinate foreground noise
  double iou_alpha = 5.0;        // foreground IoU ~ Beta(alpha, beta)
  double iou_beta = 2.0;
  double bg_iou_max = 0.05;  // background IoU ~ Uniform(0, bg_iou_max)
  double bg_noise = 0.15;    // per-coordinate spread of background directions around their mode
  double iou_mix = 1.0;      // weight of background mixed into a foreground proposal at IoU 0
  double word_noise = 0.05;  // sigma_w of the word-embedding noise
  double text_offset = 0.3;  // length of the frozen encoder's template bias
  bool identity_text_map = false;
  std::uint64_t seed = 42;

  void validate() const {
    if (n_base < 2) throw ConfigError("a world needs at least two base classes");
    if (n_novel < 0) throw ConfigError("n_novel must be non-negative");
    if (dim < 3) throw ConfigError("embedding dimension must be at least 3");
    if (cluster_count < 1) throw ConfigError("cluster_count must be positive");
    if (!(spread > 0.0)) throw ConfigError("cluster spread must be positive");
    if (proposal_sigma < 0.0 || word_noise < 0.0 || text_offset < 0.0 || bg_noise < 0.0 || iou_mix < 0.0)
      throw ConfigError("noise levels must be non-negative");
    if (!(iou_alpha > 0.0) || !(iou_beta > 0.0)) throw ConfigError("Beta IoU parameters must be positive");
    if (!(bg_iou_max > 0.0) || bg_iou_max > 1.0) throw ConfigError("bg_iou_max must lie in (0, 1]");
  }
};

struct ProposalSample {
  Vec embedding;
  double iou = 0.0;
  ClassId label = kBackground;
  std::uint64_t tick = 0;

  bool is_background() const { return label == kBackground; }
};

struct LabeledEmbedding {
  Vec f;
  ClassId label = kBackground;
};

struct SyntheticWorld {
  TaskSpec spec;
  std::vector<Vec> centers;
  Vec bg_center;  // mode of the background directions
  std::vector<Vec> prototypes;  // indexed by ClassId
  std::vector<int> cluster_of;
  Vocabulary vocab;
  Mat text_map;  // G: prototype -> word space
  WordEmbeddingTable words;
  FrozenTextEncoder encoder;

  std::size_t class_count() const { return prototypes.size(); }
};

// Unit vector at angle `theta` from `center` along a random tangent direction.
inline Vec rotate_away(const Vec& center, double theta, Rng& rng) {
  Vec tangent;
  for (;;) {
    tangent = gaussian_vec(rng, center.size(), 1.0);
    axpy(-dot(tangent, center), center, tangent);
    if (norm(tangent) > 1e-8) break;
  }
  tangent = normalized(tangent);
  Vec p(center.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::cos(theta) * center[i] + std::sin(theta) * tangent[i];
  return normalized(p);
}

// Class c sits in cluster c mod cluster_count, so with n_base a multiple of
// the cluster count every novel class has base-class neighbours.
inline SyntheticWorld gen_world(const TaskSpec& spec) {
  spec.validate();
  SyntheticWorld w;
  w.spec = spec;
  w.encoder = FrozenTextEncoder::random(spec.dim, spec.dim, spec.seed ^ 0x7e47e4c0de5eedULL);

  Rng rng(spec.seed);
  for (int k = 0; k < spec.cluster_count; ++k) w.centers.push_back(random_unit(rng, spec.dim));

  // Template bias: a random mixture of cluster centers, so the shared text
  // component favours some concept groups over others.
  if (spec.text_offset > 0.0) {
    Rng orng(derive_seed(spec.seed, 8));
    Vec o(spec.dim, 0.0);
    std::normal_distribution<double> g(0.0, 1.0);
    for (const Vec& c : w.centers) axpy(g(orng), c, o);
    o = normalized(o);
    scale(o, spec.text_offset);
    w.encoder = FrozenTextEncoder(w.encoder.weights(), std::move(o), w.encoder.seed());
  }

  const int total = spec.n_base + spec.n_novel;
  for (int c = 0; c < total; ++c) {
    const int k = c % spec.cluster_count;
    w.cluster_of.push_back(k);
    w.prototypes.push_back(rotate_away(w.centers[static_cast<std::size_t>(k)], spec.spread, rng));
    (c < spec.n_base ? w.vocab.base : w.vocab.novel).push_back(c);
  }

  // The ground-truth text map inverts the encoder's linear part, W G = I, so
  // the unprompted text embedding of class c points at its prototype.
  if (spec.identity_text_map) {
    w.text_map = Mat::identity(spec.dim);
  } else {
    const Mat& wt = w.encoder.weights();
    w.text_map = Mat(wt.cols(), wt.rows());
    for (std::size_t r = 0; r < wt.rows(); ++r)
      for (std::size_t c = 0; c < wt.cols(); ++c) w.text_map(c, r) = wt(r, c);
  }

  std::vector<Vec> words;
  for (const Vec& p : w.prototypes) {
    Vec wc = matvec(w.text_map, p);
    if (spec.word_noise > 0.0) axpy(1.0, gaussian_vec(rng, spec.dim, spec.word_noise), wc);
    words.push_back(normalized(wc));
  }
  w.words = WordEmbeddingTable(std::move(words), spec.seed);
  Rng bg_rng(derive_seed(spec.seed, 7));
  w.bg_center = random_unit(bg_rng, spec.dim);
  return w;
}

struct IouParams {
  double alpha = 5.0;
  double beta = 2.0;
};

inline double sample_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

// A direction drawn around the world's background mode.
inline Vec background_direction(const SyntheticWorld& w, Rng& rng) {
  Vec r = w.bg_center;
  if (w.spec.bg_noise > 0.0) axpy(1.0, gaussian_vec(rng, r.size(), w.spec.bg_noise), r);
  return normalized(r);
}

// Foreground proposals of class `c`:
//   normalize(prototype + N(0, sigma^2 I) + iou_mix * (1 - iou) * r_bg)
// so a loosely fitting box carries background content.
inline std::vector<ProposalSample> gen_proposals(const SyntheticWorld& w, ClassId c, std::size_t n, double sigma,
                                                 IouParams iou, Rng& rng) {
  if (c < 0 || static_cast<std::size_t>(c) >= w.class_count()) throw ConfigError("unknown class id");
  const Vec& proto = w.prototypes[static_cast<std::size_t>(c)];
  std::vector<ProposalSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ProposalSample s;
    s.iou = sample_beta(rng, iou.alpha, iou.beta);
    Vec e = proto;
    if (sigma > 0.0) axpy(1.0, gaussian_vec(rng, proto.size(), sigma), e);
    if (w.spec.iou_mix > 0.0) axpy(w.spec.iou_mix * (1.0 - s.iou), background_direction(w, rng), e);
    s.embedding = normalized(e);
    s.label = c;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ProposalSample> gen_proposals(const SyntheticWorld& w, ClassId c, std::size_t n, Rng& rng) {
  return gen_proposals(w, c, n, w.spec.proposal_sigma, {w.spec.iou_alpha, w.spec.iou_beta}, rng);
}

// Background proposals: a background direction mixed with a random object
// prototype, normalize(a * r + (1 - a) * p), a ~ U(0.5, 1).
inline std::vector<ProposalSample> gen_background(const SyntheticWorld& w, std::size_t n, double iou_max, Rng& rng) {
  std::uniform_real_distribution<double> mix(0.5, 1.0);
  std::uniform_real_distribution<double> iou(0.0, iou_max);
  std::uniform_int_distribution<std::size_t> pick(0, w.class_count() - 1);
  std::vector<ProposalSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = mix(rng);
    Vec e = background_direction(w, rng);
    scale(e, a);
    axpy(1.0 - a, w.prototypes[pick(rng)], e);
    ProposalSample s;
    s.embedding = normalized(e);
    s.iou = iou(rng);
    s.label = kBackground;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ProposalSample> gen_background(const SyntheticWorld& w, std::size_t n, Rng& rng) {
  return gen_background(w, n, w.spec.bg_iou_max, rng);
}

inline constexpr std::size_t kIouLevels = 5;

// Level l covers [0.5 + 0.1 l, 0.6 + 0.1 l); IoU 1.0 closes the top level.
// Returns -1 below 0.5.
inline int iou_level(double iou) {
  if (iou < 0.5) return -1;
  const int level = static_cast<int>(std::floor((iou - 0.5) * 10.0 + 1e-12));
  return std::min(level, static_cast<int>(kIouLevels) - 1);
}

inline std::array<std::vector<ProposalSample>, kIouLevels> gen_iou_level_datasets(
    std::span<const ProposalSample> positives) {
  std::array<std::vector<ProposalSample>, kIouLevels> levels;
  for (const ProposalSample& s : positives) {
    const int l = iou_level(s.iou);
    if (l >= 0) levels[static_cast<std::size_t>(l)].push_back(s);
  }
  return levels;
}

inline void write_task_spec(std::ostream& os, const TaskSpec& s) {
  os << "n_base " << s.n_base << "\nn_novel " << s.n_novel << "\ndim " << s.dim << "\ncluster_count "
     << s.cluster_count << "\nspread " << format_double(s.spread) << "\nproposal_sigma "
     << format_double(s.proposal_sigma) << "\niou_alpha " << format_double(s.iou_alpha) << "\niou_beta "
     << format_double(s.iou_beta) << "\nbg_iou_max " << format_double(s.bg_iou_max) << "\nbg_noise " << format_double(s.bg_noise)
     << "\niou_mix " << format_double(s.iou_mix) << "\nword_noise "
     << format_double(s.word_noise) << "\ntext_offset " << format_double(s.text_offset) << "\nidentity_text_map "
     << (s.identity_text_map ? 1 : 0) << "\nworld_seed " << s.seed << '\n';
}

inline TaskSpec read_task_spec(std::istream& is) {
  TaskSpec s;
  s.n_base = read_field<int>(is, "n_base");
  s.n_novel = read_field<int>(is, "n_novel");
  s.dim = read_field<std::size_t>(is, "dim");
  s.cluster_count = read_field<int>(is, "cluster_count");
  s.spread = std::stod(read_field<std::string>(is, "spread"));
  s.proposal_sigma = std::stod(read_field<std::string>(is, "proposal_sigma"));
  s.iou_alpha = std::stod(read_field<std::string>(is, "iou_alpha"));
  s.iou_beta = std::stod(read_field<std::string>(is, "iou_beta"));
  s.bg_iou_max = std::stod(read_field<std::string>(is, "bg_iou_max"));
  s.bg_noise = std::stod(read_field<std::string>(is, "bg_noise"));
  s.iou_mix = std::stod(read_field<std::string>(is, "iou_mix"));
  s.word_noise = std::stod(read_field<std::string>(is, "word_noise"));
  s.text_offset = std::stod(read_field<std::string>(is, "text_offset"));
  s.identity_text_map = read_field<int>(is, "identity_text_map") != 0;
  s.seed = read_field<std::uint64_t>(is, "world_seed");
  return s;
}

// World file: the task spec followed by every generated tensor, so a stored world
// can be checked against regeneration bit for bit.
inline void write_world(std::ostream& os, const SyntheticWorld& w) {
  os << "mic-world 1\n";
  write_task_spec(os, w.spec);
  os << "classes " << w.class_count() << '\n';
  for (std::size_t c = 0; c < w.class_count(); ++c) {
    os << "class " << c << ' ' << (w.vocab.is_base(static_cast<ClassId>(c)) ? "base" : "novel") << ' '
       << w.cluster_of[c] << '\n';
    write_values(os, w.prototypes[c]);
    write_values(os, w.words[c]);
  }
  write_encoder(os, w.encoder);
}

inline SyntheticWorld read_world(std::istream& is) {
  expect_token(is, "mic-world");
  expect_token(is, "1");
  SyntheticWorld w;
  w.spec = read_task_spec(is);
  const auto n = read_field<std::size_t>(is, "classes");
  std::vector<Vec> words;
  for (std::size_t c = 0; c < n; ++c) {
    expect_token(is, "class");
    std::size_t id = 0;
    std::string role;
    int cluster = 0;
    if (!(is >> id >> role >> cluster) || id != c) throw ArtifactError("bad class record");
    (role == "base" ? w.vocab.base : w.vocab.novel).push_back(static_cast<ClassId>(c));
    w.cluster_of.push_back(cluster);
    w.prototypes.push_back(read_values(is, w.spec.dim));
    words.push_back(read_values(is, w.spec.dim));
  }
  w.words = WordEmbeddingTable(std::move(words), w.spec.seed);
  w.encoder = read_encoder(is);
  // Centers, the background mode and the text map are derived state;
  // regenerate them.
  const SyntheticWorld fresh = gen_world(w.spec);
  w.centers = fresh.centers;
  w.bg_center = fresh.bg_center;
  w.text_map = fresh.text_map;
  return w;
}

}  // namespace mic
