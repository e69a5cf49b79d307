#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mic/encoder.hpp"
#include "mic/numerics.hpp"

namespace mic {

using ClassId = int;
inline constexpr ClassId kBackground = -1;

enum class TokenPosition { front, middle, end };

inline std::string to_string(TokenPosition p) {
  switch (p) {
    case TokenPosition::front: return "front";
    case TokenPosition::middle: return "middle";
    case TokenPosition::end: return "end";
  }
  return "end";
}

inline TokenPosition parse_token_position(const std::string& s) {
  if (s == "front") return TokenPosition::front;
  if (s == "middle") return TokenPosition::middle;
  if (s == "end") return TokenPosition::end;
  throw ConfigError("unknown class-token position '" + s + "'");
}

struct ForegroundPrompt {
  std::vector<Vec> context;
  TokenPosition position = TokenPosition::end;

  std::size_t length() const { return context.size(); }
  std::size_t dim() const { return context.empty() ? 0 : context.front().size(); }
};

struct BackgroundPrompt {
  std::vector<Vec> context;

  std::size_t length() const { return context.size(); }
  std::size_t dim() const { return context.empty() ? 0 : context.front().size(); }
};

struct PromptPair {
  ForegroundPrompt fg;
  BackgroundPrompt bg;
};

inline std::uint64_t fingerprint(const PromptPair& p) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Vec& v : p.fg.context) h = content_hash(v, h);
  for (const Vec& v : p.bg.context) h = content_hash(v, h);
  return h;
}

struct Vocabulary {
  std::vector<ClassId> base;
  std::vector<ClassId> novel;

  std::size_t size() const { return base.size() + novel.size(); }
  bool is_base(ClassId c) const { return std::find(base.begin(), base.end(), c) != base.end(); }
  bool is_novel(ClassId c) const { return std::find(novel.begin(), novel.end(), c) != novel.end(); }

  // Base classes first, then novel: the row order of the inference classifier.
  std::vector<ClassId> all() const {
    std::vector<ClassId> ids = base;
    ids.insert(ids.end(), novel.begin(), novel.end());
    return ids;
  }
};

// Context vectors drawn i.i.d. from Gaussian(0, 0.02^2).
inline PromptPair init_prompts(std::size_t fg_length, std::size_t bg_length, std::size_t dim, std::uint64_t seed,
                               TokenPosition position = TokenPosition::end) {
  if (fg_length == 0 || bg_length == 0) throw ConfigError("prompt context lengths must be at least 1");
  if (dim == 0) throw ConfigError("prompt dimension must be positive");
  constexpr double kInitStd = 0.02;
  Rng rng(seed);
  PromptPair p;
  p.fg.position = position;
  for (std::size_t i = 0; i < fg_length; ++i) p.fg.context.push_back(gaussian_vec(rng, dim, kInitStd));
  for (std::size_t i = 0; i < bg_length; ++i) p.bg.context.push_back(gaussian_vec(rng, dim, kInitStd));
  return p;
}

// Index of the class word embedding inside the assembled sequence.
inline std::size_t word_slot(std::size_t fg_length, TokenPosition position) {
  switch (position) {
    case TokenPosition::front: return 0;
    case TokenPosition::middle: return (fg_length + 1) / 2;
    case TokenPosition::end: return fg_length;
  }
  return fg_length;
}

inline std::vector<Vec> assemble_class_prompt(const ForegroundPrompt& fg, const Vec& word) {
  if (!fg.context.empty() && word.size() != fg.dim()) throw ConfigError("word embedding dimension mismatch");
  std::vector<Vec> seq;
  seq.reserve(fg.length() + 1);
  const std::size_t slot = word_slot(fg.length(), fg.position);
  for (std::size_t i = 0; i < fg.length(); ++i) {
    if (i == slot) seq.push_back(word);
    seq.push_back(fg.context[i]);
  }
  if (slot == fg.length()) seq.push_back(word);
  return seq;
}

// Row i is the encoded prompt of ids[i].
inline Mat class_embeddings(const ForegroundPrompt& fg, std::span<const ClassId> ids, const WordEmbeddingTable& words,
                            const FrozenTextEncoder& enc) {
  Mat out(ids.size(), enc.output_dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= words.size())
      throw ConfigError("class " + std::to_string(ids[i]) + " has no word embedding");
    try {
      Vec t = encode_text(enc, assemble_class_prompt(fg, words[static_cast<std::size_t>(ids[i])]));
      std::copy(t.begin(), t.end(), out.row(i).begin());
    } catch (const DegenerateError& e) {
      throw DegenerateError("class " + std::to_string(ids[i]) + ": " + e.what());
    }
  }
  return out;
}

inline Vec background_embedding(const BackgroundPrompt& bg, const FrozenTextEncoder& enc) {
  return encode_text(enc, bg.context);
}

// A set of prompt pairs whose class embeddings are averaged on the sphere.
// A single member is the plain (non-ensembled) prompt.
struct PromptEnsemble {
  std::vector<PromptPair> members;
  std::uint64_t seed = 0;

  Mat class_embeddings(std::span<const ClassId> ids, const WordEmbeddingTable& words,
                       const FrozenTextEncoder& enc) const {
    if (members.empty()) throw ConfigError("empty prompt ensemble");
    Mat acc = mic::class_embeddings(members.front().fg, ids, words, enc);
    for (std::size_t m = 1; m < members.size(); ++m) {
      Mat t = mic::class_embeddings(members[m].fg, ids, words, enc);
      axpy(1.0, t.values(), acc.values());
    }
    if (members.size() > 1) {
      for (std::size_t r = 0; r < acc.rows(); ++r) {
        Vec u = normalized(acc.row(r));
        std::copy(u.begin(), u.end(), acc.row(r).begin());
      }
    }
    return acc;
  }

  Vec background_embedding(const FrozenTextEncoder& enc) const {
    if (members.empty()) throw ConfigError("empty prompt ensemble");
    Vec acc = mic::background_embedding(members.front().bg, enc);
    if (members.size() == 1) return acc;
    for (std::size_t m = 1; m < members.size(); ++m) axpy(1.0, mic::background_embedding(members[m].bg, enc), acc);
    return normalized(acc);
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = seed;
    for (const PromptPair& p : members) h = h * 1099511628211ULL ^ mic::fingerprint(p);
    return h;
  }
};

// Text checkpoint:
//   mic-prompts 1
//   members <n> seed <s> position <front|middle|end>
//   fg <L_p> <d>   (L_p lines of d values)
//   bg <L_n> <d>   (L_n lines)          repeated per member
inline void write_prompts(std::ostream& os, const PromptEnsemble& ens) {
  os << "mic-prompts 1\n";
  const TokenPosition pos = ens.members.empty() ? TokenPosition::end : ens.members.front().fg.position;
  os << "members " << ens.members.size() << " seed " << ens.seed << " position " << to_string(pos) << '\n';
  for (const PromptPair& p : ens.members) {
    os << "fg " << p.fg.length() << ' ' << p.fg.dim() << '\n';
    for (const Vec& v : p.fg.context) write_values(os, v);
    os << "bg " << p.bg.length() << ' ' << p.bg.dim() << '\n';
    for (const Vec& v : p.bg.context) write_values(os, v);
  }
}

inline PromptEnsemble read_prompts(std::istream& is) {
  expect_token(is, "mic-prompts");
  expect_token(is, "1");
  PromptEnsemble ens;
  const auto n = read_field<std::size_t>(is, "members");
  ens.seed = read_field<std::uint64_t>(is, "seed");
  const TokenPosition pos = parse_token_position(read_field<std::string>(is, "position"));
  auto read_block = [&is](const std::string& tag) {
    const auto len = read_field<std::size_t>(is, tag);
    std::size_t dim = 0;
    if (!(is >> dim)) throw ArtifactError("missing prompt dimension");
    std::vector<Vec> ctx;
    for (std::size_t i = 0; i < len; ++i) ctx.push_back(read_values(is, dim));
    return ctx;
  };
  for (std::size_t m = 0; m < n; ++m) {
    PromptPair p;
    p.fg.position = pos;
    p.fg.context = read_block("fg");
    p.bg.context = read_block("bg");
    ens.members.push_back(std::move(p));
  }
  return ens;
}

}  // namespace mic
