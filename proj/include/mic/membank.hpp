#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mic/numerics.hpp"
#include "mic/synthtask.hpp"

namespace mic {

// Class-balanced instance memory: one bounded FIFO per base class plus one
// for background. Queue membership is fixed at construction.
class MemoryBank {
 public:
  using Queue = std::deque<ProposalSample>;

  MemoryBank() = default;
  MemoryBank(std::span<const ClassId> base_classes, std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("memory bank capacity must be positive");
    for (ClassId c : base_classes) {
      if (c == kBackground) throw ConfigError("background id used as a base class");
      queues_[c];
    }
    queues_[kBackground];
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t queue_count() const { return queues_.size(); }
  bool has_queue(ClassId c) const { return queues_.count(c) != 0; }
  std::uint64_t next_tick() const { return next_tick_; }

  const Queue& queue(ClassId c) const {
    const auto it = queues_.find(c);
    if (it == queues_.end()) throw std::out_of_range("memory bank has no queue for class " + std::to_string(c));
    return it->second;
  }

  std::vector<ClassId> classes() const {
    std::vector<ClassId> ids;
    for (const auto& [c, q] : queues_) ids.push_back(c);
    return ids;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [c, q] : queues_) n += q.size();
    return n;
  }

  // Appends in order, stamping fresh ticks; evicts from the head once the
  // queue exceeds capacity. Returns the evicted samples oldest first.
  std::vector<ProposalSample> push(ClassId c, std::span<const ProposalSample> samples) {
    const auto it = queues_.find(c);
    if (it == queues_.end()) throw std::out_of_range("memory bank has no queue for class " + std::to_string(c));
    Queue& q = it->second;
    std::vector<ProposalSample> evicted;
    for (const ProposalSample& s : samples) {
      ProposalSample stamped = s;
      stamped.tick = next_tick_++;
      q.push_back(std::move(stamped));
      if (q.size() > capacity_) {
        evicted.push_back(std::move(q.front()));
        q.pop_front();
      }
    }
    return evicted;
  }

  void write(std::ostream& os) const {
    os << "mic-bank 1\ncapacity " << capacity_ << " next_tick " << next_tick_ << " queues " << queues_.size()
       << '\n';
    for (const auto& [c, q] : queues_) {
      const std::size_t dim = q.empty() ? 0 : q.front().embedding.size();
      os << "queue " << c << ' ' << q.size() << ' ' << dim << '\n';
      for (const ProposalSample& s : q) {
        os << s.tick << ' ' << s.label << ' ' << format_double(s.iou) << ' ';
        write_values(os, s.embedding);
      }
    }
  }

  static MemoryBank read(std::istream& is) {
    expect_token(is, "mic-bank");
    expect_token(is, "1");
    MemoryBank b;
    b.capacity_ = read_field<std::size_t>(is, "capacity");
    b.next_tick_ = read_field<std::uint64_t>(is, "next_tick");
    const auto n = read_field<std::size_t>(is, "queues");
    for (std::size_t i = 0; i < n; ++i) {
      expect_token(is, "queue");
      ClassId c = 0;
      std::size_t size = 0, dim = 0;
      if (!(is >> c >> size >> dim)) throw ArtifactError("bad queue header");
      Queue& q = b.queues_[c];
      for (std::size_t j = 0; j < size; ++j) {
        ProposalSample s;
        std::string iou;
        if (!(is >> s.tick >> s.label >> iou)) throw ArtifactError("bad bank entry");
        s.iou = std::stod(iou);
        s.embedding = read_values(is, dim);
        q.push_back(std::move(s));
      }
    }
    return b;
  }

 private:
  std::size_t capacity_ = 0;
  std::uint64_t next_tick_ = 0;
  std::map<ClassId, Queue> queues_;
};

struct FilteredProposals {
  std::map<ClassId, std::vector<ProposalSample>> foreground;
  std::vector<ProposalSample> background;
};

// Foreground keeps labeled candidates with iou > U_p; background keeps
// candidates with iou < U_n. Both inequalities are strict.
inline FilteredProposals filter_proposals(std::span<const ProposalSample> candidates, double u_pos, double u_neg) {
  if (!(u_neg < u_pos)) throw ConfigError("IoU thresholds need U_n < U_p");
  FilteredProposals out;
  for (const ProposalSample& s : candidates) {
    if (!s.is_background() && s.iou > u_pos) {
      out.foreground[s.label].push_back(s);
    } else if (s.iou < u_neg) {
      ProposalSample b = s;
      b.label = kBackground;
      out.background.push_back(std::move(b));
    }
  }
  return out;
}

// Picks up to m candidates least similar to what the queue already holds:
// score = max cosine to any queued entry, ascending, ties by input order.
// Against an empty queue it falls back to greedy farthest-point selection
// seeded by the first candidate.
inline std::vector<ProposalSample> select_dissimilar(const MemoryBank::Queue& queue,
                                                     std::span<const ProposalSample> candidates, std::size_t m) {
  if (candidates.size() <= m) return {candidates.begin(), candidates.end()};
  std::vector<ProposalSample> out;
  if (m == 0) return out;

  if (queue.empty()) {
    std::vector<double> closest(candidates.size(), -std::numeric_limits<double>::infinity());
    std::vector<bool> taken(candidates.size(), false);
    std::size_t pick = 0;
    for (;;) {
      taken[pick] = true;
      out.push_back(candidates[pick]);
      if (out.size() == m) break;
      for (std::size_t i = 0; i < candidates.size(); ++i)
        if (!taken[i])
          closest[i] = std::max(closest[i], cosine_sim(candidates[i].embedding, candidates[pick].embedding));
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < candidates.size(); ++i)
        if (!taken[i] && closest[i] < best) {
          best = closest[i];
          pick = i;
        }
    }
    return out;
  }

  std::vector<double> score(candidates.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    for (const ProposalSample& q : queue) score[i] = std::max(score[i], cosine_sim(candidates[i].embedding, q.embedding));
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&score](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  for (std::size_t i = 0; i < m; ++i) out.push_back(candidates[order[i]]);
  return out;
}

struct BankUpdateSummary {
  std::size_t admitted = 0;
  std::size_t evicted = 0;
  std::size_t filtered_foreground = 0;
  std::size_t filtered_background = 0;
};

// One per-iteration refresh: filter, then per queue select_dissimilar and push.
inline BankUpdateSummary update(MemoryBank& bank, std::span<const ProposalSample> candidates, double u_pos,
                                double u_neg, std::size_t m) {
  if (m >= bank.capacity()) throw ConfigError("bank sample size m must be smaller than capacity M");
  const FilteredProposals f = filter_proposals(candidates, u_pos, u_neg);
  BankUpdateSummary sum;
  sum.filtered_background = f.background.size();
  for (const auto& [c, v] : f.foreground) sum.filtered_foreground += v.size();

  auto admit = [&](ClassId c, std::span<const ProposalSample> group) {
    const auto picked = select_dissimilar(bank.queue(c), group, m);
    sum.admitted += picked.size();
    sum.evicted += bank.push(c, picked).size();
  };
  for (const auto& [c, group] : f.foreground) admit(c, group);
  if (!f.background.empty()) admit(kBackground, f.background);
  return sum;
}

}  // namespace mic
