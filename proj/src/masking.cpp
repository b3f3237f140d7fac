// SPDX-License-Identifier: Apache-2.0
#include "shpeft/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shpeft/rng.hpp"

namespace shpeft {

std::int64_t Mask::popcount() const {
  std::int64_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

std::uint64_t Mask::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bits) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

// Selects exactly `count` indices from `eligible` with the largest scores,
// ties by ascending flat index, via k-th order statistic partitioning.
void select_into(const std::vector<double>& scores, std::vector<std::int64_t>& eligible,
                 std::int64_t count, Mask& mask) {
  auto better = [&scores](std::int64_t a, std::int64_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::nth_element(eligible.begin(), eligible.begin() + (count - 1), eligible.end(), better);
  mask.tau = scores[eligible[count - 1]];
  for (std::int64_t i = 0; i < count; ++i) mask.bits[eligible[i]] = 1;
  mask.selected = count;
}

}  // namespace

Mask select_topk(const std::vector<double>& scores, double k) {
  if (!(k > 0.0) || k > 1.0) throw UsageError("select_topk: k must be in (0, 1]");
  for (double v : scores)
    if (!std::isfinite(v)) throw NumericError("select_topk: non-finite score");
  const std::int64_t n = static_cast<std::int64_t>(scores.size());
  const std::int64_t count = static_cast<std::int64_t>(std::floor(k * n));
  if (count < 1)
    throw UsageError("select_topk: budget k=" + std::to_string(k) + " selects 0 of " +
                     std::to_string(n) + " elements");
  Mask m;
  m.bits.assign(n, 0);
  m.budget = k;
  std::vector<std::int64_t> eligible(n);
  std::iota(eligible.begin(), eligible.end(), std::int64_t(0));
  select_into(scores, eligible, count, m);
  return m;
}

Mask shpeft_mask(const ScoreMap& scores, const ParameterRegistry& registry, double k,
                 bool include_head_in_budget) {
  if (static_cast<std::int64_t>(scores.values.size()) != registry.total)
    throw UsageError("shpeft_mask: score map length does not match registry");
  if (!(k > 0.0) || k > 1.0) throw UsageError("shpeft_mask: k must be in (0, 1]");
  Mask m;
  m.bits.assign(registry.total, 0);
  m.budget = k;
  std::vector<std::int64_t> eligible;
  eligible.reserve(registry.total);
  for (const auto& e : registry.entries) {
    if (e.is_head() && !include_head_in_budget) continue;
    for (std::int64_t i = 0; i < e.count; ++i) eligible.push_back(e.offset + i);
  }
  const std::int64_t count =
      static_cast<std::int64_t>(std::floor(k * static_cast<double>(eligible.size())));
  if (count < 1)
    throw UsageError("shpeft_mask: budget k=" + std::to_string(k) + " selects 0 of " +
                     std::to_string(eligible.size()) + " budgeted elements");
  select_into(scores.values, eligible, count, m);
  if (!include_head_in_budget)
    for (std::int64_t i : registry.head_index()) m.bits[i] = 1;
  return m;
}

const char* pattern_name(BaselinePattern p) {
  switch (p) {
    case BaselinePattern::full: return "full";
    case BaselinePattern::head_only: return "head-only";
    case BaselinePattern::bias_only: return "bias-only";
    case BaselinePattern::norm_only: return "norm-only";
    case BaselinePattern::attention_only: return "attention-only";
    case BaselinePattern::random_k: return "random-k";
  }
  return "?";
}

Mask baseline_mask(const ParameterRegistry& registry, BaselinePattern pattern, double k,
                   std::uint64_t seed) {
  Mask m;
  m.bits.assign(registry.total, 0);
  switch (pattern) {
    case BaselinePattern::full:
      std::fill(m.bits.begin(), m.bits.end(), 1);
      m.budget = 1.0;
      m.selected = registry.total;
      return m;
    case BaselinePattern::head_only:
      break;  // backbone stays zero
    case BaselinePattern::bias_only:
      for (std::int64_t i : registry.role_index(Role::bias)) m.bits[i] = 1;
      break;
    case BaselinePattern::norm_only:
      for (std::int64_t i : registry.role_index(Role::norm)) m.bits[i] = 1;
      break;
    case BaselinePattern::attention_only: {
      auto idx = registry.role_index(Role::attention);
      if (idx.empty())
        throw UsageError("baseline_mask: attention-only is invalid for this model family");
      for (std::int64_t i : idx) m.bits[i] = 1;
      break;
    }
    case BaselinePattern::random_k: {
      std::vector<std::int64_t> backbone;
      for (const auto& e : registry.entries)
        if (!e.is_head())
          for (std::int64_t i = 0; i < e.count; ++i) backbone.push_back(e.offset + i);
      const std::int64_t count =
          static_cast<std::int64_t>(std::floor(k * static_cast<double>(backbone.size())));
      if (count < 1)
        throw UsageError("baseline_mask: random-k budget selects 0 elements");
      Rng rng(seed);
      rng.shuffle(backbone);
      for (std::int64_t i = 0; i < count; ++i) m.bits[backbone[i]] = 1;
      m.budget = k;
      break;
    }
  }
  for (std::int64_t i : registry.head_index()) m.bits[i] = 1;
  m.selected = m.popcount();
  return m;
}

std::vector<RoleStat> mask_stats(const Mask& mask, const ParameterRegistry& registry) {
  if (static_cast<std::int64_t>(mask.bits.size()) != registry.total)
    throw UsageError("mask_stats: mask length does not match registry");
  std::vector<RoleStat> stats;
  for (Role r : {Role::bias, Role::norm, Role::attention, Role::mlp, Role::embed, Role::head}) {
    RoleStat s;
    s.role = r;
    for (const auto& e : registry.entries)
      if (e.role == r) {
        s.total += e.count;
        for (std::int64_t i = 0; i < e.count; ++i) s.selected += mask.bits[e.offset + i];
      }
    s.fraction = s.total > 0 ? static_cast<double>(s.selected) / s.total : 0.0;
    stats.push_back(s);
  }
  return stats;
}

}  // namespace shpeft
