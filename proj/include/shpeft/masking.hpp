// SPDX-License-Identifier: Apache-2.0
//
// Binary trainable-weight masks: global top-k thresholding over scores,
// and the fixed-pattern baselines (full / head-only / bias-only /
// norm-only / attention-only / random-k).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shpeft/importance.hpp"
#include "shpeft/model.hpp"

namespace shpeft {

struct Mask {
  std::vector<std::uint8_t> bits;  // one byte per element, 0 or 1
  double budget = 0.0;             // requested fraction k
  double tau = 0.0;                // smallest selected score
  std::int64_t selected = 0;       // budget-space selection count

  std::int64_t popcount() const;
  std::uint64_t digest() const;
};

// Exactly floor(k*N) largest scores; ties broken by ascending flat index.
Mask select_topk(const std::vector<double>& scores, double k);

// Top-k over the backbone (head excluded from the budget unless
// include_head_in_budget), with head bits forced on.
Mask shpeft_mask(const ScoreMap& scores, const ParameterRegistry& registry, double k,
                 bool include_head_in_budget = false);

enum class BaselinePattern { full, head_only, bias_only, norm_only, attention_only, random_k };

const char* pattern_name(BaselinePattern p);

// Head bits are always on (the fresh head must train).
Mask baseline_mask(const ParameterRegistry& registry, BaselinePattern pattern, double k = 0.0,
                   std::uint64_t seed = 0);

struct RoleStat {
  Role role;
  std::int64_t total = 0;
  std::int64_t selected = 0;
  double fraction = 0.0;
};

std::vector<RoleStat> mask_stats(const Mask& mask, const ParameterRegistry& registry);

}  // namespace shpeft
