// SPDX-License-Identifier: Apache-2.0
//
// Per-weight hybrid importance: a task-specific term from gradients
// accumulated over frozen-weight scoring batches, a task-agnostic term
// from weight magnitude, scale-balanced and lambda-mixed.
#pragma once

#include <cstdint>
#include <vector>

#include "shpeft/data.hpp"
#include "shpeft/model.hpp"

namespace shpeft {

enum class Strategy { L1, L2 };

const char* strategy_name(Strategy s);

struct ScoringConfig {
  Strategy strategy = Strategy::L2;
  double lambda = 1.0;
  int batches = 100;        // capped at one epoch
  int batch_size = 32;
  bool include_head = false;
  bool l1_sum_abs = false;  // alternative L1 accumulation: sum of |g| per batch
  std::uint64_t shuffle_seed = 0;
};

struct GradAccum {
  std::vector<double> sum_grad;
  std::vector<double> sum_sq_grad;
  std::vector<double> sum_abs_grad;
  int batches_seen = 0;
};

enum class ScoreKind { task_specific, task_agnostic, hybrid, delta };

struct ScoreMap {
  std::vector<double> values;
  ScoreKind kind = ScoreKind::hybrid;
  Strategy strategy = Strategy::L2;
  double lambda = 0.0;
  double beta = 0.0;  // balance factor, hybrid maps only
};

// Scoring pass over frozen weights: no updates, gradients recorded only.
GradAccum accumulate_gradients(Model& model, const DatasetHandle& data,
                               const ScoringConfig& config);

ScoreMap score_task_specific(const GradAccum& accum, Strategy strategy,
                             bool l1_sum_abs = false);
ScoreMap score_task_agnostic(const WeightBundle& weights, Strategy strategy);

// result = td + lambda * beta * ta, beta = sum(td) / sum(ta) (0 if sum(ta)=0)
ScoreMap combine_hybrid(const ScoreMap& td, const ScoreMap& ta, double lambda);

}  // namespace shpeft
