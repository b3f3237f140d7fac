// SPDX-License-Identifier: Apache-2.0
#include "shpeft/importance.hpp"

#include <cmath>

namespace shpeft {

const char* strategy_name(Strategy s) { return s == Strategy::L1 ? "L1" : "L2"; }

GradAccum accumulate_gradients(Model& model, const DatasetHandle& data,
                               const ScoringConfig& config) {
  if (data.classes != model.spec.classes)
    throw UsageError("scoring: dataset has " + std::to_string(data.classes) +
                     " classes, model head has " + std::to_string(model.spec.classes));
  if (config.batches < 1) throw UsageError("scoring: batches must be >= 1");

  const std::int64_t n = model.registry.total;
  GradAccum acc;
  acc.sum_grad.assign(n, 0.0);
  acc.sum_sq_grad.assign(n, 0.0);
  acc.sum_abs_grad.assign(n, 0.0);

  BatchIter iter(data, config.batch_size, config.shuffle_seed);
  const int budget = static_cast<int>(
      std::min<std::int64_t>(config.batches, iter.batches_per_epoch()));
  FTensor batch;
  std::vector<int> labels;
  for (int b = 0; b < budget; ++b) {
    if (!iter.next(batch, labels)) break;
    model.zero_grads();
    auto loss = cross_entropy_with_logits(model.forward(batch), labels);
    backward_pass(loss);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& e = model.registry.entries[i];
      const auto& g = model.params[i]->grad;
      for (std::int64_t j = 0; j < e.count; ++j) {
        const double gv = static_cast<double>(g[j]);
        if (!std::isfinite(gv))
          throw NumericError("scoring: non-finite gradient in '" + e.name + "' at batch " +
                             std::to_string(b));
        acc.sum_grad[e.offset + j] += gv;
        acc.sum_sq_grad[e.offset + j] += gv * gv;
        acc.sum_abs_grad[e.offset + j] += std::abs(gv);
      }
    }
    acc.batches_seen++;
  }
  return acc;
}

ScoreMap score_task_specific(const GradAccum& accum, Strategy strategy, bool l1_sum_abs) {
  if (accum.batches_seen < 1) throw UsageError("score: accumulation not completed");
  ScoreMap s;
  s.kind = ScoreKind::task_specific;
  s.strategy = strategy;
  s.values.resize(accum.sum_grad.size());
  if (strategy == Strategy::L1) {
    const auto& src = l1_sum_abs ? accum.sum_abs_grad : accum.sum_grad;
    for (std::size_t i = 0; i < src.size(); ++i) s.values[i] = std::abs(src[i]);
  } else {
    s.values = accum.sum_sq_grad;
  }
  return s;
}

ScoreMap score_task_agnostic(const WeightBundle& weights, Strategy strategy) {
  ScoreMap s;
  s.kind = ScoreKind::task_agnostic;
  s.strategy = strategy;
  s.values.resize(weights.values.size());
  for (std::size_t i = 0; i < weights.values.size(); ++i) {
    const double w = static_cast<double>(weights.values[i]);
    s.values[i] = strategy == Strategy::L1 ? std::abs(w) : w * w;
  }
  return s;
}

ScoreMap combine_hybrid(const ScoreMap& td, const ScoreMap& ta, double lambda) {
  if (td.kind != ScoreKind::task_specific || ta.kind != ScoreKind::task_agnostic)
    throw UsageError("combine_hybrid: expects a task-specific and a task-agnostic map");
  if (td.values.size() != ta.values.size())
    throw UsageError("combine_hybrid: score maps have different lengths");
  if (lambda < 0) throw UsageError("combine_hybrid: lambda must be >= 0");
  double sum_td = 0.0, sum_ta = 0.0;
  for (double v : td.values) sum_td += v;
  for (double v : ta.values) sum_ta += v;
  ScoreMap out;
  out.kind = ScoreKind::hybrid;
  out.strategy = td.strategy;
  out.lambda = lambda;
  out.beta = sum_ta > 0.0 ? sum_td / sum_ta : 0.0;
  out.values.resize(td.values.size());
  for (std::size_t i = 0; i < td.values.size(); ++i)
    out.values[i] = td.values[i] + lambda * out.beta * ta.values[i];
  return out;
}

}  // namespace shpeft
