// SPDX-License-Identifier: Apache-2.0
//
// Masked SGD fine-tuning with cosine-annealed learning rate, plus the
// evaluation metrics (macro-F1, accuracy, confusion matrix).
#pragma once

#include <cstdint>
#include <vector>

#include "shpeft/data.hpp"
#include "shpeft/masking.hpp"
#include "shpeft/model.hpp"

namespace shpeft {

enum class Schedule { cosine, constant };

struct TrainConfig {
  double lr0 = 0.01;
  double lr_min = 0.0;
  int iterations = 2000;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::cosine;

  void validate() const;
};

struct Metrics {
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::vector<double> precision, recall, f1;
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][prediction]
};

struct TrainReport {
  std::vector<float> loss_curve;
  Metrics final_metrics;
  int steps = 0;
  std::uint64_t mask_digest = 0;
};

// eta_t = lr_min + 0.5 (lr0 - lr_min)(1 + cos(pi t / T))
double cosine_lr(int t, int T, double lr0, double lr_min);

// w <- w - eta * g * M; gradients must already be populated
void masked_sgd_step(Model& model, const Mask& mask, double eta);

// Runs `iterations` masked steps; masked-out weights stay bit-identical.
// `eval_data` provides the final metrics (pass the test split).
TrainReport train(Model& model, const DatasetHandle& train_data,
                  const DatasetHandle& eval_data, const Mask& mask,
                  const TrainConfig& config);

Metrics evaluate(const Model& model, const DatasetHandle& data);

}  // namespace shpeft
