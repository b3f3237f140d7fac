// SPDX-License-Identifier: Apache-2.0
#include "shpeft/trainer.hpp"

#include <cmath>

#include "shpeft/rng.hpp"

namespace shpeft {

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw SpecError("train config: lr0 must be > 0");
  if (lr_min > lr0) throw SpecError("train config: lr_min must be <= lr0");
  if (iterations < 0) throw SpecError("train config: iterations must be >= 0");
  if (batch_size < 1) throw SpecError("train config: batch size must be >= 1");
}

double cosine_lr(int t, int T, double lr0, double lr_min) {
  return lr_min + 0.5 * (lr0 - lr_min) *
                      (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(T)));
}

void masked_sgd_step(Model& model, const Mask& mask, double eta) {
  if (static_cast<std::int64_t>(mask.bits.size()) != model.registry.total)
    throw UsageError("masked_sgd_step: mask length does not match registry");
  const float lr = static_cast<float>(eta);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& e = model.registry.entries[i];
    auto& p = *model.params[i];
    if (p.grad.empty()) continue;
    const std::uint8_t* bits = mask.bits.data() + e.offset;
    for (std::int64_t j = 0; j < e.count; ++j) {
      if (!bits[j]) continue;
      const float upd = p.data[j] - lr * p.grad[j];
      if (!std::isfinite(upd))
        throw NumericError("masked_sgd_step: non-finite update in '" + e.name + "'");
      p.data[j] = upd;
    }
  }
}

TrainReport train(Model& model, const DatasetHandle& train_data,
                  const DatasetHandle& eval_data, const Mask& mask,
                  const TrainConfig& config) {
  config.validate();
  if (train_data.classes != model.spec.classes)
    throw UsageError("train: dataset classes do not match model head");
  TrainReport report;
  report.mask_digest = mask.digest();
  report.loss_curve.reserve(config.iterations);

  BatchIter iter(train_data, config.batch_size, derive_seed(config.seed, 0));
  std::uint64_t epoch = 0;
  FTensor batch;
  std::vector<int> labels;
  for (int t = 0; t < config.iterations; ++t) {
    if (!iter.next(batch, labels)) {
      iter.reset(derive_seed(config.seed, ++epoch));
      iter.next(batch, labels);
    }
    model.zero_grads();
    auto loss = cross_entropy_with_logits(model.forward(batch), labels);
    if (!std::isfinite(loss->data[0]))
      throw NumericError("train: loss diverged at step " + std::to_string(t));
    backward_pass(loss);
    const double eta = config.schedule == Schedule::cosine
                           ? cosine_lr(t, config.iterations, config.lr0, config.lr_min)
                           : config.lr0;
    masked_sgd_step(model, mask, eta);
    report.loss_curve.push_back(loss->data[0]);
  }
  report.steps = config.iterations;
  report.final_metrics = evaluate(model, eval_data);
  return report;
}

Metrics evaluate(const Model& model, const DatasetHandle& data) {
  if (data.inputs.empty()) throw UsageError("evaluate: empty dataset");
  const int c = model.spec.classes;
  Metrics m;
  m.confusion.assign(c, std::vector<std::int64_t>(c, 0));
  const std::int64_t n = static_cast<std::int64_t>(data.inputs.size());
  const std::int64_t bs = 128;
  for (std::int64_t start = 0; start < n; start += bs) {
    const std::int64_t count = std::min(bs, n - start);
    auto batch = Tensor<float>::zeros({count, data.input_dim});
    for (std::int64_t i = 0; i < count; ++i)
      std::copy(data.inputs[start + i].begin(), data.inputs[start + i].end(),
                batch->data.begin() + i * data.input_dim);
    auto logits = model.forward(batch);
    for (std::int64_t i = 0; i < count; ++i) {
      const float* row = logits->data.data() + i * c;
      int pred = 0;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[pred]) pred = j;  // ties keep the lower index
      m.confusion[data.labels[start + i]][pred]++;
    }
  }
  m.precision.assign(c, 0.0);
  m.recall.assign(c, 0.0);
  m.f1.assign(c, 0.0);
  std::int64_t correct = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t tp = m.confusion[k][k], support = 0, predicted = 0;
    for (int j = 0; j < c; ++j) {
      support += m.confusion[k][j];
      predicted += m.confusion[j][k];
    }
    correct += tp;
    m.precision[k] = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
    m.recall[k] = support > 0 ? static_cast<double>(tp) / support : 0.0;
    const double pr = m.precision[k] + m.recall[k];
    m.f1[k] = pr > 0 ? 2.0 * m.precision[k] * m.recall[k] / pr : 0.0;
    m.macro_f1 += m.f1[k];
  }
  m.macro_f1 /= c;
  m.accuracy = static_cast<double>(correct) / n;
  return m;
}

}  // namespace shpeft
