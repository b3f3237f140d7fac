// SPDX-License-Identifier: Apache-2.0
//
// Deterministic classification data: a synthetic task family built from
// per-class Gaussian mixtures (with label-permutation / rotation
// transforms for downstream tasks) and big-endian IDX file ingestion.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shpeft/tensor.hpp"

namespace shpeft {

struct TaskTransform {
  int rotation_quarter = 0;          // quarter turns of the square image
  std::vector<int> label_perm;       // empty = identity
};

struct SyntheticTaskSpec {
  int classes = 8;
  int image_side = 16;
  int channels = 1;
  int train_samples = 4096;
  int test_samples = 1024;
  double sigma = 0.35;
  std::uint64_t mixture_seed = 1;    // shared across a task family
  std::uint64_t seed = 1;            // sampling seed
  TaskTransform transform;

  void validate() const;
  std::uint64_t hash() const;
};

enum class Split { train, val, test };

struct DatasetHandle {
  std::vector<std::vector<float>> inputs;  // flattened row-major examples
  std::vector<int> labels;
  int classes = 0;
  std::int64_t input_dim = 0;
  Split split = Split::train;
  std::uint64_t provenance = 0;  // spec hash or file digest
};

struct SyntheticDataset {
  DatasetHandle train;
  DatasetHandle test;
};

SyntheticDataset gen_synthetic(const SyntheticTaskSpec& spec);

// n task specs sharing the base mixture, with distinct deterministic
// transforms and derived seeds; member 0 is the base task itself.
std::vector<SyntheticTaskSpec> make_task_family(const SyntheticTaskSpec& base, int n);

DatasetHandle load_idx(const std::string& images_path, const std::string& labels_path);

// Deterministic shuffled batches; the last short batch is kept.
class BatchIter {
 public:
  BatchIter(const DatasetHandle& data, int batch_size, std::uint64_t shuffle_seed);

  // fills (batch tensor, labels); returns false at end of epoch
  bool next(FTensor& inputs, std::vector<int>& labels);
  void reset(std::uint64_t shuffle_seed);
  std::int64_t batches_per_epoch() const;

 private:
  const DatasetHandle* data_;
  int batch_size_;
  std::vector<std::int64_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace shpeft
