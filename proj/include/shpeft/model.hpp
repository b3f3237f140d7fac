// SPDX-License-Identifier: Apache-2.0
//
// Tiny transformer / MLP classifiers with a stable, role-annotated
// parameter registry. The registry's flat index space is the address
// space used by importance scoring, masking, and the analyses.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shpeft/tensor.hpp"

namespace shpeft {

enum class Role { bias, norm, attention, mlp, embed, head };

const char* role_name(Role r);
Role role_from_name(const std::string& s);

enum class Family { tiny_vit, mlp };

struct ModelSpec {
  Family family = Family::tiny_vit;
  int image_side = 16;
  int channels = 1;
  int features = 0;  // mlp input dim
  int patch = 4;
  int depth = 2;
  int width = 32;
  int heads = 4;
  int mlp_ratio = 4;
  int classes = 8;
  std::uint64_t seed = 0;

  void validate() const;
  std::uint64_t hash() const;
  std::int64_t input_dim() const;
};

struct RegistryEntry {
  std::string name;
  Shape shape;
  Role role;
  std::int64_t offset = 0;
  std::int64_t count = 0;
  bool is_head() const { return name.rfind("head.", 0) == 0; }
};

struct ParameterRegistry {
  std::vector<RegistryEntry> entries;
  std::int64_t total = 0;

  std::vector<std::int64_t> role_index(Role role) const;
  std::vector<std::int64_t> head_index() const;
  std::int64_t head_count() const;
};

// Named, ordered, role-annotated snapshot of a model's weights.
struct WeightBundle {
  std::uint64_t spec_hash = 0;
  ParameterRegistry registry;
  std::vector<float> values;
};

class Model {
 public:
  ModelSpec spec;
  ParameterRegistry registry;
  std::vector<FTensor> params;  // aligned with registry.entries
  bool l2_head = false;

  // batch: (B, input_dim) leaf tensor
  FTensor forward(const FTensor& batch) const;

  WeightBundle weights() const;
  void load_weights(const WeightBundle& bundle);
  void zero_grads();
  Model clone() const;
  FTensor param(const std::string& name) const;
};

Model build_model(const ModelSpec& spec);

// Swaps the classifier for L2-normalize + fresh linear; init seed is
// spec.seed xor the class count, so it is reproducible per task shape.
void replace_head(Model& model, int classes);

}  // namespace shpeft
