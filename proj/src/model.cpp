// SPDX-License-Identifier: Apache-2.0
#include "shpeft/model.hpp"

#include <algorithm>

#include "shpeft/rng.hpp"

namespace shpeft {

const char* role_name(Role r) {
  switch (r) {
    case Role::bias: return "bias";
    case Role::norm: return "norm";
    case Role::attention: return "attention";
    case Role::mlp: return "mlp";
    case Role::embed: return "embed";
    case Role::head: return "head";
  }
  return "?";
}

Role role_from_name(const std::string& s) {
  for (Role r : {Role::bias, Role::norm, Role::attention, Role::mlp, Role::embed, Role::head})
    if (s == role_name(r)) return r;
  throw UsageError("unknown role '" + s + "'");
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& msg) { throw SpecError("model spec: " + msg); };
  if (classes < 1) fail("classes must be >= 1");
  if (depth < 1) fail("depth must be >= 1");
  if (width < 1) fail("width must be >= 1");
  if (family == Family::tiny_vit) {
    if (image_side < 1 || channels < 1 || patch < 1 || heads < 1 || mlp_ratio < 1)
      fail("all counts must be >= 1");
    if (image_side % patch != 0)
      fail("image side " + std::to_string(image_side) + " not divisible by patch " +
           std::to_string(patch));
    if (width % heads != 0)
      fail("width " + std::to_string(width) + " not divisible by heads " +
           std::to_string(heads));
  } else {
    if (features < 1) fail("features must be >= 1");
  }
}

std::uint64_t ModelSpec::hash() const {
  std::uint64_t h = 0x5123bd4a0e1ce7c1ULL;
  auto fold = [&h](std::uint64_t v) { h = mix64(h ^ mix64(v)); };
  fold(static_cast<std::uint64_t>(family));
  fold(static_cast<std::uint64_t>(image_side));
  fold(static_cast<std::uint64_t>(channels));
  fold(static_cast<std::uint64_t>(features));
  fold(static_cast<std::uint64_t>(patch));
  fold(static_cast<std::uint64_t>(depth));
  fold(static_cast<std::uint64_t>(width));
  fold(static_cast<std::uint64_t>(heads));
  fold(static_cast<std::uint64_t>(mlp_ratio));
  fold(static_cast<std::uint64_t>(classes));
  fold(seed);
  return h;
}

std::int64_t ModelSpec::input_dim() const {
  return family == Family::tiny_vit
             ? static_cast<std::int64_t>(image_side) * image_side * channels
             : features;
}

std::vector<std::int64_t> ParameterRegistry::role_index(Role role) const {
  std::vector<std::int64_t> idx;
  for (const auto& e : entries)
    if (e.role == role)
      for (std::int64_t i = 0; i < e.count; ++i) idx.push_back(e.offset + i);
  return idx;
}

std::vector<std::int64_t> ParameterRegistry::head_index() const {
  std::vector<std::int64_t> idx;
  for (const auto& e : entries)
    if (e.is_head())
      for (std::int64_t i = 0; i < e.count; ++i) idx.push_back(e.offset + i);
  return idx;
}

std::int64_t ParameterRegistry::head_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries)
    if (e.is_head()) n += e.count;
  return n;
}

namespace {

enum class Init { trunc_normal, zeros, ones };

void add_param(Model& m, Rng& rng, const std::string& name, Shape shape, Role role,
               Init init) {
  RegistryEntry e;
  e.name = name;
  e.shape = shape;
  e.role = role;
  e.offset = m.registry.total;
  e.count = numel_of(shape);
  m.registry.total += e.count;
  m.registry.entries.push_back(e);

  auto t = Tensor<float>::zeros(std::move(shape), true);
  switch (init) {
    case Init::trunc_normal:
      for (auto& v : t->data) v = static_cast<float>(rng.truncated_normal(0.02));
      break;
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(t->data.begin(), t->data.end(), 1.0f);
      break;
  }
  m.params.push_back(std::move(t));
}

void build_head(Model& m, Rng& rng, int in_dim, int classes) {
  add_param(m, rng, "head.weight", {in_dim, classes}, Role::head, Init::trunc_normal);
  add_param(m, rng, "head.bias", {classes}, Role::bias, Init::zeros);
}

}  // namespace

Model build_model(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng(spec.seed);
  const int w = spec.width;
  if (spec.family == Family::mlp) {
    int in = spec.features;
    for (int d = 0; d < spec.depth; ++d) {
      const std::string p = "layers." + std::to_string(d) + ".";
      add_param(m, rng, p + "weight", {in, w}, Role::mlp, Init::trunc_normal);
      add_param(m, rng, p + "bias", {w}, Role::bias, Init::zeros);
      in = w;
    }
    build_head(m, rng, w, spec.classes);
  } else {
    const int patches = (spec.image_side / spec.patch) * (spec.image_side / spec.patch);
    const int patch_dim = spec.patch * spec.patch * spec.channels;
    add_param(m, rng, "patch_embed.weight", {patch_dim, w}, Role::embed, Init::trunc_normal);
    add_param(m, rng, "patch_embed.bias", {w}, Role::bias, Init::zeros);
    add_param(m, rng, "cls_token", {1, 1, w}, Role::embed, Init::trunc_normal);
    add_param(m, rng, "pos_embed", {patches + 1, w}, Role::embed, Init::trunc_normal);
    for (int d = 0; d < spec.depth; ++d) {
      const std::string p = "blocks." + std::to_string(d) + ".";
      add_param(m, rng, p + "ln1.gamma", {w}, Role::norm, Init::ones);
      add_param(m, rng, p + "ln1.beta", {w}, Role::norm, Init::zeros);
      for (const char* proj : {"wq", "wk", "wv", "wo"})
        add_param(m, rng, p + "attn." + std::string(proj), {w, w}, Role::attention,
                  Init::trunc_normal);
      for (const char* b : {"bq", "bk", "bv", "bo"})
        add_param(m, rng, p + "attn." + std::string(b), {w}, Role::bias, Init::zeros);
      add_param(m, rng, p + "ln2.gamma", {w}, Role::norm, Init::ones);
      add_param(m, rng, p + "ln2.beta", {w}, Role::norm, Init::zeros);
      add_param(m, rng, p + "mlp.fc1.weight", {w, w * spec.mlp_ratio}, Role::mlp,
                Init::trunc_normal);
      add_param(m, rng, p + "mlp.fc1.bias", {w * spec.mlp_ratio}, Role::bias, Init::zeros);
      add_param(m, rng, p + "mlp.fc2.weight", {w * spec.mlp_ratio, w}, Role::mlp,
                Init::trunc_normal);
      add_param(m, rng, p + "mlp.fc2.bias", {w}, Role::bias, Init::zeros);
    }
    add_param(m, rng, "final_ln.gamma", {w}, Role::norm, Init::ones);
    add_param(m, rng, "final_ln.beta", {w}, Role::norm, Init::zeros);
    build_head(m, rng, w, spec.classes);
  }
  return m;
}

void replace_head(Model& model, int classes) {
  if (classes < 2) throw SpecError("replace_head: classes must be >= 2");
  if (model.params.size() < 2) throw SpecError("replace_head: model not built");
  Rng rng(model.spec.seed ^ static_cast<std::uint64_t>(classes));
  model.spec.classes = classes;
  model.l2_head = true;
  const int w = model.spec.width;
  // head.weight and head.bias are the last two entries
  auto& we = model.registry.entries[model.registry.entries.size() - 2];
  auto& be = model.registry.entries[model.registry.entries.size() - 1];
  we.shape = {w, classes};
  we.count = static_cast<std::int64_t>(w) * classes;
  be.shape = {classes};
  be.count = classes;
  be.offset = we.offset + we.count;
  model.registry.total = be.offset + be.count;

  auto wt = Tensor<float>::zeros({w, classes}, true);
  for (auto& v : wt->data) v = static_cast<float>(rng.truncated_normal(0.02));
  model.params[model.params.size() - 2] = wt;
  model.params[model.params.size() - 1] = Tensor<float>::zeros({classes}, true);
}

namespace {

// (B, side*side*channels) -> (B, patches, patch*patch*channels), raw leaf
FTensor patchify(const FTensor& batch, const ModelSpec& s) {
  const std::int64_t B = batch->shape[0];
  const int side = s.image_side, p = s.patch, ch = s.channels;
  const int per_side = side / p;
  const std::int64_t patches = static_cast<std::int64_t>(per_side) * per_side;
  const std::int64_t pd = static_cast<std::int64_t>(p) * p * ch;
  auto out = Tensor<float>::zeros({B, patches, pd});
  for (std::int64_t b = 0; b < B; ++b) {
    const float* img = batch->data.data() + b * side * side * ch;
    for (int pr = 0; pr < per_side; ++pr)
      for (int pc = 0; pc < per_side; ++pc) {
        float* dst = out->data.data() + (b * patches + pr * per_side + pc) * pd;
        for (int r = 0; r < p; ++r)
          for (int c = 0; c < p; ++c)
            for (int k = 0; k < ch; ++k)
              *dst++ = img[((pr * p + r) * side + (pc * p + c)) * ch + k];
      }
  }
  return out;
}

}  // namespace

FTensor Model::param(const std::string& name) const {
  for (std::size_t i = 0; i < registry.entries.size(); ++i)
    if (registry.entries[i].name == name) return params[i];
  throw UsageError("no parameter named '" + name + "'");
}

FTensor Model::forward(const FTensor& batch) const {
  if (batch->shape.size() != 2 || batch->shape[1] != spec.input_dim())
    throw ShapeError("forward: expected (batch," + std::to_string(spec.input_dim()) +
                     "), got " + shape_str(batch->shape));
  FTensor feat;
  if (spec.family == Family::mlp) {
    FTensor x = batch;
    for (int d = 0; d < spec.depth; ++d) {
      const std::string p = "layers." + std::to_string(d) + ".";
      x = relu(add(matmul(x, param(p + "weight")), param(p + "bias")));
    }
    feat = x;
  } else {
    const int hd = spec.width / spec.heads;
    auto x = add(matmul(patchify(batch, spec), param("patch_embed.weight")),
                 param("patch_embed.bias"));
    x = prepend_token(param("cls_token"), x);
    x = add(x, param("pos_embed"));
    for (int d = 0; d < spec.depth; ++d) {
      const std::string p = "blocks." + std::to_string(d) + ".";
      auto h = layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"));
      const std::int64_t B = h->shape[0], T = h->shape[1];
      auto heads_view = [&](FTensor t) {
        return permute(reshape(t, {B, T, spec.heads, hd}), {0, 2, 1, 3});
      };
      auto q = heads_view(add(matmul(h, param(p + "attn.wq")), param(p + "attn.bq")));
      auto k = heads_view(add(matmul(h, param(p + "attn.wk")), param(p + "attn.bk")));
      auto v = heads_view(add(matmul(h, param(p + "attn.wv")), param(p + "attn.bv")));
      auto scores = scale(matmul(q, permute(k, {0, 1, 3, 2})),
                          1.0f / std::sqrt(static_cast<float>(hd)));
      auto ctx = matmul(softmax(scores), v);
      ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, T, spec.width});
      x = add(x, add(matmul(ctx, param(p + "attn.wo")), param(p + "attn.bo")));
      auto m = layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"));
      m = gelu(add(matmul(m, param(p + "mlp.fc1.weight")), param(p + "mlp.fc1.bias")));
      m = add(matmul(m, param(p + "mlp.fc2.weight")), param(p + "mlp.fc2.bias"));
      x = add(x, m);
    }
    x = layer_norm(x, param("final_ln.gamma"), param("final_ln.beta"));
    feat = select_token(x, 0);
  }
  if (l2_head) feat = l2_normalize(feat);
  return add(matmul(feat, param("head.weight")), param("head.bias"));
}

WeightBundle Model::weights() const {
  WeightBundle b;
  b.spec_hash = spec.hash();
  b.registry = registry;
  b.values.reserve(registry.total);
  for (const auto& p : params)
    b.values.insert(b.values.end(), p->data.begin(), p->data.end());
  return b;
}

void Model::load_weights(const WeightBundle& bundle) {
  if (static_cast<std::int64_t>(bundle.values.size()) != registry.total)
    throw UsageError("load_weights: bundle has " + std::to_string(bundle.values.size()) +
                     " values, registry expects " + std::to_string(registry.total));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = registry.entries[i];
    std::copy(bundle.values.begin() + e.offset, bundle.values.begin() + e.offset + e.count,
              params[i]->data.begin());
  }
}

void Model::zero_grads() {
  for (auto& p : params) p->zero_grad();
}

Model Model::clone() const {
  Model m;
  m.spec = spec;
  m.registry = registry;
  m.l2_head = l2_head;
  m.params.reserve(params.size());
  for (const auto& p : params) {
    auto t = Tensor<float>::from(p->shape, p->data, true);
    m.params.push_back(std::move(t));
  }
  return m;
}

}  // namespace shpeft
