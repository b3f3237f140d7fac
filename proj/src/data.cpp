// SPDX-License-Identifier: Apache-2.0
#include "shpeft/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "shpeft/rng.hpp"

namespace shpeft {

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& m) { throw SpecError("synthetic spec: " + m); };
  if (classes < 2) fail("classes must be >= 2");
  if (image_side < 1 || channels < 1) fail("image dims must be >= 1");
  if (train_samples < classes || test_samples < classes)
    fail("samples must be >= classes");
  if (sigma < 0) fail("sigma must be >= 0");
  if (transform.rotation_quarter < 0 || transform.rotation_quarter > 3)
    fail("rotation must be 0..3 quarter turns");
  if (!transform.label_perm.empty()) {
    if (static_cast<int>(transform.label_perm.size()) != classes)
      fail("label permutation size != classes");
    std::vector<bool> seen(classes, false);
    for (int p : transform.label_perm) {
      if (p < 0 || p >= classes || seen[p]) fail("invalid label permutation");
      seen[p] = true;
    }
  }
}

std::uint64_t SyntheticTaskSpec::hash() const {
  std::uint64_t h = 0x9ae16a3b2f90404fULL;
  auto fold = [&h](std::uint64_t v) { h = mix64(h ^ mix64(v)); };
  fold(classes);
  fold(image_side);
  fold(channels);
  fold(train_samples);
  fold(test_samples);
  fold(static_cast<std::uint64_t>(sigma * 1e9));
  fold(mixture_seed);
  fold(seed);
  fold(transform.rotation_quarter);
  for (int p : transform.label_perm) fold(static_cast<std::uint64_t>(p) + 17);
  return h;
}

namespace {

std::vector<std::vector<float>> class_means(const SyntheticTaskSpec& s) {
  Rng rng(s.mixture_seed);
  const std::int64_t dim = static_cast<std::int64_t>(s.image_side) * s.image_side * s.channels;
  std::vector<std::vector<float>> means(s.classes, std::vector<float>(dim));
  for (auto& m : means)
    for (auto& v : m) v = static_cast<float>(rng.uniform());
  for (int a = 0; a < s.classes; ++a)
    for (int b = a + 1; b < s.classes; ++b)
      if (means[a] == means[b])
        throw SpecError("synthetic spec: degenerate mixture, classes " + std::to_string(a) +
                        " and " + std::to_string(b) + " have coincident means");
  return means;
}

void rotate_quarters(std::vector<float>& img, int side, int channels, int quarters) {
  for (int q = 0; q < quarters; ++q) {
    std::vector<float> out(img.size());
    // counter-clockwise quarter turn: out(r,c) = in(c, side-1-r)
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c)
        for (int k = 0; k < channels; ++k)
          out[(r * side + c) * channels + k] =
              img[(c * side + (side - 1 - r)) * channels + k];
    img = std::move(out);
  }
}

DatasetHandle gen_split(const SyntheticTaskSpec& s,
                        const std::vector<std::vector<float>>& means, int n, Split split,
                        std::uint64_t seed) {
  DatasetHandle d;
  d.classes = s.classes;
  d.input_dim = static_cast<std::int64_t>(s.image_side) * s.image_side * s.channels;
  d.split = split;
  d.provenance = mix64(s.hash() ^ static_cast<std::uint64_t>(split));
  Rng rng(seed);
  // exact per-class counts, order shuffled
  std::vector<int> source;
  source.reserve(n);
  for (int c = 0; c < s.classes; ++c) {
    int count = n / s.classes + (c < n % s.classes ? 1 : 0);
    source.insert(source.end(), count, c);
  }
  rng.shuffle(source);
  d.inputs.reserve(n);
  d.labels.reserve(n);
  for (int c : source) {
    std::vector<float> img = means[c];
    if (s.sigma > 0)
      for (auto& v : img) v += static_cast<float>(rng.normal() * s.sigma);
    rotate_quarters(img, s.image_side, s.channels, s.transform.rotation_quarter);
    d.inputs.push_back(std::move(img));
    d.labels.push_back(s.transform.label_perm.empty() ? c : s.transform.label_perm[c]);
  }
  return d;
}

}  // namespace

SyntheticDataset gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  auto means = class_means(spec);
  SyntheticDataset out;
  out.train = gen_split(spec, means, spec.train_samples, Split::train, spec.seed);
  out.test = gen_split(spec, means, spec.test_samples, Split::test,
                       derive_seed(spec.seed, 0x7e57));
  return out;
}

std::vector<SyntheticTaskSpec> make_task_family(const SyntheticTaskSpec& base, int n) {
  if (n < 2) throw SpecError("task family: n must be >= 2");
  std::vector<SyntheticTaskSpec> specs;
  specs.reserve(n);
  for (int i = 0; i < n; ++i) {
    SyntheticTaskSpec s = base;
    s.seed = derive_seed(base.seed, static_cast<std::uint64_t>(i));
    if (i > 0) {
      s.transform.rotation_quarter = (i - 1) % 3 + 1;
      std::vector<int> perm(base.classes);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(base.seed, 0xfa0 + static_cast<std::uint64_t>(i)));
      do {
        rng.shuffle(perm);
      } while (std::is_sorted(perm.begin(), perm.end()));
      s.transform.label_perm = perm;
    }
    specs.push_back(std::move(s));
  }
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      if (specs[a].transform.rotation_quarter == specs[b].transform.rotation_quarter &&
          specs[a].transform.label_perm == specs[b].transform.label_perm)
        throw SpecError("task family: n exceeds available distinct transforms");
  return specs;
}

namespace {

std::uint64_t fnv1a(const std::vector<unsigned char>& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

std::string hex_bytes(const std::vector<unsigned char>& b, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < n && i < b.size(); ++i) {
    s += digits[b[i] >> 4];
    s += digits[b[i] & 0xf];
    s += ' ';
  }
  if (!s.empty()) s.pop_back();
  return s;
}

}  // namespace

DatasetHandle load_idx(const std::string& images_path, const std::string& labels_path) {
  auto ib = read_file(images_path);
  auto lb = read_file(labels_path);
  if (ib.size() < 16)
    throw IoError("idx: '" + images_path + "' truncated header");
  if (lb.size() < 8)
    throw IoError("idx: '" + labels_path + "' truncated header");
  if (be32(ib, 0) != 2051)
    throw IoError("idx: bad image magic in '" + images_path + "', observed bytes " +
                  hex_bytes(ib, 4));
  if (be32(lb, 0) != 2049)
    throw IoError("idx: bad label magic in '" + labels_path + "', observed bytes " +
                  hex_bytes(lb, 4));
  const std::uint32_t n_images = be32(ib, 4);
  const std::uint32_t rows = be32(ib, 8);
  const std::uint32_t cols = be32(ib, 12);
  const std::uint32_t n_labels = be32(lb, 4);
  if (n_images != n_labels)
    throw IoError("idx: " + std::to_string(n_images) + " images but " +
                  std::to_string(n_labels) + " labels");
  const std::size_t pix = static_cast<std::size_t>(rows) * cols;
  if (ib.size() != 16 + static_cast<std::size_t>(n_images) * pix)
    throw IoError("idx: image payload length " + std::to_string(ib.size() - 16) +
                  " != expected " + std::to_string(static_cast<std::size_t>(n_images) * pix));
  if (lb.size() != 8 + n_labels)
    throw IoError("idx: label payload length " + std::to_string(lb.size() - 8) +
                  " != expected " + std::to_string(n_labels));

  DatasetHandle d;
  d.input_dim = static_cast<std::int64_t>(pix);
  d.split = Split::train;
  d.provenance = fnv1a(lb, fnv1a(ib));
  int max_label = 0;
  d.inputs.reserve(n_images);
  d.labels.reserve(n_images);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    std::vector<float> img(pix);
    const unsigned char* src = ib.data() + 16 + static_cast<std::size_t>(i) * pix;
    for (std::size_t j = 0; j < pix; ++j) img[j] = src[j] / 255.0f;
    d.inputs.push_back(std::move(img));
    d.labels.push_back(lb[8 + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.classes = max_label + 1;
  return d;
}

BatchIter::BatchIter(const DatasetHandle& data, int batch_size, std::uint64_t shuffle_seed)
    : data_(&data), batch_size_(batch_size) {
  if (batch_size < 1) throw UsageError("batch_iter: batch size must be >= 1");
  if (data.inputs.empty()) throw UsageError("batch_iter: empty dataset");
  reset(shuffle_seed);
}

void BatchIter::reset(std::uint64_t shuffle_seed) {
  order_.resize(data_->inputs.size());
  std::iota(order_.begin(), order_.end(), std::int64_t(0));
  Rng rng(shuffle_seed);
  rng.shuffle(order_);
  pos_ = 0;
}

std::int64_t BatchIter::batches_per_epoch() const {
  return (static_cast<std::int64_t>(order_.size()) + batch_size_ - 1) / batch_size_;
}

bool BatchIter::next(FTensor& inputs, std::vector<int>& labels) {
  if (pos_ >= order_.size()) return false;
  const std::size_t n = std::min<std::size_t>(batch_size_, order_.size() - pos_);
  inputs = Tensor<float>::zeros({static_cast<std::int64_t>(n), data_->input_dim});
  labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = data_->inputs[order_[pos_ + i]];
    std::copy(row.begin(), row.end(), inputs->data.begin() + i * data_->input_dim);
    labels[i] = data_->labels[order_[pos_ + i]];
  }
  pos_ += n;
  return true;
}

}  // namespace shpeft
