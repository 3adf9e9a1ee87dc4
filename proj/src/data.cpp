// Copyright 2026 The smoe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "smoe/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>

namespace smoe {

namespace fs = std::filesystem;

const char* to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::cifar10_binary: return "cifar10_binary";
    case DatasetKind::cifar100_binary: return "cifar100_binary";
    case DatasetKind::synthetic_clusters: return "synthetic_clusters";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  for (DatasetKind k : {DatasetKind::cifar10_binary, DatasetKind::cifar100_binary,
                        DatasetKind::synthetic_clusters}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string resolve_data_root(const std::string& root) {
  if (!root.empty()) return root;
  if (const char* env = std::getenv("SMOE_DATA_ROOT")) return env;
  return "data";
}

Split parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes,
                          std::size_t classes, const std::string& source) {
  const std::size_t rec = label_bytes + kCifarPixels;
  if (bytes.empty() || bytes.size() % rec != 0) {
    throw DataError(source + ": truncated file (" + std::to_string(bytes.size()) +
                    " bytes is not a multiple of " + std::to_string(rec) + ")");
  }
  const std::size_t n = bytes.size() / rec;
  Split s{Tensor({n, 3, 32, 32}, Dtype::f32), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    const std::size_t label = r[label_bytes - 1];
    if (label >= classes) {
      throw DataError(source + ": record " + std::to_string(i) + " has label " +
                      std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    s.y[i] = static_cast<int>(label);
    double* dst = s.x.data() + i * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) dst[j] = r[label_bytes + j] / 255.0;
  }
  return s;
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Split concat_splits(const std::vector<Split>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Split out{Tensor({n, 3, 32, 32}, Dtype::f32), {}};
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.x.storage().begin(), p.x.storage().end(), out.x.storage().begin() + off);
    off += p.x.size();
    out.y.insert(out.y.end(), p.y.begin(), p.y.end());
  }
  return out;
}

Split truncate(Split s, std::size_t limit) {
  if (limit == 0 || limit >= s.size()) return s;
  Split out{Tensor({limit, 3, 32, 32}, Dtype::f32), {s.y.begin(), s.y.begin() + limit}};
  std::copy(s.x.storage().begin(), s.x.storage().begin() + limit * kCifarPixels,
            out.x.storage().begin());
  return out;
}

Split load_cifar_files(const fs::path& dir, const std::vector<std::string>& files,
                       std::size_t label_bytes, std::size_t classes,
                       const std::map<std::string, std::string>& checksums) {
  std::vector<Split> parts;
  for (const auto& f : files) {
    const fs::path p = dir / f;
    if (!fs::exists(p)) throw DataError("missing dataset file " + p.string());
    std::vector<std::uint8_t> bytes = read_file(p);
    if (auto it = checksums.find(f); it != checksums.end()) {
      const std::string got = fnv1a64_hex(bytes);
      if (got != it->second) {
        throw DataError(p.string() + ": checksum mismatch (expected " + it->second + ", got " +
                        got + ")");
      }
    }
    parts.push_back(parse_cifar_records(bytes, label_bytes, classes, p.string()));
  }
  return concat_splits(parts);
}

struct Norm {
  std::vector<double> mean, stddev;
};

// Per-channel statistics of a full training split, computed once per path.
Norm channel_stats(const std::string& key, const Split& train) {
  static std::mutex mu;
  static std::map<std::string, Norm> cache;
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  Norm n{std::vector<double>(3), std::vector<double>(3)};
  const std::size_t hw = 32 * 32, count = train.size() * hw;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const double* p = train.x.data() + i * kCifarPixels + c * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        s += p[j];
        s2 += p[j] * p[j];
      }
    }
    n.mean[c] = s / count;
    n.stddev[c] = std::sqrt(std::max(s2 / count - n.mean[c] * n.mean[c], 1e-12));
  }
  cache[key] = n;
  return n;
}

void normalize(Split& s, const Norm& n) {
  const std::size_t hw = 32 * 32;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double* p = s.x.data() + i * kCifarPixels + c * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - n.mean[c]) / n.stddev[c];
    }
  s.x.round_in_place();
}

}  // namespace

Dataset make_synthetic_clusters(const SyntheticParams& p) {
  if (p.classes == 0 || p.clusters < p.classes || p.dim == 0) {
    throw std::invalid_argument("synthetic clusters: need dim >= 1 and clusters >= classes >= 1");
  }
  if (p.train_per_class == 0 || p.test_per_class == 0 || !(p.noise_std >= 0.0)) {
    throw std::invalid_argument("synthetic clusters: bad sample counts or noise");
  }
  RngStream root(p.seed);
  RngStream cr = root.fork("centroids");
  std::vector<double> centroids(p.clusters * p.dim);
  for (auto& v : centroids) v = p.centroid_std * cr.normal();

  auto gen = [&](RngStream rng, std::size_t per_class) {
    const std::size_t n = per_class * p.classes;
    Split s{Tensor({n, p.dim}, Dtype::f32), std::vector<int>(n)};
    const std::size_t per_cls_clusters = p.clusters / p.classes;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t cls = i % p.classes, nth = i / p.classes;
      // Clusters of this class are cls, cls + classes, ...; extra clusters
      // beyond a multiple of classes are unused.
      const std::size_t cluster = cls + (nth % per_cls_clusters) * p.classes;
      s.y[i] = static_cast<int>(cls);
      for (std::size_t j = 0; j < p.dim; ++j)
        s.x[i * p.dim + j] = centroids[cluster * p.dim + j] + p.noise_std * rng.normal();
    }
    s.x.round_in_place();
    return s;
  };

  Dataset d;
  d.name = "synthetic_clusters";
  d.classes = p.classes;
  d.channels = p.dim;
  d.train = gen(root.fork("train"), p.train_per_class);
  d.test = gen(root.fork("test"), p.test_per_class);
  return d;
}

Dataset load_dataset(const DatasetHandle& h) {
  if (h.kind == DatasetKind::synthetic_clusters) {
    Dataset d = make_synthetic_clusters(h.synthetic);
    return d;
  }
  const bool c10 = h.kind == DatasetKind::cifar10_binary;
  const fs::path dir = fs::path(resolve_data_root(h.root)) /
                       (c10 ? "cifar-10-batches-bin" : "cifar-100-binary");
  const std::size_t label_bytes = c10 ? 1 : 2, classes = c10 ? 10 : 100;
  std::vector<std::string> train_files;
  if (c10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    train_files = {"train.bin"};
  }
  const std::string test_file = c10 ? "test_batch.bin" : "test.bin";

  Dataset d;
  d.name = c10 ? "cifar10" : "cifar100";
  d.classes = classes;
  d.channels = 3;
  d.height = d.width = 32;
  Split full_train = load_cifar_files(dir, train_files, label_bytes, classes, h.checksums);
  Norm n = channel_stats(dir.string(), full_train);
  d.train = truncate(std::move(full_train), h.train_limit);
  d.test = truncate(load_cifar_files(dir, {test_file}, label_bytes, classes, h.checksums),
                    h.test_limit);
  normalize(d.train, n);
  normalize(d.test, n);
  d.mean = n.mean;
  d.stddev = n.stddev;
  return d;
}

Batch make_batch(const Split& split, std::span<const std::size_t> idx) {
  Shape shape = split.x.shape();
  const std::size_t row = split.x.size() / shape[0];
  shape[0] = idx.size();
  Batch b{Tensor(shape, split.x.dtype()), std::vector<int>(idx.size())};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= split.size()) throw std::out_of_range("make_batch: index out of range");
    std::copy_n(split.x.data() + idx[i] * row, row, b.x.data() + i * row);
    b.y[i] = split.y[idx[i]];
  }
  return b;
}

}  // namespace smoe
