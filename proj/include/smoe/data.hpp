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

#pragma once

// Datasets: CIFAR binary batches and seeded synthetic clusters.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/moe.hpp"

namespace smoe {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { cifar10_binary, cifar100_binary, synthetic_clusters };

const char* to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

struct SyntheticParams {
  std::size_t clusters = 8;  // cluster c belongs to class c % classes
  std::size_t classes = 8;
  std::size_t dim = 32;
  double noise_std = 1.5;
  double centroid_std = 1.0;
  std::size_t train_per_class = 250;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;
};

struct DatasetHandle {
  DatasetKind kind = DatasetKind::synthetic_clusters;
  // Directory holding the extracted batches; empty means $SMOE_DATA_ROOT.
  std::string root;
  SyntheticParams synthetic;
  // Keep only the first N records of each split; 0 keeps all.
  std::size_t train_limit = 0, test_limit = 0;
  // Expected FNV-1a 64 digests (16 hex chars) by file name.
  std::map<std::string, std::string> checksums;
};

struct Split {
  Tensor x;  // [N x C x H x W] images or [N x d] vectors
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
};

struct Dataset {
  std::string name;
  Split train, test;
  std::size_t classes = 0;
  std::size_t channels = 0, height = 1, width = 1;
  // Per-channel normalization taken from the training split (images only).
  std::vector<double> mean, stddev;
  bool images() const { return train.x.rank() == 4; }
};

Dataset load_dataset(const DatasetHandle& handle);
Dataset make_synthetic_clusters(const SyntheticParams& p);

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
// Parses raw CIFAR records; label_bytes is 1 (CIFAR-10) or 2 (CIFAR-100,
// coarse then fine; the fine label is kept).
Split parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes,
                          std::size_t classes, const std::string& source);

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes);
std::string resolve_data_root(const std::string& root);

// Rows `idx` of a split as a training batch.
Batch make_batch(const Split& split, std::span<const std::size_t> idx);

}  // namespace smoe
