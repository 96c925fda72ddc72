// SPDX-License-Identifier: Apache-2.0
//
// Synthetic two-domain image classification data, the `.dcn` file format,
// and seeded batch iteration.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcan/tensor.hpp"

namespace dcan::data {

using Label = std::uint16_t;

/// Parameters of a generated domain pair. The shift knobs only act on the
/// target domain; with all of them at zero both domains share one
/// distribution.
struct DomainShiftSpec {
  std::size_t num_classes = 5;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double color_bias = 0.5;          ///< in [0, 1]; blend strength towards a fixed target tint
  double noise_sigma = 0.3;         ///< std-dev of additive pixel noise
  double rotation_degrees = 0.0;    ///< rigid rotation of every class pattern
  double background_clutter = 0.5;  ///< in [0, 1]; strength of random distractor strokes
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DomainShiftSpec&) const = default;

  /// Same spec with every shift knob at zero.
  DomainShiftSpec without_shift() const;
};

void to_json(nlohmann::json& j, const DomainShiftSpec& s);
void from_json(const nlohmann::json& j, DomainShiftSpec& s);

/// Images in [0,1], NCHW, with optional labels.
struct Dataset {
  Tensor<float> images;
  std::vector<Label> labels;  ///< empty when labels are withheld
  std::size_t num_classes = 0;

  std::size_t size() const { return images.dim(0); }
  bool has_labels() const { return !labels.empty(); }
  /// Copy with the labels removed.
  Dataset without_labels() const;
  /// Images and labels (if any) of the given rows, in order.
  Tensor<float> gather_images(std::span<const std::size_t> rows) const;
  std::vector<Label> gather_labels(std::span<const std::size_t> rows) const;
  /// Throws unless labels are present.
  void require_labels(const std::string& what) const;

  bool operator==(const Dataset&) const = default;
};

struct DomainPair {
  Dataset source_train;
  Dataset source_test;
  Dataset target_train;  ///< labels kept on disk; the trainer strips them
  Dataset target_test;
};

DomainPair generate_domain_pair(const DomainShiftSpec& spec);

// Files ----------------------------------------------------------------------

/// Raised for a bad magic number or an inconsistent header.
class FormatError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Raised when the byte count does not match the header.
class TruncationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode(const Dataset& d);
Dataset decode(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void save(const Dataset& d, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

/// Directory layout: source_train.dcn, source_test.dcn, target_train.dcn,
/// target_test.dcn and spec.json.
void save_pair(const DomainPair& pair, const DomainShiftSpec& spec, const std::filesystem::path& dir);
DomainPair load_pair(const std::filesystem::path& dir);
/// Like load_pair, but target_train comes back without labels.
DomainPair load_training_view(const std::filesystem::path& dir);

// Batching -------------------------------------------------------------------

/// Indices of a seeded, epoch-shuffled stream of batches. Every epoch is a
/// fresh permutation drawn from (seed, epoch); the final short batch of an
/// epoch is kept. `batch(step)` is a pure function, so iteration can resume
/// at any step.
class BatchIterator {
 public:
  BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::vector<std::size_t> batch(std::size_t step) const;

  /// Sequential interface over `batch`.
  std::vector<std::size_t> next() { return batch(cursor_++); }
  void seek(std::size_t step) { cursor_ = step; }
  std::size_t position() const { return cursor_; }

 private:
  std::vector<std::size_t> permutation(std::size_t epoch) const;

  std::size_t size_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t batches_per_epoch_;
  std::size_t cursor_ = 0;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> cached_;
};

/// SplitMix64 finaliser; used to derive independent seeds from tuples.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dcan::data
