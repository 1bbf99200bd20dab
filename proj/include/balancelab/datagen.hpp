#pragma once

// Synthetic multimodal classification data: generation, splitting, batching
// and the MMDS text file format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "balancelab/numkit.hpp"

namespace balancelab {

/// Gaussian class-conditional model. Modality i of a class-h sample is
/// signal[i]·μ_h^i + noise·ε, with μ_h^i a random unit vector.
struct SyntheticSpec {
  std::size_t modalities = 2;
  std::size_t classes = 4;
  std::vector<std::size_t> dims{12, 12};
  std::vector<double> signal{3.0, 1.0};
  double noise = 1.0;
  std::size_t samples = 4000;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument on any violated constraint.
  void validate() const;
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Labels are 0-based in memory. The MMDS file stores them 1-based.
struct Dataset {
  std::vector<Matrix> features;      // one N × d_i matrix per modality
  std::vector<std::size_t> labels;   // N entries in [0, classes)
  std::size_t classes = 0;
  std::optional<SyntheticSpec> spec; // set when produced by generate()
  std::string origin;                // free-form tag, e.g. the source path

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t modalities() const noexcept { return features.size(); }
  std::vector<std::size_t> dims() const;
  /// Throws InvalidArgument unless shapes agree and labels are in range.
  void validate() const;

  /// Equality of contents; spec and origin are metadata and ignored.
  bool same_contents(const Dataset& other) const;
};

/// Per-modality class means (classes × d_i), exactly as generate() draws them.
std::vector<Matrix> class_means(const SyntheticSpec& spec);

Dataset generate(const SyntheticSpec& spec);

/// Rows of `data` at `index`, all modalities.
Dataset subset(const Dataset& data, std::span<const std::size_t> index);
/// Keeps only the listed modalities (0-based), in the given order.
Dataset select_modalities(const Dataset& data, std::span<const std::size_t> keep);

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Index partition behind split(); each list is sorted ascending.
std::array<std::vector<std::size_t>, 3> split_indices(const Dataset& data, SplitFractions fractions,
                                                      std::uint64_t seed);

/// Stratified, seeded three-way split. Throws InvalidArgument if a part would be empty.
Splits split(const Dataset& data, SplitFractions fractions, std::uint64_t seed);

using Batch = std::vector<std::size_t>;

/// Without weights: a seeded permutation of [0, n) chunked into batches, the last
/// one possibly short. With weights: n draws with replacement proportional to weight.
std::vector<Batch> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                           std::optional<std::span<const double>> weights = std::nullopt);

void save(const Dataset& data, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

/// Serialises to / parses from MMDS v1 text.
std::string to_text(const Dataset& data);
Dataset from_text(const std::string& text);

/// Decimal with 17 significant digits; strtod recovers the exact double.
std::string format_double(double v);

}  // namespace balancelab
