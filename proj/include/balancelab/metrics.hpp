#pragma once

// Performance, Shapley-based modality imbalance, and FLOPs accounting.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "balancelab/datagen.hpp"
#include "balancelab/fusion.hpp"

namespace balancelab {

struct PerfReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Fraction of equal entries. Throws ContractError on empty or unequal input.
double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

/// Unweighted mean of per-class F1; a class with P + R = 0 scores 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t classes);

PerfReport performance(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                       std::size_t classes);

/// Accuracy of the model on `data` with only the modalities in `subset` present.
double value_function(const FusionModel& model, const Dataset& data, const ModalityMask& subset);

struct ShapleyReport {
  std::vector<double> phi;
  /// v(A) indexed by bitmask (bit i = modality i present); size 2^m.
  std::vector<double> subset_values;
  double imbalance = 0.0;
};

/// Shapley values from a table of 2^m subset values (bitmask-indexed), by
/// averaging marginal contributions over all m! orderings.
std::vector<double> shapley_values(std::span<const double> subset_values, std::size_t modalities);

/// Evaluates v on every subset once and fills a ShapleyReport. m must be 2 or 3.
ShapleyReport shapley(const FusionModel& model, const Dataset& data);
ShapleyReport shapley_from_values(std::span<const double> subset_values, std::size_t modalities);

/// |φ1 − φ2| for two modalities; mean pairwise |φi − φj| for three.
double imbalance(std::span<const double> phi);

enum class FlopKind {
  LinearForward,   // (p×q)·(q×r) plus a bias: 2pqr + pr
  MatmulForward,   // no bias: 2pqr
  LinearBackward,  // two matmuls: 4pqr
  Elementwise,     // one per element
  SoftmaxLoss,     // five per logit
};

enum class FlopCategory { ForwardMatmul, BackwardMatmul, Elementwise, SoftmaxLoss };

struct FlopShape {
  std::uint64_t p = 0;
  std::uint64_t q = 0;
  std::uint64_t r = 0;
};

/// Running FLOP counts of one training run.
class FlopsLedger {
 public:
  void record(FlopKind kind, FlopShape shape);
  std::uint64_t total() const noexcept;
  std::uint64_t category(FlopCategory c) const noexcept { return counts_[static_cast<std::size_t>(c)]; }
  friend bool operator==(const FlopsLedger&, const FlopsLedger&) = default;

 private:
  std::array<std::uint64_t, 4> counts_{};
};

/// Free-function form: returns the ledger after recording.
FlopsLedger flops_record(FlopsLedger ledger, FlopKind kind, FlopShape shape);

/// FLOPs of one forward pass of an MLP on `batch` rows.
void record_mlp_forward(FlopsLedger& ledger, const MlpParams& mlp, std::size_t batch);
void record_mlp_backward(FlopsLedger& ledger, const MlpParams& mlp, std::size_t batch);

}  // namespace balancelab
