#pragma once

// Cross-entropy training of a FusionModel with momentum SGD, step-decay
// learning rate and the balancing-method hooks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "balancelab/datagen.hpp"
#include "balancelab/fusion.hpp"
#include "balancelab/methods.hpp"
#include "balancelab/metrics.hpp"

namespace balancelab {

struct TrainConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t step_size = 30;
  double gamma = 0.1;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument on lr <= 0, momentum outside [0,1), gamma outside (0,1], ...
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Smoothing factor of the running modality scores: r ← 0.7·r + 0.3·score.
inline constexpr double kScoreSmoothing = 0.7;

struct TrainState {
  FusionModel model;
  FusionGradients velocity;
  std::size_t epoch = 0;
  std::vector<double> running_scores;  // empty until the first batch

  explicit TrainState(FusionModel m);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  std::vector<double> scores;
  std::uint64_t flops_cumulative = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0: the initial model was kept
  FlopsLedger flops;
  std::vector<std::string> warnings;

  /// epoch,lr,train_loss,val_acc,score_1..score_m,flops_cumulative
  std::string to_csv(std::size_t modalities) const;
};

/// Max-subtracted softmax. Throws NumericError on non-finite input.
std::vector<double> softmax(std::span<const double> logits);

struct CrossEntropy {
  double loss = 0.0;  // batch mean of −log p(y)
  Matrix grad;        // (softmax − onehot) / B
};

/// Throws ContractError if a label is out of range.
CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::size_t> labels);

/// g ← g + wd·θ;  v ← μ·v + g;  θ ← θ − lr·v. Throws ShapeError on mismatch.
void sgd_step(TrainState& state, const FusionGradients& grads, double lr, double momentum, double weight_decay);

/// lr·gamma^⌊epoch/step_size⌋ for a 0-based epoch.
double step_lr(const TrainConfig& config, std::size_t epoch);

/// Batch mean of softmax(partial_logits(i)) at the true class, per modality.
std::vector<double> modality_scores(const FusionModel& model, const ForwardCache& cache,
                                    std::span<const std::size_t> labels);

struct FitResult {
  FusionModel model;  // best validation accuracy, ties to the earlier epoch
  TrainLog log;
};

/// Trains `model` on `train` with the given method, selecting on `val`.
/// Throws DivergenceError on a non-finite loss.
FitResult fit(const Dataset& train, const Dataset& val, FusionModel model, const TrainConfig& config,
              const MethodSpec& method);

/// One training step on `batch` (rows of `train`); exposed for tests.
/// Returns the objective value.
double train_step(TrainState& state, const Dataset& train, const Batch& batch, const TrainConfig& config,
                  const MethodSpec& method, double lr, std::uint64_t hook_seed, TrainLog& log);

/// Loss-only objective for gradient checks: the fused cross-entropy of
/// `model` on (inputs, labels), and its exact gradient.
double fused_loss(const FusionModel& model, std::span<const Matrix> inputs, std::span<const std::size_t> labels,
                  FusionGradients* grads);

}  // namespace balancelab
