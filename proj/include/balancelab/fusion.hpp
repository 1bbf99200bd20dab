#pragma once

// Concatenation-fusion classifier: f(x) = Σ_i W^i·Φ^i(x^i) + b.
//
// Each modality has its own MLP encoder Φ^i; the linear head is stored as one
// block W^i per modality. Masking a modality replaces its feature vector by
// zeros, so the empty mask leaves the bias alone.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "balancelab/numkit.hpp"

namespace balancelab {

/// Per-modality encoder layer sizes {d_in, hidden..., d_feature}.
struct ModelArch {
  std::vector<std::vector<std::size_t>> encoders;
  std::size_t classes = 0;

  std::size_t modalities() const noexcept { return encoders.size(); }
  /// Throws ShapeError on empty or zero-sized layers.
  void validate() const;
  friend bool operator==(const ModelArch&, const ModelArch&) = default;
};

/// Same hidden sizes and feature width for every modality.
ModelArch uniform_arch(std::span<const std::size_t> input_dims, std::span<const std::size_t> hidden,
                       std::size_t feature_dim, std::size_t classes);

enum class HeadKind { Linear, Cosine };

struct FusionModel {
  std::vector<MlpParams> encoders;
  std::vector<Matrix> head;      // classes × d_feature^i
  std::vector<double> bias;      // classes
  HeadKind head_kind = HeadKind::Linear;
  double cosine_scale = 1.0;     // used only by HeadKind::Cosine
  std::uint64_t seed = 0;

  std::size_t modalities() const noexcept { return encoders.size(); }
  std::size_t classes() const noexcept { return bias.size(); }
  ModelArch arch() const;
  /// Throws ShapeError if encoders, head blocks and bias disagree.
  void validate() const;

  friend bool operator==(const FusionModel&, const FusionModel&) = default;
};

/// Glorot-uniform weights (the head counts as one layer over the concatenated
/// features), zero biases. Deterministic in `seed`.
FusionModel init_model(const ModelArch& arch, std::uint64_t seed);

struct ModalityMask {
  std::vector<bool> present;

  static ModalityMask all(std::size_t m) { return {std::vector<bool>(m, true)}; }
  static ModalityMask none(std::size_t m) { return {std::vector<bool>(m, false)}; }
  static ModalityMask only(std::size_t m, std::size_t i);
  /// Bit i of `bits` selects modality i.
  static ModalityMask from_bits(std::size_t m, unsigned bits);

  std::size_t size() const noexcept { return present.size(); }
  bool operator[](std::size_t i) const { return present[i]; }
  friend bool operator==(const ModalityMask&, const ModalityMask&) = default;
};

struct ForwardCache {
  std::vector<std::optional<MlpCache>> encoder_caches;  // nullopt when masked out
  std::vector<Matrix> features;                         // B × d_feature^i, zeros when masked out
  Matrix logits;                                        // B × classes
  ModalityMask mask;

  std::size_t batch_size() const noexcept { return logits.rows(); }
};

/// Encoder outputs only; masked modalities get zero features and no cache.
ForwardCache encode(const FusionModel& model, std::span<const Matrix> inputs, const ModalityMask& mask);

/// Head applied to (possibly modified) features.
Matrix head_logits(const FusionModel& model, std::span<const Matrix> features, const ModalityMask& mask);

ForwardCache forward(const FusionModel& model, std::span<const Matrix> inputs, const ModalityMask& mask);

/// One modality's additive share of the logits: W^i·Φ^i + b/m for the linear
/// head (so the shares sum to the logits), s·cos(W^i_h, Φ^i) for the cosine head.
Matrix partial_logits(const FusionModel& model, const ForwardCache& cache, std::size_t modality);
Matrix partial_logits(const FusionModel& model, std::span<const Matrix> features, std::size_t modality);

/// Row-wise argmax, ties to the lowest index. Throws NumericError on non-finite input.
std::vector<std::size_t> predict(const Matrix& logits);

/// Gradients for every parameter of a FusionModel.
struct FusionGradients {
  std::vector<MlpGradients> encoders;
  std::vector<Matrix> head;
  std::vector<double> bias;
};

FusionGradients zero_gradients(const FusionModel& model);

/// Linear-head backward for ∂L/∂logits. Accumulates head and bias gradients into
/// `grads` and returns ∂L/∂Φ^i for every present modality (empty when masked).
std::vector<Matrix> head_backward(const FusionModel& model, std::span<const Matrix> features,
                                  const ModalityMask& mask, const Matrix& logit_grad,
                                  FusionGradients& grads);

/// Backward through partial_logits(i) of the linear head: returns ∂L/∂W^i, adds
/// the b/m share into grads.bias, and returns ∂L/∂Φ^i through `feature_grad`.
Matrix partial_backward(const FusionModel& model, std::span<const Matrix> features, std::size_t modality,
                        const Matrix& partial_grad, FusionGradients& grads, Matrix& feature_grad);

/// Encoder backward for every present modality; accumulates into grads.encoders.
void encoders_backward(const FusionModel& model, const ForwardCache& cache,
                       std::span<const Matrix> feature_grads, FusionGradients& grads);

/// Flat parameter vector (encoders, then head blocks, then bias) and its inverse.
std::vector<double> flatten(const FusionModel& model);
std::vector<double> flatten(const FusionModel& like, const FusionGradients& grads);
FusionModel unflatten(std::span<const double> flat, const FusionModel& like);

/// Checkpoint text format, BLCK v1.
std::string to_text(const FusionModel& model);
FusionModel model_from_text(const std::string& text);
void save_model(const FusionModel& model, const std::filesystem::path& path);
FusionModel load_model(const std::filesystem::path& path);

}  // namespace balancelab
