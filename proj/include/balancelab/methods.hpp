#pragma once

// Balancing methods, one or more per taxonomy group:
//
//   Objective     UnimodalBlend, CosineLogits, KlAlign
//   Optimization  GradModulation
//   Feed-forward  FeatureMask, FeatureDrop
//   Data          Resample
//
// Each is a hook the trainer calls at a fixed point of the step. Every method
// has a neutral strength (w_uni = 0, λ = 0, α = 0, ρ_mask = 0, p_max = 0,
// τ = ∞) at which its hook is an exact no-op.

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "balancelab/datagen.hpp"
#include "balancelab/fusion.hpp"

namespace balancelab {

class Rng;

enum class MethodKind {
  Baseline,
  UnimodalBlend,
  CosineLogits,
  KlAlign,
  GradModulation,
  FeatureMask,
  FeatureDrop,
  Resample,
};

enum class MethodGroup { Baseline, Objective, Optimization, FeedForward, Data };

struct MethodSpec {
  MethodKind kind = MethodKind::Baseline;
  double w_uni = 1.0;          // UnimodalBlend: weight of each unimodal loss
  double scale = 10.0;         // CosineLogits: logit scale s
  double lambda = 0.5;         // KlAlign: weight of the symmetric KL term
  double alpha = 1.0;          // GradModulation: modulation strength
  double mask_fraction = 0.5;  // FeatureMask: fraction ρ_mask of dominant features zeroed
  double drop_max = 0.5;       // FeatureDrop: drop probability ceiling p_max
  double tau = 0.25;           // Resample: temperature

  /// Throws InvalidArgument on negative strengths or fractions outside [0, 1].
  void validate() const;
  friend bool operator==(const MethodSpec&, const MethodSpec&) = default;
};

/// Config spelling of each kind: baseline, blend, cosine, klalign, gradmod,
/// featmask, featdrop, resample.
std::string_view method_name(MethodKind kind);
/// Throws DispatchError for an unknown name.
MethodKind parse_method_kind(std::string_view name);
MethodGroup method_group(MethodKind kind);
std::string_view group_name(MethodGroup group);
/// All kinds in table order: Baseline, then Objective, Optimization, Feed-forward, Data.
std::span<const MethodKind> all_methods();

/// Names of the numeric parameters (config keys under `method.`).
std::span<const std::string_view> method_param_names();
/// Reads / writes a parameter by its config name. Throws DispatchError if unknown.
double method_param(const MethodSpec& spec, std::string_view name);
void set_method_param(MethodSpec& spec, std::string_view name, double value);

// ---------------------------------------------------------------------------
// Dominance helpers. Scores are per-modality performance scores in (0, 1).

/// Highest score, ties to the lowest index.
std::size_t dominant_modality(std::span<const double> scores);
/// score_i / mean_{j≠i} score_j.
double dominance_ratio(std::span<const double> scores, std::size_t modality);

// ---------------------------------------------------------------------------
// Objective

/// Logit-space gradients of an objective: ∂L/∂(fused logits) and, where the
/// objective uses them, ∂L/∂(partial logits of modality i).
struct ObjectiveGrads {
  double loss = 0.0;
  Matrix full;
  std::vector<Matrix> partial;  // empty matrix = unused
};

/// L = CE(fused) + w_uni·Σ_i CE(partial_i). Uses the full-mask cache.
ObjectiveGrads unimodal_blend_loss(const FusionModel& model, const ForwardCache& cache,
                                   std::span<const std::size_t> labels, double w_uni);

/// Removes from `g_uni` its component along `g_mm` when the two conflict
/// (negative inner product); otherwise returns it unchanged.
Matrix project_conflict(const Matrix& g_uni, const Matrix& g_mm);

/// Backward of an ObjectiveGrads through a linear head; accumulates into
/// `grads` and returns ∂L/∂Φ^i. With `project_conflicts`, each modality's
/// partial-logit head-block gradient goes through project_conflict against the
/// fused-loss block gradient first.
std::vector<Matrix> objective_backward(const FusionModel& model, std::span<const Matrix> features,
                                       const ObjectiveGrads& objective, bool project_conflicts,
                                       FusionGradients& grads);

/// logit_h = s·Σ_i cos∠(W^i_h, Φ^i), norms floored at 1e-12, no bias.
Matrix cosine_logits(const FusionModel& model, std::span<const Matrix> features, const ModalityMask& mask,
                     double scale);
Matrix cosine_logits(const FusionModel& model, const ForwardCache& cache, double scale);
/// Cosine term of one modality only.
Matrix cosine_partial(const FusionModel& model, const Matrix& features, std::size_t modality, double scale);

/// Backward of cosine_logits; accumulates head gradients and returns ∂L/∂Φ^i.
std::vector<Matrix> cosine_backward(const FusionModel& model, std::span<const Matrix> features,
                                    const ModalityMask& mask, double scale, const Matrix& logit_grad,
                                    FusionGradients& grads);

struct KlAlignResult {
  double loss = 0.0;             // λ·mean over batch of Σ_{i<j} symmetric KL
  std::vector<Matrix> partial;   // gradient w.r.t. each modality's partial logits
};

/// Symmetric KL between the partial-logit softmax distributions of every pair
/// of modalities, scaled by λ. Gradients flow to both sides.
KlAlignResult kl_align_loss(const FusionModel& model, const ForwardCache& cache, double lambda);

/// KL(p ‖ q) in nats.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// ---------------------------------------------------------------------------
// Optimization

/// κ^i = 1 − tanh(α·(ρ^i − 1)) where ρ^i = dominance_ratio > 1, else 1.
/// Throws InvalidArgument for α < 0.
std::vector<double> grad_modulation(std::span<const double> scores, double alpha);

/// Multiplies every encoder gradient of modality i by coefficients[i].
void apply_modulation(std::span<const double> coefficients, FusionGradients& grads);

// ---------------------------------------------------------------------------
// Feed-forward

/// Elementwise multiplier for one modality's features (B × d_feature).
struct FeatureScaling {
  std::size_t modality = 0;
  Matrix multiplier;
  bool capped = false;  // FeatureDrop hit the 0.99 probability cap
};

/// Zeroes a random ⌈ρ·d⌉ subset of the dominant modality's feature columns for
/// the whole batch. nullopt when nothing is masked.
std::optional<FeatureScaling> feature_mask(std::span<const Matrix> features, std::span<const double> scores,
                                           double mask_fraction, Rng& rng);

/// Per sample, drops the dominant modality's feature vector with probability
/// p = p_max·clip(ρ − 1, 0, 1) and scales survivors by 1/(1 − p). nullopt when p = 0.
std::optional<FeatureScaling> feature_drop(std::span<const Matrix> features, std::span<const double> scores,
                                           double drop_max, Rng& rng);

/// features[s.modality] ⊙= s.multiplier.
void apply_scaling(const FeatureScaling& s, std::vector<Matrix>& features);

// ---------------------------------------------------------------------------
// Data

/// weight_k ∝ exp(c_k/τ) where c_k is the true-class probability under the
/// globally weakest modality's partial logits; normalised to mean 1.
/// Throws InvalidArgument unless τ > 0. τ = ∞ yields exactly uniform weights.
std::vector<double> resample_weights(const FusionModel& model, const Dataset& train, double tau);

}  // namespace balancelab
