#include "balancelab/methods.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "balancelab/errors.hpp"
#include "balancelab/random.hpp"
#include "balancelab/trainer.hpp"

namespace balancelab {

namespace {

constexpr double kCosineEps = 1e-12;
constexpr double kDropCap = 0.99;

struct MethodInfo {
  MethodKind kind;
  std::string_view name;
  MethodGroup group;
};

constexpr std::array<MethodInfo, 8> kMethods{{
    {MethodKind::Baseline, "baseline", MethodGroup::Baseline},
    {MethodKind::UnimodalBlend, "blend", MethodGroup::Objective},
    {MethodKind::CosineLogits, "cosine", MethodGroup::Objective},
    {MethodKind::KlAlign, "klalign", MethodGroup::Objective},
    {MethodKind::GradModulation, "gradmod", MethodGroup::Optimization},
    {MethodKind::FeatureMask, "featmask", MethodGroup::FeedForward},
    {MethodKind::FeatureDrop, "featdrop", MethodGroup::FeedForward},
    {MethodKind::Resample, "resample", MethodGroup::Data},
}};

constexpr std::array<MethodKind, 8> kOrder{
    MethodKind::Baseline,       MethodKind::UnimodalBlend, MethodKind::CosineLogits, MethodKind::KlAlign,
    MethodKind::GradModulation, MethodKind::FeatureMask,   MethodKind::FeatureDrop,  MethodKind::Resample,
};

constexpr std::array<std::string_view, 7> kParamNames{"w_uni",         "scale",    "lambda", "alpha",
                                                      "mask_fraction", "drop_max", "tau"};

double* param_slot(MethodSpec& spec, std::string_view name) {
  if (name == "w_uni") return &spec.w_uni;
  if (name == "scale") return &spec.scale;
  if (name == "lambda") return &spec.lambda;
  if (name == "alpha") return &spec.alpha;
  if (name == "mask_fraction") return &spec.mask_fraction;
  if (name == "drop_max") return &spec.drop_max;
  if (name == "tau") return &spec.tau;
  return nullptr;
}

double norm(std::span<const double> v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

std::vector<double> log_softmax(std::span<const double> a) {
  const double mx = *std::max_element(a.begin(), a.end());
  double z = 0.0;
  for (double v : a) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] - lz;
  return out;
}

}  // namespace

void MethodSpec::validate() const {
  auto nonneg = [](double v, const char* what) {
    if (!(v >= 0.0)) throw InvalidArgument(std::string(what) + " must be >= 0");
  };
  auto unit = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument(std::string(what) + " must lie in [0, 1]");
  };
  nonneg(w_uni, "w_uni");
  nonneg(lambda, "lambda");
  nonneg(alpha, "alpha");
  unit(mask_fraction, "mask_fraction");
  unit(drop_max, "drop_max");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidArgument("scale must be positive and finite");
  if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
}

std::string_view method_name(MethodKind kind) {
  for (const auto& m : kMethods)
    if (m.kind == kind) return m.name;
  throw DispatchError("unknown method kind");
}

MethodKind parse_method_kind(std::string_view name) {
  for (const auto& m : kMethods)
    if (m.name == name) return m.kind;
  throw DispatchError("unknown method '" + std::string(name) + "'");
}

MethodGroup method_group(MethodKind kind) {
  for (const auto& m : kMethods)
    if (m.kind == kind) return m.group;
  throw DispatchError("unknown method kind");
}

std::string_view group_name(MethodGroup group) {
  switch (group) {
    case MethodGroup::Baseline: return "Baseline";
    case MethodGroup::Objective: return "Objective";
    case MethodGroup::Optimization: return "Optimization";
    case MethodGroup::FeedForward: return "Feed-forward";
    case MethodGroup::Data: return "Data";
  }
  return "?";
}

std::span<const MethodKind> all_methods() { return kOrder; }

std::span<const std::string_view> method_param_names() { return kParamNames; }

double method_param(const MethodSpec& spec, std::string_view name) {
  auto* slot = param_slot(const_cast<MethodSpec&>(spec), name);
  if (!slot) throw DispatchError("unknown method parameter '" + std::string(name) + "'");
  return *slot;
}

void set_method_param(MethodSpec& spec, std::string_view name, double value) {
  auto* slot = param_slot(spec, name);
  if (!slot) throw DispatchError("unknown method parameter '" + std::string(name) + "'");
  *slot = value;
}

std::size_t dominant_modality(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("dominant_modality: no scores");
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

double dominance_ratio(std::span<const double> scores, std::size_t modality) {
  if (scores.size() < 2) return 1.0;
  double others = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != modality) others += scores[j];
  others /= static_cast<double>(scores.size() - 1);
  return scores[modality] / others;
}

// ---------------------------------------------------------------------------
// Objective

ObjectiveGrads unimodal_blend_loss(const FusionModel& model, const ForwardCache& cache,
                                   std::span<const std::size_t> labels, double w_uni) {
  auto fused = cross_entropy(cache.logits, labels);
  ObjectiveGrads out;
  out.loss = fused.loss;
  out.full = std::move(fused.grad);
  out.partial.resize(model.modalities());
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    auto uni = cross_entropy(partial_logits(model, cache, i), labels);
    out.loss += w_uni * uni.loss;
    for (double& g : uni.grad.values()) g *= w_uni;
    out.partial[i] = std::move(uni.grad);
  }
  return out;
}

Matrix project_conflict(const Matrix& g_uni, const Matrix& g_mm) {
  if (g_uni.rows() != g_mm.rows() || g_uni.cols() != g_mm.cols()) throw ShapeError("project_conflict: shapes differ");
  auto u = g_uni.values();
  auto v = g_mm.values();
  const double dot = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
  const double vv = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
  if (!(dot < 0.0) || !(vv > 0.0)) return g_uni;
  Matrix out = g_uni;
  axpy(-dot / vv, g_mm, out);
  return out;
}

std::vector<Matrix> objective_backward(const FusionModel& model, std::span<const Matrix> features,
                                       const ObjectiveGrads& objective, bool project_conflicts,
                                       FusionGradients& grads) {
  std::vector<Matrix> feature_grads(model.modalities());
  const auto db = column_sums(objective.full);
  for (std::size_t h = 0; h < db.size(); ++h) grads.bias[h] += db[h];
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    Matrix block = matmul_tn(objective.full, features[i]);
    feature_grads[i] = matmul(objective.full, model.head[i]);
    if (i < objective.partial.size() && !objective.partial[i].empty()) {
      Matrix partial_feature_grad;
      Matrix uni = partial_backward(model, features, i, objective.partial[i], grads, partial_feature_grad);
      if (project_conflicts) uni = project_conflict(uni, block);
      axpy(1.0, uni, block);
      axpy(1.0, partial_feature_grad, feature_grads[i]);
    }
    axpy(1.0, block, grads.head[i]);
  }
  return feature_grads;
}

Matrix cosine_partial(const FusionModel& model, const Matrix& features, std::size_t modality, double scale) {
  const Matrix& w = model.head.at(modality);
  if (features.cols() != w.cols()) throw ShapeError("cosine_partial: feature width mismatch");
  std::vector<double> row_norm(w.rows());
  for (std::size_t h = 0; h < w.rows(); ++h) row_norm[h] = std::max(norm(w.row(h)), kCosineEps);
  Matrix out(features.rows(), w.rows());
  for (std::size_t b = 0; b < features.rows(); ++b) {
    auto v = features.row(b);
    const double nv = std::max(norm(v), kCosineEps);
    for (std::size_t h = 0; h < w.rows(); ++h) {
      auto u = w.row(h);
      const double dot = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
      out(b, h) = scale * dot / (row_norm[h] * nv);
    }
  }
  return out;
}

Matrix cosine_logits(const FusionModel& model, std::span<const Matrix> features, const ModalityMask& mask,
                     double scale) {
  if (features.empty()) throw ShapeError("cosine_logits: no modalities");
  Matrix logits(features.front().rows(), model.classes());
  for (std::size_t i = 0; i < model.modalities(); ++i)
    if (mask[i]) axpy(1.0, cosine_partial(model, features[i], i, scale), logits);
  return logits;
}

Matrix cosine_logits(const FusionModel& model, const ForwardCache& cache, double scale) {
  return cosine_logits(model, cache.features, cache.mask, scale);
}

std::vector<Matrix> cosine_backward(const FusionModel& model, std::span<const Matrix> features,
                                    const ModalityMask& mask, double scale, const Matrix& logit_grad,
                                    FusionGradients& grads) {
  std::vector<Matrix> feature_grads(model.modalities());
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    if (!mask[i]) continue;
    const Matrix& w = model.head[i];
    const Matrix& f = features[i];
    Matrix fg(f.rows(), f.cols());
    Matrix& wg = grads.head[i];
    std::vector<double> wn(w.rows());
    for (std::size_t h = 0; h < w.rows(); ++h) wn[h] = norm(w.row(h));
    for (std::size_t b = 0; b < f.rows(); ++b) {
      auto v = f.row(b);
      const double vn = norm(v);
      const double nv = std::max(vn, kCosineEps);
      for (std::size_t h = 0; h < w.rows(); ++h) {
        const double g = scale * logit_grad(b, h);
        if (g == 0.0) continue;
        auto u = w.row(h);
        const double nu = std::max(wn[h], kCosineEps);
        const double c = std::inner_product(u.begin(), u.end(), v.begin(), 0.0) / (nu * nv);
        // The floor is a constant below eps, so only the unclamped norm has a derivative.
        const double du = wn[h] >= kCosineEps ? c / (wn[h] * wn[h]) : 0.0;
        const double dv = vn >= kCosineEps ? c / (vn * vn) : 0.0;
        auto wrow = wg.row(h);
        auto frow = fg.row(b);
        for (std::size_t j = 0; j < u.size(); ++j) {
          wrow[j] += g * (v[j] / (nu * nv) - du * u[j]);
          frow[j] += g * (u[j] / (nu * nv) - dv * v[j]);
        }
      }
    }
    feature_grads[i] = std::move(fg);
  }
  return feature_grads;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) kl += p[k] * (std::log(p[k]) - std::log(q[k]));
  return kl;
}

KlAlignResult kl_align_loss(const FusionModel& model, const ForwardCache& cache, double lambda) {
  const std::size_t m = model.modalities();
  KlAlignResult out;
  std::vector<Matrix> partials;
  for (std::size_t i = 0; i < m; ++i) {
    partials.push_back(partial_logits(model, cache, i));
    out.partial.emplace_back(partials.back().rows(), partials.back().cols());
  }
  if (m < 2) return out;
  const std::size_t batch = cache.batch_size();
  const std::size_t classes = model.classes();
  const double scale = lambda / static_cast<double>(batch);
  std::vector<std::vector<double>> lp(m), p(m);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      lp[i] = log_softmax(partials[i].row(b));
      p[i].resize(classes);
      for (std::size_t h = 0; h < classes; ++h) p[i][h] = std::exp(lp[i][h]);
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        double kl_ij = 0.0, kl_ji = 0.0;
        for (std::size_t h = 0; h < classes; ++h) {
          kl_ij += p[i][h] * (lp[i][h] - lp[j][h]);
          kl_ji += p[j][h] * (lp[j][h] - lp[i][h]);
        }
        out.loss += scale * (kl_ij + kl_ji);
        auto gi = out.partial[i].row(b);
        auto gj = out.partial[j].row(b);
        for (std::size_t h = 0; h < classes; ++h) {
          gi[h] += scale * (p[i][h] * (lp[i][h] - lp[j][h] - kl_ij) + p[i][h] - p[j][h]);
          gj[h] += scale * (p[j][h] * (lp[j][h] - lp[i][h] - kl_ji) + p[j][h] - p[i][h]);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

std::vector<double> grad_modulation(std::span<const double> scores, double alpha) {
  if (!(alpha >= 0.0)) throw InvalidArgument("modulation strength alpha must be >= 0");
  std::vector<double> kappa(scores.size(), 1.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double rho = dominance_ratio(scores, i);
    if (rho > 1.0) {
      // 1 - tanh(x) written so it does not round to zero for moderate x
      const double e = std::exp(-2.0 * alpha * (rho - 1.0));
      kappa[i] = 2.0 * e / (1.0 + e);
    }
  }
  return kappa;
}

void apply_modulation(std::span<const double> coefficients, FusionGradients& grads) {
  if (coefficients.size() != grads.encoders.size()) throw ShapeError("apply_modulation: one coefficient per modality");
  for (std::size_t i = 0; i < coefficients.size(); ++i) {
    const double k = coefficients[i];
    if (k == 1.0) continue;
    for (auto& layer : grads.encoders[i].layers) {
      for (double& g : layer.weight.values()) g *= k;
      for (double& g : layer.bias) g *= k;
    }
  }
}

// ---------------------------------------------------------------------------
// Feed-forward

std::optional<FeatureScaling> feature_mask(std::span<const Matrix> features, std::span<const double> scores,
                                           double mask_fraction, Rng& rng) {
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) throw InvalidArgument("mask_fraction must lie in [0, 1]");
  const std::size_t dom = dominant_modality(scores);
  const Matrix& f = features[dom];
  const auto k = static_cast<std::size_t>(std::ceil(mask_fraction * static_cast<double>(f.cols())));
  if (k == 0) return std::nullopt;
  std::vector<std::size_t> cols(f.cols());
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  for (std::size_t j = 0; j < k; ++j) std::swap(cols[j], cols[j + rng.index(cols.size() - j)]);
  FeatureScaling s{dom, Matrix(f.rows(), f.cols(), 1.0), false};
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t j = 0; j < k; ++j) s.multiplier(r, cols[j]) = 0.0;
  return s;
}

std::optional<FeatureScaling> feature_drop(std::span<const Matrix> features, std::span<const double> scores,
                                           double drop_max, Rng& rng) {
  if (!(drop_max >= 0.0 && drop_max <= 1.0)) throw InvalidArgument("drop_max must lie in [0, 1]");
  const std::size_t dom = dominant_modality(scores);
  double p = drop_max * std::clamp(dominance_ratio(scores, dom) - 1.0, 0.0, 1.0);
  if (!(p > 0.0)) return std::nullopt;
  bool capped = false;
  if (p > kDropCap) {
    p = kDropCap;
    capped = true;
  }
  const Matrix& f = features[dom];
  FeatureScaling s{dom, Matrix(f.rows(), f.cols()), capped};
  const double keep = 1.0 / (1.0 - p);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    const double v = rng.uniform() < p ? 0.0 : keep;
    for (double& x : s.multiplier.row(r)) x = v;
  }
  return s;
}

void apply_scaling(const FeatureScaling& s, std::vector<Matrix>& features) {
  Matrix& f = features.at(s.modality);
  if (f.rows() != s.multiplier.rows() || f.cols() != s.multiplier.cols()) throw ShapeError("apply_scaling: shape mismatch");
  auto fv = f.values();
  auto mv = s.multiplier.values();
  for (std::size_t k = 0; k < fv.size(); ++k) fv[k] *= mv[k];
}

// ---------------------------------------------------------------------------
// Data

std::vector<double> resample_weights(const FusionModel& model, const Dataset& train, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("resample temperature tau must be positive");
  const std::size_t n = train.size();
  const std::size_t m = model.modalities();
  const auto cache = forward(model, train.features, ModalityMask::all(m));
  std::vector<std::vector<double>> contrib(m, std::vector<double>(n));
  std::vector<double> mean(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const Matrix partial = partial_logits(model, cache, i);
    for (std::size_t k = 0; k < n; ++k) {
      contrib[i][k] = softmax(partial.row(k))[train.labels[k]];
      mean[i] += contrib[i][k];
    }
  }
  const std::size_t weak = static_cast<std::size_t>(std::min_element(mean.begin(), mean.end()) - mean.begin());
  const auto& c = contrib[weak];
  const double top = *std::max_element(c.begin(), c.end());
  std::vector<double> w(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = std::exp((c[k] - top) / tau);
    total += w[k];
  }
  const double norm_factor = static_cast<double>(n) / total;
  for (double& x : w) x *= norm_factor;
  return w;
}

}  // namespace balancelab
