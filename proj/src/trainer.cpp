#include "balancelab/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "balancelab/errors.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

constexpr std::uint64_t kBatchStream = 11;
constexpr std::uint64_t kHookStream = 12;

std::vector<Matrix> gather_inputs(const Dataset& data, const Batch& batch) {
  std::vector<Matrix> out;
  out.reserve(data.modalities());
  for (const auto& f : data.features) out.push_back(gather_rows(f, batch));
  return out;
}

std::vector<std::size_t> gather_labels(const Dataset& data, const Batch& batch) {
  std::vector<std::size_t> out;
  out.reserve(batch.size());
  for (auto k : batch) out.push_back(data.labels[k]);
  return out;
}

std::size_t total_parameters(const FusionModel& model) { return flatten(model).size(); }

void check_same_shape(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("sgd_step: gradient shape mismatch");
}

template <typename Fn>
void for_each_parameter(FusionModel& model, FusionGradients& velocity, const FusionGradients& grads, Fn&& fn) {
  if (grads.encoders.size() != model.encoders.size() || grads.head.size() != model.head.size() ||
      grads.bias.size() != model.bias.size())
    throw ShapeError("sgd_step: gradient layout does not match the model");
  auto each = [&](std::span<double> p, std::span<double> v, std::span<const double> g) {
    if (p.size() != g.size() || p.size() != v.size()) throw ShapeError("sgd_step: gradient shape mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) fn(p[k], v[k], g[k]);
  };
  for (std::size_t i = 0; i < model.encoders.size(); ++i) {
    auto& layers = model.encoders[i].layers;
    if (grads.encoders[i].layers.size() != layers.size()) throw ShapeError("sgd_step: encoder depth mismatch");
    for (std::size_t t = 0; t < layers.size(); ++t) {
      check_same_shape(layers[t].weight, grads.encoders[i].layers[t].weight);
      each(layers[t].weight.values(), velocity.encoders[i].layers[t].weight.values(),
           grads.encoders[i].layers[t].weight.values());
      each(layers[t].bias, velocity.encoders[i].layers[t].bias, grads.encoders[i].layers[t].bias);
    }
  }
  for (std::size_t i = 0; i < model.head.size(); ++i) {
    check_same_shape(model.head[i], grads.head[i]);
    each(model.head[i].values(), velocity.head[i].values(), grads.head[i].values());
  }
  each(model.bias, velocity.bias, grads.bias);
}

void record_head_forward(FlopsLedger& flops, const FusionModel& model, std::size_t batch) {
  for (const auto& w : model.head) flops.record(FlopKind::MatmulForward, {batch, w.cols(), w.rows()});
  flops.record(FlopKind::Elementwise, {batch, model.classes(), 0});
}

void record_head_backward(FlopsLedger& flops, const FusionModel& model, std::size_t batch) {
  for (const auto& w : model.head) flops.record(FlopKind::LinearBackward, {batch, w.cols(), w.rows()});
}

double evaluate_accuracy(const FusionModel& model, const Dataset& data) {
  const auto cache = forward(model, data.features, ModalityMask::all(model.modalities()));
  return accuracy(predict(cache.logits), data.labels);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be >= 0");
  if (step_size == 0) throw InvalidArgument("step size must be at least 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must lie in (0, 1]");
  if (batch_size == 0) throw InvalidArgument("batch size must be at least 1");
}

TrainState::TrainState(FusionModel m) : model(std::move(m)), velocity(zero_gradients(model)) {}

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string TrainLog::to_csv(std::size_t modalities) const {
  std::string out = "epoch,lr,train_loss,val_acc";
  for (std::size_t i = 0; i < modalities; ++i) out += ",score_" + std::to_string(i + 1);
  out += ",flops_cumulative\n";
  for (const auto& r : epochs) {
    out += std::to_string(r.epoch) + ',' + shortest(r.lr) + ',' + shortest(r.train_loss) + ',' + shortest(r.val_acc);
    for (std::size_t i = 0; i < modalities; ++i)
      out += ',' + (i < r.scores.size() ? shortest(r.scores[i]) : std::string());
    out += ',' + std::to_string(r.flops_cumulative) + '\n';
  }
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("softmax of an empty row");
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    z += p[k];
  }
  for (double& v : p) v /= z;
  return p;
}

CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) throw ContractError("cross_entropy: one label per row required");
  const std::size_t b = logits.rows();
  CrossEntropy ce{0.0, Matrix(b, logits.cols())};
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= logits.cols()) throw ContractError("cross_entropy: label out of range");
    auto row = logits.row(r);
    for (double v : row)
      if (!std::isfinite(v)) throw NumericError("cross_entropy: non-finite logit");
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    ce.loss += log_z - row[labels[r]];
    auto g = ce.grad.row(r);
    for (std::size_t h = 0; h < row.size(); ++h) g[h] = std::exp(row[h] - log_z) * inv_b;
    g[labels[r]] -= inv_b;
  }
  ce.loss *= inv_b;
  return ce;
}

void sgd_step(TrainState& state, const FusionGradients& grads, double lr, double momentum, double weight_decay) {
  for_each_parameter(state.model, state.velocity, grads, [&](double& p, double& v, double g) {
    const double gd = g + weight_decay * p;
    v = momentum * v + gd;
    p -= lr * v;
  });
}

double step_lr(const TrainConfig& config, std::size_t epoch) {
  const auto steps = static_cast<double>(epoch / config.step_size);
  return config.lr * std::pow(config.gamma, steps);
}

std::vector<double> modality_scores(const FusionModel& model, const ForwardCache& cache,
                                    std::span<const std::size_t> labels) {
  std::vector<double> scores(model.modalities(), 0.0);
  const std::size_t b = cache.batch_size() ? cache.batch_size() : cache.features.front().rows();
  if (labels.size() != b || b == 0) throw ContractError("modality_scores: one label per row required");
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    const Matrix partial = partial_logits(model, cache, i);
    double sum = 0.0;
    for (std::size_t r = 0; r < b; ++r) sum += softmax(partial.row(r))[labels[r]];
    scores[i] = sum / static_cast<double>(b);
  }
  return scores;
}

double fused_loss(const FusionModel& model, std::span<const Matrix> inputs, std::span<const std::size_t> labels,
                  FusionGradients* grads) {
  const auto mask = ModalityMask::all(model.modalities());
  const auto cache = forward(model, inputs, mask);
  auto ce = cross_entropy(cache.logits, labels);
  if (grads) {
    *grads = zero_gradients(model);
    std::vector<Matrix> fg;
    if (model.head_kind == HeadKind::Cosine)
      fg = cosine_backward(model, cache.features, mask, model.cosine_scale, ce.grad, *grads);
    else
      fg = head_backward(model, cache.features, mask, ce.grad, *grads);
    encoders_backward(model, cache, fg, *grads);
  }
  return ce.loss;
}

double train_step(TrainState& state, const Dataset& train, const Batch& batch, const TrainConfig& config,
                  const MethodSpec& method, double lr, std::uint64_t hook_seed, TrainLog& log) {
  FusionModel& model = state.model;
  const std::size_t m = model.modalities();
  const std::size_t b = batch.size();
  const std::size_t classes = model.classes();
  const auto mask = ModalityMask::all(m);
  const auto inputs = gather_inputs(train, batch);
  const auto labels = gather_labels(train, batch);
  FlopsLedger& flops = log.flops;

  ForwardCache cache = encode(model, inputs, mask);
  for (const auto& e : model.encoders) record_mlp_forward(flops, e, b);

  // Running performance scores, from the features before any feed-forward hook.
  const auto scores = modality_scores(model, cache, labels);
  record_head_forward(flops, model, b);
  flops.record(FlopKind::SoftmaxLoss, {b * m, classes, 0});
  if (state.running_scores.empty()) {
    state.running_scores = scores;
  } else {
    for (std::size_t i = 0; i < m; ++i)
      state.running_scores[i] = kScoreSmoothing * state.running_scores[i] + (1.0 - kScoreSmoothing) * scores[i];
  }

  Rng hook_rng(hook_seed);
  std::optional<FeatureScaling> scaling;
  if (method.kind == MethodKind::FeatureMask && m > 1)
    scaling = feature_mask(cache.features, state.running_scores, method.mask_fraction, hook_rng);
  else if (method.kind == MethodKind::FeatureDrop && m > 1)
    scaling = feature_drop(cache.features, state.running_scores, method.drop_max, hook_rng);
  if (scaling) {
    apply_scaling(*scaling, cache.features);
    flops.record(FlopKind::Elementwise, {b, scaling->multiplier.cols(), 0});
    if (scaling->capped)
      log.warnings.push_back("epoch " + std::to_string(state.epoch + 1) +
                             ": feature drop probability capped at 0.99");
  }

  cache.logits = head_logits(model, cache.features, mask);
  record_head_forward(flops, model, b);

  ObjectiveGrads objective;
  bool project = false;
  if (method.kind == MethodKind::UnimodalBlend && method.w_uni != 0.0) {
    objective = unimodal_blend_loss(model, cache, labels, method.w_uni);
    project = true;
    flops.record(FlopKind::SoftmaxLoss, {b * (m + 1), classes, 0});
    for (const auto& w : model.head) flops.record(FlopKind::MatmulForward, {b, w.cols(), w.rows()});
  } else {
    auto ce = cross_entropy(cache.logits, labels);
    objective.loss = ce.loss;
    objective.full = std::move(ce.grad);
    flops.record(FlopKind::SoftmaxLoss, {b, classes, 0});
    if (method.kind == MethodKind::KlAlign && method.lambda != 0.0 && m > 1) {
      auto kl = kl_align_loss(model, cache, method.lambda);
      objective.loss += kl.loss;
      objective.partial = std::move(kl.partial);
      for (const auto& w : model.head) flops.record(FlopKind::MatmulForward, {b, w.cols(), w.rows()});
      flops.record(FlopKind::SoftmaxLoss, {b * m * (m - 1), classes, 0});
    }
  }
  if (!std::isfinite(objective.loss)) throw DivergenceError(state.epoch + 1, 0);

  FusionGradients grads = zero_gradients(model);
  std::vector<Matrix> feature_grads;
  if (model.head_kind == HeadKind::Cosine)
    feature_grads = cosine_backward(model, cache.features, mask, model.cosine_scale, objective.full, grads);
  else
    feature_grads = objective_backward(model, cache.features, objective, project, grads);
  record_head_backward(flops, model, b);
  if (!objective.partial.empty()) record_head_backward(flops, model, b);

  if (scaling) {
    auto gv = feature_grads[scaling->modality].values();
    auto mv = scaling->multiplier.values();
    for (std::size_t k = 0; k < gv.size(); ++k) gv[k] *= mv[k];
    flops.record(FlopKind::Elementwise, {b, scaling->multiplier.cols(), 0});
  }
  encoders_backward(model, cache, feature_grads, grads);
  for (const auto& e : model.encoders) record_mlp_backward(flops, e, b);

  if (method.kind == MethodKind::GradModulation && method.alpha != 0.0) {
    const auto kappa = grad_modulation(state.running_scores, method.alpha);
    apply_modulation(kappa, grads);
    std::size_t encoder_params = 0;
    for (const auto& e : model.encoders) encoder_params += e.parameter_count();
    flops.record(FlopKind::Elementwise, {encoder_params, 1, 0});
  }

  sgd_step(state, grads, lr, config.momentum, config.weight_decay);
  flops.record(FlopKind::Elementwise, {total_parameters(model), 6, 0});
  return objective.loss;
}

FitResult fit(const Dataset& train, const Dataset& val, FusionModel model, const TrainConfig& config,
              const MethodSpec& method) {
  config.validate();
  method.validate();
  model.validate();
  train.validate();
  val.validate();
  if (train.modalities() != model.modalities() || val.modalities() != model.modalities())
    throw ShapeError("fit: dataset and model disagree on modality count");
  if (train.classes != model.classes()) throw ShapeError("fit: dataset and model disagree on class count");

  if (method.kind == MethodKind::CosineLogits) {
    model.head_kind = HeadKind::Cosine;
    model.cosine_scale = method.scale;
  }

  FitResult result{model, {}};
  TrainState state(std::move(model));
  double best_acc = -1.0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = step_lr(config, epoch);

    std::optional<std::vector<double>> weights;
    if (method.kind == MethodKind::Resample) {
      auto w = resample_weights(state.model, train, method.tau);
      const std::size_t n = train.size();
      for (const auto& e : state.model.encoders) record_mlp_forward(result.log.flops, e, n);
      record_head_forward(result.log.flops, state.model, n);
      result.log.flops.record(FlopKind::SoftmaxLoss, {n * state.model.modalities(), state.model.classes(), 0});
      if (std::adjacent_find(w.begin(), w.end(), std::not_equal_to<>()) != w.end()) weights = std::move(w);
    }

    const auto plan = batches(train.size(), config.batch_size, derive_seed(config.seed, {kBatchStream, epoch}),
                              weights ? std::optional<std::span<const double>>(*weights) : std::nullopt);
    double loss_sum = 0.0;
    for (std::size_t k = 0; k < plan.size(); ++k) {
      double loss = 0.0;
      try {
        loss = train_step(state, train, plan[k], config, method, lr,
                          derive_seed(config.seed, {kHookStream, epoch, k}), result.log);
      } catch (const DivergenceError&) {
        throw DivergenceError(epoch + 1, k);
      } catch (const NumericError&) {
        throw DivergenceError(epoch + 1, k);
      }
      loss_sum += loss;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(plan.size());
    rec.val_acc = evaluate_accuracy(state.model, val);
    rec.scores = state.running_scores;
    rec.flops_cumulative = result.log.flops.total();
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      result.model = state.model;
      result.log.best_epoch = rec.epoch;
    }
    result.log.epochs.push_back(std::move(rec));
  }
  return result;
}

}  // namespace balancelab
