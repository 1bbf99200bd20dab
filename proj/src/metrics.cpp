#include "balancelab/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "balancelab/errors.hpp"

namespace balancelab {

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw ContractError("accuracy needs equal, non-empty prediction and label lists");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) hits += preds[k] == labels[k];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

PerfReport performance(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                       std::size_t classes) {
  if (classes < 2) throw ContractError("macro F1 needs at least two classes");
  PerfReport r;
  r.accuracy = accuracy(preds, labels);
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t k = 0; k < preds.size(); ++k) {
    if (labels[k] >= classes || preds[k] >= classes) throw ContractError("class index out of range");
    ++r.confusion[labels[k]][preds[k]];
  }
  double sum_f1 = 0.0;
  for (std::size_t h = 0; h < classes; ++h) {
    const double tp = static_cast<double>(r.confusion[h][h]);
    double predicted = 0.0, actual = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      predicted += static_cast<double>(r.confusion[j][h]);
      actual += static_cast<double>(r.confusion[h][j]);
    }
    const double precision = predicted > 0.0 ? tp / predicted : 0.0;
    const double recall = actual > 0.0 ? tp / actual : 0.0;
    if (precision + recall > 0.0) sum_f1 += 2.0 * precision * recall / (precision + recall);
  }
  r.macro_f1 = sum_f1 / static_cast<double>(classes);
  return r;
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t classes) {
  return performance(preds, labels, classes).macro_f1;
}

double value_function(const FusionModel& model, const Dataset& data, const ModalityMask& subset) {
  if (data.size() == 0) throw ContractError("value_function: empty evaluation data");
  if (subset.size() != model.modalities()) throw ContractError("value_function: mask length mismatch");
  const auto cache = forward(model, data.features, subset);
  return accuracy(predict(cache.logits), data.labels);
}

std::vector<double> shapley_values(std::span<const double> subset_values, std::size_t m) {
  if (m == 0 || m > 8) throw ContractError("shapley_values supports 1..8 modalities");
  if (subset_values.size() != (std::size_t{1} << m))
    throw ContractError("shapley_values needs 2^m subset values");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<double>> marginal(m);
  do {
    unsigned preceding = 0;
    for (auto i : order) {
      marginal[i].push_back(subset_values[preceding | (1u << i)] - subset_values[preceding]);
      preceding |= 1u << i;
    }
  } while (std::next_permutation(order.begin(), order.end()));
  // summing in sorted order makes the result independent of modality labels
  std::vector<double> phi(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::sort(marginal[i].begin(), marginal[i].end());
    for (double d : marginal[i]) phi[i] += d;
    phi[i] /= static_cast<double>(marginal[i].size());
  }
  return phi;
}

double imbalance(std::span<const double> phi) {
  if (phi.size() == 2) return std::abs(phi[0] - phi[1]);
  if (phi.size() == 3) {
    std::array<double, 3> d{std::abs(phi[0] - phi[1]), std::abs(phi[0] - phi[2]), std::abs(phi[1] - phi[2])};
    std::sort(d.begin(), d.end());
    return (d[0] + d[1] + d[2]) / 3.0;
  }
  throw ContractError("imbalance is defined for two or three modalities");
}

ShapleyReport shapley_from_values(std::span<const double> subset_values, std::size_t m) {
  ShapleyReport r;
  r.subset_values.assign(subset_values.begin(), subset_values.end());
  r.phi = shapley_values(subset_values, m);
  r.imbalance = imbalance(r.phi);
  return r;
}

ShapleyReport shapley(const FusionModel& model, const Dataset& data) {
  const std::size_t m = model.modalities();
  if (m != 2 && m != 3) throw ContractError("shapley needs two or three modalities");
  std::vector<double> values(std::size_t{1} << m);
  for (unsigned bits = 0; bits < values.size(); ++bits)
    values[bits] = value_function(model, data, ModalityMask::from_bits(m, bits));
  return shapley_from_values(values, m);
}

void FlopsLedger::record(FlopKind kind, FlopShape s) {
  switch (kind) {
    case FlopKind::LinearForward:
      counts_[0] += 2 * s.p * s.q * s.r + s.p * s.r;
      return;
    case FlopKind::MatmulForward:
      counts_[0] += 2 * s.p * s.q * s.r;
      return;
    case FlopKind::LinearBackward:
      counts_[1] += 4 * s.p * s.q * s.r;
      return;
    case FlopKind::Elementwise:
      counts_[2] += s.p * s.q;
      return;
    case FlopKind::SoftmaxLoss:
      counts_[3] += 5 * s.p * s.q;
      return;
  }
  throw ContractError("flops_record: unknown operation kind");
}

std::uint64_t FlopsLedger::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

FlopsLedger flops_record(FlopsLedger ledger, FlopKind kind, FlopShape shape) {
  ledger.record(kind, shape);
  return ledger;
}

void record_mlp_forward(FlopsLedger& ledger, const MlpParams& mlp, std::size_t batch) {
  for (std::size_t t = 0; t < mlp.layers.size(); ++t) {
    const auto& l = mlp.layers[t];
    ledger.record(FlopKind::LinearForward, {batch, l.in_dim(), l.out_dim()});
    if (t + 1 < mlp.layers.size()) ledger.record(FlopKind::Elementwise, {batch, l.out_dim(), 0});
  }
}

void record_mlp_backward(FlopsLedger& ledger, const MlpParams& mlp, std::size_t batch) {
  for (std::size_t t = 0; t < mlp.layers.size(); ++t) {
    const auto& l = mlp.layers[t];
    ledger.record(FlopKind::LinearBackward, {batch, l.in_dim(), l.out_dim()});
    if (t + 1 < mlp.layers.size()) ledger.record(FlopKind::Elementwise, {batch, l.out_dim(), 0});
  }
}

}  // namespace balancelab
