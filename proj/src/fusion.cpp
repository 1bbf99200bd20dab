#include "balancelab/fusion.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "balancelab/datagen.hpp"
#include "balancelab/errors.hpp"
#include "balancelab/methods.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

void check_inputs(const FusionModel& model, std::span<const Matrix> inputs, const ModalityMask& mask) {
  if (inputs.size() != model.modalities())
    throw ShapeError("expected " + std::to_string(model.modalities()) + " modalities, got " +
                     std::to_string(inputs.size()));
  if (mask.size() != model.modalities()) throw ShapeError("mask length does not match modality count");
}

std::size_t batch_rows(std::span<const Matrix> features) {
  if (features.empty()) throw ShapeError("no modalities");
  const std::size_t b = features.front().rows();
  for (const auto& f : features)
    if (f.rows() != b) throw ShapeError("modalities disagree on batch size");
  return b;
}

}  // namespace

void ModelArch::validate() const {
  if (encoders.empty()) throw ShapeError("model needs at least one modality");
  if (classes < 2) throw ShapeError("model needs at least two classes");
  for (const auto& e : encoders) {
    if (e.size() < 2) throw ShapeError("encoder needs input and output sizes");
    for (auto s : e)
      if (s == 0) throw ShapeError("encoder layer sizes must be positive");
  }
}

ModelArch uniform_arch(std::span<const std::size_t> input_dims, std::span<const std::size_t> hidden,
                       std::size_t feature_dim, std::size_t classes) {
  ModelArch arch;
  arch.classes = classes;
  for (auto d : input_dims) {
    std::vector<std::size_t> sizes{d};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(feature_dim);
    arch.encoders.push_back(std::move(sizes));
  }
  arch.validate();
  return arch;
}

ModalityMask ModalityMask::only(std::size_t m, std::size_t i) {
  ModalityMask mask = none(m);
  mask.present.at(i) = true;
  return mask;
}

ModalityMask ModalityMask::from_bits(std::size_t m, unsigned bits) {
  ModalityMask mask = none(m);
  for (std::size_t i = 0; i < m; ++i) mask.present[i] = ((bits >> i) & 1u) != 0;
  return mask;
}

ModelArch FusionModel::arch() const {
  ModelArch a;
  a.classes = classes();
  for (const auto& e : encoders) {
    std::vector<std::size_t> sizes{e.in_dim()};
    for (const auto& l : e.layers) sizes.push_back(l.out_dim());
    a.encoders.push_back(std::move(sizes));
  }
  return a;
}

void FusionModel::validate() const {
  if (encoders.empty()) throw ShapeError("model has no modalities");
  if (head.size() != encoders.size()) throw ShapeError("one head block per encoder required");
  if (bias.size() < 2) throw ShapeError("model needs at least two classes");
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    encoders[i].validate();
    if (head[i].rows() != bias.size())
      throw ShapeError("head block " + std::to_string(i) + " has wrong class count");
    if (head[i].cols() != encoders[i].out_dim())
      throw ShapeError("head block " + std::to_string(i) + " does not match encoder output");
  }
}

FusionModel init_model(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  FusionModel model;
  model.seed = seed;
  for (const auto& sizes : arch.encoders) model.encoders.push_back(init_mlp(sizes, rng));
  std::size_t fan_in = 0;
  for (const auto& sizes : arch.encoders) fan_in += sizes.back();
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + arch.classes));
  for (const auto& sizes : arch.encoders) {
    Matrix w(arch.classes, sizes.back());
    for (double& v : w.values()) v = rng.uniform(-a, a);
    model.head.push_back(std::move(w));
  }
  model.bias.assign(arch.classes, 0.0);
  return model;
}

ForwardCache encode(const FusionModel& model, std::span<const Matrix> inputs, const ModalityMask& mask) {
  check_inputs(model, inputs, mask);
  const std::size_t b = batch_rows(inputs);
  ForwardCache cache;
  cache.mask = mask;
  cache.encoder_caches.resize(model.modalities());
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    if (!mask[i]) {
      cache.features.emplace_back(b, model.encoders[i].out_dim());
      continue;
    }
    auto fw = mlp_forward(model.encoders[i], inputs[i]);
    cache.features.push_back(std::move(fw.output));
    cache.encoder_caches[i] = std::move(fw.cache);
  }
  return cache;
}

Matrix head_logits(const FusionModel& model, std::span<const Matrix> features, const ModalityMask& mask) {
  if (features.size() != model.modalities() || mask.size() != model.modalities())
    throw ShapeError("head_logits: modality count mismatch");
  if (model.head_kind == HeadKind::Cosine) return cosine_logits(model, features, mask, model.cosine_scale);
  const std::size_t b = batch_rows(features);
  Matrix logits(b, model.classes());
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    if (!mask[i]) continue;
    if (features[i].cols() != model.head[i].cols())
      throw ShapeError("features of modality " + std::to_string(i) + " do not match head block");
    axpy(1.0, matmul_nt(features[i], model.head[i]), logits);
  }
  for (std::size_t r = 0; r < b; ++r) {
    auto row = logits.row(r);
    for (std::size_t h = 0; h < row.size(); ++h) row[h] += model.bias[h];
  }
  return logits;
}

ForwardCache forward(const FusionModel& model, std::span<const Matrix> inputs, const ModalityMask& mask) {
  ForwardCache cache = encode(model, inputs, mask);
  cache.logits = head_logits(model, cache.features, mask);
  return cache;
}

Matrix partial_logits(const FusionModel& model, std::span<const Matrix> features, std::size_t modality) {
  if (modality >= model.modalities()) throw ContractError("partial_logits: modality out of range");
  if (model.head_kind == HeadKind::Cosine)
    return cosine_partial(model, features[modality], modality, model.cosine_scale);
  Matrix out = matmul_nt(features[modality], model.head[modality]);
  const double share = 1.0 / static_cast<double>(model.modalities());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t h = 0; h < row.size(); ++h) row[h] += model.bias[h] * share;
  }
  return out;
}

Matrix partial_logits(const FusionModel& model, const ForwardCache& cache, std::size_t modality) {
  if (modality >= cache.mask.size() || !cache.mask[modality])
    throw ContractError("partial_logits: modality " + std::to_string(modality) + " is masked out");
  return partial_logits(model, cache.features, modality);
}

std::vector<std::size_t> predict(const Matrix& logits) {
  if (logits.cols() < 2) throw ContractError("predict needs at least two classes");
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t h = 0; h < row.size(); ++h) {
      if (!std::isfinite(row[h])) throw NumericError("predict: non-finite logit");
      if (row[h] > row[best]) best = h;
    }
    out[r] = best;
  }
  return out;
}

FusionGradients zero_gradients(const FusionModel& model) {
  FusionGradients g;
  for (const auto& e : model.encoders) g.encoders.push_back(zeros_like(e));
  for (const auto& w : model.head) g.head.emplace_back(w.rows(), w.cols());
  g.bias.assign(model.classes(), 0.0);
  return g;
}

std::vector<Matrix> head_backward(const FusionModel& model, std::span<const Matrix> features,
                                  const ModalityMask& mask, const Matrix& logit_grad,
                                  FusionGradients& grads) {
  std::vector<Matrix> feature_grads(model.modalities());
  const auto db = column_sums(logit_grad);
  for (std::size_t h = 0; h < db.size(); ++h) grads.bias[h] += db[h];
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    if (!mask[i]) continue;
    axpy(1.0, matmul_tn(logit_grad, features[i]), grads.head[i]);
    feature_grads[i] = matmul(logit_grad, model.head[i]);
  }
  return feature_grads;
}

Matrix partial_backward(const FusionModel& model, std::span<const Matrix> features, std::size_t modality,
                        const Matrix& partial_grad, FusionGradients& grads, Matrix& feature_grad) {
  const double share = 1.0 / static_cast<double>(model.modalities());
  const auto db = column_sums(partial_grad);
  for (std::size_t h = 0; h < db.size(); ++h) grads.bias[h] += db[h] * share;
  feature_grad = matmul(partial_grad, model.head[modality]);
  return matmul_tn(partial_grad, features[modality]);
}

void encoders_backward(const FusionModel& model, const ForwardCache& cache,
                       std::span<const Matrix> feature_grads, FusionGradients& grads) {
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    if (!cache.mask[i] || feature_grads[i].empty()) continue;
    if (!cache.encoder_caches[i]) throw ContractError("encoders_backward: missing encoder cache");
    auto bw = mlp_backward(model.encoders[i], *cache.encoder_caches[i], feature_grads[i]);
    auto& acc = grads.encoders[i];
    for (std::size_t t = 0; t < acc.layers.size(); ++t) {
      axpy(1.0, bw.grads.layers[t].weight, acc.layers[t].weight);
      for (std::size_t j = 0; j < acc.layers[t].bias.size(); ++j)
        acc.layers[t].bias[j] += bw.grads.layers[t].bias[j];
    }
  }
}

std::vector<double> flatten(const FusionModel& model) {
  std::vector<double> flat;
  for (const auto& e : model.encoders) {
    auto f = flatten(e);
    flat.insert(flat.end(), f.begin(), f.end());
  }
  for (const auto& w : model.head) flat.insert(flat.end(), w.values().begin(), w.values().end());
  flat.insert(flat.end(), model.bias.begin(), model.bias.end());
  return flat;
}

std::vector<double> flatten(const FusionModel& like, const FusionGradients& grads) {
  FusionModel shaped = like;
  shaped.encoders = grads.encoders;
  shaped.head = grads.head;
  shaped.bias = grads.bias;
  return flatten(shaped);
}

FusionModel unflatten(std::span<const double> flat, const FusionModel& like) {
  FusionModel model = like;
  std::size_t at = 0;
  auto take = [&](std::size_t n) {
    if (at + n > flat.size()) throw ShapeError("unflatten: vector too short");
    auto s = flat.subspan(at, n);
    at += n;
    return s;
  };
  for (auto& e : model.encoders) e = unflatten(take(e.parameter_count()), e);
  for (auto& w : model.head) {
    auto s = take(w.size());
    std::copy(s.begin(), s.end(), w.values().begin());
  }
  auto b = take(model.bias.size());
  std::copy(b.begin(), b.end(), model.bias.begin());
  if (at != flat.size()) throw ShapeError("unflatten: vector too long");
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   BLCK v1
//   m=<int> H=<int> head=<linear|cosine> scale=<float> seed=<int>
//   arch=<d_in:h1:...:d_out>,<...>
//   then one label line and one value line per block, in flatten() order:
//   encoder=<i> layer=<t> weight | encoder=<i> layer=<t> bias | head=<i> | bias

namespace {

void append_values(std::string& out, std::span<const double> values) {
  for (std::size_t j = 0; j < values.size(); ++j) {
    if (j) out += ' ';
    out += format_double(values[j]);
  }
  out += '\n';
}

std::vector<double> parse_values(const std::string& line, std::size_t expected, std::size_t lineno) {
  std::vector<double> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || errno == ERANGE || !std::isfinite(v))
      throw FormatError("bad number '" + tok + "'", lineno);
    out.push_back(v);
  }
  if (out.size() != expected)
    throw FormatError("expected " + std::to_string(expected) + " values, found " + std::to_string(out.size()),
                      lineno);
  return out;
}

}  // namespace

std::string to_text(const FusionModel& model) {
  model.validate();
  std::string out = "BLCK v1\n";
  out += "m=" + std::to_string(model.modalities()) + " H=" + std::to_string(model.classes()) +
         " head=" + (model.head_kind == HeadKind::Cosine ? "cosine" : "linear") +
         " scale=" + format_double(model.cosine_scale) + " seed=" + std::to_string(model.seed) + "\n";
  out += "arch=";
  const auto arch = model.arch();
  for (std::size_t i = 0; i < arch.encoders.size(); ++i) {
    if (i) out += ',';
    for (std::size_t t = 0; t < arch.encoders[i].size(); ++t) {
      if (t) out += ':';
      out += std::to_string(arch.encoders[i][t]);
    }
  }
  out += '\n';
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    for (std::size_t t = 0; t < model.encoders[i].layers.size(); ++t) {
      const auto& l = model.encoders[i].layers[t];
      out += "encoder=" + std::to_string(i + 1) + " layer=" + std::to_string(t + 1) + " weight\n";
      append_values(out, l.weight.values());
      out += "encoder=" + std::to_string(i + 1) + " layer=" + std::to_string(t + 1) + " bias\n";
      append_values(out, l.bias);
    }
  }
  for (std::size_t i = 0; i < model.modalities(); ++i) {
    out += "head=" + std::to_string(i + 1) + "\n";
    append_values(out, model.head[i].values());
  }
  out += "bias\n";
  append_values(out, model.bias);
  return out;
}

FusionModel model_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(std::string("unexpected end of file, expected ") + what, lineno + 1);
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };

  if (!std::getline(in, line)) throw FormatError("empty file", 1);
  ++lineno;
  if (line != "BLCK v1") throw FormatError("expected 'BLCK v1' header", lineno);

  next("model line");
  std::size_t m = 0, classes = 0;
  std::string head, scale_text;
  std::uint64_t seed = 0;
  {
    std::istringstream fields(line);
    std::string tok;
    int seen = 0;
    while (fields >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError("malformed field '" + tok + "'", lineno);
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      try {
        if (key == "m") m = std::stoul(val), seen |= 1;
        else if (key == "H") classes = std::stoul(val), seen |= 2;
        else if (key == "head") head = val, seen |= 4;
        else if (key == "scale") scale_text = val, seen |= 8;
        else if (key == "seed") seed = std::stoull(val), seen |= 16;
        else throw FormatError("unknown field '" + key + "'", lineno);
      } catch (const std::logic_error&) {
        throw FormatError("bad value for '" + key + "'", lineno);
      }
    }
    if (seen != 31) throw FormatError("model line needs m, H, head, scale and seed", lineno);
  }
  if (head != "linear" && head != "cosine") throw FormatError("head must be linear or cosine", lineno);
  const double scale = parse_values(scale_text, 1, lineno)[0];

  next("arch line");
  if (line.rfind("arch=", 0) != 0) throw FormatError("expected arch line", lineno);
  ModelArch arch;
  arch.classes = classes;
  {
    std::istringstream encs(line.substr(5));
    std::string enc;
    while (std::getline(encs, enc, ',')) {
      std::vector<std::size_t> sizes;
      std::istringstream ls(enc);
      std::string s;
      while (std::getline(ls, s, ':')) {
        try {
          sizes.push_back(std::stoul(s));
        } catch (const std::logic_error&) {
          throw FormatError("bad layer size '" + s + "'", lineno);
        }
      }
      arch.encoders.push_back(std::move(sizes));
    }
  }
  if (arch.encoders.size() != m) throw FormatError("arch lists " + std::to_string(arch.encoders.size()) +
                                                       " encoders, m=" + std::to_string(m), lineno);
  try {
    arch.validate();
  } catch (const ShapeError& e) {
    throw FormatError(e.what(), lineno);
  }

  FusionModel model = init_model(arch, 0);
  model.seed = seed;
  model.head_kind = head == "cosine" ? HeadKind::Cosine : HeadKind::Linear;
  model.cosine_scale = scale;

  auto expect = [&](const std::string& label) {
    next(label.c_str());
    if (line != label) throw FormatError("expected '" + label + "'", lineno);
  };
  auto fill = [&](std::span<double> dst) {
    next("values");
    auto v = parse_values(line, dst.size(), lineno);
    std::copy(v.begin(), v.end(), dst.begin());
  };

  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < model.encoders[i].layers.size(); ++t) {
      auto& l = model.encoders[i].layers[t];
      const std::string prefix = "encoder=" + std::to_string(i + 1) + " layer=" + std::to_string(t + 1);
      expect(prefix + " weight");
      fill(l.weight.values());
      expect(prefix + " bias");
      fill(l.bias);
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    expect("head=" + std::to_string(i + 1));
    fill(model.head[i].values());
  }
  expect("bias");
  fill(model.bias);
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line != "\r") throw FormatError("trailing content", lineno);
  }
  return model;
}

void save_model(const FusionModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << to_text(model);
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

FusionModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path.string() + "'", 0);
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_from_text(buf.str());
}

}  // namespace balancelab
