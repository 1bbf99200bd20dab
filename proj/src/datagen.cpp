#include "balancelab/datagen.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>

#include "balancelab/errors.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

constexpr std::uint64_t kMeansStream = 1;
constexpr std::uint64_t kSampleStream = 2;

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? s.size() - start : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::vector<std::string_view> tokens(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

double parse_double(std::string_view tok, std::size_t line) {
  std::string s(tok);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
    throw FormatError("bad number '" + s + "'", line);
  return v;
}

std::size_t parse_count(std::string_view tok, std::size_t line, const char* what) {
  std::string s(tok);
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw FormatError(std::string("bad ") + what + " '" + s + "'", line);
  return static_cast<std::size_t>(std::stoull(s));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (modalities != 2 && modalities != 3) throw InvalidArgument("modalities must be 2 or 3");
  if (classes < 2) throw InvalidArgument("classes must be at least 2");
  if (dims.size() != modalities) throw InvalidArgument("dims must have one entry per modality");
  if (signal.size() != modalities) throw InvalidArgument("signal must have one entry per modality");
  for (auto d : dims)
    if (d == 0) throw InvalidArgument("every modality dimension must be positive");
  for (double s : signal)
    if (!(s >= 0.0) || !std::isfinite(s)) throw InvalidArgument("signal scales must be finite and >= 0");
  if (!(noise > 0.0) || !std::isfinite(noise)) throw InvalidArgument("noise must be positive");
  if (samples < classes) throw InvalidArgument("samples must be at least the number of classes");
}

std::vector<std::size_t> Dataset::dims() const {
  std::vector<std::size_t> d;
  for (const auto& f : features) d.push_back(f.cols());
  return d;
}

void Dataset::validate() const {
  if (features.empty()) throw InvalidArgument("dataset has no modalities");
  if (classes < 2) throw InvalidArgument("dataset needs at least two classes");
  for (const auto& f : features) {
    if (f.rows() != labels.size()) throw InvalidArgument("feature rows do not match label count");
    if (f.cols() == 0) throw InvalidArgument("modality with zero dimension");
  }
  for (auto y : labels)
    if (y >= classes) throw InvalidArgument("label out of range");
}

bool Dataset::same_contents(const Dataset& other) const {
  return classes == other.classes && labels == other.labels && features == other.features;
}

std::vector<Matrix> class_means(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {kMeansStream}));
  std::vector<Matrix> means;
  for (std::size_t i = 0; i < spec.modalities; ++i) {
    Matrix mu(spec.classes, spec.dims[i]);
    for (std::size_t h = 0; h < spec.classes; ++h) {
      auto row = mu.row(h);
      double norm = 0.0;
      while (norm == 0.0) {
        for (double& v : row) v = rng.normal();
        norm = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
      }
      for (double& v : row) v /= norm;
    }
    means.push_back(std::move(mu));
  }
  return means;
}

Dataset generate(const SyntheticSpec& spec) {
  const auto means = class_means(spec);
  Rng rng(derive_seed(spec.seed, {kSampleStream}));

  Dataset data;
  data.classes = spec.classes;
  data.labels.resize(spec.samples);
  for (auto& y : data.labels) y = rng.index(spec.classes);

  // Every class must appear: reassign a random sample from a class with spares.
  std::vector<std::size_t> counts(spec.classes, 0);
  for (auto y : data.labels) ++counts[y];
  for (std::size_t h = 0; h < spec.classes; ++h) {
    while (counts[h] == 0) {
      const std::size_t k = rng.index(spec.samples);
      if (counts[data.labels[k]] > 1) {
        --counts[data.labels[k]];
        data.labels[k] = h;
        ++counts[h];
      }
    }
  }

  for (std::size_t i = 0; i < spec.modalities; ++i) {
    Matrix x(spec.samples, spec.dims[i]);
    for (std::size_t k = 0; k < spec.samples; ++k) {
      auto mu = means[i].row(data.labels[k]);
      auto row = x.row(k);
      for (std::size_t j = 0; j < row.size(); ++j)
        row[j] = spec.signal[i] * mu[j] + spec.noise * rng.normal();
    }
    data.features.push_back(std::move(x));
  }
  data.spec = spec;
  data.origin = "synthetic";
  return data;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> index) {
  Dataset out;
  out.classes = data.classes;
  out.spec = data.spec;
  out.origin = data.origin;
  for (const auto& f : data.features) out.features.push_back(gather_rows(f, index));
  out.labels.reserve(index.size());
  for (auto k : index) out.labels.push_back(data.labels.at(k));
  return out;
}

Dataset select_modalities(const Dataset& data, std::span<const std::size_t> keep) {
  Dataset out;
  out.classes = data.classes;
  out.labels = data.labels;
  out.origin = data.origin;
  for (auto i : keep) {
    if (i >= data.modalities()) throw InvalidArgument("select_modalities: modality out of range");
    out.features.push_back(data.features[i]);
  }
  return out;
}

std::array<std::vector<std::size_t>, 3> split_indices(const Dataset& data, SplitFractions f,
                                                      std::uint64_t seed) {
  const double parts[3] = {f.train, f.val, f.test};
  for (double p : parts)
    if (!(p > 0.0)) throw InvalidArgument("split fractions must all be positive");
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
    throw InvalidArgument("split fractions must sum to 1");

  const std::size_t n = data.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.val));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.test));
  if (n_val == 0 || n_test == 0 || n_val + n_test >= n)
    throw InvalidArgument("split of " + std::to_string(n) + " samples leaves a part empty");

  // Shuffle within each class, then order every sample by its relative rank in
  // its class; contiguous chunks of that order are stratified.
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t k = 0; k < n; ++k) by_class[data.labels[k]].push_back(k);
  struct Keyed {
    double key;
    std::size_t cls;
    std::size_t index;
  };
  std::vector<Keyed> order;
  order.reserve(n);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    for (std::size_t j = members.size(); j > 1; --j) std::swap(members[j - 1], members[rng.index(j)]);
    for (std::size_t j = 0; j < members.size(); ++j)
      order.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(members.size()), c,
                       members[j]});
  }
  std::sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });

  const std::size_t n_train = n - n_val - n_test;
  std::array<std::vector<std::size_t>, 3> out;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t part = r < n_train ? 0 : (r < n_train + n_val ? 1 : 2);
    out[part].push_back(order[r].index);
  }
  for (auto& p : out) std::sort(p.begin(), p.end());
  return out;
}

Splits split(const Dataset& data, SplitFractions fractions, std::uint64_t seed) {
  const auto idx = split_indices(data, fractions, seed);
  return {subset(data, idx[0]), subset(data, idx[1]), subset(data, idx[2])};
}

std::vector<Batch> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                           std::optional<std::span<const double>> weights) {
  if (batch_size == 0) throw InvalidArgument("batch size must be at least 1");
  Rng rng(seed);
  std::vector<std::size_t> order;
  order.reserve(n);
  if (!weights) {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t j = n; j > 1; --j) std::swap(order[j - 1], order[rng.index(j)]);
  } else {
    if (weights->size() != n) throw InvalidArgument("sampling weights length mismatch");
    std::vector<double> cum(n);
    double total = 0.0;
    std::size_t last_positive = n;
    for (std::size_t k = 0; k < n; ++k) {
      const double w = (*weights)[k];
      if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("sampling weights must be finite and >= 0");
      if (w > 0.0) last_positive = k;
      total += w;
      cum[k] = total;
    }
    if (!(total > 0.0)) throw InvalidArgument("sampling weights are all zero");
    for (std::size_t draw = 0; draw < n; ++draw) {
      const double u = rng.uniform() * total;
      auto it = std::upper_bound(cum.begin(), cum.end(), u);
      std::size_t k = it == cum.end() ? last_positive : static_cast<std::size_t>(it - cum.begin());
      order.push_back(k);
    }
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string to_text(const Dataset& data) {
  data.validate();
  std::string out = "MMDS v1\n";
  out += "m=" + std::to_string(data.modalities()) + " H=" + std::to_string(data.classes) +
         " N=" + std::to_string(data.size()) + " dims=";
  for (std::size_t i = 0; i < data.modalities(); ++i) {
    if (i) out += ',';
    out += std::to_string(data.features[i].cols());
  }
  out += '\n';
  for (std::size_t k = 0; k < data.size(); ++k) {
    out += std::to_string(data.labels[k] + 1);
    for (const auto& f : data.features) {
      out += '|';
      auto row = f.row(k);
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) out += ' ';
        out += format_double(row[j]);
      }
    }
    out += '\n';
  }
  return out;
}

Dataset from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;

  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };

  if (!next_line()) throw FormatError("empty file", 1);
  if (line != "MMDS v1") throw FormatError("expected 'MMDS v1' header", lineno);
  if (!next_line()) throw FormatError("missing shape line", 2);

  std::size_t m = 0, classes = 0, n = 0;
  std::vector<std::size_t> dims;
  bool seen[4] = {false, false, false, false};
  for (auto tok : tokens(line)) {
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw FormatError("malformed field '" + std::string(tok) + "'", lineno);
    const auto key = tok.substr(0, eq);
    const auto val = tok.substr(eq + 1);
    if (key == "m") {
      m = parse_count(val, lineno, "m");
      seen[0] = true;
    } else if (key == "H") {
      classes = parse_count(val, lineno, "H");
      seen[1] = true;
    } else if (key == "N") {
      n = parse_count(val, lineno, "N");
      seen[2] = true;
    } else if (key == "dims") {
      for (auto d : split_on(val, ',')) dims.push_back(parse_count(d, lineno, "dimension"));
      seen[3] = true;
    } else {
      throw FormatError("unknown field '" + std::string(key) + "'", lineno);
    }
  }
  if (!(seen[0] && seen[1] && seen[2] && seen[3])) throw FormatError("shape line needs m, H, N and dims", lineno);
  if (m == 0 || dims.size() != m) throw FormatError("dims count does not match m", lineno);
  if (classes < 2) throw FormatError("H must be at least 2", lineno);
  for (auto d : dims)
    if (d == 0) throw FormatError("zero modality dimension", lineno);

  Dataset data;
  data.classes = classes;
  data.labels.reserve(n);
  for (std::size_t i = 0; i < m; ++i) data.features.emplace_back(n, dims[i]);

  for (std::size_t k = 0; k < n; ++k) {
    if (!next_line()) throw FormatError("expected " + std::to_string(n) + " samples, file ends", lineno + 1);
    const auto parts = split_on(line, '|');
    if (parts.size() != m + 1)
      throw FormatError("expected " + std::to_string(m) + " modality blocks, found " +
                            std::to_string(parts.size() - 1),
                        lineno);
    const std::size_t label = parse_count(parts[0], lineno, "label");
    if (label < 1 || label > classes) throw FormatError("label out of range 1.." + std::to_string(classes), lineno);
    data.labels.push_back(label - 1);
    for (std::size_t i = 0; i < m; ++i) {
      const auto vals = tokens(parts[i + 1]);
      if (vals.size() != dims[i])
        throw FormatError("modality " + std::to_string(i + 1) + " declares " + std::to_string(dims[i]) +
                              " values, row has " + std::to_string(vals.size()),
                          lineno);
      auto row = data.features[i].row(k);
      for (std::size_t j = 0; j < vals.size(); ++j) row[j] = parse_double(vals[j], lineno);
    }
  }
  while (next_line())
    if (!line.empty()) throw FormatError("trailing content after " + std::to_string(n) + " samples", lineno);
  return data;
}

void save(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << to_text(data);
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path.string() + "'", 0);
  std::ostringstream buf;
  buf << in.rdbuf();
  Dataset d = from_text(buf.str());
  d.origin = path.string();
  return d;
}

}  // namespace balancelab
