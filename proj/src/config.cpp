// Config text: one `dotted.key = value` per line, `#` starts a comment.
// Values are numbers, "quoted strings", true/false, or [comma, separated, numbers].

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <variant>

#include "balancelab/errors.hpp"
#include "balancelab/harness.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

struct Number {
  double value;
  bool integral;
};
using Value = std::variant<Number, std::string, bool, std::vector<Number>>;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::optional<Number> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const bool integral =
      std::all_of(s.begin() + (s[0] == '-' || s[0] == '+'), s.end(), [](char c) { return std::isdigit(c) != 0; }) &&
      s.size() > static_cast<std::size_t>(s[0] == '-' || s[0] == '+');
  if (s == "inf" || s == "+inf") return Number{std::numeric_limits<double>::infinity(), false};
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || std::isnan(v) || std::isinf(v)) return std::nullopt;
  return Number{v, integral};
}

Value parse_value(const std::string& key, const std::string& raw) {
  if (raw.empty()) throw ParseError(key, "missing value");
  if (raw.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < raw.size() && raw[i] != '"'; ++i) {
      if (raw[i] == '\\' && i + 1 < raw.size()) ++i;
      out += raw[i];
    }
    if (i != raw.size() - 1) throw ParseError(key, "unterminated or malformed string");
    return out;
  }
  if (raw.front() == '[') {
    if (raw.back() != ']') throw ParseError(key, "unterminated list");
    std::vector<Number> items;
    const std::string body = trim(raw.substr(1, raw.size() - 2));
    if (body.empty()) return items;
    std::istringstream in(body);
    std::string item;
    while (std::getline(in, item, ',')) {
      auto n = parse_number(trim(item));
      if (!n) throw ParseError(key, "list items must be numbers, got '" + trim(item) + "'");
      items.push_back(*n);
    }
    return items;
  }
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (auto n = parse_number(raw)) return *n;
  throw ParseError(key, "cannot parse value '" + raw + "' (strings must be quoted)");
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

double as_float(const std::string& key, const Value& v) {
  if (auto* n = std::get_if<Number>(&v)) return n->value;
  throw ParseError(key, "expected a number");
}

std::uint64_t as_uint(const std::string& key, const Value& v) {
  auto* n = std::get_if<Number>(&v);
  if (!n || !n->integral || n->value < 0) throw ParseError(key, "expected a non-negative integer");
  return static_cast<std::uint64_t>(n->value);
}

std::string as_string(const std::string& key, const Value& v) {
  if (auto* s = std::get_if<std::string>(&v)) return *s;
  throw ParseError(key, "expected a quoted string");
}

bool as_bool(const std::string& key, const Value& v) {
  if (auto* b = std::get_if<bool>(&v)) return *b;
  throw ParseError(key, "expected true or false");
}

std::vector<double> as_float_list(const std::string& key, const Value& v) {
  auto* l = std::get_if<std::vector<Number>>(&v);
  if (!l) throw ParseError(key, "expected a list of numbers");
  std::vector<double> out;
  for (const auto& n : *l) out.push_back(n.value);
  return out;
}

std::vector<std::uint64_t> as_uint_list(const std::string& key, const Value& v) {
  auto* l = std::get_if<std::vector<Number>>(&v);
  if (!l) throw ParseError(key, "expected a list of integers");
  std::vector<std::uint64_t> out;
  for (const auto& n : *l) {
    if (!n.integral || n.value < 0) throw ParseError(key, "expected a list of non-negative integers");
    out.push_back(static_cast<std::uint64_t>(n.value));
  }
  return out;
}

template <typename T>
std::string list_text(const std::vector<T>& xs) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_floating_point_v<T>)
      out += format_number(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out + "]";
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  SyntheticSpec spec;
  bool any_synthetic = false;
  bool have_method = false;
  std::set<std::string> seen;

  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("", "line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) {
          return std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) ||
                 c == '_' || c == '.';
        }))
      throw ParseError(key, "line " + std::to_string(lineno) + ": malformed key");
    if (!seen.insert(key).second) throw ParseError(key, "duplicate key");
    const Value v = parse_value(key, raw);

    if (key.rfind("dataset.", 0) == 0 && key != "dataset.path") any_synthetic = true;

    if (key == "dataset.path") cfg.dataset_path = as_string(key, v);
    else if (key == "dataset.modalities") spec.modalities = as_uint(key, v);
    else if (key == "dataset.classes") spec.classes = as_uint(key, v);
    else if (key == "dataset.dims") {
      auto d = as_uint_list(key, v);
      spec.dims.assign(d.begin(), d.end());
    } else if (key == "dataset.signal") spec.signal = as_float_list(key, v);
    else if (key == "dataset.noise") spec.noise = as_float(key, v);
    else if (key == "dataset.samples") spec.samples = as_uint(key, v);
    else if (key == "dataset.seed") spec.seed = as_uint(key, v);
    else if (key == "split.train") cfg.split.train = as_float(key, v);
    else if (key == "split.val") cfg.split.val = as_float(key, v);
    else if (key == "split.test") cfg.split.test = as_float(key, v);
    else if (key == "model.hidden") {
      auto h = as_uint_list(key, v);
      cfg.hidden.assign(h.begin(), h.end());
    } else if (key == "model.feature_dim") cfg.feature_dim = as_uint(key, v);
    else if (key == "train.lr") cfg.train.lr = as_float(key, v);
    else if (key == "train.momentum") cfg.train.momentum = as_float(key, v);
    else if (key == "train.weight_decay") cfg.train.weight_decay = as_float(key, v);
    else if (key == "train.step_size") cfg.train.step_size = as_uint(key, v);
    else if (key == "train.gamma") cfg.train.gamma = as_float(key, v);
    else if (key == "train.epochs") cfg.train.epochs = as_uint(key, v);
    else if (key == "train.batch_size") cfg.train.batch_size = as_uint(key, v);
    else if (key == "method.kind") {
      try {
        cfg.method.kind = parse_method_kind(as_string(key, v));
      } catch (const DispatchError& e) {
        throw ParseError(key, e.what());
      }
      have_method = true;
    } else if (key.rfind("method.", 0) == 0 &&
               std::find(method_param_names().begin(), method_param_names().end(), key.substr(7)) !=
                   method_param_names().end()) {
      set_method_param(cfg.method, key.substr(7), as_float(key, v));
    } else if (key == "eval.shapley") cfg.shapley = as_bool(key, v);
    else if (key == "output.dir") cfg.output_dir = as_string(key, v);
    else if (key == "seed") cfg.master_seed = as_uint(key, v);
    else if (key == "seeds") cfg.seeds = as_uint_list(key, v);
    else if (key == "sweep.param") cfg.sweep_param = as_string(key, v);
    else if (key == "sweep.values") cfg.sweep_values = as_float_list(key, v);
    else throw ParseError(key, "unknown key");
  }

  if (!have_method) throw ParseError("method.kind", "missing required key");
  if (cfg.dataset_path && any_synthetic)
    throw ParseError("dataset.path", "cannot be combined with synthetic dataset keys");
  if (!cfg.dataset_path && !any_synthetic) throw ParseError("dataset", "missing required section (dataset.path or dataset.* spec)");
  if (!cfg.dataset_path) cfg.synthetic = spec;
  if (cfg.seeds.empty()) throw ParseError("seeds", "at least one seed required");

  for (double f : {cfg.split.train, cfg.split.val, cfg.split.test})
    if (!(f > 0.0)) throw ParseError("split", "fractions must all be positive");
  if (std::abs(cfg.split.train + cfg.split.val + cfg.split.test - 1.0) > 1e-9)
    throw ParseError("split", "fractions must sum to 1");
  if (cfg.feature_dim == 0) throw ParseError("model.feature_dim", "must be positive");
  for (auto h : cfg.hidden)
    if (h == 0) throw ParseError("model.hidden", "layer sizes must be positive");

  try {
    if (cfg.synthetic) cfg.synthetic->validate();
    cfg.method.validate();
    cfg.train.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError("", e.what());
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("", "cannot read config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& c) {
  std::string out;
  auto put = [&](const std::string& key, const std::string& value) { out += key + " = " + value + "\n"; };
  if (c.dataset_path) {
    put("dataset.path", quoted(*c.dataset_path));
  } else {
    const SyntheticSpec s = c.synthetic.value_or(SyntheticSpec{});
    put("dataset.modalities", std::to_string(s.modalities));
    put("dataset.classes", std::to_string(s.classes));
    put("dataset.dims", list_text(s.dims));
    put("dataset.signal", list_text(s.signal));
    put("dataset.noise", format_number(s.noise));
    put("dataset.samples", std::to_string(s.samples));
    put("dataset.seed", std::to_string(s.seed));
  }
  put("split.train", format_number(c.split.train));
  put("split.val", format_number(c.split.val));
  put("split.test", format_number(c.split.test));
  put("model.hidden", list_text(c.hidden));
  put("model.feature_dim", std::to_string(c.feature_dim));
  put("train.lr", format_number(c.train.lr));
  put("train.momentum", format_number(c.train.momentum));
  put("train.weight_decay", format_number(c.train.weight_decay));
  put("train.step_size", std::to_string(c.train.step_size));
  put("train.gamma", format_number(c.train.gamma));
  put("train.epochs", std::to_string(c.train.epochs));
  put("train.batch_size", std::to_string(c.train.batch_size));
  put("method.kind", quoted(std::string(method_name(c.method.kind))));
  for (auto name : method_param_names()) put("method." + std::string(name), format_number(method_param(c.method, name)));
  put("eval.shapley", c.shapley ? "true" : "false");
  put("output.dir", quoted(c.output_dir));
  put("seed", std::to_string(c.master_seed));
  put("seeds", list_text(c.seeds));
  if (!c.sweep_param.empty()) {
    put("sweep.param", quoted(c.sweep_param));
    put("sweep.values", list_text(c.sweep_values));
  }
  return out;
}

void apply_seed_overrides(ExperimentConfig& config, std::optional<std::uint64_t> master_flag, const char* env_value,
                          std::optional<std::vector<std::uint64_t>> seeds_flag) {
  if (master_flag) {
    config.master_seed = *master_flag;
  } else if (env_value && *env_value) {
    std::uint64_t v = 0;
    const char* end = env_value + std::char_traits<char>::length(env_value);
    auto r = std::from_chars(env_value, end, v);
    if (r.ec != std::errc() || r.ptr != end) throw ParseError("BALANCELAB_SEED", "expected a non-negative integer");
    config.master_seed = v;
  }
  if (seeds_flag) {
    if (seeds_flag->empty()) throw ParseError("seeds", "at least one seed required");
    config.seeds = *seeds_flag;
  }
}

RunSeeds derive_run_seeds(std::uint64_t master_seed, std::uint64_t seed) {
  const std::uint64_t base = derive_seed(master_seed, {seed});
  return {derive_seed(base, {1}), derive_seed(base, {2}), derive_seed(base, {3})};
}

}  // namespace balancelab
