#include "balancelab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "balancelab/errors.hpp"
#include "balancelab/random.hpp"

namespace balancelab {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct CellSpec {
  ExperimentConfig config;  // method params already set for this cell
  std::uint64_t seed = 0;
  std::string sweep_param;
  std::optional<double> sweep_value;
};

std::string cell_name(const CellSpec& c) {
  std::string name = std::string(method_name(c.config.method.kind)) + "_seed" + std::to_string(c.seed);
  if (c.sweep_value) {
    name += "_" + c.sweep_param + "=" + format_number(*c.sweep_value);
  }
  for (char& ch : name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '.' || ch == '=' || ch == '-')) ch = '_';
  return name;
}

/// Config text a cell's result depends on; output location and seed lists excluded.
std::string cell_fingerprint(const CellSpec& c) {
  ExperimentConfig k = c.config;
  k.output_dir.clear();
  k.seeds = {c.seed};
  k.sweep_param.clear();
  k.sweep_values.clear();
  return serialize_config(k);
}

RunRow row_from_cell(const CellResult& r, const CellSpec& spec) {
  RunRow row;
  row.method = r.method;
  row.kind = RowKind::Seed;
  row.seed = r.seed;
  row.sweep_param = spec.sweep_param;
  row.sweep_value = spec.sweep_value;
  row.acc = r.perf.accuracy;
  row.macro_f1 = r.perf.macro_f1;
  if (r.shapley) {
    row.phi = r.shapley->phi;
    row.imbalance = r.shapley->imbalance;
  }
  row.flops_total = static_cast<double>(r.flops_total);
  row.best_epoch = static_cast<double>(r.best_epoch);
  return row;
}

json row_to_json(const RunRow& r) {
  json j;
  j["method"] = r.method;
  j["seed"] = r.kind == RowKind::Seed ? json(r.seed) : json(r.kind == RowKind::Mean ? "mean" : "std");
  j["sweep_param"] = r.sweep_param;
  j["sweep_value"] = r.sweep_value ? json(*r.sweep_value) : json(nullptr);
  j["acc"] = r.acc;
  j["macro_f1"] = r.macro_f1;
  j["phi"] = r.phi;
  j["imbalance"] = r.imbalance ? json(*r.imbalance) : json(nullptr);
  j["flops_total"] = r.flops_total;
  j["best_epoch"] = r.best_epoch;
  j["marker"] = r.marker;
  return j;
}

RunRow row_from_json(const json& j) {
  RunRow r;
  r.method = j.at("method").get<std::string>();
  const auto& seed = j.at("seed");
  if (seed.is_string()) {
    r.kind = seed.get<std::string>() == "mean" ? RowKind::Mean : RowKind::Std;
  } else {
    r.seed = seed.get<std::uint64_t>();
  }
  r.sweep_param = j.at("sweep_param").get<std::string>();
  if (!j.at("sweep_value").is_null()) r.sweep_value = j.at("sweep_value").get<double>();
  r.acc = j.at("acc").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.phi = j.at("phi").get<std::vector<double>>();
  if (!j.at("imbalance").is_null()) r.imbalance = j.at("imbalance").get<double>();
  r.flops_total = j.at("flops_total").get<double>();
  r.best_epoch = j.at("best_epoch").get<double>();
  r.marker = j.at("marker").get<std::string>();
  return r;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class SidecarLog {
 public:
  explicit SidecarLog(const std::string& dir) {
    if (!dir.empty()) out_.open(fs::path(dir) / "run.log", std::ios::app);
  }
  void line(const std::string& msg) {
    std::lock_guard lock(mu_);
    if (out_) out_ << timestamp() << ' ' << msg << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
  std::mutex mu_;
};

void write_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw Error("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

std::optional<std::string> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

double mean_of(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

/// Mean and sample standard deviation of a group of per-seed rows.
std::pair<RunRow, RunRow> aggregate(const std::vector<const RunRow*>& group) {
  RunRow mean = *group.front();
  RunRow sd = *group.front();
  mean.kind = RowKind::Mean;
  sd.kind = RowKind::Std;
  mean.seed = sd.seed = 0;
  mean.marker.clear();
  sd.marker.clear();
  auto column = [&](auto get) {
    std::vector<double> xs;
    for (const auto* r : group) xs.push_back(get(*r));
    return xs;
  };
  auto fill = [&](double RunRow::*field) {
    const auto xs = column([&](const RunRow& r) { return r.*field; });
    mean.*field = mean_of(xs);
    sd.*field = std_of(xs);
  };
  fill(&RunRow::acc);
  fill(&RunRow::macro_f1);
  fill(&RunRow::flops_total);
  fill(&RunRow::best_epoch);
  const bool has_shapley = std::all_of(group.begin(), group.end(), [](const RunRow* r) { return r->imbalance.has_value(); });
  if (has_shapley) {
    const auto xs = column([](const RunRow& r) { return *r.imbalance; });
    mean.imbalance = mean_of(xs);
    sd.imbalance = std_of(xs);
    for (std::size_t i = 0; i < mean.phi.size(); ++i) {
      const auto ps = column([&](const RunRow& r) { return r.phi.at(i); });
      mean.phi[i] = mean_of(ps);
      sd.phi[i] = std_of(ps);
    }
  } else {
    mean.phi.clear();
    sd.phi.clear();
    mean.imbalance.reset();
    sd.imbalance.reset();
  }
  return {mean, sd};
}

RunReport run_cells(const ExperimentConfig& config, const std::vector<CellSpec>& cells, const RunOptions& options) {
  const Dataset data = load_dataset(config);
  RunReport report;
  report.config = config;
  report.modalities = data.modalities();

  const bool persist = !config.output_dir.empty();
  const fs::path out_dir = config.output_dir;
  if (persist) {
    fs::create_directories(out_dir / "cells");
    if (options.keep_artifacts) {
      fs::create_directories(out_dir / "checkpoints");
      fs::create_directories(out_dir / "logs");
    }
  }
  SidecarLog log(config.output_dir);

  struct Outcome {
    std::optional<RunRow> row;
    std::optional<std::string> error;
  };
  std::vector<Outcome> outcomes(cells.size());

  auto run_one = [&](std::size_t idx) {
    const CellSpec& cell = cells[idx];
    const std::string name = cell_name(cell);
    const std::string fingerprint = cell_fingerprint(cell);
    const fs::path cell_file = out_dir / "cells" / (name + ".json");
    if (persist) {
      if (auto text = read_file(cell_file)) {
        try {
          const json j = json::parse(*text);
          if (j.at("config").get<std::string>() == fingerprint) {
            if (j.contains("error")) {
              outcomes[idx].error = j.at("error").get<std::string>();
            } else {
              outcomes[idx].row = row_from_json(j.at("row"));
            }
            log.line("reused " + name);
            return;
          }
        } catch (const std::exception&) {
          // unreadable or partial cell file: recompute
        }
      }
    }
    const auto start = std::chrono::steady_clock::now();
    json j;
    j["config"] = fingerprint;
    try {
      CellResult r = run_cell(cell.config, data, cell.seed);
      RunRow row = row_from_cell(r, cell);
      if (persist && options.keep_artifacts) {
        save_model(r.model, out_dir / "checkpoints" / (name + ".ckpt"));
        write_file(out_dir / "logs" / (name + ".csv"), r.log.to_csv(r.model.modalities()));
      }
      j["row"] = row_to_json(row);
      outcomes[idx].row = std::move(row);
    } catch (const std::exception& e) {
      j["error"] = e.what();
      outcomes[idx].error = e.what();
    }
    if (persist) write_file(cell_file, j.dump(2) + "\n");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.line((outcomes[idx].error ? "failed " : "finished ") + name + " in " + format_number(std::round(secs * 1000) / 1000) + "s" +
             (outcomes[idx].error ? ": " + *outcomes[idx].error : std::string()));
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_one(i);
      });
    for (auto& t : workers) t.join();
  }

  // Merge in cell order.
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (outcomes[i].row) {
      report.rows.push_back(*outcomes[i].row);
    } else {
      report.failures.push_back({std::string(method_name(cells[i].config.method.kind)), cells[i].seed,
                                 cells[i].sweep_value, outcomes[i].error.value_or("unknown error")});
    }
  }

  // Aggregates per (method, sweep value), in order of first appearance.
  std::vector<RunRow> aggregates;
  std::vector<std::pair<std::string, std::optional<double>>> keys;
  for (const auto& r : report.rows) {
    std::pair<std::string, std::optional<double>> key{r.method, r.sweep_value};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& key : keys) {
    std::vector<const RunRow*> group;
    for (const auto& r : report.rows)
      if (r.method == key.first && r.sweep_value == key.second) group.push_back(&r);
    auto [mean, sd] = aggregate(group);
    aggregates.push_back(std::move(mean));
    aggregates.push_back(std::move(sd));
  }

  // Sweep markers on the mean rows; ties go to the earlier value.
  const bool sweeping = std::any_of(cells.begin(), cells.end(), [](const CellSpec& c) { return c.sweep_value.has_value(); });
  if (sweeping) {
    std::optional<std::size_t> best_acc, best_balance;
    for (std::size_t i = 0; i < aggregates.size(); ++i) {
      const auto& r = aggregates[i];
      if (r.kind != RowKind::Mean) continue;
      if (!best_acc || r.acc > aggregates[*best_acc].acc) best_acc = i;
      if (r.imbalance && (!best_balance || *r.imbalance < *aggregates[*best_balance].imbalance)) best_balance = i;
    }
    if (best_balance) aggregates[*best_balance].marker = kMarkerAbsolute;
    if (best_acc) {
      auto& m = aggregates[*best_acc].marker;
      m = m.empty() ? kMarkerRelative : m + ";" + kMarkerRelative;
    }
  }
  report.rows.insert(report.rows.end(), aggregates.begin(), aggregates.end());

  if (persist) {
    write_report(report, out_dir);
    log.line("report written: " + std::to_string(report.rows.size()) + " rows, " +
             std::to_string(report.failures.size()) + " failures");
  }
  return report;
}

}  // namespace

Dataset load_dataset(const ExperimentConfig& config) {
  if (config.dataset_path) return load(*config.dataset_path);
  if (!config.synthetic) throw InvalidArgument("config has no dataset");
  return generate(*config.synthetic);
}

CellResult run_cell(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed) {
  const RunSeeds seeds = derive_run_seeds(config.master_seed, seed);
  const Splits parts = split(data, config.split, seeds.split);
  const ModelArch arch = uniform_arch(data.dims(), config.hidden, config.feature_dim, data.classes);
  FusionModel model = init_model(arch, seeds.init);
  TrainConfig train = config.train;
  train.seed = seeds.train;

  FitResult fitted = fit(parts.train, parts.val, std::move(model), train, config.method);

  CellResult r;
  r.method = std::string(method_name(config.method.kind));
  r.seed = seed;
  const auto cache = forward(fitted.model, parts.test.features, ModalityMask::all(fitted.model.modalities()));
  r.perf = performance(predict(cache.logits), parts.test.labels, data.classes);
  if (config.shapley && (data.modalities() == 2 || data.modalities() == 3))
    r.shapley = shapley(fitted.model, parts.test);
  r.flops_total = fitted.log.flops.total();
  r.best_epoch = fitted.log.best_epoch;
  r.model = std::move(fitted.model);
  r.log = std::move(fitted.log);
  return r;
}

double unimodal_accuracy(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed,
                         std::size_t modality) {
  const RunSeeds seeds = derive_run_seeds(config.master_seed, seed);
  const Splits parts = split(data, config.split, seeds.split);
  const std::size_t keep[1] = {modality};
  const Dataset train = select_modalities(parts.train, keep);
  const Dataset val = select_modalities(parts.val, keep);
  const Dataset test = select_modalities(parts.test, keep);
  const ModelArch arch = uniform_arch(train.dims(), config.hidden, config.feature_dim, data.classes);
  FusionModel model = init_model(arch, derive_seed(seeds.init, {modality}));
  TrainConfig tc = config.train;
  tc.seed = seeds.train;
  FitResult fitted = fit(train, val, std::move(model), tc, MethodSpec{});
  return value_function(fitted.model, test, ModalityMask::all(1));
}

RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  if (config.seeds.empty()) throw InvalidArgument("at least one seed required");
  std::vector<CellSpec> cells;
  for (auto s : config.seeds) cells.push_back({config, s, {}, std::nullopt});
  return run_cells(config, cells, options);
}

RunReport run_sweep(const ExperimentConfig& config, const std::string& param, const std::vector<double>& values,
                    const RunOptions& options) {
  if (param.rfind("method.", 0) != 0)
    throw InvalidArgument("sweep target '" + param + "' is not a numeric method parameter");
  const std::string name = param.substr(7);
  const auto names = method_param_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw InvalidArgument("sweep target '" + param + "' is not a numeric method parameter");
  if (values.empty()) throw InvalidArgument("sweep needs at least one value");
  ExperimentConfig base = config;
  base.sweep_param = param;
  base.sweep_values = values;
  std::vector<CellSpec> cells;
  for (double v : values) {
    ExperimentConfig c = base;
    set_method_param(c.method, name, v);
    c.method.validate();
    for (auto s : config.seeds) cells.push_back({c, s, param, v});
  }
  return run_cells(base, cells, options);
}

std::string report_csv(const RunReport& report) {
  std::string out = "method,seed,sweep_param,sweep_value,acc,macro_f1";
  for (std::size_t i = 0; i < report.modalities; ++i) out += ",phi_" + std::to_string(i + 1);
  out += ",imbalance,flops_total,best_epoch,marker\n";
  for (const auto& r : report.rows) {
    out += r.method + ',';
    out += r.kind == RowKind::Seed ? std::to_string(r.seed) : (r.kind == RowKind::Mean ? "mean" : "std");
    out += ',' + r.sweep_param + ',' + (r.sweep_value ? format_number(*r.sweep_value) : std::string());
    out += ',' + format_number(r.acc) + ',' + format_number(r.macro_f1);
    for (std::size_t i = 0; i < report.modalities; ++i)
      out += ',' + (i < r.phi.size() ? format_number(r.phi[i]) : std::string());
    out += ',' + (r.imbalance ? format_number(*r.imbalance) : std::string());
    out += ',' + format_number(r.flops_total) + ',' + format_number(r.best_epoch) + ',' + r.marker + '\n';
  }
  return out;
}

std::string report_json(const RunReport& report) {
  json j;
  j["tool"] = "balancelab";
  j["version"] = kToolVersion;
  j["config"] = serialize_config(report.config);
  j["modalities"] = report.modalities;
  j["columns"] = json::array();
  for (std::string c : {"method", "seed", "sweep_param", "sweep_value", "acc", "macro_f1"}) j["columns"].push_back(c);
  for (std::size_t i = 0; i < report.modalities; ++i) j["columns"].push_back("phi_" + std::to_string(i + 1));
  for (std::string c : {"imbalance", "flops_total", "best_epoch", "marker"}) j["columns"].push_back(c);
  j["rows"] = json::array();
  for (const auto& r : report.rows) j["rows"].push_back(row_to_json(r));
  j["failures"] = json::array();
  for (const auto& f : report.failures) {
    json fj;
    fj["method"] = f.method;
    fj["seed"] = f.seed;
    fj["sweep_value"] = f.sweep_value ? json(*f.sweep_value) : json(nullptr);
    fj["message"] = f.message;
    j["failures"].push_back(fj);
  }
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("report JSON: ") + e.what(), 0);
  }
  RunReport r;
  try {
    r.config = parse_config(j.at("config").get<std::string>());
    r.modalities = j.at("modalities").get<std::size_t>();
    for (const auto& row : j.at("rows")) r.rows.push_back(row_from_json(row));
    for (const auto& f : j.at("failures")) {
      CellFailure cf;
      cf.method = f.at("method").get<std::string>();
      cf.seed = f.at("seed").get<std::uint64_t>();
      if (!f.at("sweep_value").is_null()) cf.sweep_value = f.at("sweep_value").get<double>();
      cf.message = f.at("message").get<std::string>();
      r.failures.push_back(std::move(cf));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("report JSON: ") + e.what(), 0);
  }
  return r;
}

void write_report(const RunReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  write_file(dir / "report.csv", report_csv(report));
  write_file(dir / "report.json", report_json(report));
}

ComparisonTable compare_table(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw InvalidArgument("compare_table needs at least one report");
  auto dataset_key = [](const RunReport& r) {
    ExperimentConfig c;
    c.synthetic = r.config.synthetic;
    c.dataset_path = r.config.dataset_path;
    return serialize_config(c).substr(0, serialize_config(c).find("split."));
  };
  const std::string key = dataset_key(reports.front());
  for (const auto& r : reports)
    if (dataset_key(r) != key) throw InvalidArgument("reports were produced on different datasets");

  struct Entry {
    std::string method;
    MethodGroup group;
    std::size_t order;
    double acc, f1, imbalance, flops;
    bool has_imbalance;
  };
  std::vector<Entry> entries;
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      if (row.kind != RowKind::Mean || row.sweep_value) continue;
      const MethodKind kind = parse_method_kind(row.method);
      const auto all = all_methods();
      const auto order = static_cast<std::size_t>(std::find(all.begin(), all.end(), kind) - all.begin());
      entries.push_back({row.method, method_group(kind), order, row.acc, row.macro_f1, row.imbalance.value_or(0.0),
                         row.flops_total, row.imbalance.has_value()});
    }
  }
  if (entries.empty()) throw InvalidArgument("reports contain no aggregate rows");
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.order < b.order; });

  // Rank: 1 = best, 2 = second best; higher is better for ACC/F1, lower for imbalance/FLOPs.
  auto ranks = [&](auto get, bool higher_better, bool (*usable)(const Entry&)) {
    std::vector<int> rank(entries.size(), 0);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (usable(entries[i])) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return higher_better ? get(entries[a]) > get(entries[b]) : get(entries[a]) < get(entries[b]);
    });
    if (!idx.empty()) rank[idx[0]] = 1;
    if (idx.size() > 1 && (entries.size() > 1)) rank[idx[1]] = 2;
    return rank;
  };
  auto always = [](const Entry&) { return true; };
  auto with_imb = [](const Entry& e) { return e.has_imbalance; };
  const auto acc_rank = ranks([](const Entry& e) { return e.acc; }, true, always);
  const auto f1_rank = ranks([](const Entry& e) { return e.f1; }, true, always);
  const auto imb_rank = ranks([](const Entry& e) { return e.imbalance; }, false, with_imb);
  const auto flops_rank = ranks([](const Entry& e) { return e.flops; }, false, always);

  auto mark = [](int rank) { return rank == 1 ? std::string("**") : rank == 2 ? std::string("*") : std::string(); };
  auto fixed = [](double v, int digits) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
  };

  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Group", "Method", "ACC", "F1", "Imbalance", "FLOPs"});
  std::string csv = "group,method,acc,acc_rank,macro_f1,f1_rank,imbalance,imbalance_rank,flops,flops_rank\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string group(group_name(e.group));
    cells.push_back({group, e.method, fixed(100.0 * e.acc, 2) + mark(acc_rank[i]), fixed(100.0 * e.f1, 2) + mark(f1_rank[i]),
                     e.has_imbalance ? fixed(e.imbalance, 4) + mark(imb_rank[i]) : "-",
                     format_number(e.flops) + mark(flops_rank[i])});
    csv += group + ',' + e.method + ',' + format_number(e.acc) + ',' + std::to_string(acc_rank[i]) + ',' +
           format_number(e.f1) + ',' + std::to_string(f1_rank[i]) + ',' +
           (e.has_imbalance ? format_number(e.imbalance) : std::string()) + ',' + std::to_string(imb_rank[i]) + ',' +
           format_number(e.flops) + ',' + std::to_string(flops_rank[i]) + '\n';
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string text;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const auto& s = cells[r][c];
      if (c < 2) text += s + std::string(width[c] - s.size(), ' ');
      else text += std::string(width[c] - s.size(), ' ') + s;
      text += c + 1 < cells[r].size() ? "  " : "\n";
    }
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      text += std::string(total - 2, '-') + "\n";
    }
  }
  text += "** best, * second best\n";
  return {text, csv};
}

}  // namespace balancelab
