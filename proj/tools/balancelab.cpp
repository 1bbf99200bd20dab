// balancelab command-line tool.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "balancelab/errors.hpp"
#include "balancelab/harness.hpp"

namespace bl = balancelab;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> master_seed;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = false) {
  cmd->add_option("--config", c.config_path, "config file")->required()->check(CLI::ExistingFile);
  auto* out = cmd->add_option("--out", c.out, "output location");
  if (out_required) out->required();
  cmd->add_option("--seeds", c.seeds, "comma-separated seed list")->delimiter(',');
  cmd->add_option("--seed", c.master_seed, "master seed (overrides BALANCELAB_SEED and the config)");
  cmd->add_option("--jobs", c.jobs, "concurrent cells")->check(CLI::PositiveNumber);
}

bl::ExperimentConfig load_config(const Common& c) {
  bl::ExperimentConfig config = bl::parse_config_file(c.config_path);
  std::optional<std::vector<std::uint64_t>> seeds;
  if (!c.seeds.empty()) seeds = c.seeds;
  bl::apply_seed_overrides(config, c.master_seed, std::getenv("BALANCELAB_SEED"), seeds);
  if (!c.out.empty()) config.output_dir = c.out;
  return config;
}

int finish(const bl::RunReport& report) {
  std::cout << bl::report_csv(report);
  for (const auto& f : report.failures) {
    std::cerr << "failed: " << f.method << " seed " << f.seed;
    if (f.sweep_value) std::cerr << " value " << bl::format_number(*f.sweep_value);
    std::cerr << ": " << f.message << '\n';
  }
  return report.failures.empty() ? 0 : 1;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw bl::Error("cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal imbalance benchmark on synthetic and file datasets"};
  app.set_version_flag("--version", std::string(bl::kToolVersion));
  app.require_subcommand(1);

  Common gen, train, eval, sweep;
  auto* gen_cmd = app.add_subcommand("generate", "write the configured synthetic dataset to a file");
  add_common(gen_cmd, gen, true);

  auto* train_cmd = app.add_subcommand("train", "run every seed of the configured method");
  add_common(train_cmd, train);

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics of a checkpoint on the test split of the first seed");
  add_common(eval_cmd, eval);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);

  std::string param;
  std::vector<double> values;
  auto* sweep_cmd = app.add_subcommand("sweep", "grid sweep of one method parameter");
  add_common(sweep_cmd, sweep);
  sweep_cmd->add_option("--param", param, "parameter path, e.g. method.alpha");
  sweep_cmd->add_option("--values", values, "comma-separated values")->delimiter(',');

  std::vector<std::string> report_paths;
  std::string table_out;
  auto* table_cmd = app.add_subcommand("table", "comparison table from report.json files");
  table_cmd->add_option("--reports", report_paths, "report.json files")->required()->delimiter(',')
      ->check(CLI::ExistingFile);
  table_cmd->add_option("--out", table_out, "also write the table as CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      bl::ExperimentConfig config = load_config({gen.config_path, "", gen.seeds, gen.master_seed, gen.jobs});
      if (!config.synthetic) throw bl::InvalidArgument("generate needs a synthetic dataset spec");
      const bl::Dataset data = bl::generate(*config.synthetic);
      bl::save(data, gen.out);
      std::cout << "wrote " << data.size() << " samples to " << gen.out << '\n';
      return 0;
    }
    if (*train_cmd) {
      const auto config = load_config(train);
      return finish(bl::run_experiment(config, {train.jobs, true}));
    }
    if (*sweep_cmd) {
      auto config = load_config(sweep);
      if (param.empty()) param = config.sweep_param;
      if (values.empty()) values = config.sweep_values;
      if (param.empty() || values.empty()) throw bl::InvalidArgument("sweep needs --param and --values or sweep.* keys");
      return finish(bl::run_sweep(config, param, values, {sweep.jobs, true}));
    }
    if (*eval_cmd) {
      const auto config = load_config(eval);
      const bl::Dataset data = bl::load_dataset(config);
      const bl::FusionModel model = bl::load_model(checkpoint);
      const auto seeds = bl::derive_run_seeds(config.master_seed, config.seeds.front());
      const bl::Splits parts = bl::split(data, config.split, seeds.split);
      const auto cache = bl::forward(model, parts.test.features, bl::ModalityMask::all(model.modalities()));
      const auto perf = bl::performance(bl::predict(cache.logits), parts.test.labels, data.classes);
      nlohmann::ordered_json j;
      j["checkpoint"] = checkpoint;
      j["seed"] = config.seeds.front();
      j["acc"] = perf.accuracy;
      j["macro_f1"] = perf.macro_f1;
      j["confusion"] = perf.confusion;
      if (config.shapley && (model.modalities() == 2 || model.modalities() == 3)) {
        const auto sh = bl::shapley(model, parts.test);
        j["phi"] = sh.phi;
        j["imbalance"] = sh.imbalance;
      }
      const std::string text = j.dump(2) + "\n";
      std::cout << text;
      if (!eval.out.empty()) {
        fs::create_directories(eval.out);
        std::ofstream(fs::path(eval.out) / "evaluation.json") << text;
      }
      return 0;
    }
    if (*table_cmd) {
      std::vector<bl::RunReport> reports;
      for (const auto& p : report_paths) reports.push_back(bl::report_from_json(read_text(p)));
      const auto table = bl::compare_table(reports);
      std::cout << table.text;
      if (!table_out.empty()) {
        std::ofstream out(table_out, std::ios::binary);
        out << table.csv;
        if (!out) throw bl::Error("cannot write '" + table_out + "'");
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
