#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "balancelab/errors.hpp"
#include "balancelab/harness.hpp"

using namespace balancelab;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# tiny run
dataset.samples = 300
dataset.seed = 4
model.hidden = [8]
model.feature_dim = 6
train.epochs = 5
train.lr = 0.01
method.kind = "baseline"
)";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("balancelab_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

const RunRow& find_row(const RunReport& r, RowKind kind) {
  for (const auto& row : r.rows)
    if (row.kind == kind) return row;
  throw std::runtime_error("row not found");
}

}  // namespace

TEST_CASE("parse_config") {
  SUBCASE("minimal config gets documented defaults") {
    const auto c = parse_config("dataset.seed = 0\nmethod.kind = \"baseline\"\n");
    REQUIRE(c.synthetic.has_value());
    CHECK(*c.synthetic == SyntheticSpec{});
    CHECK(c.train == TrainConfig{});
    CHECK(c.method == MethodSpec{});
    CHECK(c.seeds == std::vector<std::uint64_t>{0});
    CHECK(c.hidden == std::vector<std::size_t>{32});
    CHECK(c.feature_dim == 16);
    CHECK(c.shapley);
  }
  SUBCASE("method mapping") {
    const auto c = parse_config("dataset.seed = 0\nmethod.kind = \"gradmod\"\nmethod.alpha = 1.0\n");
    CHECK(c.method.kind == MethodKind::GradModulation);
    CHECK(c.method.alpha == 1.0);
  }
  SUBCASE("unknown key names the key") {
    try {
      parse_config("dataset.seed = 0\nmethd = \"baseline\"\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.key() == "methd");
    }
  }
  SUBCASE("type mismatches and missing keys") {
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\n"), ParseError);
    CHECK_THROWS_AS(parse_config("method.kind = \"baseline\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = \"x\"\nmethod.kind = \"baseline\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 1.5\nmethod.kind = \"baseline\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = baseline\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = \"ogm\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\ndataset.seed = 1\nmethod.kind = \"baseline\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = \"baseline\"\nseeds = []\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = \"baseline\"\nmethod.alpha = -1\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = \"baseline\"\nsplit.train = 0.9\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.path = \"a\"\ndataset.seed = 0\nmethod.kind = \"baseline\"\n"), ParseError);
    CHECK_THROWS_AS(parse_config("dataset.seed = 0\nmethod.kind = \"baseline\"\ntrain.lr = 0\n"), ParseError);
  }
  SUBCASE("round trip") {
    auto c = parse_config(kTiny);
    c.method.tau = INFINITY;
    c.seeds = {3, 1};
    c.output_dir = "out \"dir\"";
    c.sweep_param = "method.alpha";
    c.sweep_values = {0, 0.5, 1e-3};
    const auto text = serialize_config(c);
    CHECK(parse_config(text) == c);
    CHECK(serialize_config(parse_config(text)) == text);
    const auto f = parse_config("dataset.path = \"data.mmds\"\nmethod.kind = \"klalign\"\n");
    CHECK(parse_config(serialize_config(f)) == f);
  }
}

TEST_CASE("seed precedence") {
  auto c = parse_config(std::string(kTiny) + "seed = 5\n");
  auto d = c;
  apply_seed_overrides(d, std::nullopt, nullptr, std::nullopt);
  CHECK(d.master_seed == 5);
  apply_seed_overrides(d, std::nullopt, "7", std::nullopt);
  CHECK(d.master_seed == 7);
  apply_seed_overrides(d, 9, "7", std::vector<std::uint64_t>{1, 2});
  CHECK(d.master_seed == 9);
  CHECK(d.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK_THROWS_AS(apply_seed_overrides(d, std::nullopt, "x1", std::nullopt), ParseError);

  const auto a = derive_run_seeds(0, 0), b = derive_run_seeds(0, 1), e = derive_run_seeds(1, 0);
  CHECK(a.split != b.split);
  CHECK(a.split != e.split);
  CHECK(a.split != a.init);
  CHECK(a.init != a.train);
}

TEST_CASE("run_experiment") {
  auto c = parse_config(kTiny);
  SUBCASE("one seed, finite fields") {
    const auto r = run_experiment(c);
    REQUIRE(r.rows.size() == 3);
    const auto& row = r.rows.front();
    CHECK(row.kind == RowKind::Seed);
    CHECK(std::isfinite(row.acc));
    CHECK(std::isfinite(row.macro_f1));
    REQUIRE(row.imbalance.has_value());
    CHECK(*row.imbalance >= 0.0);
    CHECK(*row.imbalance <= 1.0);
    CHECK(row.phi.size() == 2);
    CHECK(row.flops_total > 0);
    CHECK(r.failures.empty());
  }
  SUBCASE("two seeds and the aggregate") {
    c.seeds = {0, 1};
    const auto r = run_experiment(c);
    REQUIRE(r.rows.size() == 4);
    const auto& mean = find_row(r, RowKind::Mean);
    const auto& sd = find_row(r, RowKind::Std);
    const double a = r.rows[0].acc, b = r.rows[1].acc;
    CHECK(mean.acc == doctest::Approx((a + b) / 2.0).epsilon(1e-15));
    CHECK(sd.acc == doctest::Approx(std::abs(a - b) / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(*mean.imbalance == doctest::Approx((*r.rows[0].imbalance + *r.rows[1].imbalance) / 2.0));
  }
  SUBCASE("shapley off") {
    c.shapley = false;
    const auto r = run_experiment(c);
    CHECK(r.rows.front().phi.empty());
    CHECK_FALSE(r.rows.front().imbalance.has_value());
    CHECK(report_csv(r).find("baseline,0,,,") != std::string::npos);
  }
  SUBCASE("byte-identical reports, also with parallel cells") {
    c.seeds = {0, 1, 2};
    const auto a = run_experiment(c);
    const auto b = run_experiment(c, {3, false});
    CHECK(report_csv(a) == report_csv(b));
    CHECK(report_json(a) == report_json(b));
  }
  SUBCASE("every seed failing") {
    c.train.lr = 1e200;
    c.seeds = {0, 1};
    const auto r = run_experiment(c);
    CHECK(r.all_failed());
    CHECK(r.failures.size() == 2);
    CHECK(r.failures[0].message.find("non-finite") != std::string::npos);
  }
  SUBCASE("missing dataset file") {
    auto f = parse_config("dataset.path = \"/nonexistent/x.mmds\"\nmethod.kind = \"baseline\"\n");
    CHECK_THROWS_AS(run_experiment(f), Error);
  }
}

TEST_CASE("dataset file input matches the generated dataset") {
  const auto dir = scratch("file_input");
  fs::create_directories(dir);
  auto c = parse_config(kTiny);
  save(load_dataset(c), dir / "data.mmds");
  auto f = c;
  f.synthetic.reset();
  f.dataset_path = (dir / "data.mmds").string();
  const auto a = run_experiment(c), b = run_experiment(f);
  CHECK(a.rows == b.rows);
  fs::remove_all(dir);
}

TEST_CASE("report formats") {
  auto c = parse_config(kTiny);
  c.seeds = {0, 1};
  const auto r = run_experiment(c);
  const auto csv = report_csv(r);
  CHECK(csv.rfind("method,seed,sweep_param,sweep_value,acc,macro_f1,phi_1,phi_2,imbalance,flops_total,best_epoch,marker\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 5);
  CHECK(csv.find("\nbaseline,mean,") != std::string::npos);
  CHECK(csv.find("\nbaseline,std,") != std::string::npos);

  const auto json = report_json(r);
  const auto j = nlohmann::json::parse(json);
  CHECK(j["version"] == kToolVersion);
  CHECK(j["rows"].size() == 4);
  CHECK(j["config"].get<std::string>() == serialize_config(c));
  const auto back = report_from_json(json);
  CHECK(back.rows == r.rows);
  CHECK(back.config == r.config);
  CHECK(report_json(back) == json);
  CHECK_THROWS_AS(report_from_json("{"), FormatError);
}

TEST_CASE("output directory, artifacts and resume") {
  const auto dir = scratch("resume");
  auto c = parse_config(kTiny);
  c.seeds = {0, 1};
  c.output_dir = dir.string();
  const auto first = run_experiment(c);
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "run.log"));
  CHECK(fs::exists(dir / "checkpoints" / "baseline_seed0.ckpt"));
  CHECK(fs::exists(dir / "logs" / "baseline_seed1.csv"));
  REQUIRE(fs::exists(dir / "cells" / "baseline_seed1.json"));
  const auto csv = slurp(dir / "report.csv");
  CHECK(csv == report_csv(first));
  CHECK(slurp(dir / "report.json") == report_json(first));

  // A completed cell is reused: doctor its stored accuracy and observe it come back.
  auto cell = nlohmann::ordered_json::parse(slurp(dir / "cells" / "baseline_seed1.json"));
  cell["row"]["acc"] = 0.125;
  std::ofstream(dir / "cells" / "baseline_seed1.json") << cell.dump(2);
  const auto second = run_experiment(c);
  CHECK(second.rows[1].acc == 0.125);
  CHECK(second.rows[0].acc == first.rows[0].acc);

  // A different config invalidates the stored cell.
  auto d = c;
  d.train.epochs = 4;
  const auto third = run_experiment(d);
  CHECK(third.rows[1].acc != 0.125);

  // The checkpoint reproduces the reported accuracy.
  const auto model = load_model(dir / "checkpoints" / "baseline_seed0.ckpt");
  const auto parts = split(load_dataset(d), d.split, derive_run_seeds(d.master_seed, 0).split);
  const auto acc = value_function(model, parts.test, ModalityMask::all(2));
  CHECK(acc == third.rows[0].acc);
  fs::remove_all(dir);
}

TEST_CASE("run_sweep") {
  auto c = parse_config(kTiny);
  c.method.kind = MethodKind::GradModulation;
  SUBCASE("alpha = 0 reproduces the baseline") {
    const auto sweep = run_sweep(c, "method.alpha", {0.0});
    auto b = c;
    b.method.kind = MethodKind::Baseline;
    const auto base = run_experiment(b);
    CHECK(sweep.rows[0].acc == base.rows[0].acc);
    CHECK(sweep.rows[0].phi == base.rows[0].phi);
    CHECK(sweep.rows[0].best_epoch == base.rows[0].best_epoch);
  }
  SUBCASE("rows, markers and verbatim values") {
    c.seeds = {0, 1};
    const std::vector<double> values{0.0, 0.5, 1.0, 2.0, 4.0};
    const auto r = run_sweep(c, "method.alpha", values);
    std::size_t seed_rows = 0, absolute = 0, relative = 0;
    for (const auto& row : r.rows) {
      CHECK(row.sweep_param == "method.alpha");
      REQUIRE(row.sweep_value.has_value());
      CHECK(std::find(values.begin(), values.end(), *row.sweep_value) != values.end());
      seed_rows += row.kind == RowKind::Seed;
      absolute += row.marker.find(kMarkerAbsolute) != std::string::npos;
      relative += row.marker.find(kMarkerRelative) != std::string::npos;
    }
    CHECK(seed_rows == 10);
    CHECK(absolute == 1);
    CHECK(relative == 1);
    const auto csv = report_csv(r);
    CHECK(csv.find(",method.alpha,0.5,") != std::string::npos);
  }
  SUBCASE("bad targets") {
    CHECK_THROWS_AS(run_sweep(c, "train.lr", {0.1}), InvalidArgument);
    CHECK_THROWS_AS(run_sweep(c, "method.kind", {1.0}), InvalidArgument);
    CHECK_THROWS_AS(run_sweep(c, "method.alpha", {}), InvalidArgument);
  }
}

TEST_CASE("compare_table") {
  auto c = parse_config(kTiny);
  const auto base = run_experiment(c);
  SUBCASE("single report") {
    const auto t = compare_table({base});
    CHECK(t.csv.rfind("group,method,", 0) == 0);
    std::size_t lines = 0;
    for (char ch : t.csv) lines += ch == '\n';
    CHECK(lines == 2);
    CHECK(t.text.find("baseline") != std::string::npos);
  }
  SUBCASE("grouping order and best markers") {
    std::vector<RunReport> reports;
    for (auto kind : {MethodKind::Resample, MethodKind::FeatureMask, MethodKind::GradModulation, MethodKind::UnimodalBlend}) {
      auto k = c;
      k.method.kind = kind;
      reports.push_back(run_experiment(k));
    }
    reports.push_back(base);
    // Make the blend row strictly best in accuracy.
    for (auto& row : reports[3].rows)
      if (row.kind == RowKind::Mean) row.acc = 1.0;
    const auto t = compare_table(reports);
    std::vector<std::string> order;
    std::istringstream in(t.csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) order.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
    CHECK(order == std::vector<std::string>{"Baseline,baseline", "Objective,blend", "Optimization,gradmod",
                                            "Feed-forward,featmask", "Data,resample"});
    CHECK(t.csv.find("Objective,blend,1,1,") != std::string::npos);
  }
  SUBCASE("conflicting datasets") {
    auto other = c;
    other.synthetic->seed = 99;
    CHECK_THROWS_AS(compare_table({base, run_experiment(other)}), InvalidArgument);
    CHECK_THROWS_AS(compare_table({}), InvalidArgument);
  }
}
