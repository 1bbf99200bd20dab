// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4] [--expect-fail 5]
//
// Exit status is 0 when every failing criterion is listed in --expect-fail.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "balancelab/harness.hpp"
#include "balancelab/random.hpp"
#include "oracles.hpp"

namespace bl = balancelab;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-5;
constexpr double kFdEps = 1e-6;
constexpr double kEfficiencyTol = 1e-9;
constexpr double kFormulaTol = 1e-12;
constexpr double kOracleTol = 1e-9;
constexpr double kImbalanceReduction = 0.20;
constexpr double kAccGain = 0.01;
constexpr double kAccLoss = 0.005;
constexpr double kGradSeconds = 30.0;
constexpr double kPhenomenonSeconds = 180.0;
constexpr double kEfficacySeconds = 900.0;
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kSeedQuorum = 4;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("violated: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

std::vector<std::uint64_t> seed_list() {
  std::vector<std::uint64_t> s(kSeeds);
  std::iota(s.begin(), s.end(), std::uint64_t{0});
  return s;
}

// The imbalance dataset: s=(3,1), sigma=1, d=(12,12), H=4, N=4000; 40 epochs.
bl::ExperimentConfig imbalance_config() {
  bl::ExperimentConfig c;
  c.synthetic = bl::SyntheticSpec{};
  c.synthetic->modalities = 2;
  c.synthetic->classes = 4;
  c.synthetic->dims = {12, 12};
  c.synthetic->signal = {3.0, 1.0};
  c.synthetic->noise = 1.0;
  c.synthetic->samples = 4000;
  c.train.epochs = 40;
  c.seeds = seed_list();
  return c;
}

const bl::RunRow& mean_row(const bl::RunReport& r) {
  for (const auto& row : r.rows)
    if (row.kind == bl::RowKind::Mean) return row;
  throw std::runtime_error("report has no mean row");
}

// Relabels a subset-value table: old modality i becomes perm[i].
std::vector<double> relabel(const std::vector<double>& v, const std::vector<std::size_t>& perm) {
  const std::size_t m = perm.size();
  std::vector<double> out(v.size());
  for (unsigned s = 0; s < v.size(); ++s) {
    unsigned t = 0;
    for (std::size_t i = 0; i < m; ++i)
      if (s & (1u << i)) t |= 1u << perm[i];
    out[t] = v[s];
  }
  return out;
}

// Shapley properties of one table; values in [0, 1].
void check_table(const std::vector<double>& v, std::size_t m, Outcome& o, const std::string& tag) {
  const auto phi = bl::shapley_values(v, m);
  const double imb = bl::imbalance(phi);
  o.require(imb >= 0.0 && imb <= 1.0, tag + " imbalance in [0,1]");
  const double sum = std::accumulate(phi.begin(), phi.end(), 0.0);
  o.require(std::abs(sum - (v.back() - v.front())) < kEfficiencyTol, tag + " efficiency");
  const auto ref = oracle::shapley_subset(v, m);
  for (std::size_t i = 0; i < m; ++i)
    o.require(std::abs(phi[i] - ref[i]) < kFormulaTol, tag + " permutation vs subset formula");

  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  while (std::next_permutation(perm.begin(), perm.end())) {
    const auto phi_p = bl::shapley_values(relabel(v, perm), m);
    for (std::size_t i = 0; i < m; ++i) o.require(phi_p[perm[i]] == phi[i], tag + " relabeling permutes phi");
    o.require(bl::imbalance(phi_p) == imb, tag + " relabeling keeps imbalance");
  }
}

// ---------------------------------------------------------------------------

Outcome gradient_exactness() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  bl::Rng rng(20240601);
  double worst = 0.0;
  std::size_t blocks = 0;
  for (int t = 0; t < 20; ++t) {
    bl::SyntheticSpec s;
    s.modalities = 2 + rng.index(2);
    s.classes = 2 + rng.index(4);
    s.dims.clear();
    s.signal.clear();
    for (std::size_t i = 0; i < s.modalities; ++i) {
      s.dims.push_back(1 + rng.index(8));
      s.signal.push_back(rng.uniform(0.5, 3.0));
    }
    s.samples = 24;
    s.seed = t;
    const auto data = bl::generate(s);

    bl::ModelArch arch;
    arch.classes = s.classes;
    for (std::size_t i = 0; i < s.modalities; ++i) {
      std::vector<std::size_t> sizes{s.dims[i]};
      const std::size_t hidden = rng.index(3);
      for (std::size_t l = 0; l < hidden; ++l) sizes.push_back(1 + rng.index(16));
      sizes.push_back(1 + rng.index(16));
      arch.encoders.push_back(sizes);
    }
    auto model = bl::init_model(arch, 1000 + t);
    // zero biases can leave preactivations exactly on the ReLU kink
    for (auto& enc : model.encoders)
      for (auto& l : enc.layers)
        for (double& b : l.bias) b = rng.uniform(-0.5, 0.5);
    for (double& b : model.bias) b = rng.uniform(-0.5, 0.5);

    bl::FusionGradients g;
    bl::fused_loss(model, data.features, data.labels, &g);
    auto f = [&](std::span<const double> p) {
      return bl::fused_loss(bl::unflatten(p, model), data.features, data.labels, nullptr);
    };
    const double err = bl::finite_diff_check(f, bl::flatten(model), bl::flatten(model, g), kFdEps);
    worst = std::max(worst, err);
    for (const auto& enc : model.encoders) blocks += 2 * enc.layers.size();
    blocks += model.head.size() + 1;
    o.require(err < kGradTol, "model " + std::to_string(t) + " max relative error " + sci(err));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.require(secs < kGradSeconds, "runtime " + fmt(secs, 1) + " s");
  o.note("20 models, " + std::to_string(blocks) + " parameter blocks, max relative error " + sci(worst) + ", " +
         fmt(secs, 2) + " s");
  return o;
}

Outcome shapley_properties() {
  Outcome o;
  bl::Rng rng(77);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 2 + (t % 2);
    std::vector<double> v(std::size_t{1} << m);
    for (double& x : v) x = rng.uniform();
    check_table(v, m, o, "table " + std::to_string(t));

    // values that depend only on coalition size give equal contributions
    std::vector<double> by_size(m + 1);
    for (double& x : by_size) x = rng.uniform();
    std::vector<double> sym(v.size());
    for (unsigned s = 0; s < sym.size(); ++s) sym[s] = by_size[std::popcount(s)];
    const auto phi = bl::shapley_values(sym, m);
    o.require(std::all_of(phi.begin(), phi.end(), [&](double p) { return p == phi[0]; }),
              "symmetric table " + std::to_string(t) + " gives equal phi");
    o.require(bl::imbalance(phi) == 0.0, "equal phi gives zero imbalance");
  }

  // trained models on a three-modality dataset
  bl::ExperimentConfig c;
  c.synthetic = bl::SyntheticSpec{};
  c.synthetic->modalities = 3;
  c.synthetic->dims = {6, 6, 6};
  c.synthetic->signal = {2.0, 1.0, 0.5};
  c.synthetic->samples = 1200;
  c.hidden = {16};
  c.feature_dim = 8;
  c.train.lr = 0.01;
  c.train.epochs = 10;
  const auto data = bl::load_dataset(c);
  std::vector<std::future<bl::CellResult>> runs;
  for (std::uint64_t s = 0; s < kSeeds; ++s)
    runs.push_back(std::async(std::launch::async, [&, s] { return bl::run_cell(c, data, s); }));
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto r = runs[s].get();
    check_table(r.shapley->subset_values, 3, o, "trained model " + std::to_string(s));
  }
  o.note("50 random tables (m=2,3) plus symmetric variants, 5 trained three-modality models");
  return o;
}

Outcome worked_oracle() {
  Outcome o;
  const std::vector<double> two{0.25, 0.60, 0.40, 0.70};
  const auto r2 = bl::shapley_from_values(two, 2);
  // hand enumeration: phi1 = ((0.60-0.25) + (0.70-0.40))/2, phi2 = ((0.40-0.25) + (0.70-0.60))/2
  o.require(std::abs(r2.phi[0] - 0.325) < kOracleTol, "m=2 phi1 = 0.325, got " + fmt(r2.phi[0], 12));
  o.require(std::abs(r2.phi[1] - 0.125) < kOracleTol, "m=2 phi2 = 0.125, got " + fmt(r2.phi[1], 12));
  o.require(std::abs(r2.imbalance - 0.2) < kOracleTol, "m=2 imbalance = 0.2");

  // bit i set = modality i+1 present
  const std::vector<double> three{0.1, 0.5, 0.3, 0.6, 0.2, 0.55, 0.35, 0.7};
  const auto r3 = bl::shapley_from_values(three, 3);
  const double want[] = {43.0 / 120.0, 19.0 / 120.0, 1.0 / 12.0};
  for (std::size_t i = 0; i < 3; ++i)
    o.require(std::abs(r3.phi[i] - want[i]) < kOracleTol,
              "m=3 phi" + std::to_string(i + 1) + " = " + fmt(want[i], 6) + ", got " + fmt(r3.phi[i], 12));
  o.require(std::abs(r3.imbalance - 11.0 / 60.0) < kOracleTol, "m=3 imbalance = 11/60");
  o.note("m=2 phi=(" + fmt(r2.phi[0], 6) + ", " + fmt(r2.phi[1], 6) + ") I=" + fmt(r2.imbalance, 6) +
         "; m=3 phi=(" + fmt(r3.phi[0], 6) + ", " + fmt(r3.phi[1], 6) + ", " + fmt(r3.phi[2], 6) +
         ") I=" + fmt(r3.imbalance, 6));
  return o;
}

Outcome imbalance_phenomenon() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = imbalance_config();
  const auto data = bl::load_dataset(c);
  struct SeedResult {
    double weak_in_fusion, weak_alone, phi1, phi2;
  };
  std::vector<std::future<SeedResult>> futures;
  for (std::uint64_t s = 0; s < kSeeds; ++s)
    futures.push_back(std::async(std::launch::async, [&, s] {
      const auto r = bl::run_cell(c, data, s);
      return SeedResult{r.shapley->subset_values[0b10], bl::unimodal_accuracy(c, data, s, 1), r.shapley->phi[0],
                        r.shapley->phi[1]};
    }));
  std::size_t hits = 0;
  std::string detail;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto r = futures[s].get();
    const bool hit = r.weak_in_fusion < r.weak_alone && r.phi2 < r.phi1;
    hits += hit;
    detail += " [seed " + std::to_string(s) + ": masked " + fmt(r.weak_in_fusion) + " alone " + fmt(r.weak_alone) +
              " phi " + fmt(r.phi1) + "/" + fmt(r.phi2) + "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.require(hits >= kSeedQuorum, std::to_string(hits) + " of 5 seeds show the phenomenon");
  o.require(secs < kPhenomenonSeconds, "runtime " + fmt(secs, 1) + " s");
  o.note(std::to_string(hits) + "/5 seeds, " + fmt(secs, 1) + " s;" + detail);
  return o;
}

Outcome method_efficacy() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<bl::MethodKind, bl::RunRow>> means;
  for (auto kind : bl::all_methods()) {
    auto c = imbalance_config();
    c.method.kind = kind;
    c.method.alpha = 1.0;
    c.method.w_uni = 1.0;
    c.method.lambda = 0.5;
    const auto report = bl::run_experiment(c, {jobs(), false});
    o.require(report.failures.empty(), std::string(bl::method_name(kind)) + " ran without failures");
    if (report.failures.empty()) means.emplace_back(kind, mean_row(report));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (means.size() != bl::all_methods().size()) return o;

  const auto& base = means.front().second;
  bool any_gain = false;
  for (const auto& [kind, row] : means) {
    const std::string name(bl::method_name(kind));
    const double reduction = 1.0 - *row.imbalance / *base.imbalance;
    o.note(name + ": acc " + fmt(row.acc) + " I " + fmt(*row.imbalance) + " (" + fmt(100.0 * reduction, 1) +
           "% vs baseline)");
    if (kind == bl::MethodKind::GradModulation || kind == bl::MethodKind::UnimodalBlend ||
        kind == bl::MethodKind::KlAlign) {
      o.require(reduction >= kImbalanceReduction, name + " reduces mean imbalance by >= 20% (got " +
                                                      fmt(100.0 * reduction, 1) + "%)");
      any_gain = any_gain || row.acc - base.acc >= kAccGain;
    }
    o.require(row.acc >= base.acc - kAccLoss, name + " loses at most 0.5 accuracy points (got " +
                                                  fmt(100.0 * (row.acc - base.acc), 2) + ")");
  }
  o.require(any_gain, "one of gradmod/blend/klalign gains >= 1 accuracy point");
  o.require(secs < kEfficacySeconds, "runtime " + fmt(secs, 1) + " s");
  o.note(fmt(secs, 1) + " s");
  return o;
}

Outcome method_off() {
  Outcome o;
  bl::ExperimentConfig c;
  c.synthetic = bl::SyntheticSpec{};
  c.synthetic->samples = 600;
  c.hidden = {16};
  c.feature_dim = 8;
  c.train.lr = 0.01;
  c.train.epochs = 6;
  const auto data = bl::load_dataset(c);
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const auto base = bl::flatten(bl::run_cell(c, data, seed).model);
    for (auto kind : bl::all_methods()) {
      // the cosine head replaces the logit form and has no neutral strength
      if (kind == bl::MethodKind::Baseline || kind == bl::MethodKind::CosineLogits) continue;
      auto m = c;
      m.method.kind = kind;
      m.method.w_uni = 0.0;
      m.method.lambda = 0.0;
      m.method.alpha = 0.0;
      m.method.mask_fraction = 0.0;
      m.method.drop_max = 0.0;
      m.method.tau = std::numeric_limits<double>::infinity();
      const auto got = bl::flatten(bl::run_cell(m, data, seed).model);
      o.require(same_bits(got, base), std::string(bl::method_name(kind)) + " seed " + std::to_string(seed) +
                                          " bitwise equal to baseline");
    }
  }
  o.note("blend w=0, klalign lambda=0, gradmod alpha=0, featmask 0, featdrop 0, resample tau=inf; 2 seeds");
  return o;
}

Outcome flops_checks() {
  Outcome o;
  bl::Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const std::uint64_t p = 1 + rng.index(512), q = 1 + rng.index(512), r = 1 + rng.index(512);
    bl::FlopsLedger fwd, back;
    fwd.record(bl::FlopKind::LinearForward, {p, q, r});
    back.record(bl::FlopKind::LinearBackward, {p, q, r});
    o.require(fwd.total() == 2 * p * q * r + p * r, "linear forward 2pqr+pr");
    o.require(back.total() == 4 * p * q * r, "linear backward 4pqr");
    o.require(fwd.category(bl::FlopCategory::ForwardMatmul) == fwd.total(), "forward category");
    o.require(back.category(bl::FlopCategory::BackwardMatmul) == back.total(), "backward category");
  }
  const std::size_t sizes[] = {12, 32, 16};
  bl::Rng init(5);
  const auto mlp = bl::init_mlp(sizes, init);
  bl::FlopsLedger l;
  bl::record_mlp_forward(l, mlp, 64);
  o.require(l.category(bl::FlopCategory::ForwardMatmul) ==
                (2 * 64 * 12 * 32 + 64 * 32) + (2 * 64 * 32 * 16 + 64 * 16),
            "mlp forward matmul count");

  bl::ExperimentConfig c;
  c.synthetic = bl::SyntheticSpec{};
  c.synthetic->samples = 500;
  c.train.epochs = 3;
  c.seeds = {0, 1, 2};
  for (auto kind : bl::all_methods()) {
    c.method.kind = kind;
    const auto a = bl::run_experiment(c, {1, false});
    const auto b = bl::run_experiment(c, {3, false});
    bool same = a.rows.size() == b.rows.size();
    for (std::size_t i = 0; same && i < a.rows.size(); ++i) same = a.rows[i].flops_total == b.rows[i].flops_total;
    o.require(same, std::string(bl::method_name(kind)) + " FLOP totals repeat");
    o.require(a.rows.front().flops_total > 0, std::string(bl::method_name(kind)) + " FLOP total positive");
  }
  o.note("200 random shapes, mlp spot check, 8 methods repeated serially and in parallel");
  return o;
}

Outcome sweep_harness() {
  Outcome o;
  auto c = imbalance_config();
  c.method.kind = bl::MethodKind::GradModulation;
  const std::vector<double> alphas{0.0, 0.5, 1.0, 2.0, 4.0};
  const auto report = bl::run_sweep(c, "method.alpha", alphas, {jobs(), false});
  o.require(report.failures.empty(), "no failed cells");

  std::set<std::pair<double, std::uint64_t>> cells;
  std::map<std::uint64_t, std::map<double, double>> imb;
  for (const auto& row : report.rows) {
    if (row.kind != bl::RowKind::Seed) continue;
    o.require(row.sweep_value.has_value() && row.sweep_param == "method.alpha", "seed row carries the swept value");
    o.require(std::isfinite(row.acc) && row.imbalance && std::isfinite(*row.imbalance), "finite acc and imbalance");
    cells.insert({*row.sweep_value, row.seed});
    imb[row.seed][*row.sweep_value] = *row.imbalance;
  }
  o.require(cells.size() == alphas.size() * kSeeds, "one row per (value, seed)");

  const bl::RunRow* best_imb = nullptr;
  const bl::RunRow* best_acc = nullptr;
  const bl::RunRow* marked_abs = nullptr;
  const bl::RunRow* marked_rel = nullptr;
  std::string curve;
  for (const auto& row : report.rows) {
    if (row.kind != bl::RowKind::Mean) continue;
    if (!best_imb || *row.imbalance < *best_imb->imbalance) best_imb = &row;
    if (!best_acc || row.acc > best_acc->acc) best_acc = &row;
    if (row.marker.find(bl::kMarkerAbsolute) != std::string::npos) {
      o.require(!marked_abs, "single absolute marker");
      marked_abs = &row;
    }
    if (row.marker.find(bl::kMarkerRelative) != std::string::npos) {
      o.require(!marked_rel, "single relative marker");
      marked_rel = &row;
    }
    curve += " a=" + bl::format_number(*row.sweep_value) + ": I " + fmt(*row.imbalance) + " acc " + fmt(row.acc) + ";";
  }
  o.require(marked_abs && marked_abs == best_imb, "argmin imbalance row marked");
  o.require(marked_rel && marked_rel == best_acc, "argmax accuracy row marked");

  std::size_t lower = 0;
  for (const auto& [seed, by_alpha] : imb)
    if (by_alpha.count(4.0) && by_alpha.count(0.0) && by_alpha.at(4.0) < by_alpha.at(0.0)) ++lower;
  o.require(lower >= kSeedQuorum, "imbalance at alpha=4 below alpha=0 in " + std::to_string(lower) + " of 5 seeds");
  o.note(std::to_string(lower) + "/5 seeds lower at alpha=4;" + curve);
  return o;
}

Outcome determinism() {
  Outcome o;
  auto c = bl::parse_config_file(fs::path(BALANCELAB_SOURCE_DIR) / "tests/data/tiny.cfg");
  const fs::path root = fs::temp_directory_path() / "balancelab_acceptance";
  fs::remove_all(root);

  std::string csv[2], json[2];
  for (int run = 0; run < 2; ++run) {
    c.output_dir = (root / "out").string();
    fs::remove_all(c.output_dir);
    const auto report = bl::run_experiment(c, {run == 0 ? std::size_t{1} : std::size_t{2}, true});
    o.require(report.failures.empty(), "tiny config runs");
    csv[run] = read_bytes(fs::path(c.output_dir) / "report.csv");
    json[run] = read_bytes(fs::path(c.output_dir) / "report.json");
  }
  o.require(!csv[0].empty() && csv[0] == csv[1], "report.csv byte-identical across runs");
  o.require(!json[0].empty() && json[0] == json[1], "report.json byte-identical across runs");

  const auto data = bl::load_dataset(c);
  bl::save(data, root / "a.mmds");
  const auto back = bl::load(root / "a.mmds");
  o.require(back.same_contents(data), "dataset round-trips");
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    const auto a = data.features[i].values(), b = back.features[i].values();
    o.require(a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0,
              "dataset features bitwise");
  }
  bl::save(back, root / "b.mmds");
  o.require(read_bytes(root / "a.mmds") == read_bytes(root / "b.mmds"), "dataset file re-saves byte-identical");

  const auto model = bl::run_cell(c, data, 0).model;
  bl::save_model(model, root / "a.ckpt");
  const auto loaded = bl::load_model(root / "a.ckpt");
  o.require(same_bits(bl::flatten(loaded), bl::flatten(model)) && loaded.arch() == model.arch(),
            "checkpoint round-trips bitwise");
  bl::save_model(loaded, root / "b.ckpt");
  o.require(read_bytes(root / "a.ckpt") == read_bytes(root / "b.ckpt"), "checkpoint re-saves byte-identical");
  fs::remove_all(root);
  o.note("tiny config, 2 seeds, jobs 1 then 2; " + std::to_string(csv[0].size()) + " csv bytes, " +
         std::to_string(json[0].size()) + " json bytes");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"balancelab acceptance suite"};
  std::vector<int> only, expect_fail;
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "criteria known not to hold; reported but not fatal")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient exactness", gradient_exactness},
      {"shapley metric properties", shapley_properties},
      {"worked shapley oracle", worked_oracle},
      {"imbalance phenomenon", imbalance_phenomenon},
      {"method efficacy", method_efficacy},
      {"method-off equivalence", method_off},
      {"flops determinism and spot checks", flops_checks},
      {"sweep harness", sweep_harness},
      {"end-to-end determinism", determinism},
  };

  int unexpected = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.notes.push_back(std::string("exception: ") + e.what());
    }
    const bool expected = std::find(expect_fail.begin(), expect_fail.end(), id) != expect_fail.end();
    std::string status = o.pass ? "PASS" : (expected ? "FAIL (expected)" : "FAIL");
    std::cout << status << "  " << id << " " << criteria[k].first << '\n';
    std::size_t shown = 0;
    for (const auto& n : o.notes) {
      // violations repeat per table; a few are enough
      if (n.rfind("violated", 0) == 0 && ++shown > 8) continue;
      std::cout << "      " << n << '\n';
    }
    std::cout.flush();
    if (!o.pass && !expected) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
