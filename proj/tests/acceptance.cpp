#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "sfl/analysis.hpp"
#include "sfl/experiment.hpp"
#include "sfl/zoo.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace sfl;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kForwardAbs = 1e-6;
constexpr double kGradRel = 1e-5;
constexpr double kParamAbs = 1e-5;
constexpr double kEquivalenceSeconds = 120.0;
constexpr double kUnetParams = 7.76e6;
constexpr double kUnetParamsTol = 0.07;
constexpr double kUnetMacs = 10.52e9;
constexpr double kUnetMacsTol = 0.15;
constexpr double kOrderingMargin = 0.01;
constexpr int kOrderingSeeds = 3;
constexpr int kOrderingRequired = 2;
constexpr double kOrderingCpuSeconds = 900.0;
constexpr double kGradCheckTol = 1e-3;
constexpr int kGradCheckMinCases = 100;
constexpr int kGradCheckSeeds = 6;
constexpr double kGradCheckSeconds = 60.0;
constexpr double kDiceTol = 1e-6;
constexpr double kOracleSeconds = 60.0;
constexpr int kWireCases = 1000;
constexpr double kTransportSeconds = 120.0;

int failures = 0;

void report(int criterion, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << criterion << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

NetworkConfig equivalence_config(const std::string& network) {
  NetworkConfig c;
  c.network = network;
  c.base_width = 8;
  c.num_classes = 5;
  c.input_size = 64;
  c.seed = 1;
  return c;
}

void split_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto batch = make_batch(generate_synthetic_dataset(4, 64, 1));
  EquivalenceTolerances tol{kForwardAbs, kGradRel, kParamAbs};
  bool ok = true;
  std::string detail;
  for (const auto& name : network_names()) {
    auto g = build_network(equivalence_config(name));
    auto r = check_split_equivalence(*g, g->default_plan(), batch, 5, tol);
    const bool pass = r.passed && r.forward_max_abs < kForwardAbs && r.grad_max_rel < kGradRel &&
                      r.param_max_abs < kParamAbs;
    ok = ok && pass;
    detail += name + " fwd " + fmt(r.forward_max_abs) + " grad " + fmt(r.grad_max_rel) + " param " +
              fmt(r.param_max_abs) + (pass ? "; " : " (failed); ");
  }
  const double secs = seconds_since(t0);
  report(1, ok && secs < kEquivalenceSeconds, detail + "time " + fmt(secs) + " s");
}

void unet_complexity() {
  NetworkConfig c;
  c.num_classes = 2;
  auto g = build_unet(c);
  const double params = static_cast<double>(count_params(*g));
  const double macs = static_cast<double>(count_macs(*g, {1, 3, 240, 240}));
  const bool ok = std::abs(params / kUnetParams - 1.0) <= kUnetParamsTol &&
                  std::abs(macs / kUnetMacs - 1.0) <= kUnetMacsTol;
  report(2, ok, "params " + fmt(params) + " (7.76M +-7%), MACs " + fmt(macs) + " (10.52G +-15%)");
}

ExperimentConfig ordering_config(std::uint64_t seed, const fs::path& dir) {
  auto doc = experiment_preset("synthetic-4client");
  doc["seed"] = seed;
  auto cfg = parse_config(doc);
  cfg.output_dir = dir.string();
  return cfg;
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), dir).string()] = std::string((std::istreambuf_iterator<char>(in)), {});
  }
  return files;
}

void regime_ordering(const fs::path& root) {
  const double cpu0 = cpu_seconds();
  int holds = 0;
  std::string detail;
  bool bytes_ok = true;
  std::int64_t records_checked = 0;
  for (int seed = 1; seed <= kOrderingSeeds; ++seed) {
    std::map<std::string, double> iou;
    for (const std::string regime : {"centralized", "local", "splitfed"}) {
      auto cfg = ordering_config(static_cast<std::uint64_t>(seed), root / ("seed" + std::to_string(seed)) / regime);
      auto result = run_regime(cfg, regime);
      write_outputs(cfg, result);
      iou[regime] = result.test_iou;
      if (regime != "splitfed") continue;
      const auto data = prepare_data(cfg);
      const auto model = build_model(cfg, data.num_classes);
      const auto plan = resolve_plan(cfg, *model);
      const auto size = cfg.dataset.image_size;
      for (const auto& r : result.histories.front().records) {
        const auto& c = data.clients[static_cast<std::size_t>(r.client)];
        const auto p = predict_round_traffic(
            *model, plan, size, size,
            {static_cast<std::int64_t>(c.train.size()), static_cast<std::int64_t>(c.val.size())},
            cfg.training.local_epochs);
        bytes_ok = bytes_ok && r.bytes_up == p.bytes_up && r.bytes_down == p.bytes_down;
        ++records_checked;
      }
    }
    const double c = iou["centralized"], l = iou["local"], s = iou["splitfed"];
    const bool holds_here = c >= s && s >= l + kOrderingMargin;
    holds += holds_here ? 1 : 0;
    detail += "seed " + std::to_string(seed) + " C " + fmt(c) + " S " + fmt(s) + " L " + fmt(l) +
              (holds_here ? "; " : " (violated); ");
  }
  const double cpu = cpu_seconds() - cpu0;
  report(3, holds >= kOrderingRequired && cpu <= kOrderingCpuSeconds,
         detail + std::to_string(holds) + "/" + std::to_string(kOrderingSeeds) + " seeds hold, cpu " + fmt(cpu) +
             " s");
  report(7, bytes_ok && records_checked > 0,
         std::to_string(records_checked) + " client-round byte counters against predicted traffic");
}

void rerun_determinism(const fs::path& root) {
  auto cfg = ordering_config(1, root / "seed1" / "splitfed");
  const auto before = read_tree(cfg.output_dir);
  write_outputs(cfg, run_regime(cfg, "splitfed"));
  const auto after = read_tree(cfg.output_dir);
  std::string diff;
  for (const auto& [name, bytes] : before) {
    auto it = after.find(name);
    if (it == after.end() || it->second != bytes) diff += " " + name;
  }
  const bool ok = !before.empty() && before.size() == after.size() && diff.empty();
  report(8, ok, std::to_string(before.size()) + " output files compared byte-for-byte" +
                    (diff.empty() ? "" : ", differing:" + diff));
}

void gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  int cases = 0;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& check : sfl::testing::primitive_checks()) {
    for (int seed = 1; seed <= kGradCheckSeeds; ++seed) {
      const double err = check.run(static_cast<std::uint64_t>(seed)).max_rel_error;
      ++cases;
      if (!(err <= worst)) {
        worst = err;
        worst_name = check.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  report(4, cases >= kGradCheckMinCases && worst < kGradCheckTol && secs < kGradCheckSeconds,
         std::to_string(cases) + " cases, worst " + fmt(worst) + " (" + worst_name + "), time " + fmt(secs) + " s");
}

std::vector<ClassId> mask_from_bits(int bits, int n) {
  std::vector<ClassId> m(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i)] = static_cast<ClassId>((bits >> i) & 1);
  return m;
}

void oracle_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(17);

  bool fedavg_ok = true;
  int fedavg_cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> clients(1, 10), count(1, 500), len(1, 64);
    const int k = clients(rng);
    const auto n = len(rng);
    std::vector<WeightUpload> uploads;
    for (int i = 0; i < k; ++i)
      uploads.push_back({{{"w", sfl::testing::random_tensor({n}, rng, -3.0, 3.0, DType::f32)},
                          {"b", sfl::testing::random_tensor({2, 3}, rng, -1.0, 1.0, DType::f32)}},
                         count(rng)});
    const auto got = fedavg(uploads);
    const auto want = sfl::testing::oracle_fedavg(uploads);
    for (std::size_t i = 0; i < got.size(); ++i) fedavg_ok = fedavg_ok && bit_equal(got[i].tensor, want[i].tensor);
    ++fedavg_cases;
  }

  bool metric_ok = true;
  int metric_cases = 0;
  for (int n : {4, 9}) {
    const int side = n == 4 ? 2 : 3;
    for (int a = 0; a < (1 << n); ++a)
      for (int b = 0; b < (1 << n); ++b) {
        const auto p = mask_from_bits(a, n), g = mask_from_bits(b, n);
        const double iou = iou_report(p, g, 2, default_foreground(2)).average_iou;
        const double dice =
            soft_dice_loss(sfl::testing::one_hot(p, 2, 1, side, side), g, {1e-6, {1}}).item();
        metric_ok = metric_ok && iou == sfl::testing::oracle_iou(p, g, {1}) &&
                    std::abs(dice - sfl::testing::oracle_dice_loss(p, g, {1})) < kDiceTol;
        ++metric_cases;
      }
  }

  bool split_ok = true;
  int split_cases = 0;
  const std::vector<SplitConstraints> constraints = {
      {}, {0.15, std::nullopt}, {0.30, std::nullopt}, {0.60, std::nullopt}, {std::nullopt, 2'000'000},
  };
  for (const auto& name : network_names()) {
    NetworkConfig c;
    c.network = name;
    auto g = build_network(c);
    for (const auto& cons : constraints) {
      auto rec = recommend_split(*g, cons, c.input_size, c.input_size);
      auto oracle = sfl::testing::brute_force_split(*g, cons, c.input_size);
      split_ok = split_ok && rec.feasible() == oracle.has_value() && (!oracle || *rec.plan == *oracle);
      ++split_cases;
    }
  }

  const double secs = seconds_since(t0);
  report(5, fedavg_ok && metric_ok && split_ok && secs < kOracleSeconds,
         "fedavg " + std::to_string(fedavg_cases) + (fedavg_ok ? " exact" : " MISMATCH") + ", IoU/Dice " +
             std::to_string(metric_cases) + (metric_ok ? " match" : " MISMATCH") + ", split search " +
             std::to_string(split_cases) + (split_ok ? " match" : " MISMATCH") + ", time " + fmt(secs) + " s");
}

void wire_and_transport() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(29);
  int round_trips = 0;
  bool wire_ok = true;
  for (int i = 0; i < kWireCases; ++i) {
    const auto m = sfl::testing::random_message(rng);
    wire_ok = wire_ok && sfl::testing::same_message(m, decode_message(encode_frame(m)));
    ++round_trips;
  }

  NetworkConfig nc;
  nc.network = "unet";
  nc.base_width = 4;
  nc.num_classes = 5;
  nc.input_size = 32;
  nc.seed = 2;
  auto g = build_network(nc);
  auto parts = partition_dataset(generate_synthetic_dataset(20, 32, 3), {{9, 7}, 4, 3});
  std::vector<ClientData> clients;
  for (std::size_t i = 0; i < parts.clients.size(); ++i) {
    auto tv = train_val_split(parts.clients[i], 3 + i);
    clients.push_back({static_cast<int>(i), tv.train, tv.val});
  }
  RoundConfig rc;
  rc.global_rounds = 2;
  rc.local_epochs = 1;
  rc.batch_size = 4;
  rc.seed = 5;
  const auto inproc = run_splitfed(*g, g->default_plan(), rc, clients, parts.test, TransportKind::inproc);
  const auto tcp = run_splitfed(*g, g->default_plan(), rc, clients, parts.test, TransportKind::tcp);
  const bool same = inproc.records == tcp.records && inproc.test_predictions == tcp.test_predictions &&
                    inproc.to_jsonl() == tcp.to_jsonl();
  const double secs = seconds_since(t0);
  report(6, wire_ok && same && secs < kTransportSeconds,
         std::to_string(round_trips) + " frame round trips" + (wire_ok ? " exact" : " MISMATCH") +
             ", tcp vs inproc run " + (same ? "bit-identical" : "DIFFERS") + ", time " + fmt(secs) + " s");
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "sfl_acceptance";
  fs::remove_all(root);
  try {
    split_equivalence();
    unet_complexity();
    gradient_checks();
    oracle_checks();
    wire_and_transport();
    regime_ordering(root);
    rerun_determinism(root);
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
