#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "sfl/analysis.hpp"
#include "sfl/experiment.hpp"
#include "sfl/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfl;

namespace {

// Flags are a flat projection of the JSON config.
struct ConfigFlags {
  std::string config_file;
  std::string preset;
  std::optional<std::string> network, output_dir, transport, address, dataset_preset, images_dir, masks_dir, dtype;
  std::optional<std::uint64_t> seed;
  std::optional<int> global_rounds, local_epochs, batch_size, base_width, depth, image_size, baseline_epochs,
      fe_last, be_first, save_masks, num_classes;
  std::optional<double> lr;
  std::optional<bool> aggregate_server, augment;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--preset", preset, "Built-in experiment preset");
    app.add_option("--network", network, "unet | segnet | attention_unet | cgnet");
    app.add_option("--seed", seed);
    app.add_option("--out", output_dir, "Output directory");
    app.add_option("--transport", transport, "inproc | tcp");
    app.add_option("--address", address, "host:port for tcp");
    app.add_option("--dataset-preset", dataset_preset);
    app.add_option("--images", images_dir, "Directory of RGB PNG images");
    app.add_option("--masks", masks_dir, "Directory of class-id PNG masks");
    app.add_option("--num-classes", num_classes);
    app.add_option("--image-size", image_size);
    app.add_option("--base-width", base_width);
    app.add_option("--depth", depth);
    app.add_option("--dtype", dtype, "f32 | f64");
    app.add_option("--global-rounds", global_rounds);
    app.add_option("--local-epochs", local_epochs);
    app.add_option("--batch-size", batch_size);
    app.add_option("--lr", lr);
    app.add_option("--baseline-epochs", baseline_epochs, "Epochs of the centralized and local baselines");
    app.add_option("--aggregate-server", aggregate_server);
    app.add_option("--augment", augment);
    app.add_option("--fe-last", fe_last);
    app.add_option("--be-first", be_first);
    app.add_option("--save-masks", save_masks, "Test samples dumped as mask PNGs");
  }

  json overlay() const {
    json j = json::object();
    auto put = [&](const std::vector<std::string>& path, const auto& v) {
      if (!v) return;
      json* node = &j;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
      (*node)[path.back()] = *v;
    };
    put({"network"}, network);
    put({"seed"}, seed);
    put({"output_dir"}, output_dir);
    put({"transport"}, transport);
    put({"address"}, address);
    put({"save_masks"}, save_masks);
    put({"baseline_epochs"}, baseline_epochs);
    put({"dataset", "preset"}, dataset_preset);
    put({"dataset", "images_dir"}, images_dir);
    put({"dataset", "masks_dir"}, masks_dir);
    put({"dataset", "num_classes"}, num_classes);
    put({"dataset", "image_size"}, image_size);
    put({"model", "base_width"}, base_width);
    put({"model", "depth"}, depth);
    put({"model", "dtype"}, dtype);
    put({"training", "global_rounds"}, global_rounds);
    put({"training", "local_epochs"}, local_epochs);
    put({"training", "batch_size"}, batch_size);
    put({"training", "lr"}, lr);
    put({"training", "aggregate_server"}, aggregate_server);
    put({"training", "augment"}, augment);
    put({"split", "fe_last"}, fe_last);
    put({"split", "be_first"}, be_first);
    return j;
  }

  ExperimentConfig resolve() const {
    std::vector<json> docs;
    if (!preset.empty()) docs.push_back(experiment_preset(preset));
    if (!config_file.empty()) docs.push_back(load_json_file(config_file));
    docs.push_back(overlay());
    return parse_config(merge_documents(docs));
  }
};

void echo_config(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "config.json") << config_to_json(cfg).dump(2) << "\n";
}

int train(const ConfigFlags& flags, const std::string& regime) {
  const auto cfg = flags.resolve();
  echo_config(cfg);
  try {
    const auto result = run_regime(cfg, regime);
    write_outputs(cfg, result);
    std::ifstream in(fs::path(cfg.output_dir) / "summary.txt");
    std::cout << in.rdbuf();
  } catch (const std::exception& e) {
    flag_partial(cfg.output_dir, e.what());
    throw;
  }
  return 0;
}

int gen_data(const ConfigFlags& flags) {
  const auto cfg = flags.resolve();
  if (!cfg.dataset.images_dir.empty()) throw ConfigError("gen-data writes synthetic data; drop --images/--masks");
  const auto& d = cfg.dataset;
  std::vector<int> counts = d.client_counts;
  int test = d.test_count;
  int classes = d.num_classes;
  if (counts.empty()) {
    const auto& p = dataset_preset(d.preset);
    counts = p.client_counts;
    test = p.test_count;
    if (classes == 0) classes = p.num_classes;
  }
  int total = test;
  for (int n : counts) total += n;
  SyntheticOptions opt;
  opt.num_classes = classes == 0 ? 5 : classes;
  const auto samples = generate_synthetic_dataset(total, d.image_size, cfg.seed, opt);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  for (const auto& s : samples) save_sample_png(out / "images" / (s.id + ".png"), out / "masks" / (s.id + ".png"), s);
  echo_config(cfg);
  std::cout << "wrote " << samples.size() << " image/mask pairs to " << out.string() << "\n";
  return 0;
}

std::string plan_str(const SplitPlan& p) {
  return "(fe_last=" + std::to_string(p.fe_last) + ", be_first=" + std::to_string(p.be_first) + ")";
}

int plan_split(const ConfigFlags& flags, std::optional<double> max_share, std::optional<std::int64_t> max_bytes) {
  const auto cfg = flags.resolve();
  const int classes = cfg.dataset.num_classes > 0 ? cfg.dataset.num_classes
                                                   : dataset_preset(cfg.dataset.preset).num_classes;
  const auto graph = build_model(cfg, classes);
  const auto size = cfg.dataset.image_size;
  std::cout << graph->describe(size, size) << "\n";
  SplitConstraints cons{max_share, max_bytes};
  const auto rec = recommend_split(*graph, cons, size, size);
  std::cout << "plan                          bytes/sample  client share  status\n";
  for (const auto& e : rec.evaluated) {
    std::cout << std::left << std::setw(30) << plan_str(e.plan) << std::right << std::setw(12)
              << e.criteria.comm_bytes_per_sample << std::setw(14) << std::fixed << std::setprecision(4)
              << e.criteria.client_mac_share << "  " << (e.failure ? *e.failure : "ok") << "\n";
  }
  if (!rec.feasible()) {
    std::cerr << rec.infeasibility_report();
    return 1;
  }
  const auto& c = rec.criteria;
  std::cout << "\nrecommended " << plan_str(*rec.plan) << "\n"
            << "  1 task layers     FE " << c.fe_stages << " stage(s), BE " << c.be_stages << " stage(s)\n"
            << "  2 communication   " << c.comm_bytes_per_sample << " B per sample per step\n"
            << "  3 closure         " << (c.dimension_closure ? "yes" : "no") << "\n"
            << "  4 privacy         " << (c.privacy_placement ? "yes" : "no") << "\n"
            << "  5 client share    " << c.client_mac_share << "\n";
  return 0;
}

int report(const std::vector<std::string>& runs, bool complexity, int image_size, const std::string& csv_out) {
  if (!runs.empty()) {
    std::vector<RunSummary> summaries;
    for (const auto& r : runs) {
      const fs::path p = r;
      if (fs::exists(p / "summary.json")) {
        summaries.push_back(read_summary(p));
        continue;
      }
      if (!fs::is_directory(p)) throw DataError("no run directory at '" + r + "'");
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.path().filename() == "summary.json") found.push_back(e.path().parent_path());
      std::sort(found.begin(), found.end());
      for (const auto& f : found) summaries.push_back(read_summary(f));
    }
    if (summaries.empty()) throw DataError("no summary.json found under the given paths");
    std::cout << results_table(summaries);
  }
  if (complexity) {
    std::vector<ComplexityRow> rows;
    for (const auto& name : network_names()) {
      NetworkConfig n;
      n.network = name;
      n.input_size = image_size;
      const auto g = build_network(n);
      rows.push_back({name, count_params(*g), count_macs(*g, {1, n.in_channels, image_size, image_size})});
    }
    rows = complexity_rows(rows);
    std::cout << export_table(rows);
    if (!csv_out.empty()) std::ofstream(csv_out) << export_csv(rows);
  }
  return 0;
}

int serve(const ConfigFlags& flags, int num_clients) {
  const auto cfg = flags.resolve();
  echo_config(cfg);
  try {
    const auto data = prepare_data(cfg);
    const auto model = build_model(cfg, data.num_classes);
    const auto plan = resolve_plan(cfg, *model);
    const int n = num_clients > 0 ? num_clients : static_cast<int>(data.clients.size());
    SplitFedServer server(*model, plan, cfg.training, n);
    TcpListener listener(parse_tcp_address(cfg.address));
    std::cout << "listening on port " << listener.port() << " for " << n << " client(s)" << std::endl;
    std::vector<std::unique_ptr<Connection>> conns;
    std::vector<std::thread> threads;
    std::exception_ptr error;
    std::mutex mu;
    for (int i = 0; i < n; ++i) {
      conns.push_back(listener.accept());
      threads.emplace_back([&, i] {
        try {
          server.serve(*conns[static_cast<std::size_t>(i)]);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          server.abort();
        }
      });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
    RegimeResult result{"splitfed", {server.finish(data.test)}, 0.0};
    result.test_iou = result.histories.front().test.average_iou;
    write_outputs(cfg, result);
    std::ifstream in(fs::path(cfg.output_dir) / "summary.txt");
    std::cout << in.rdbuf();
  } catch (const std::exception& e) {
    flag_partial(cfg.output_dir, e.what());
    throw;
  }
  return 0;
}

int client(const ConfigFlags& flags, int client_id) {
  const auto cfg = flags.resolve();
  const auto data = prepare_data(cfg);
  if (client_id < 0 || client_id >= static_cast<int>(data.clients.size()))
    throw ConfigError("--client-id must be in [0, " + std::to_string(data.clients.size()) + ")");
  const auto model = build_model(cfg, data.num_classes);
  const auto plan = resolve_plan(cfg, *model);
  auto conn = tcp_connect(parse_tcp_address(cfg.address), 30000);
  run_client(*conn, *model, plan, cfg.training, data.clients[static_cast<std::size_t>(client_id)]);
  std::cout << "client " << client_id << " finished\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split federated training of segmentation networks"};
  app.require_subcommand(1);

  ConfigFlags flags;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as PNG pairs");
  auto* central = app.add_subcommand("train-centralized", "Train one model on the pooled client data");
  auto* local = app.add_subcommand("train-local", "Train one model per client on its own shard");
  auto* split = app.add_subcommand("train-splitfed", "SplitFed training in one process");
  auto* plan = app.add_subcommand("plan-split", "Evaluate split plans and recommend one");
  auto* rep = app.add_subcommand("report", "Summarize runs and network complexity");
  auto* srv = app.add_subcommand("serve", "Server role over TCP");
  auto* cli = app.add_subcommand("client", "Client role over TCP");
  for (auto* sub : {gen, central, local, split, plan, srv, cli}) flags.attach(*sub);

  std::optional<double> max_share;
  std::optional<std::int64_t> max_bytes;
  plan->add_option("--max-client-share", max_share, "Upper bound on the client MAC share");
  plan->add_option("--max-cut-bytes", max_bytes, "Upper bound on wire bytes per sample per step");

  std::vector<std::string> runs;
  bool complexity = false;
  int complexity_size = 240;
  std::string csv_out;
  rep->add_option("--runs", runs, "Run directories (searched recursively)");
  rep->add_flag("--complexity", complexity, "Parameter and MAC table of the shipped networks");
  rep->add_option("--image-size", complexity_size, "Input size for MAC counts");
  rep->add_option("--csv", csv_out, "Also write the complexity table as CSV");

  int num_clients = 0;
  srv->add_option("--clients", num_clients, "Clients to wait for (default: all shards)");
  int client_id = 0;
  cli->add_option("--client-id", client_id)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return gen_data(flags);
    if (*central) return train(flags, "centralized");
    if (*local) return train(flags, "local");
    if (*split) return train(flags, "splitfed");
    if (*plan) return plan_split(flags, max_share, max_bytes);
    if (*rep) {
      if (runs.empty() && !complexity) throw ConfigError("report needs --runs and/or --complexity");
      return report(runs, complexity, complexity_size, csv_out);
    }
    if (*srv) return serve(flags, num_clients);
    if (*cli) return client(flags, client_id);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
