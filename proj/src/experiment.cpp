#include "sfl/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "sfl/image_io.hpp"

namespace sfl {

using nlohmann::json;
using nlohmann::ordered_json;

int ExperimentConfig::effective_baseline_epochs() const {
  return baseline_epochs > 0 ? baseline_epochs : training.global_rounds * training.local_epochs;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return config_to_json(a) == config_to_json(b);
}

namespace {

std::string type_of(const json& j) { return j.type_name(); }

// Object view that records which keys were read and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object, got " + type_of(j));
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  void read(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer", *v);
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw ConfigError(path(key) + ": integer out of range");
      out = static_cast<int>(x);
    }
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
        fail(key, "a non-negative integer", *v);
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number", *v);
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "a boolean", *v);
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string", *v);
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<int>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of integers", *v);
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number_integer())
          throw ConfigError(path(key) + "[" + std::to_string(i) + "] must be an integer");
        out.push_back((*v)[i].get<int>());
      }
    }
  }
  void read(const std::string& key, std::array<float, 3>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array() || v->size() != 3) fail(key, "an array of 3 numbers", *v);
      for (std::size_t i = 0; i < 3; ++i) {
        if (!(*v)[i].is_number()) throw ConfigError(path(key) + "[" + std::to_string(i) + "] must be a number");
        out[i] = (*v)[i].get<float>();
      }
    }
  }

  // Present, non-null sub-object.
  std::optional<Section> section(const std::string& key) {
    const json* v = take(key);
    if (!v) return std::nullopt;
    return Section(*v, path(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + path(key) + "'");
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return nullptr;
    return &j_.at(key);
  }
  [[noreturn]] void fail(const std::string& key, const char* want, const json& got) const {
    throw ConfigError(path(key) + " must be " + want + ", got " + type_of(got));
  }
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + " " + what);
}

DType parse_dtype(const std::string& s, const std::string& key) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ConfigError(key + " must be \"f32\" or \"f64\", got \"" + s + "\"");
}

TransportKind parse_transport(const std::string& s) {
  if (s == "inproc") return TransportKind::inproc;
  if (s == "tcp") return TransportKind::tcp;
  throw ConfigError("transport must be \"inproc\" or \"tcp\", got \"" + s + "\"");
}

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  Section root(doc, "");
  if (!root.has("network")) throw ConfigError("missing required key 'network'");
  root.read("network", c.network.network);
  const auto& names = network_names();
  if (std::find(names.begin(), names.end(), c.network.network) == names.end())
    throw ConfigError("network: unknown network '" + c.network.network + "'");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  std::string transport = "inproc";
  root.read("transport", transport);
  c.transport = parse_transport(transport);
  root.read("address", c.address);
  root.read("save_masks", c.save_masks);
  require(c.save_masks >= 0, "save_masks", "must be >= 0");
  root.read("baseline_epochs", c.baseline_epochs);
  require(c.baseline_epochs >= 0, "baseline_epochs", "must be >= 0");

  if (auto s = root.section("split")) {
    SplitPlan p;
    require(s->has("fe_last") && s->has("be_first"), "split", "needs both fe_last and be_first");
    s->read("fe_last", p.fe_last);
    s->read("be_first", p.be_first);
    s->finish();
    c.split = p;
  }

  if (auto s = root.section("model")) {
    auto& n = c.network;
    s->read("in_channels", n.in_channels);
    s->read("base_width", n.base_width);
    s->read("depth", n.depth);
    std::string dtype = "f32";
    s->read("dtype", dtype);
    n.dtype = parse_dtype(dtype, s->path("dtype"));
    require(n.in_channels >= 1, s->path("in_channels"), "must be >= 1");
    require(n.base_width >= 1, s->path("base_width"), "must be >= 1");
    require(n.depth >= 1 && n.depth <= 6, s->path("depth"), "must be in [1, 6]");
    if (auto cg = s->section("cgnet")) {
      cg->read("stem_width", n.cg_stem_width);
      cg->read("stage1_width", n.cg_stage1_width);
      cg->read("stage2_width", n.cg_stage2_width);
      cg->read("stage1_blocks", n.cg_stage1_blocks);
      cg->read("stage2_blocks", n.cg_stage2_blocks);
      cg->read("stage1_dilation", n.cg_stage1_dilation);
      cg->read("stage2_dilation", n.cg_stage2_dilation);
      cg->read("reduction", n.cg_reduction);
      cg->read("global_context", n.cg_global_context);
      cg->finish();
    }
    s->finish();
  }

  if (auto s = root.section("dataset")) {
    auto& d = c.dataset;
    s->read("preset", d.preset);
    s->read("client_counts", d.client_counts);
    s->read("test_count", d.test_count);
    s->read("num_classes", d.num_classes);
    s->read("images_dir", d.images_dir);
    s->read("masks_dir", d.masks_dir);
    s->read("image_size", d.image_size);
    require(d.image_size >= 16, s->path("image_size"), "must be >= 16");
    require(d.test_count >= 0, s->path("test_count"), "must be >= 0");
    require(d.num_classes >= 0, s->path("num_classes"), "must be >= 0");
    for (int n : d.client_counts) require(n >= 1, s->path("client_counts"), "entries must be >= 1");
    require(d.images_dir.empty() == d.masks_dir.empty(), s->path("images_dir"),
            "and masks_dir must be given together");
    s->finish();
  }
  if (!c.dataset.preset.empty() || c.dataset.client_counts.empty()) {
    try {
      dataset_preset(c.dataset.preset);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("dataset.preset: ") + e.what());
    }
  }

  if (auto s = root.section("training")) {
    auto& t = c.training;
    s->read("global_rounds", t.global_rounds);
    s->read("local_epochs", t.local_epochs);
    s->read("batch_size", t.batch_size);
    s->read("lr", t.lr);
    s->read("aggregate_server", t.aggregate_server);
    s->read("augment", t.augment);
    require(t.global_rounds >= 1 && t.global_rounds <= 65535, s->path("global_rounds"), "must be in [1, 65535]");
    require(t.local_epochs >= 1, s->path("local_epochs"), "must be >= 1");
    require(t.batch_size >= 1, s->path("batch_size"), "must be >= 1");
    require(t.lr > 0.0, s->path("lr"), "must be > 0");
    s->finish();
  }

  if (auto s = root.section("augment")) {
    auto& a = c.training.augment_config;
    s->read("hflip_prob", a.hflip_prob);
    s->read("vflip_prob", a.vflip_prob);
    s->read("rot90", a.rot90);
    s->read("max_rotation_deg", a.max_rotation_deg);
    s->read("rgb_shift", a.rgb_shift);
    s->read("brightness", a.brightness);
    s->read("contrast", a.contrast);
    s->read("normalize", a.normalize);
    s->read("mean", a.mean);
    s->read("std", a.std);
    require(a.hflip_prob >= 0.0 && a.hflip_prob <= 1.0, s->path("hflip_prob"), "must be in [0, 1]");
    require(a.vflip_prob >= 0.0 && a.vflip_prob <= 1.0, s->path("vflip_prob"), "must be in [0, 1]");
    require(a.max_rotation_deg >= 0.0 && a.max_rotation_deg <= 15.0, s->path("max_rotation_deg"),
            "must be in [0, 15]");
    require(a.rgb_shift >= 0.0 && a.brightness >= 0.0 && a.contrast >= 0.0, s->path("rgb_shift"),
            "and the photometric bounds must be >= 0");
    for (float v : a.std) require(v > 0.0f, s->path("std"), "entries must be > 0");
    s->finish();
  }
  root.finish();
  c.network.seed = c.seed;
  c.training.seed = c.seed;
  c.network.input_size = c.dataset.image_size;
  return c;
}

ordered_json config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["network"] = c.network.network;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["transport"] = c.transport == TransportKind::tcp ? "tcp" : "inproc";
  j["address"] = c.address;
  j["save_masks"] = c.save_masks;
  j["baseline_epochs"] = c.baseline_epochs;
  if (c.split)
    j["split"] = {{"fe_last", c.split->fe_last}, {"be_first", c.split->be_first}};
  else
    j["split"] = nullptr;
  const auto& n = c.network;
  ordered_json cg;
  cg["stem_width"] = n.cg_stem_width;
  cg["stage1_width"] = n.cg_stage1_width;
  cg["stage2_width"] = n.cg_stage2_width;
  cg["stage1_blocks"] = n.cg_stage1_blocks;
  cg["stage2_blocks"] = n.cg_stage2_blocks;
  cg["stage1_dilation"] = n.cg_stage1_dilation;
  cg["stage2_dilation"] = n.cg_stage2_dilation;
  cg["reduction"] = n.cg_reduction;
  cg["global_context"] = n.cg_global_context;
  j["model"] = {{"in_channels", n.in_channels}, {"base_width", n.base_width}, {"depth", n.depth},
                {"dtype", n.dtype == DType::f64 ? "f64" : "f32"}, {"cgnet", cg}};
  const auto& d = c.dataset;
  ordered_json ds;
  ds["preset"] = d.preset;
  ds["client_counts"] = d.client_counts;
  ds["test_count"] = d.test_count;
  ds["num_classes"] = d.num_classes;
  ds["images_dir"] = d.images_dir;
  ds["masks_dir"] = d.masks_dir;
  ds["image_size"] = d.image_size;
  j["dataset"] = ds;
  const auto& t = c.training;
  ordered_json tr;
  tr["global_rounds"] = t.global_rounds;
  tr["local_epochs"] = t.local_epochs;
  tr["batch_size"] = t.batch_size;
  tr["lr"] = t.lr;
  tr["aggregate_server"] = t.aggregate_server;
  tr["augment"] = t.augment;
  j["training"] = tr;
  const auto& a = t.augment_config;
  ordered_json au;
  au["hflip_prob"] = a.hflip_prob;
  au["vflip_prob"] = a.vflip_prob;
  au["rot90"] = a.rot90;
  au["max_rotation_deg"] = a.max_rotation_deg;
  au["rgb_shift"] = a.rgb_shift;
  au["brightness"] = a.brightness;
  au["contrast"] = a.contrast;
  au["normalize"] = a.normalize;
  au["mean"] = a.mean;
  au["std"] = a.std;
  j["augment"] = au;
  return j;
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
}

std::vector<std::string> experiment_preset_names() {
  return {"synthetic-4client", "blastocyst-4client", "ham10k-10client", "kvasir-4client"};
}

json experiment_preset(const std::string& name) {
  if (name == "synthetic-4client")
    return json::parse(R"({
      "network": "unet",
      "model": {"base_width": 8, "depth": 4},
      "dataset": {"preset": "synthetic-4client", "image_size": 64},
      "training": {"global_rounds": 5, "local_epochs": 4, "batch_size": 8, "lr": 0.001}
    })");
  if (name == "blastocyst-4client")
    return json::parse(R"({
      "network": "unet",
      "model": {"base_width": 32, "depth": 4},
      "dataset": {"preset": "blastocyst-4client", "image_size": 240},
      "training": {"global_rounds": 10, "local_epochs": 12, "batch_size": 4, "lr": 0.001}
    })");
  if (name == "ham10k-10client" || name == "kvasir-4client")
    return json::parse(R"({
      "network": "unet",
      "model": {"base_width": 32, "depth": 4},
      "dataset": {"preset": ")" + name + R"(", "image_size": 240},
      "training": {"global_rounds": 10, "local_epochs": 12, "batch_size": 4, "lr": 0.001}
    })");
  throw ConfigError("unknown preset '" + name + "'");
}

json merge_documents(const std::vector<json>& docs) {
  json out = json::object();
  for (const auto& d : docs) {
    if (!d.is_object()) throw ConfigError("config documents must be JSON objects");
    out.merge_patch(d);
  }
  return out;
}

ExperimentData prepare_data(const ExperimentConfig& cfg) {
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
  if (classes == 0) {
    if (d.preset.empty()) throw ConfigError("dataset.num_classes is required without a preset");
    classes = dataset_preset(d.preset).num_classes;
  }
  std::int64_t total = test;
  for (int n : counts) total += n;

  std::vector<Sample> samples;
  if (!d.images_dir.empty()) {
    samples = load_image_mask_dir(d.images_dir, d.masks_dir, classes, d.image_size);
  } else {
    if (classes != 5)
      throw ConfigError("dataset '" + d.preset + "' has " + std::to_string(classes) +
                        " classes; synthetic data has 5, set dataset.images_dir and masks_dir");
    SyntheticOptions opt;
    opt.num_classes = classes;
    samples = generate_synthetic_dataset(static_cast<int>(total), d.image_size, cfg.seed, opt);
  }
  auto parts = partition_dataset(samples, {counts, test, cfg.seed});
  ExperimentData out;
  out.num_classes = classes;
  out.test = std::move(parts.test);
  for (std::size_t i = 0; i < parts.clients.size(); ++i) {
    auto tv = train_val_split(parts.clients[i], name_seed(cfg.seed, "client" + std::to_string(i)));
    out.clients.push_back({static_cast<int>(i), std::move(tv.train), std::move(tv.val)});
  }
  return out;
}

std::unique_ptr<ModelGraph> build_model(const ExperimentConfig& cfg, int num_classes) {
  NetworkConfig n = cfg.network;
  n.num_classes = num_classes;
  n.seed = cfg.seed;
  n.input_size = cfg.dataset.image_size;
  return build_network(n);
}

SplitPlan resolve_plan(const ExperimentConfig& cfg, const ModelGraph& graph) {
  const SplitPlan plan = cfg.split.value_or(graph.default_plan());
  validate_plan(graph, plan);
  return plan;
}

RegimeResult run_regime(const ExperimentConfig& cfg, const std::string& regime) {
  const auto data = prepare_data(cfg);
  const auto model = build_model(cfg, data.num_classes);
  RegimeResult r;
  r.regime = regime;
  if (regime == "centralized") {
    r.histories.push_back(run_centralized(*model, cfg.training, data.clients, data.test,
                                          cfg.effective_baseline_epochs()));
    r.test_iou = r.histories.front().test.average_iou;
  } else if (regime == "local") {
    r.histories = run_local_baselines(*model, cfg.training, data.clients, data.test, cfg.effective_baseline_epochs());
    r.test_iou = mean_test_iou(r.histories);
  } else if (regime == "splitfed") {
    const auto plan = resolve_plan(cfg, *model);
    const auto host = parse_tcp_address(cfg.address).host;
    r.histories.push_back(run_splitfed(*model, plan, cfg.training, data.clients, data.test, cfg.transport, host));
    r.test_iou = r.histories.front().test.average_iou;
  } else {
    throw ConfigError("unknown regime '" + regime + "'");
  }
  return r;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Image8 to_image8(const Sample& s) {
  Image8 im;
  im.width = s.width;
  im.height = s.height;
  im.channels = 3;
  im.pixels.resize(static_cast<std::size_t>(s.width) * s.height * 3);
  const std::size_t plane = static_cast<std::size_t>(s.width) * s.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = s.image[(s.channels == 3 ? static_cast<std::size_t>(c) : 0) * plane + i];
      im.pixels[i * 3 + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    }
  return im;
}

}  // namespace

void write_outputs(const ExperimentConfig& cfg, const RegimeResult& result) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  std::string metrics;
  for (const auto& h : result.histories) metrics += h.to_jsonl();
  write_text(dir / "metrics.jsonl", metrics);

  ordered_json summary;
  summary["network"] = cfg.network.network;
  summary["regime"] = result.regime;
  summary["seed"] = cfg.seed;
  summary["test_iou"] = result.test_iou;
  std::int64_t up = 0, down = 0;
  ordered_json runs = ordered_json::array();
  std::string csv = "scope,test_iou,test_loss\n";
  std::ostringstream txt;
  txt << "network  " << cfg.network.network << "\nregime   " << result.regime << "\nseed     " << cfg.seed
      << "\ntest IoU " << fixed(result.test_iou) << "\n";
  for (const auto& h : result.histories) {
    const int client = h.records.empty() ? -1 : h.records.front().client;
    const std::string scope = result.regime == "local" ? "client" + std::to_string(client) : result.regime;
    ordered_json run;
    run["scope"] = scope;
    run["test_iou"] = h.test.average_iou;
    run["test_loss"] = h.test_loss;
    run["per_class_iou"] = h.test.per_class_iou;
    runs.push_back(run);
    up += h.total_bytes_up();
    down += h.total_bytes_down();
    csv += scope + "," + fixed(h.test.average_iou, 17) + "," + fixed(h.test_loss, 17) + "\n";
    txt << "  " << std::left << std::setw(12) << scope << " IoU " << fixed(h.test.average_iou) << "  loss "
        << fixed(h.test_loss) << "\n";
  }
  summary["runs"] = runs;
  summary["bytes_up"] = up;
  summary["bytes_down"] = down;
  if (result.regime == "splitfed") txt << "traffic  up " << up << " B, down " << down << " B\n";
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_text(dir / "summary.csv", csv);
  write_text(dir / "summary.txt", txt.str());

  if (cfg.save_masks > 0) {
    const auto data = prepare_data(cfg);
    const fs::path masks = dir / "masks";
    fs::create_directories(masks);
    for (const auto& h : result.histories) {
      const int client = h.records.empty() ? -1 : h.records.front().client;
      const std::string prefix = result.regime == "local" ? "client" + std::to_string(client) + "_" : "";
      const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg.save_masks), data.test.size());
      for (std::size_t k = 0; k < n; ++k) {
        const auto& s = data.test[k];
        const std::size_t plane = static_cast<std::size_t>(s.width) * s.height;
        if (h.test_predictions.size() < (k + 1) * plane) break;
        const std::span<const ClassId> pred(h.test_predictions.data() + k * plane, plane);
        const std::string stem = prefix + s.id;
        if (prefix.empty() || client == 0) write_png(masks / (s.id + "_image.png"), to_image8(s));
        if (prefix.empty() || client == 0) write_png(masks / (s.id + "_gt.png"), colorize_mask(s.mask, s.width, s.height));
        write_png(masks / (stem + "_pred.png"), colorize_mask(pred, s.width, s.height));
      }
    }
  }
}

void flag_partial(const std::filesystem::path& dir, const std::string& error) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream out(dir / "FAILED");
  out << error << "\n";
}

RunSummary read_summary(const std::filesystem::path& run_dir) {
  const auto j = load_json_file(run_dir / "summary.json");
  RunSummary s;
  try {
    s.network = j.at("network").get<std::string>();
    s.regime = j.at("regime").get<std::string>();
    s.test_iou = j.at("test_iou").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError("malformed summary in '" + run_dir.string() + "': " + e.what());
  }
  return s;
}

std::string results_table(const std::vector<RunSummary>& runs) {
  // Mean over seeds per (network, regime).
  std::map<std::string, std::map<std::string, std::pair<double, int>>> cells;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    if (!cells.count(r.network)) order.push_back(r.network);
    auto& c = cells[r.network][r.regime];
    c.first += r.test_iou;
    c.second += 1;
  }
  std::ostringstream os;
  os << std::left << std::setw(16) << "network" << std::right << std::setw(10) << "C" << std::setw(10) << "L"
     << std::setw(10) << "S" << "\n";
  for (const auto& net : order) {
    os << std::left << std::setw(16) << net << std::right;
    for (const char* regime : {"centralized", "local", "splitfed"}) {
      auto it = cells[net].find(regime);
      if (it == cells[net].end())
        os << std::setw(10) << "-";
      else
        os << std::setw(10) << fixed(it->second.first / it->second.second, 4);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace sfl
