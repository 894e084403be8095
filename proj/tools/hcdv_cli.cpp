// hcdv: command-line runner for embedding, tree building, valuation,
// streaming replay, property checks and baselines.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hcdv/all.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  std::string subcommand;
  std::string out = "hcdv_out";
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  std::string data;
  std::string format;
  double val_fraction = 0.2;
  std::size_t synthetic_n = 3000;
  double synthetic_overlap = 0.5;
  double noise_rate = 0.0;
  std::string noise_model = "uniform";

  std::string embedding_source = "identity";
  std::string embeddings_path;
  hcdv::EncoderConfig encoder;

  std::vector<std::size_t> branching{16, 16};
  std::size_t M = 12;
  double gamma = 0.25;

  std::size_t T = 256;
  double lambda = 0.1;
  std::string leaf_mode = "exact_if_small";
  std::string metric = "accuracy";
  std::string learner = "nearest_centroid";
  bool global_games = false;

  std::string method = "hcdv";

  std::string stream_file;
  std::size_t batch = 150;
  std::size_t steps = 10;
  double assign_threshold = 0.35;
  std::size_t rebalance_period = 3;

  hcdv::CheckSettings check;
};

std::string git_revision() {
  std::string rev;
  if (FILE* p = popen("git rev-parse HEAD 2>/dev/null", "r")) {
    char buf[128];
    while (fgets(buf, sizeof buf, p)) rev += buf;
    pclose(p);
  }
  while (!rev.empty() && (rev.back() == '\n' || rev.back() == '\r')) rev.pop_back();
  return rev.empty() ? "unknown" : rev;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw hcdv::Error("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string format_value(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_values_csv(const fs::path& path, const hcdv::ValueVector& v) {
  std::ostringstream os;
  os << "index,value,method,seed\n";
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << i << ',' << format_value(v.values[i]) << ',' << v.method_tag << ',' << v.seed << '\n';
  }
  write_text(path, os.str());
}

void write_manifest(const RunConfig& rc, const std::string& config_text) {
  json m;
  m["subcommand"] = rc.subcommand;
  m["seed"] = rc.seed;
  m["workers"] = rc.workers;
  // The output directory does not change results, so it stays out of the hash.
  std::istringstream lines(config_text);
  std::string hashed;
  for (std::string line; std::getline(lines, line);) {
    if (!line.starts_with("out=")) hashed += line + '\n';
  }
  m["config_hash"] = hex64(fnv1a(hashed));
  m["git_revision"] = git_revision();
  m["config"] = config_text;
  write_json(fs::path(rc.out) / "manifest.json", m);
}

hcdv::LabeledDataset load_data(const RunConfig& rc) {
  hcdv::LabeledDataset data;
  if (!rc.data.empty()) {
    if (!fs::exists(rc.data)) throw hcdv::Error("dataset not found: " + rc.data);
    const auto format = rc.format.empty() ? hcdv::guess_table_format(rc.data) : hcdv::parse_table_format(rc.format);
    data = hcdv::load_dataset(rc.data, format, rc.val_fraction, rc.seed);
  } else {
    hcdv::SyntheticSpec spec;
    spec.n = rc.synthetic_n;
    spec.overlap = rc.synthetic_overlap;
    spec.seed = rc.seed;
    data = hcdv::make_synthetic(spec, rc.val_fraction);
  }
  if (rc.noise_rate > 0.0) {
    hcdv::plant_label_noise(data, rc.noise_rate, rc.seed, hcdv::parse_noise_model(rc.noise_model));
  }
  data.validate();
  return data;
}

struct Embedded {
  hcdv::EmbeddingMatrix matrix;
  hcdv::Embedder embed;
  json info;
};

Embedded make_embedding(const RunConfig& rc, const hcdv::LabeledDataset& data) {
  Embedded e;
  if (rc.embedding_source == "identity") {
    e.matrix = hcdv::identity_embedding(data.features);
    e.embed = hcdv::identity_embedder();
  } else if (rc.embedding_source == "load") {
    if (rc.embeddings_path.empty() || !fs::exists(rc.embeddings_path)) {
      throw hcdv::Error("embedding file not found: " + rc.embeddings_path);
    }
    e.matrix = hcdv::load_embeddings(rc.embeddings_path, data.n());
  } else if (rc.embedding_source == "train") {
    auto cfg = rc.encoder;
    cfg.seed = rc.seed;
    const auto trained = hcdv::train_linear_encoder(data, cfg);
    e.matrix = trained.embeddings;
    e.embed = [enc = trained.encoder](std::span<const double> x) {
      std::vector<double> z(enc.d);
      enc.apply(x, z);
      return std::vector<float>(z.begin(), z.end());
    };
    e.info = {{"initial_objective", trained.initial_objective},
              {"final_objective", trained.final_objective},
              {"epoch_objectives", trained.epoch_objectives}};
  } else {
    throw hcdv::Error("unknown embedding source: " + rc.embedding_source);
  }
  e.info["source"] = hcdv::to_string(e.matrix.source);
  e.info["d"] = e.matrix.d();
  return e;
}

hcdv::TreeConfig tree_config(const RunConfig& rc) {
  hcdv::TreeConfig tc;
  tc.branching = rc.branching;
  tc.leaf_cap = rc.M;
  tc.gamma = rc.gamma;
  tc.seed = rc.seed;
  return tc;
}

hcdv::UtilityConfig utility_config(const RunConfig& rc) {
  hcdv::UtilityConfig uc;
  uc.lambda = rc.lambda;
  uc.metric = hcdv::parse_metric(rc.metric);
  uc.learner = hcdv::parse_learner(rc.learner);
  return uc;
}

hcdv::HcdvConfig hcdv_config(const RunConfig& rc) {
  hcdv::HcdvConfig hc;
  hc.T = rc.T;
  hc.lambda = rc.lambda;
  hc.M = rc.M;
  hc.leaf_mode = hcdv::parse_leaf_mode(rc.leaf_mode);
  hc.seed = rc.seed;
  hc.global_games = rc.global_games;
  hc.workers = rc.workers;
  hc.validate();
  return hc;
}

int cmd_embed(const RunConfig& rc) {
  const auto data = load_data(rc);
  const auto e = make_embedding(rc, data);
  hcdv::save_embeddings(fs::path(rc.out) / "embeddings.bin", e.matrix);
  write_json(fs::path(rc.out) / "metrics.json", e.info);
  return 0;
}

int cmd_tree(const RunConfig& rc) {
  const auto data = load_data(rc);
  const auto e = make_embedding(rc, data);
  const auto tree = hcdv::build_tree(e.matrix, tree_config(rc));
  tree.check_partition(data.n());
  write_json(fs::path(rc.out) / "tree.json", hcdv::to_json(tree));
  json m;
  m["depth"] = tree.depth();
  m["nodes"] = tree.nodes.size();
  m["leaves"] = tree.leaves().size();
  m["capacity_violations"] = tree.capacity_violations().size();
  m["oversized_leaves"] = tree.oversized_leaves().size();
  write_json(fs::path(rc.out) / "metrics.json", m);
  return 0;
}

int cmd_value(const RunConfig& rc) {
  const auto start = std::chrono::steady_clock::now();
  auto data = std::make_shared<const hcdv::LabeledDataset>(load_data(rc));
  json metrics;
  metrics["method"] = rc.method;
  metrics["n"] = data->n();
  hcdv::ValueVector values;

  if (rc.method == "random") {
    hcdv::RngStream rng(rc.seed, {hcdv::Purpose::random_values, 0, 0});
    values = hcdv::random_values(data->n(), rng);
    metrics["evaluation_count"] = 0;
  } else {
    auto e = make_embedding(rc, *data);
    auto emb = std::make_shared<const hcdv::EmbeddingMatrix>(std::move(e.matrix));
    const hcdv::CharacteristicFn cf(data, emb, utility_config(rc));
    metrics["embedding"] = e.info;
    if (rc.method == "hcdv") {
      const auto hc = hcdv_config(rc);
      const auto tree = hcdv::build_tree(*emb, tree_config(rc));
      const auto result = hcdv::run_hcdv(cf, tree, hc);
      values = result.values;
      metrics["evaluation_count"] = cf.evaluation_count();
      metrics["expected_evaluation_count"] = hcdv::expected_evaluation_count(tree, hc);
      metrics["evaluation_bound"] = hcdv::evaluation_bound(tree, hc);
      metrics["v_full"] = result.v_full;
      metrics["v_empty"] = result.v_empty;
      metrics["root_surplus"] = result.root_surplus;
      metrics["efficiency_deviation"] = std::abs(values.sum() - result.root_surplus);
      metrics["warnings"] = result.warnings;
      metrics["tree_depth"] = tree.depth();
      write_json(fs::path(rc.out) / "budget.json", hcdv::budget_report(result, tree));
    } else if (rc.method == "flat" || rc.method == "group") {
      hcdv::RngStream rng(rc.seed, {hcdv::Purpose::baseline, 1, 0});
      if (rc.method == "flat") {
        values = hcdv::flat_mcds(cf, rc.T, rng, rc.workers);
      } else {
        const auto tree = hcdv::build_tree(*emb, tree_config(rc));
        std::vector<hcdv::PointSet> groups;
        for (std::size_t id : tree.levels[1]) groups.push_back(tree.nodes[id].members);
        values = hcdv::group_shapley(cf, groups, rc.T, rng, rc.workers);
      }
      metrics["evaluation_count"] = cf.evaluation_count();
    } else if (rc.method == "loo") {
      values = hcdv::leave_one_out(cf);
      metrics["evaluation_count"] = cf.evaluation_count();
    } else {
      throw hcdv::Error("unknown method: " + rc.method);
    }
  }
  values.seed = rc.seed;
  values.validate(data->n());
  metrics["sum"] = values.sum();
  metrics["wallclock_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - start).count();
  write_values_csv(fs::path(rc.out) / "values.csv", values);
  write_json(fs::path(rc.out) / "metrics.json", metrics);
  return 0;
}

int cmd_stream(const RunConfig& rc) {
  hcdv::RawTable initial;
  std::vector<hcdv::RawTable> batches;
  if (rc.stream_file.empty()) {
    hcdv::ClickStreamSpec spec;
    spec.batch = rc.batch;
    spec.steps = rc.steps;
    spec.seed = rc.seed;
    auto cs = hcdv::make_click_stream(spec);
    initial = std::move(cs.initial);
    batches = std::move(cs.batches);
  } else {
    if (rc.data.empty()) throw hcdv::Error("stream replay needs --data for the initial corpus");
    if (!fs::exists(rc.stream_file)) throw hcdv::Error("stream file not found: " + rc.stream_file);
    const auto format = rc.format.empty() ? hcdv::guess_table_format(rc.data) : hcdv::parse_table_format(rc.format);
    initial = hcdv::read_table(rc.data, format);
    const auto rows = hcdv::read_table(rc.stream_file, hcdv::guess_table_format(rc.stream_file));
    for (std::size_t start = 0; start < rows.rows() && batches.size() < rc.steps; start += rc.batch) {
      hcdv::RawTable b;
      b.features = hcdv::Matrix(0, rows.features.cols());
      for (std::size_t r = start; r < std::min(rows.rows(), start + rc.batch); ++r) {
        b.features.append_row(rows.features.row(r));
        b.labels.push_back(rows.labels[r]);
      }
      batches.push_back(std::move(b));
    }
  }
  auto data = std::make_shared<const hcdv::LabeledDataset>(hcdv::split_dataset(initial, rc.val_fraction, rc.seed));
  auto e = make_embedding(rc, *data);
  if (!e.embed) throw hcdv::Error("streaming needs an identity or trained embedding");
  auto emb = std::make_shared<const hcdv::EmbeddingMatrix>(std::move(e.matrix));
  hcdv::StreamConfig sc;
  sc.assign_threshold = rc.assign_threshold;
  sc.rebalance_period = rc.rebalance_period;
  auto state = hcdv::init_stream(data, emb, e.embed, utility_config(rc), tree_config(rc), hcdv_config(rc), sc);

  std::ostringstream steps;
  steps << "epoch,batch_size,new_leaves,affected_leaves,dirty_nodes,total_nodes,evaluations,evaluation_bound,"
           "latency_ms,rebalanced\n";
  std::uint64_t total = 0;
  for (const auto& b : batches) {
    const auto m = hcdv::ingest_batch(state, b);
    total += m.evaluations;
    steps << m.epoch << ',' << m.batch_size << ',' << m.new_leaves << ',' << m.affected_leaves << ','
          << m.dirty_nodes << ',' << m.total_nodes << ',' << m.evaluations << ',' << m.evaluation_bound << ','
          << m.latency_ms << ',' << (m.rebalanced ? 1 : 0) << '\n';
  }
  write_text(fs::path(rc.out) / "steps.csv", steps.str());
  write_values_csv(fs::path(rc.out) / "values.csv", state.value_vector());
  write_json(fs::path(rc.out) / "metrics.json",
             {{"steps", batches.size()}, {"evaluation_count", total}, {"final_n", state.data->n()}});
  return 0;
}

int cmd_check(const RunConfig& rc) {
  auto cs = rc.check;
  cs.seed = rc.seed;
  cs.workers = rc.workers;
  const auto outcome = hcdv::run_check_suite(cs);
  write_json(fs::path(rc.out) / "report.json", outcome.report);
  std::cout << (outcome.pass ? "all properties hold" : "property check FAILED") << '\n';
  return outcome.pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig rc;
  CLI::App app{"Hierarchical contrastive data valuation"};
  app.set_config("--config", "", "INI file with option values; flags override it");
  app.require_subcommand(1);
  app.add_option("--out", rc.out, "Output directory")->capture_default_str();
  app.add_option("--seed", rc.seed, "Root seed")->required();
  app.add_option("--workers", rc.workers, "Worker threads for every parallel stage")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--data", rc.data, "Training table (csv or binary); omit for the synthetic generator");
  app.add_option("--format", rc.format, "Table format: csv or binary");
  app.add_option("--val-fraction", rc.val_fraction, "Held-out validation fraction")->capture_default_str();
  app.add_option("--synthetic-n", rc.synthetic_n, "Synthetic corpus size")->capture_default_str();
  app.add_option("--synthetic-overlap", rc.synthetic_overlap, "Synthetic class overlap")->capture_default_str();
  app.add_option("--noise-rate", rc.noise_rate, "Fraction of labels to flip")->capture_default_str();
  app.add_option("--noise-model", rc.noise_model, "uniform or localised")->capture_default_str();
  app.add_option("--embedding", rc.embedding_source, "identity, train or load")->capture_default_str();
  app.add_option("--embeddings", rc.embeddings_path, "Embedding file for --embedding load");
  app.add_option("--enc-d", rc.encoder.d, "Encoder output dimension")->capture_default_str();
  app.add_option("--enc-lambda", rc.encoder.lambda, "Encoder dispersion weight")->capture_default_str();
  app.add_option("--enc-alpha", rc.encoder.alpha, "Encoder smoothness weight")->capture_default_str();
  app.add_option("--enc-epochs", rc.encoder.epochs, "Encoder epochs")->capture_default_str();
  app.add_option("--enc-batch", rc.encoder.batch_size, "Encoder batch size")->capture_default_str();
  app.add_option("--enc-lr", rc.encoder.lr, "Encoder learning rate")->capture_default_str();
  app.add_option("--branching", rc.branching, "Children per node at each level")
      ->delimiter(',')
      ->capture_default_str();
  app.add_option("--leaf-cap", rc.M, "Leaf capacity M")->capture_default_str();
  app.add_option("--gamma", rc.gamma, "Capacity tolerance")->capture_default_str();
  app.add_option("--T", rc.T, "Permutations per game")->capture_default_str();
  app.add_option("--lambda", rc.lambda, "Dispersion weight in the payoff")->capture_default_str();
  app.add_option("--leaf-mode", rc.leaf_mode, "exact_if_small or always_uniform")->capture_default_str();
  app.add_option("--metric", rc.metric, "accuracy, balanced_accuracy or auc")->capture_default_str();
  app.add_option("--learner", rc.learner, "nearest_centroid or ridge_logistic")->capture_default_str();
  app.add_flag("--global-games", rc.global_games, "One game per level instead of one per parent");

  app.add_subcommand("embed", "Train, load or pass through embeddings");
  app.add_subcommand("tree", "Build the balanced hierarchy");
  auto* value = app.add_subcommand("value", "Value every training point");
  value->add_option("--method", rc.method, "hcdv, flat, group, loo or random")->capture_default_str();
  auto* baseline = app.add_subcommand("baseline", "Run a baseline valuation");
  baseline->add_option("--method", rc.method, "flat, group, loo or random")
      ->check(CLI::IsMember({"flat", "group", "loo", "random"}))
      ->required();
  auto* stream = app.add_subcommand("stream", "Replay a stream and update valuations incrementally");
  stream->add_option("--stream-file", rc.stream_file, "Rows to replay; omit for the synthetic click stream");
  stream->add_option("--batch", rc.batch, "Rows per step")->capture_default_str();
  stream->add_option("--steps", rc.steps, "Maximum steps")->capture_default_str();
  stream->add_option("--assign-threshold", rc.assign_threshold, "Cosine distance that spawns a new leaf")
      ->capture_default_str();
  stream->add_option("--rebalance-period", rc.rebalance_period, "Steps between rebalancing passes")
      ->capture_default_str();
  auto* check = app.add_subcommand("check", "Run the property suites");
  check->add_option("--check-n", rc.check.n, "Corpus size for the efficiency suite")->capture_default_str();
  check->add_option("--check-T", rc.check.T, "Permutations for the efficiency suite")->capture_default_str();
  check->add_option("--trials", rc.check.concentration_trials, "Concentration trials per T")->capture_default_str();
  check->add_option("--regret-triples", rc.check.regret_triples, "Random regret cases")->capture_default_str();
  check->add_option("--stability-runs", rc.check.stability_runs, "Seeds for the stability metric")
      ->capture_default_str();
  check->add_option("--weight-fault", rc.check.weight_fault, "Multiply propagation weights (fault injection)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  rc.check.branching = {6};
  rc.check.M = rc.M;
  rc.check.lambda = rc.lambda;

  for (auto* sub : app.get_subcommands()) rc.subcommand = sub->get_name();
  try {
    fs::create_directories(rc.out);
    write_manifest(rc, app.config_to_str(true, false));
    int code = 0;
    if (rc.subcommand == "embed") code = cmd_embed(rc);
    else if (rc.subcommand == "tree") code = cmd_tree(rc);
    else if (rc.subcommand == "value" || rc.subcommand == "baseline") code = cmd_value(rc);
    else if (rc.subcommand == "stream") code = cmd_stream(rc);
    else if (rc.subcommand == "check") code = cmd_check(rc);
    return code;
  } catch (const std::exception& e) {
    const json err = {{"error", e.what()}, {"subcommand", rc.subcommand}};
    std::cerr << err.dump() << '\n';
    try {
      fs::create_directories(rc.out);
      write_json(fs::path(rc.out) / "error.json", err);
    } catch (...) {
    }
    return 2;
  }
}
