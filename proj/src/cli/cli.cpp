#include "beamllm/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "beamllm/backbone.hpp"
#include "beamllm/baselines.hpp"
#include "beamllm/error.hpp"
#include "beamllm/eval.hpp"
#include "beamllm/gradcheck.hpp"
#include "beamllm/json_fields.hpp"
#include "beamllm/random.hpp"
#include "beamllm/reprogram.hpp"

namespace beamllm {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path + ": " + e.what());
  }
}

/// <output>.manifest.json next to the main output; no timing fields so reruns
/// compare equal.
void write_manifest(const std::filesystem::path& output, const std::string& command, const nlohmann::json& config,
                    std::uint64_t seed, const std::vector<std::string>& outputs) {
  nlohmann::json m;
  m["command"] = command;
  m["config"] = config;
  m["config_hash"] = hex64(fnv1a64(config.dump()));
  m["seed"] = seed;
  m["outputs"] = outputs;
  m["versions"] = {{"beamllm", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  write_text(output.string() + ".manifest.json", m.dump(2) + "\n");
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Common& c) {
  const std::uint64_t env_seed = env_default_seed();
  RunConfig rc = c.config_path.empty() ? RunConfig{} : run_config_from_json(read_json_file(c.config_path), env_seed);
  if (c.config_path.empty()) rc.seed = env_seed;
  if (c.seed) rc.seed = *c.seed;
  rc.train.seed = rc.seed;
  return rc;
}

DatasetSplit load_split(const std::string& data, std::uint64_t seed, Mode mode) {
  const Horizon h = horizon_of(mode);
  return split_dataset(load_jsonl(data), seed, h.t_hist, h.t_pred);
}

// -- commands ----------------------------------------------------------------

int cmd_gen(const Common& c, const std::string& out_path, std::optional<int> passes, std::optional<double> noise,
            std::ostream& out) {
  RunConfig rc = resolve(c);
  if (passes) rc.scenario.n_passes = *passes;
  if (noise) rc.scenario.box_noise = *noise;
  rc.scenario.validate();
  const auto records = generate_scenario(rc.scenario, rc.seed);
  std::size_t frames = 0;
  for (const auto& r : records) frames += r.frames.size();
  write_text(out_path, format_jsonl(records));
  write_manifest(out_path, "gen", to_json(rc), rc.seed, {out_path});
  out << "wrote " << records.size() << " sequences, " << frames << " frames to " << out_path << "\n";
  return 0;
}

int cmd_train(const Common& c, std::optional<std::string> model, std::optional<std::string> mode, bool no_pap,
              std::optional<std::size_t> epochs, const std::string& data, const std::string& out_path,
              std::string history_path, bool quiet, std::ostream& out) {
  RunConfig rc = resolve(c);
  if (model) rc.model = *model;
  if (mode) rc.train.mode = parse_mode(*mode);
  if (no_pap) rc.train.pap = false;
  if (epochs) rc.train.epochs = *epochs;
  rc.train.validate();
  if (history_path.empty()) history_path = out_path + ".history.csv";

  const DatasetSplit split = load_split(data, rc.seed, rc.train.mode);
  auto predictor = make_predictor(rc.model, rc.train.mode, rc.seed, rc.train.pap);
  out << "train " << rc.model << " " << mode_name(rc.train.mode) << " pap=" << (rc.model != "beamllm" ? "n/a" : rc.train.pap ? "on" : "off")
      << " windows " << split.train.size() << "/" << split.val.size() << "/" << split.test.size() << "\n";
  const TrainResult result = train(*predictor, split, rc.train, [&](const EpochRecord& r) {
    if (quiet) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.4g train_loss %.4f val_loss %.4f train_top1 %.4f val_top1 %.4f\n",
                  r.epoch, r.lr, r.train_loss, r.val_loss, r.train_top1, r.val_top1);
    out << buf << std::flush;
  });
  std::filesystem::path op(out_path);
  if (op.has_parent_path()) std::filesystem::create_directories(op.parent_path());
  predictor->save(out_path);
  write_text(history_path, format_history_csv(result.history));
  write_manifest(out_path, "train", to_json(rc), rc.seed, {out_path, history_path});
  out << "best epoch " << result.best_epoch << " val_top1 " << result.best_val_top1 << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data, std::optional<std::string> mode,
             const std::string& out_path, std::ostream& out) {
  RunConfig rc = resolve(c);
  auto model = load_predictor(ckpt);
  const Mode m = mode ? parse_mode(*mode) : mode_of(*model);
  if (mode_of(*model) != m) {
    throw Error(ErrorKind::config, ckpt + " holds a " + mode_name(mode_of(*model)) + " model, not " + mode_name(m));
  }
  const DatasetSplit split = load_split(data, rc.seed, m);
  if (split.test.empty()) throw Error(ErrorKind::config, "the test split is empty");
  std::vector<TopKReport> reports{evaluate(*model, split.test, m),
                                  evaluate_majority(split.train, split.test, model->n_beams(), m)};
  write_text(out_path, format_metrics_csv(reports));
  nlohmann::json cfg = to_json(rc);
  cfg["checkpoint"] = model->describe();
  write_manifest(out_path, "eval", cfg, rc.seed, {out_path});
  char buf[200];
  std::snprintf(buf, sizeof buf, "%s %s n_test %zu top1 %.4f top3 %.4f (majority top1 %.4f)\n", reports[0].model.c_str(),
                reports[0].mode.c_str(), reports[0].n_test, reports[0].mean_for(1), reports[0].mean_for(3),
                reports[1].mean_for(1));
  out << buf;
  return 0;
}

int cmd_ablate(const Common& c, std::optional<std::string> mode, std::optional<std::size_t> epochs,
               const std::string& data, const std::string& out_dir, std::ostream& out) {
  RunConfig rc = resolve(c);
  if (mode) rc.train.mode = parse_mode(*mode);
  if (epochs) rc.train.epochs = *epochs;
  rc.train.validate();
  const Mode m = rc.train.mode;
  const DatasetSplit split = load_split(data, rc.seed, m);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);

  std::vector<TopKReport> reports;
  std::vector<std::unique_ptr<Predictor>> models;
  for (bool pap : {true, false}) {
    TrainConfig tc = rc.train;
    tc.pap = pap;
    auto p = make_predictor("beamllm", m, rc.seed, pap);
    train(*p, split, tc);
    p->save(dir / (pap ? "beamllm_pap_on.ckpt" : "beamllm_pap_off.ckpt"));
    reports.push_back(evaluate(*p, split.test, m));
    models.push_back(std::move(p));
  }

  // Same weights, prefix switched off: outputs must move if the prompt is live.
  auto& on = dynamic_cast<BeamLlmModel&>(*models[0]);
  Rng rng(derive_seed(rc.seed, 31));
  const Horizon h = horizon_of(m);
  bool live = false;
  for (int i = 0; i < 8; ++i) {
    Tensor x({4, h.t_hist});
    for (double& v : x.data()) v = rng.uniform();
    const Tensor with = on.predict(x).scores;
    on.set_pap(false);
    const Tensor without = on.predict(x).scores;
    on.set_pap(true);
    live = live || !(with == without);
  }

  std::string table = "K,step,pap_on,pap_off,gap\n";
  char buf[160];
  for (std::size_t ki = 0; ki < reports[0].ks.size(); ++ki) {
    const auto& a = reports[0].per_step[ki];
    const auto& b = reports[1].per_step[ki];
    for (std::size_t j = 0; j <= a.size(); ++j) {
      const bool mean_row = j == a.size();
      const double x = mean_row ? reports[0].mean(ki) : a[j];
      const double y = mean_row ? reports[1].mean(ki) : b[j];
      std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f\n", reports[0].ks[ki],
                    mean_row ? "mean" : std::to_string(j + 1).c_str(), x, y, x - y);
      table += buf;
    }
  }
  const auto gap_path = (dir / "ablation.csv").string();
  const auto metrics_path = (dir / "metrics.csv").string();
  write_text(gap_path, table);
  write_text(metrics_path, format_metrics_csv(reports));
  nlohmann::json cfg = to_json(rc);
  cfg["prefix_live"] = live;
  write_manifest(gap_path, "ablate", cfg, rc.seed, {gap_path, metrics_path});
  std::snprintf(buf, sizeof buf, "pap on top1 %.4f top3 %.4f | pap off top1 %.4f top3 %.4f | prefix live: %s\n",
                reports[0].mean_for(1), reports[0].mean_for(3), reports[1].mean_for(1), reports[1].mean_for(3),
                live ? "yes" : "no");
  out << buf;
  return 0;
}

int cmd_gradcheck(const Common& c, std::ostream& out) {
  const RunConfig rc = resolve(c);
  bool ok = true;
  for (const GradSuiteRow& row : gradient_suite(rc.seed)) {
    char buf[200];
    const bool pass = row.result.max_rel_error <= 1e-4;
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "%-14s params %6zu max_rel_err %.3e %s\n", row.name.c_str(), row.result.n_checked,
                  row.result.max_rel_error, pass ? "ok" : ("FAIL at " + row.result.worst).c_str());
    out << buf;
  }
  if (!ok) throw Error(ErrorKind::numeric, "gradient check above 1e-4");
  return 0;
}

int cmd_bench(const Common& c, std::optional<std::string> mode, std::size_t runs, const std::string& out_path,
              std::ostream& out) {
  RunConfig rc = resolve(c);
  const Mode m = mode ? parse_mode(*mode) : rc.train.mode;
  const Horizon h = horizon_of(m);
  Rng rng(derive_seed(rc.seed, 41));
  Tensor x({4, h.t_hist});
  for (double& v : x.data()) v = rng.uniform();
  std::vector<ComplexityRow> rows;
  for (const char* kind : {"beamllm", "rnn", "gru", "lstm"}) {
    auto p = make_predictor(kind, m, rc.seed, true);
    rows.push_back(complexity_report(*p, x, runs));
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-8s total %10zu trainable %8zu mean_inference %.3e s\n", kind,
                  rows.back().total_params, rows.back().trainable_params, rows.back().mean_inference_sec);
    out << buf;
  }
  write_text(out_path, format_complexity_csv(rows));
  nlohmann::json cfg = to_json(rc);
  cfg["runs"] = runs;
  write_manifest(out_path, "bench", cfg, rc.seed, {out_path});
  return 0;
}

}  // namespace

std::vector<GradSuiteRow> gradient_suite(std::uint64_t seed) {
  std::vector<GradSuiteRow> rows;
  Rng rng(derive_seed(seed, 51));
  auto windows = [&](std::size_t n, std::size_t t) {
    std::vector<Tensor> ws;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor w({4, t});
      for (double& v : w.data()) v = rng.uniform();
      ws.push_back(std::move(w));
    }
    return ws;
  };
  auto check = [&](Predictor& model, const std::vector<Tensor>& ws) {
    std::vector<const Tensor*> ptrs;
    for (const auto& w : ws) ptrs.push_back(&w);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < ws.size() * model.t_pred(); ++i) labels.push_back(rng.index(model.n_beams()));
    return check_parameter_gradients(model.trainable(), [&](Tape& tape) {
      return scale(cross_entropy(model.forward_batch(tape, ptrs), labels), 1.0 / static_cast<double>(ws.size()));
    });
  };
  for (bool pap : {true, false}) {
    BeamLlmConfig cfg;
    cfg.t_hist = 4;
    cfg.t_pred = 2;
    cfg.patch_len = 2;
    cfg.stride = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_prototypes = 8;
    cfg.n_beams = 4;
    cfg.fuse_hidden1 = 6;
    cfg.fuse_hidden2 = 5;
    cfg.backbone.vocab_size = 40;
    cfg.backbone.hidden = 16;
    cfg.backbone.n_layers = 2;
    cfg.backbone.n_heads = 2;
    cfg.backbone.max_seq = 128;
    cfg.pap = pap;
    cfg.seed = seed;
    BeamLlmModel model(cfg);
    rows.push_back({pap ? "beamllm+pap" : "beamllm", check(model, windows(3, 4))});
  }
  for (CellKind k : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    RecurrentConfig cfg;
    cfg.kind = k;
    cfg.t_hist = 3;
    cfg.t_pred = 2;
    cfg.hidden = 4;
    cfg.n_layers = 2;
    cfg.n_beams = 5;
    cfg.seed = seed;
    RecurrentModel model(cfg);
    rows.push_back({cell_name(k), check(model, windows(3, 3))});
  }
  return rows;
}

RunConfig run_config_from_json(const nlohmann::json& j, std::uint64_t default_seed) {
  RunConfig rc;
  rc.seed = default_seed;
  FieldReader r(j, "config");
  r.read("seed", rc.seed);
  r.read("model", rc.model);
  if (rc.model != "beamllm") parse_cell(rc.model);
  if (const auto* s = r.child("scenario")) rc.scenario = scenario_config_from_json(*s);
  if (const auto* t = r.child("train")) rc.train = train_config_from_json(*t);
  r.finish();
  rc.train.seed = rc.seed;
  return rc;
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json train = to_json(cfg.train);
  train.erase("seed");
  return {{"seed", cfg.seed}, {"model", cfg.model}, {"scenario", to_json(cfg.scenario)}, {"train", train}};
}

std::uint64_t env_default_seed() {
  const char* v = std::getenv("BEAMLLM_SEED");
  if (!v || !*v) return 0;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || *v == '-') throw Error(ErrorKind::config, std::string("BEAMLLM_SEED is not a seed: ") + v);
  return s;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision-aided mmWave beam prediction with a reprogrammed frozen transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Seed (default: config, then BEAMLLM_SEED, then 0)");
  };

  std::string out_path, data, ckpt, history;
  std::optional<int> passes;
  std::optional<double> noise;
  std::optional<std::string> model, mode;
  std::optional<std::size_t> epochs;
  bool no_pap = false, quiet = false;
  std::size_t runs = 1000;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scenario dataset (JSONL)");
  add_common(gen);
  gen->add_option("--out", out_path, "Output JSONL")->required();
  gen->add_option("--passes", passes, "Vehicle passes");
  gen->add_option("--noise", noise, "Bounding-box noise std");

  auto* tr = app.add_subcommand("train", "Train a model");
  add_common(tr);
  tr->add_option("--model", model, "beamllm|rnn|gru|lstm");
  tr->add_option("--mode", mode, "standard|fewshot");
  tr->add_flag("--no-pap", no_pap, "Disable the prompt prefix");
  tr->add_option("--epochs", epochs, "Epochs");
  tr->add_option("--data", data, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out_path, "Checkpoint path")->required();
  tr->add_option("--history", history, "History CSV (default <out>.history.csv)");
  tr->add_flag("--quiet", quiet, "No per-epoch lines");

  auto* ev = app.add_subcommand("eval", "Top-K evaluation on the test split");
  add_common(ev);
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  ev->add_option("--mode", mode, "standard|fewshot");
  ev->add_option("--out", out_path, "Metrics CSV")->required();

  auto* ab = app.add_subcommand("ablate", "Paired PaP on/off training and evaluation");
  add_common(ab);
  ab->add_option("--mode", mode, "standard|fewshot");
  ab->add_option("--epochs", epochs, "Epochs");
  ab->add_option("--data", data, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  ab->add_option("--out-dir", out_path, "Run directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(gc);

  auto* be = app.add_subcommand("bench", "Parameter counts and inference timing");
  add_common(be);
  be->add_option("--mode", mode, "standard|fewshot");
  be->add_option("--runs", runs, "Timed runs per model")->check(CLI::PositiveNumber);
  be->add_option("--out", out_path, "Complexity CSV")->required();

  std::vector<std::string> store = args;
  std::vector<char*> argv;
  for (auto& s : store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: usage: " << msg << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen(common, out_path, passes, noise, out);
    if (*tr) return cmd_train(common, model, mode, no_pap, epochs, data, out_path, history, quiet, out);
    if (*ev) return cmd_eval(common, ckpt, data, mode, out_path, out);
    if (*ab) return cmd_ablate(common, mode, epochs, data, out_path, out);
    if (*gc) return cmd_gradcheck(common, out);
    if (*be) return cmd_bench(common, mode, runs, out_path, out);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << to_string(e.kind()) << ": " << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: internal: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace beamllm
