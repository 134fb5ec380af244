#include "commands.hpp"

#include "intrack/analysis.hpp"
#include "intrack/binary_io.hpp"
#include "intrack/checkpoint.hpp"
#include "intrack/circuit.hpp"
#include "intrack/gradcheck.hpp"
#include "intrack/pathgen.hpp"
#include "intrack/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>

namespace intrack::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
}

template <typename T>
void override(json& j, const char* key, const std::optional<T>& value) {
  if (value) j[key] = *value;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

// ---- generate ----

struct GenerateOptions {
  std::string config, out;
  std::optional<int> size, frames, distractors, marker_half_width;
  std::optional<float> max_step, max_turn, dot_radius, min_separation, positive_fraction;
  std::optional<std::uint64_t> seed, count;
  unsigned threads = 0;
};

int run_generate(const GenerateOptions& o) {
  json j = json::parse(gen_config_json(GenConfig{}));
  j["count"] = 1000;
  j.update(load_config(o.config));
  override(j, "image_size", o.size);
  override(j, "num_frames", o.frames);
  override(j, "num_distractors", o.distractors);
  override(j, "marker_half_width", o.marker_half_width);
  override(j, "max_step", o.max_step);
  override(j, "max_turn", o.max_turn);
  override(j, "dot_radius", o.dot_radius);
  override(j, "min_marker_separation", o.min_separation);
  override(j, "positive_fraction", o.positive_fraction);
  override(j, "master_seed", o.seed);
  override(j, "count", o.count);
  const GenConfig cfg = gen_config_from_json(j.dump());
  const auto count = j["count"].get<std::uint64_t>();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  const fs::path out = prepare_out(o.out);
  json resolved = json::parse(gen_config_json(cfg));
  resolved["count"] = count;
  write_text(out / "config.json", resolved.dump(2));

  const auto t0 = Clock::now();
  const DatasetManifest m = build_dataset(cfg, count, out.string(), o.threads);
  std::uint64_t positives = 0, crossings = 0;
  for (const auto& r : m.records) {
    positives += r.label;
    crossings += r.crossing_count;
  }
  const json summary{{"command", "generate"},
                     {"count", count},
                     {"positives", positives},
                     {"negatives", count - positives},
                     {"mean_crossings", count ? static_cast<double>(crossings) / static_cast<double>(count) : 0.0},
                     {"dataset_fnv1a", fnv1a_hex(read_file(dataset_path(out.string())))},
                     {"wall_time_s", seconds_since(t0)}};
  write_text(out / "summary.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- train / sweep ----

struct TrainOptions {
  std::string config, out;
  std::optional<std::string> train, val, model, variant;
  std::vector<std::string> tests;
  std::optional<double> lr, clip_norm;
  std::vector<double> lrs;
  std::optional<int> batch_size, patience, max_epochs, repeats, channels;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

TrainConfig resolve_train_config(const TrainOptions& o, bool single_lr) {
  json j = json::parse(TrainConfig{}.to_json());
  j.update(load_config(o.config));
  override(j, "train", o.train);
  override(j, "val", o.val);
  if (!o.tests.empty()) j["test"] = o.tests;
  override(j, "batch_size", o.batch_size);
  override(j, "patience", o.patience);
  override(j, "max_epochs", o.max_epochs);
  override(j, "repeats", o.repeats);
  override(j, "clip_norm", o.clip_norm);
  override(j, "seed", o.seed);
  if (!o.lrs.empty()) j["learning_rates"] = o.lrs;
  if (o.lr) j["learning_rates"] = std::vector<double>{*o.lr};
  if (single_lr && j["learning_rates"].size() > 1) j["learning_rates"] = json::array({j["learning_rates"][0]});
  override(j["architecture"], "channels", o.channels);
  if (o.model) {
    if (*o.model != "int" && *o.model != "convgru") throw UsageError("--model must be 'int' or 'convgru'");
    j["architecture"]["model"] = *o.model;
  }
  try {
    if (o.variant) j["architecture"]["variant"] = json::parse(VariantSpec::parse(*o.variant).to_json());
    TrainConfig c = TrainConfig::from_json(j.dump());
    c.validate();
    if (c.train_path.empty() || c.val_path.empty()) throw UsageError("--train and --val (or config keys) are required");
    return c;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json test_summary(const Model<float>& model, const std::vector<std::string>& paths, int batch_size,
                  const fs::path& out) {
  json tests = json::array();
  for (const auto& path : paths) {
    const Dataset data = Dataset::load(path);
    const EvalReport r = evaluate(model, data, batch_size);
    std::size_t hits = 0;
    for (bool c : r.correct) hits += c;
    const std::string csv = decisions_csv(make_decision_records(r.decisions, r.labels));
    const std::string name = fs::path(path).filename().string().empty() ? fs::path(path).parent_path().filename().string()
                                                                         : fs::path(path).filename().string();
    write_text(out / ("decisions_" + name + ".csv"), csv);
    tests.push_back({{"dataset", path},
                     {"trials", r.decisions.size()},
                     {"correct", hits},
                     {"accuracy", r.accuracy},
                     {"binomial_p", binomial_upper_tail(hits, r.decisions.size())},
                     {"loss", r.loss}});
  }
  return tests;
}

int run_sweep(const TrainOptions& o, bool single_lr) {
  const TrainConfig cfg = resolve_train_config(o, single_lr);
  const fs::path out = prepare_out(o.out);
  write_text(out / "config.json", cfg.to_json());
  const auto t0 = Clock::now();
  const Dataset train_data = Dataset::load(cfg.train_path);
  const Dataset val_data = Dataset::load(cfg.val_path);

  TrainHooks hooks;
  if (!o.quiet) {
    hooks.on_epoch = [](int epoch, const std::vector<LogRow>& rows) {
      std::cerr << "epoch " << epoch;
      for (const auto& r : rows) std::cerr << " " << r.split << "_" << r.metric << "=" << r.value;
      std::cerr << std::endl;
    };
  }
  const SweepResult result = sweep(cfg, train_data, val_data, out.string(), hooks);
  const TrainResult& best = result.runs[result.best];
  const json best_meta{{"learning_rate", best.learning_rate}, {"repeat", best.repeat},
                       {"best_epoch", best.best_epoch},       {"val_accuracy", best.best_val_accuracy}};
  save_checkpoint((out / "best.intw").string(), to_checkpoint(best.best, best_meta.dump()));
  if (single_lr) write_text(out / "log.csv", log_csv(best.log));

  json runs = json::array();
  for (const auto& r : result.runs)
    runs.push_back({{"run", run_name(r.learning_rate, r.repeat, cfg.repeats)},
                    {"learning_rate", r.learning_rate},
                    {"repeat", r.repeat},
                    {"best_epoch", r.best_epoch},
                    {"epochs_run", r.epochs_run},
                    {"val_accuracy", r.best_val_accuracy},
                    {"diverged", r.diverged},
                    {"message", r.message}});
  json summary{{"command", single_lr ? "train" : "sweep"},
               {"architecture", json::parse(cfg.architecture.to_json())},
               {"parameters", best.best.parameter_count()},
               {"runs", runs},
               {"best", best_meta},
               {"tests", test_summary(best.best, cfg.test_paths, cfg.batch_size, out)},
               {"wall_time_s", seconds_since(t0)}};
  write_text(out / "summary.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- eval ----

struct EvalOptions {
  std::string config, out, checkpoint;
  std::vector<std::string> data;
  std::optional<std::string> model, variant;
  std::optional<int> channels, batch_size;
};

int run_eval(const EvalOptions& o) {
  json j{{"checkpoint", ""}, {"data", json::array()}, {"batch_size", 32}};
  j.update(load_config(o.config));
  if (!o.checkpoint.empty()) j["checkpoint"] = o.checkpoint;
  if (!o.data.empty()) j["data"] = o.data;
  override(j, "batch_size", o.batch_size);
  override(j, "model", o.model);
  override(j, "variant", o.variant);
  override(j, "channels", o.channels);
  if (j["checkpoint"].get<std::string>().empty()) throw UsageError("--checkpoint is required");
  if (j["data"].empty()) throw UsageError("--data is required");
  const int batch_size = j["batch_size"].get<int>();
  if (batch_size < 1) throw UsageError("--batch-size must be >= 1");

  const fs::path out = prepare_out(o.out);
  write_text(out / "config.json", j.dump(2));
  const Checkpoint ckpt = load_checkpoint(j["checkpoint"].get<std::string>());
  const Architecture stored = checkpoint_architecture(ckpt);
  if (j.contains("model") || j.contains("variant") || j.contains("channels")) {
    Architecture expected = stored;
    if (j.contains("model")) {
      const auto m = j["model"].get<std::string>();
      if (m != "int" && m != "convgru") throw UsageError("--model must be 'int' or 'convgru'");
      expected.kind = m == "int" ? ModelKind::kInT : ModelKind::kConvGru;
    }
    if (j.contains("variant")) {
      try {
        expected.variant = VariantSpec::parse(j["variant"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
    if (j.contains("channels")) expected.channels = j["channels"].get<int>();
    if (!(expected == stored))
      throw std::runtime_error("architecture mismatch\n  requested:  " + expected.describe() + " " + expected.to_json() +
                               "\n  checkpoint: " + stored.describe() + " " + stored.to_json());
  }
  const auto t0 = Clock::now();
  const Model<float> model = model_from_checkpoint(ckpt);
  const json summary{{"command", "eval"},
                     {"architecture", json::parse(stored.to_json())},
                     {"tests", test_summary(model, j["data"].get<std::vector<std::string>>(), batch_size, out)},
                     {"wall_time_s", seconds_since(t0)}};
  write_text(out / "summary.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- gradcheck ----

struct GradcheckOptions {
  std::string out;
  GradCheckOptions check;
};

int run_gradcheck(const GradcheckOptions& o) {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck_suite(o.check);
  bool ok = true;
  json checks = json::array();
  for (const auto& r : results) {
    ok &= r.passed;
    std::printf("%-36s %s  max_rel_err=%.3e  probes=%d\n", r.name.c_str(), r.passed ? "pass" : "FAIL",
                r.max_relative_error, r.probes);
    checks.push_back({{"name", r.name}, {"passed", r.passed}, {"max_relative_error", r.max_relative_error}, {"probes", r.probes}});
  }
  if (!o.out.empty()) {
    const fs::path out = prepare_out(o.out);
    write_text(out / "config.json", json{{"epsilon", o.check.epsilon},
                                         {"tolerance", o.check.tolerance},
                                         {"probes", o.check.probes},
                                         {"seed", o.check.seed}}
                                        .dump(2));
    write_text(out / "summary.json",
               json{{"command", "gradcheck"}, {"passed", ok}, {"checks", checks}, {"wall_time_s", seconds_since(t0)}}.dump(2));
  }
  std::printf("%s\n", ok ? "all gradient checks passed" : "gradient check FAILED");
  return ok ? 0 : 2;
}

}  // namespace

void register_visualize_and_stats(CLI::App& app, Registry& registry);

void register_commands(CLI::App& app, Registry& registry) {
  {
    auto o = std::make_shared<GenerateOptions>();
    auto* sub = app.add_subcommand("generate", "Synthesize a PathTracker dataset");
    sub->add_option("--config", o->config, "JSON config file");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--size", o->size, "Canvas side in pixels");
    sub->add_option("--frames", o->frames, "Frames per video");
    sub->add_option("--distractors", o->distractors, "Distractor dots");
    sub->add_option("--count", o->count, "Number of samples");
    sub->add_option("--seed", o->seed, "Master seed");
    sub->add_option("--max-step", o->max_step, "Maximum displacement per frame (px)");
    sub->add_option("--max-turn", o->max_turn, "Maximum heading change per frame (degrees)");
    sub->add_option("--dot-radius", o->dot_radius, "Dot radius (px)");
    sub->add_option("--marker-half-width", o->marker_half_width, "Marker half width (px)");
    sub->add_option("--min-separation", o->min_separation, "Minimum start-goal distance (px)");
    sub->add_option("--positive-fraction", o->positive_fraction, "Fraction of positive samples");
    sub->add_option("--threads", o->threads, "Worker threads (0: INTRACK_THREADS or hardware)");
    registry.add(sub, [o] { return run_generate(*o); });
  }
  for (const bool single : {true, false}) {
    auto o = std::make_shared<TrainOptions>();
    auto* sub = app.add_subcommand(single ? "train" : "sweep",
                                   single ? "Train one model at one learning rate" : "Train across learning rates and keep the best");
    sub->add_option("--config", o->config, "JSON config file");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--train", o->train, "Training dataset directory");
    sub->add_option("--val", o->val, "Validation dataset directory");
    sub->add_option("--test", o->tests, "Test dataset directories");
    if (single) sub->add_option("--lr", o->lr, "Learning rate");
    else sub->add_option("--lrs", o->lrs, "Learning rates");
    sub->add_option("--batch-size", o->batch_size, "Mini-batch size");
    sub->add_option("--patience", o->patience, "Epochs without improvement before stopping");
    sub->add_option("--max-epochs", o->max_epochs, "Epoch limit");
    sub->add_option("--repeats", o->repeats, "Restarts per learning rate");
    sub->add_option("--clip-norm", o->clip_norm, "Global gradient-norm limit");
    sub->add_option("--model", o->model, "int or convgru");
    sub->add_option("--channels", o->channels, "Hidden channels");
    sub->add_option("--variant", o->variant, "Variant label, e.g. complete, no_attention, tanh, lesion:gamma,beta");
    sub->add_option("--seed", o->seed, "Seed for initialization and data order");
    sub->add_flag("--quiet", o->quiet, "No per-epoch progress");
    registry.add(sub, [o, single] { return run_sweep(*o, single); });
  }
  {
    auto o = std::make_shared<EvalOptions>();
    auto* sub = app.add_subcommand("eval", "Evaluate a checkpoint on datasets");
    sub->add_option("--config", o->config, "JSON config file");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--checkpoint", o->checkpoint, "Checkpoint file");
    sub->add_option("--data", o->data, "Dataset directories");
    sub->add_option("--batch-size", o->batch_size, "Evaluation batch size");
    sub->add_option("--model", o->model, "Expected model kind");
    sub->add_option("--variant", o->variant, "Expected variant label");
    sub->add_option("--channels", o->channels, "Expected hidden channels");
    registry.add(sub, [o] { return run_eval(*o); });
  }
  {
    auto o = std::make_shared<GradcheckOptions>();
    auto* sub = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    sub->add_option("--out", o->out, "Output directory for config and summary");
    sub->add_option("--epsilon", o->check.epsilon, "Central-difference step");
    sub->add_option("--tolerance", o->check.tolerance, "Relative error tolerance");
    sub->add_option("--probes", o->check.probes, "Probed coordinates per input");
    sub->add_option("--seed", o->check.seed, "Probe seed");
    registry.add(sub, [o] { return run_gradcheck(*o); });
  }
  register_visualize_and_stats(app, registry);
}

namespace {

// ---- visualize ----

struct VisualizeOptions {
  std::string config, out, checkpoint, data;
  std::optional<std::string> name;
  std::vector<std::size_t> trials;
  std::optional<std::size_t> count;
  std::optional<double> k;
  std::optional<int> scale, batch_size;
};

int run_visualize(const VisualizeOptions& o) {
  json j{{"checkpoint", ""}, {"data", ""}, {"trials", json::array()}, {"count", 4}, {"k", 1.0}, {"scale", 8}, {"batch_size", 32}};
  j.update(load_config(o.config));
  if (!o.checkpoint.empty()) j["checkpoint"] = o.checkpoint;
  if (!o.data.empty()) j["data"] = o.data;
  if (!o.trials.empty()) j["trials"] = o.trials;
  override(j, "count", o.count);
  override(j, "k", o.k);
  override(j, "scale", o.scale);
  override(j, "batch_size", o.batch_size);
  override(j, "name", o.name);
  const auto data_path = j["data"].get<std::string>();
  if (data_path.empty()) throw UsageError("--data is required");
  if (j["scale"].get<int>() < 1) throw UsageError("--scale must be >= 1");
  if (j["batch_size"].get<int>() < 1) throw UsageError("--batch-size must be >= 1");

  const fs::path out = prepare_out(o.out);
  const Dataset data = Dataset::load(data_path);
  std::vector<std::size_t> trials = j["trials"].get<std::vector<std::size_t>>();
  if (trials.empty())
    for (std::size_t i = 0; i < std::min<std::size_t>(data.size(), j["count"].get<std::size_t>()); ++i) trials.push_back(i);
  for (std::size_t t : trials)
    if (t >= data.size()) throw UsageError("trial " + std::to_string(t) + " is outside the dataset (" + std::to_string(data.size()) + " samples)");
  j["trials"] = trials;
  if (!j.contains("name")) {
    const fs::path p(data_path);
    j["name"] = (p.filename().empty() ? p.parent_path() : p).filename().string();
  }
  write_text(out / "config.json", j.dump(2));

  const auto t0 = Clock::now();
  std::string variant = "video";
  std::vector<std::vector<AttentionMask>> masks(trials.size());
  const auto ckpt_path = j["checkpoint"].get<std::string>();
  if (!ckpt_path.empty()) {
    const Model<float> model = model_from_checkpoint(load_checkpoint(ckpt_path));
    if (model.arch.kind != ModelKind::kInT) throw UsageError("visualize needs an InT checkpoint (Conv-GRU has no attention units)");
    variant = model.arch.variant.name();
    masks = attention_masks(model, data, trials, j["k"].get<double>(), j["batch_size"].get<int>());
  }
  std::string safe_variant = variant;
  for (char& c : safe_variant)
    if (c == ':' || c == ',' || c == '+') c = '-';

  json files = json::array();
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const VideoSample sample = data.sample(trials[i]);
    const std::string stem = j["name"].get<std::string>() + "_" + std::to_string(trials[i]) + "_" + safe_variant;
    const AnimationFiles f = export_animation(sample.frames, masks[i], out.string(), stem, j["scale"].get<int>());
    json mask_pixels = json::array();
    for (const auto& m : masks[i]) mask_pixels.push_back(m.count());
    files.push_back({{"trial", trials[i]}, {"label", sample.label}, {"animation", f.animation},
                     {"stills", f.stills.size()}, {"mask_pixels", mask_pixels}});
  }
  const json summary{{"command", "visualize"}, {"variant", variant}, {"files", files}, {"wall_time_s", seconds_since(t0)}};
  write_text(out / "summary.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---- stats ----

struct StatsOptions {
  std::string config, out;
  std::vector<int> frames, distractors;
  std::vector<std::string> data, decisions;
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> seed;
};

int run_stats(const StatsOptions& o) {
  json j{{"frames", {16, 32, 64}}, {"distractors", {1, 14, 25}}, {"count", 1000}, {"seed", 0},
         {"data", json::array()}, {"decisions", json::array()}};
  j.update(load_config(o.config));
  if (!o.frames.empty()) j["frames"] = o.frames;
  if (!o.distractors.empty()) j["distractors"] = o.distractors;
  if (!o.data.empty()) j["data"] = o.data;
  if (!o.decisions.empty()) j["decisions"] = o.decisions;
  override(j, "count", o.count);
  override(j, "seed", o.seed);
  if (j["decisions"].size() == 1) throw UsageError("--decisions needs at least two files to compare");

  const fs::path out = prepare_out(o.out);
  write_text(out / "config.json", j.dump(2));
  const auto t0 = Clock::now();
  json summary{{"command", "stats"}};

  // Crossing statistics from datasets when given, otherwise Monte-Carlo over the grid.
  std::vector<CrossingCell> cells;
  if (!j["data"].empty()) {
    for (const auto& path : j["data"]) cells.push_back(crossing_cell(Dataset::load(path.get<std::string>())));
  } else if (j["decisions"].empty() || o.frames.size() + o.distractors.size() > 0) {
    for (int d : j["distractors"].get<std::vector<int>>())
      for (int t : j["frames"].get<std::vector<int>>()) {
        GenConfig cfg;
        cfg.num_frames = t;
        cfg.num_distractors = d;
        cfg.master_seed = mix_seed(j["seed"].get<std::uint64_t>(), static_cast<std::uint64_t>(d) * 100003ULL + static_cast<std::uint64_t>(t));
        try {
          cfg.validate();
        } catch (const ConfigError& e) {
          throw UsageError(e.what());
        }
        cells.push_back(measure_crossings(cfg, j["count"].get<std::size_t>()));
      }
  }
  if (!cells.empty()) {
    const CrossingReport report = crossing_report(cells);
    write_text(out / "crossings.csv", crossings_csv(report));
    json rows = json::array();
    for (const auto& c : report.cells)
      rows.push_back({{"distractors", c.distractors}, {"frames", c.frames}, {"mean", c.mean}, {"samples", c.samples}});
    json fits = json::object();
    for (const auto& [d, f] : report.fits)
      fits[std::to_string(d)] = f.fitted ? json{{"a", f.a}, {"b", f.b}} : json{{"skipped", f.reason}};
    summary["crossings"] = rows;
    summary["fits"] = fits;
  }

  if (!j["decisions"].empty()) {
    const auto paths = j["decisions"].get<std::vector<std::string>>();
    std::vector<std::vector<DecisionRecord>> sets;
    for (const auto& p : paths) sets.push_back(parse_decisions_csv(read_text(p)));
    std::vector<ConsistencyRow> rows;
    json pairs = json::array();
    for (std::size_t a = 0; a < sets.size(); ++a)
      for (std::size_t b = a + 1; b < sets.size(); ++b) {
        if (sets[a].size() != sets[b].size())
          throw std::runtime_error("decision files " + paths[a] + " and " + paths[b] + " differ in length");
        std::vector<bool> da, db, ca, cb;
        for (std::size_t i = 0; i < sets[a].size(); ++i) {
          da.push_back(sets[a][i].decision);
          db.push_back(sets[b][i].decision);
          ca.push_back(sets[a][i].correct);
          cb.push_back(sets[b][i].correct);
        }
        ConsistencyRow row{fs::path(paths[a]).stem().string() + "~" + fs::path(paths[b]).stem().string(),
                           pearson_decisions(da, db), error_consistency(ca, cb), da.size()};
        pairs.push_back({{"pair_id", row.pair_id},
                         {"rho", row.rho ? json(*row.rho) : json("undefined")},
                         {"kappa", row.kappa ? json(*row.kappa) : json("undefined")},
                         {"n", row.n}});
        rows.push_back(std::move(row));
      }
    write_text(out / "consistency.csv", consistency_csv(rows));
    summary["consistency"] = pairs;
  }
  summary["wall_time_s"] = seconds_since(t0);
  write_text(out / "summary.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

void register_visualize_and_stats(CLI::App& app, Registry& registry) {
  {
    auto o = std::make_shared<VisualizeOptions>();
    auto* sub = app.add_subcommand("visualize", "Export videos with binarized attention overlays");
    sub->add_option("--config", o->config, "JSON config file");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--checkpoint", o->checkpoint, "InT checkpoint (omit for plain videos)");
    sub->add_option("--data", o->data, "Dataset directory");
    sub->add_option("--name", o->name, "Dataset name used in file names");
    sub->add_option("--trials", o->trials, "Trial indices");
    sub->add_option("--count", o->count, "Number of leading trials when --trials is absent");
    sub->add_option("--k", o->k, "Threshold in standard deviations above the mean");
    sub->add_option("--scale", o->scale, "Nearest-neighbour upsampling factor");
    sub->add_option("--batch-size", o->batch_size, "Batch size for the forward pass");
    registry.add(sub, [o] { return run_visualize(*o); });
  }
  {
    auto o = std::make_shared<StatsOptions>();
    auto* sub = app.add_subcommand("stats", "Crossing statistics and decision consistency");
    sub->add_option("--config", o->config, "JSON config file");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--frames", o->frames, "Video lengths for Monte-Carlo crossing counts");
    sub->add_option("--distractors", o->distractors, "Distractor counts for Monte-Carlo crossing counts");
    sub->add_option("--count", o->count, "Samples per (distractors, frames) cell");
    sub->add_option("--seed", o->seed, "Monte-Carlo seed");
    sub->add_option("--data", o->data, "Dataset directories to summarize instead of sampling");
    sub->add_option("--decisions", o->decisions, "Decision CSV files to compare pairwise");
    registry.add(sub, [o] { return run_stats(*o); });
  }
}

}  // namespace intrack::cli
