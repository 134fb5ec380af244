#include "intrack/trainer.hpp"

#include "intrack/binary_io.hpp"
#include "intrack/checkpoint.hpp"
#include "intrack/ops.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

namespace intrack {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (learning_rates.empty()) throw ConfigError("learning_rates must list at least one rate");
  for (double lr : learning_rates)
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rates must be positive, got " + std::to_string(lr));
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch statistics");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (architecture.channels < 1) throw ConfigError("channels must be >= 1");
}

std::string TrainConfig::to_json() const {
  return json{{"learning_rates", learning_rates},
              {"repeats", repeats},
              {"batch_size", batch_size},
              {"patience", patience},
              {"max_epochs", max_epochs},
              {"clip_norm", clip_norm},
              {"train", train_path},
              {"val", val_path},
              {"test", test_paths},
              {"architecture", json::parse(architecture.to_json())},
              {"seed", seed}}
      .dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig c;
  if (j.contains("learning_rates")) c.learning_rates = j["learning_rates"].get<std::vector<double>>();
  if (j.contains("repeats")) c.repeats = j["repeats"].get<int>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("patience")) c.patience = j["patience"].get<int>();
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
  if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
  if (j.contains("train")) c.train_path = j["train"].get<std::string>();
  if (j.contains("val")) c.val_path = j["val"].get<std::string>();
  if (j.contains("test")) c.test_paths = j["test"].get<std::vector<std::string>>();
  if (j.contains("architecture")) c.architecture = Architecture::from_json(j["architecture"].dump());
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

Batch assemble_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const GenConfig& cfg = data.config();
  const Index batch = static_cast<Index>(indices.size());
  const Index size = cfg.image_size;
  const Index frame = 3 * size * size;
  std::vector<Tensor<float>> frames;
  for (int t = 0; t < cfg.num_frames; ++t) frames.push_back(Tensor<float>::uninitialized({batch, 3, size, size}));
  std::vector<float> buffer(static_cast<std::size_t>(cfg.num_frames * frame));
  Batch out;
  for (Index b = 0; b < batch; ++b) {
    const std::size_t i = indices[static_cast<std::size_t>(b)];
    data.frames_into(i, buffer.data());
    for (int t = 0; t < cfg.num_frames; ++t)
      std::copy_n(buffer.data() + t * frame, frame, frames[static_cast<std::size_t>(t)].data() + b * frame);
    out.labels.push_back(data.label(i) ? 1.0f : 0.0f);
  }
  for (auto& f : frames) out.frames.emplace_back(std::move(f));
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)))]);
  return order;
}

EvalReport score_decisions(std::vector<bool> decisions, std::vector<bool> labels) {
  if (decisions.size() != labels.size())
    throw std::invalid_argument("score_decisions: " + std::to_string(decisions.size()) + " decisions for " +
                                std::to_string(labels.size()) + " labels");
  EvalReport r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    r.correct.push_back(decisions[i] == labels[i]);
    hits += r.correct.back();
  }
  r.accuracy = decisions.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(decisions.size());
  r.decisions = std::move(decisions);
  r.labels = std::move(labels);
  return r;
}

namespace {

double logit_loss(float z, bool y) {
  const double x = z;
  return std::max(x, 0.0) - x * (y ? 1.0 : 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

EvalReport evaluate(const Model<float>& model, const Dataset& data, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<bool> decisions, labels;
  std::vector<float> logits;
  double loss = 0;
  const Bound<float> params = bind(model, static_cast<Tape<float>*>(nullptr));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    const Batch batch = assemble_batch(data, idx);
    const Forward<float> out = forward(model, params, std::span<const Var<float>>(batch.frames));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const float z = out.logits.value()[static_cast<Index>(k)];
      logits.push_back(z);
      decisions.push_back(z > 0.0f);
      labels.push_back(data.label(idx[k]));
      loss += logit_loss(z, labels.back());
    }
  }
  EvalReport r = score_decisions(std::move(decisions), std::move(labels));
  r.logits = std::move(logits);
  r.loss = data.size() ? loss / static_cast<double>(data.size()) : 0.0;
  return r;
}

namespace {

struct RunState {
  Model<float> model;
  Model<float> best;
  AdamState<float> adam;
  int next_epoch = 1;
  double best_val = -1;
  int best_epoch = 0;
  int since_best = 0;
  double wall_time = 0;
  std::vector<LogRow> log;
};

json log_json(const std::vector<LogRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({r.epoch, r.split, r.metric, r.value});
  return out;
}

std::vector<LogRow> log_from_json(const json& j) {
  std::vector<LogRow> rows;
  for (const auto& r : j) rows.push_back({r[0].get<int>(), r[1].get<std::string>(), r[2].get<std::string>(), r[3].get<double>()});
  return rows;
}

void save_state(const std::string& path, const RunState& s) {
  json meta{{"next_epoch", s.next_epoch}, {"best_val", s.best_val},   {"best_epoch", s.best_epoch},
            {"since_best", s.since_best}, {"step", s.adam.step},      {"wall_time", s.wall_time},
            {"log", log_json(s.log)}};
  Checkpoint ckpt = to_checkpoint(s.model, meta.dump());
  const auto names = parameter_names(s.model.arch.kind);
  for (std::size_t i = 0; i < names.size(); ++i) ckpt.tensors.push_back({"best." + names[i], s.best.params[i]});
  if (!s.adam.first.empty()) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      ckpt.tensors.push_back({"adam_m." + names[i], s.adam.first[i]});
      ckpt.tensors.push_back({"adam_v." + names[i], s.adam.second[i]});
    }
  }
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, ckpt);
  fs::rename(tmp, path);
}

RunState load_state(const std::string& path, const Architecture& arch) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(checkpoint_architecture(ckpt) == arch))
    throw FormatError("resume state in " + path + " is for " + checkpoint_architecture(ckpt).describe() +
                      ", expected " + arch.describe());
  const std::size_t n = parameter_names(arch.kind).size();
  RunState s;
  Checkpoint model_part{ckpt.header, {ckpt.tensors.begin(), ckpt.tensors.begin() + static_cast<long>(n)}};
  s.model = model_from_checkpoint(model_part);
  s.best = s.model;
  for (std::size_t i = 0; i < n; ++i) s.best.params[i] = ckpt.tensors[n + i].tensor;
  if (ckpt.tensors.size() == 4 * n) {
    for (std::size_t i = 0; i < n; ++i) {
      s.adam.first.push_back(ckpt.tensors[2 * n + 2 * i].tensor);
      s.adam.second.push_back(ckpt.tensors[2 * n + 2 * i + 1].tensor);
    }
  }
  const json meta = json::parse(checkpoint_meta(ckpt));
  s.next_epoch = meta["next_epoch"].get<int>();
  s.best_val = meta["best_val"].get<double>();
  s.best_epoch = meta["best_epoch"].get<int>();
  s.since_best = meta["since_best"].get<int>();
  s.adam.step = meta["step"].get<std::int64_t>();
  s.wall_time = meta["wall_time"].get<double>();
  s.log = log_from_json(meta["log"]);
  return s;
}

std::uint64_t init_seed(std::uint64_t seed, int repeat) { return mix_seed(seed ^ 0x1A17ULL, static_cast<std::uint64_t>(repeat)); }
std::uint64_t data_seed(std::uint64_t seed, int repeat) { return mix_seed(seed, static_cast<std::uint64_t>(repeat)); }

}  // namespace

TrainResult train(const TrainConfig& config, double lr, int repeat, const Dataset& train_data,
                  const Dataset* val_data, const TrainHooks& hooks) {
  config.validate();
  if (train_data.size() < 2) throw ConfigError("training set needs at least two samples");
  if (!hooks.validator && val_data == nullptr) throw ConfigError("train needs a validation set or a validator");
  using Clock = std::chrono::steady_clock;

  const std::string state_path = hooks.state_dir.empty() ? "" : (fs::path(hooks.state_dir) / "state.intw").string();
  RunState s;
  if (!state_path.empty() && fs::exists(state_path)) {
    s = load_state(state_path, config.architecture);
  } else {
    s.model = Model<float>::initialize(config.architecture, init_seed(config.seed, repeat));
    s.best = s.model;
  }

  std::vector<bool> frozen;
  for (std::size_t i = 0; i < s.model.params.size(); ++i) frozen.push_back(s.model.frozen(static_cast<int>(i)));

  TrainResult result;
  result.learning_rate = lr;
  result.repeat = repeat;

  const std::size_t n = train_data.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  const std::size_t batches = n / bs;
  const std::uint64_t order_seed = data_seed(config.seed, repeat);

  for (int epoch = s.next_epoch; epoch <= config.max_epochs; ++epoch) {
    if (s.since_best >= config.patience) break;
    const auto t0 = Clock::now();
    const std::vector<std::size_t> order = epoch_order(n, order_seed, epoch);
    double loss_sum = 0, norm_sum = 0;
    std::size_t hits = 0, seen = 0;
    int clipped = 0;
    try {
      for (std::size_t b = 0; b < batches; ++b) {
        const Batch batch = assemble_batch(train_data, std::span<const std::size_t>(order.data() + b * bs, bs));
        Tape<float> tape;
        const Bound<float> params = bind(s.model, &tape);
        const Forward<float> out = forward(s.model, params, std::span<const Var<float>>(batch.frames));
        const Var<float> loss = bce_with_logits(out.logits, std::span<const float>(batch.labels));
        const float loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) throw NumericDivergence(-1);
        for (std::size_t k = 0; k < bs; ++k) hits += (out.logits.value()[static_cast<Index>(k)] > 0.0f) == (batch.labels[k] > 0.5f);
        seen += bs;
        const Gradients<float> grads = tape.backward(loss);
        std::vector<Tensor<float>> g;
        for (std::size_t i = 0; i < params.size(); ++i)
          g.push_back(grads.contains(params[i]) ? grads[params[i]] : Tensor<float>(s.model.params[i].shape()));
        const double norm = clip_global_norm(g, config.clip_norm);
        if (!std::isfinite(norm)) throw NumericDivergence(-1);
        clipped += norm > config.clip_norm;
        norm_sum += norm;
        adam_update(s.model.params, g, s.adam, lr, frozen);
        loss_sum += loss_value;
      }
    } catch (const NumericDivergence& e) {
      result.diverged = true;
      result.message = "epoch " + std::to_string(epoch) + ": " + e.what();
      s.log.push_back({epoch, "train", "diverged", 1.0});
      break;
    }

    const double train_loss = loss_sum / static_cast<double>(batches);
    std::vector<LogRow> rows{{epoch, "train", "loss", train_loss},
                             {epoch, "train", "accuracy", static_cast<double>(hits) / static_cast<double>(seen)},
                             {epoch, "train", "lr", lr},
                             {epoch, "train", "grad_norm", norm_sum / static_cast<double>(batches)},
                             {epoch, "train", "clipped", static_cast<double>(clipped)}};
    double val_acc;
    if (hooks.validator) {
      val_acc = hooks.validator(s.model, epoch);
    } else {
      const EvalReport val = evaluate(s.model, *val_data, config.batch_size);
      val_acc = val.accuracy;
      rows.push_back({epoch, "val", "loss", val.loss});
    }
    rows.push_back({epoch, "val", "accuracy", val_acc});
    s.wall_time += std::chrono::duration<double>(Clock::now() - t0).count();
    rows.push_back({epoch, "train", "wall_time", s.wall_time});
    s.log.insert(s.log.end(), rows.begin(), rows.end());

    if (val_acc > s.best_val) {
      s.best_val = val_acc;
      s.best_epoch = epoch;
      s.best = s.model;
      s.since_best = 0;
    } else {
      ++s.since_best;
    }
    s.next_epoch = epoch + 1;
    if (!state_path.empty()) save_state(state_path, s);
    if (hooks.on_epoch) hooks.on_epoch(epoch, rows);
  }

  result.best = s.best;
  result.best_val_accuracy = s.best_val;
  result.best_epoch = s.best_epoch;
  result.epochs_run = s.next_epoch - 1;
  result.log = std::move(s.log);
  if (result.best_epoch == 0 && !result.diverged) result.message = "no completed epoch";
  if (result.best_epoch == 0) result.diverged = true;
  return result;
}

std::size_t select_best(const std::vector<TrainResult>& runs) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].diverged && runs[i].best_epoch == 0) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& a = runs[i];
    const auto& b = runs[*best];
    if (a.best_val_accuracy > b.best_val_accuracy ||
        (a.best_val_accuracy == b.best_val_accuracy && a.learning_rate < b.learning_rate))
      best = i;
  }
  if (!best) {
    std::string why = "every learning-rate trial diverged:";
    for (const auto& r : runs) why += "\n  lr=" + std::to_string(r.learning_rate) + " repeat=" + std::to_string(r.repeat) + ": " + r.message;
    throw SweepFailure(why);
  }
  return *best;
}

std::string run_name(double lr, int repeat, int repeats) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "lr_%.0e", lr);
  std::string name = buf;
  if (repeats > 1) name += "_r" + std::to_string(repeat);
  return name;
}

std::string log_csv(const std::vector<LogRow>& rows) {
  std::string out = "epoch,split,metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out += std::to_string(r.epoch) + "," + r.split + "," + r.metric + "," + buf + "\n";
  }
  return out;
}

std::vector<LogRow> parse_log_csv(const std::string& text) {
  std::vector<LogRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string epoch, split, metric, value;
    std::getline(fields, epoch, ',');
    std::getline(fields, split, ',');
    std::getline(fields, metric, ',');
    std::getline(fields, value, ',');
    rows.push_back({std::stoi(epoch), split, metric, std::stod(value)});
  }
  return rows;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  write_file(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path.string());
  return std::string(bytes.begin(), bytes.end());
}

void save_run(const fs::path& dir, const TrainResult& r) {
  write_text(dir / "log.csv", log_csv(r.log));
  const json meta{{"learning_rate", r.learning_rate}, {"repeat", r.repeat},          {"best_epoch", r.best_epoch},
                  {"val_accuracy", r.best_val_accuracy}, {"epochs_run", r.epochs_run}, {"diverged", r.diverged},
                  {"message", r.message}};
  save_checkpoint((dir / "best.intw").string(), to_checkpoint(r.best, meta.dump()));
  write_text(dir / "result.json", meta.dump(2));
}

std::optional<TrainResult> load_run(const fs::path& dir, const Architecture& arch) {
  if (!fs::exists(dir / "result.json") || !fs::exists(dir / "best.intw")) return std::nullopt;
  const json meta = json::parse(read_text(dir / "result.json"));
  TrainResult r;
  r.best = model_from_checkpoint(load_checkpoint((dir / "best.intw").string()));
  if (!(r.best.arch == arch)) return std::nullopt;
  r.learning_rate = meta["learning_rate"].get<double>();
  r.repeat = meta["repeat"].get<int>();
  r.best_epoch = meta["best_epoch"].get<int>();
  r.best_val_accuracy = meta["val_accuracy"].get<double>();
  r.epochs_run = meta["epochs_run"].get<int>();
  r.diverged = meta["diverged"].get<bool>();
  r.message = meta["message"].get<std::string>();
  r.log = parse_log_csv(read_text(dir / "log.csv"));
  return r;
}

}  // namespace

SweepResult sweep(const TrainConfig& config, const Dataset& train_data, const Dataset& val_data,
                  const std::string& out_dir, const TrainHooks& hooks) {
  config.validate();
  SweepResult out;
  for (double lr : config.learning_rates) {
    for (int repeat = 0; repeat < config.repeats; ++repeat) {
      if (out_dir.empty()) {
        out.runs.push_back(train(config, lr, repeat, train_data, &val_data, hooks));
        continue;
      }
      const fs::path dir = fs::path(out_dir) / run_name(lr, repeat, config.repeats);
      fs::create_directories(dir);
      if (auto cached = load_run(dir, config.architecture)) {
        out.runs.push_back(std::move(*cached));
        continue;
      }
      TrainHooks run_hooks = hooks;
      run_hooks.state_dir = dir.string();
      TrainResult r = train(config, lr, repeat, train_data, &val_data, run_hooks);
      save_run(dir, r);
      out.runs.push_back(std::move(r));
    }
  }
  out.best = select_best(out.runs);
  return out;
}

}  // namespace intrack
