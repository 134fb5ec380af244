#include "intrack/checkpoint.hpp"
#include "intrack/trainer.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

using namespace intrack;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

GenConfig tiny_gen(std::uint64_t seed, int distractors = 1) {
  GenConfig c;
  c.image_size = 16;
  c.num_frames = 10;
  c.num_distractors = distractors;
  c.master_seed = seed;
  return c;
}

Dataset tiny_dataset(const std::string& name, std::uint64_t count, std::uint64_t seed) {
  const fs::path dir = fs::temp_directory_path() / ("intrack_trainer_" + name);
  fs::remove_all(dir);
  build_dataset(tiny_gen(seed), count, dir.string(), 1);
  Dataset d = Dataset::load(dir.string());
  fs::remove_all(dir);
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.learning_rates = {1e-2};
  c.batch_size = 4;
  c.patience = 3;
  c.max_epochs = 2;
  c.architecture = {ModelKind::kInT, 4, {}};
  c.seed = 9;
  return c;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

bool bit_equal(const Model<float>& a, const Model<float>& b) {
  if (a.params.size() != b.params.size()) return false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (!bit_equal(a.params[i], b.params[i])) return false;
  return true;
}

std::vector<double> metric(const std::vector<LogRow>& log, const std::string& split, const std::string& name) {
  std::vector<double> out;
  for (const auto& r : log)
    if (r.split == split && r.metric == name) out.push_back(r.value);
  return out;
}

TrainResult fake_run(double lr, double acc, bool diverged = false, int best_epoch = 1) {
  TrainResult r;
  r.learning_rate = lr;
  r.best_val_accuracy = acc;
  r.diverged = diverged;
  r.best_epoch = best_epoch;
  r.message = diverged ? "non-finite loss" : "";
  return r;
}

}  // namespace

TEST_CASE("config validation and JSON") {
  TrainConfig c;
  CHECK(c.learning_rates == std::vector<double>{1e-2, 1e-3, 1e-4, 3e-4, 1e-5});
  CHECK_NOTHROW(c.validate());
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rates.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d = tiny_config();
  d.test_paths = {"a", "b"};
  d.architecture.variant.attention = Attention::kSpatialSoftmax;
  const TrainConfig back = TrainConfig::from_json(d.to_json());
  CHECK(back.learning_rates == d.learning_rates);
  CHECK(back.batch_size == d.batch_size);
  CHECK(back.patience == d.patience);
  CHECK(back.test_paths == d.test_paths);
  CHECK(back.architecture == d.architecture);
  CHECK(back.seed == d.seed);
}

TEST_CASE("Adam first step") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> p({3, 4}), g({3, 4});
  for (Index i = 0; i < p.size(); ++i) {
    p[i] = n(rng);
    g[i] = n(rng);
  }
  std::vector<Tensor<double>> params{p};
  AdamState<double> state;
  const double lr = 1e-3;
  adam_update(params, {g}, state, lr);
  CHECK(state.step == 1);
  for (Index i = 0; i < p.size(); ++i) {
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    const double expected = p[i] - lr * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(params[0][i] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(params[0][i] - p[i]) == doctest::Approx(lr).epsilon(1e-6));
  }
}

TEST_CASE("Adam with a zero gradient") {
  std::vector<Tensor<double>> params{Tensor<double>({5}, 2.0)};
  AdamState<double> state;
  adam_update(params, {Tensor<double>({5})}, state, 1e-2);
  CHECK((params[0].array() == 2.0).all());

  adam_update(params, {Tensor<double>({5}, 0.5)}, state, 1e-2);
  const Tensor<double> after = params[0];
  const Tensor<double> m = state.first[0], v = state.second[0];
  adam_update(params, {Tensor<double>({5})}, state, 1e-2);
  CHECK((state.first[0].array() == 0.9 * m.array()).all());
  CHECK((state.second[0].array() == 0.999 * v.array()).all());
  CHECK(state.step == 3);

  std::vector<Tensor<double>> bad{Tensor<double>({2})};
  CHECK_THROWS_AS(adam_update(bad, {Tensor<double>({3})}, state, 1e-2), DimensionError);
  CHECK_THROWS_AS(adam_update(bad, {}, state, 1e-2), DimensionError);
}

TEST_CASE("Adam leaves frozen slots untouched") {
  std::vector<Tensor<float>> params{Tensor<float>({3}), Tensor<float>({3}, 1.0f)};
  AdamState<float> state;
  for (int i = 0; i < 50; ++i) adam_update(params, {Tensor<float>({3}, 1.0f), Tensor<float>({3}, 1.0f)}, state, 0.1, {true, false});
  CHECK((params[0].array() == 0.0f).all());
  CHECK((params[1].array() < 1.0f).all());
}

TEST_CASE("global norm clipping") {
  std::vector<Tensor<double>> g{Tensor<double>({1}, 3.0), Tensor<double>({1}, 4.0)};
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
}

TEST_CASE("batches and epoch order") {
  const Dataset d = tiny_dataset("batches", 12, 3);
  const std::vector<std::size_t> idx{4, 0, 7};
  const Batch b = assemble_batch(d, std::span<const std::size_t>(idx));
  REQUIRE(b.frames.size() == 10);
  CHECK(b.frames[0].shape() == Shape{3, 3, 16, 16});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    CHECK(b.labels[k] == (d.label(idx[k]) ? 1.0f : 0.0f));
    const VideoSample s = d.sample(idx[k]);
    for (int t = 0; t < 10; ++t)
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 16; ++r)
          for (int col = 0; col < 16; ++col)
            CHECK(b.frames[static_cast<std::size_t>(t)].value().at(static_cast<Index>(k), c, r, col) == s.frames.at(t, c, r, col));
  }

  const auto o1 = epoch_order(100, 5, 1), o1b = epoch_order(100, 5, 1), o2 = epoch_order(100, 5, 2);
  CHECK(o1 == o1b);
  CHECK(o1 != o2);
  auto sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("training is deterministic over ten steps") {
  const Dataset d = tiny_dataset("determinism", 20, 4);
  TrainConfig c = tiny_config();
  c.batch_size = 2;
  c.max_epochs = 1;
  TrainHooks hooks;
  hooks.validator = [](const Model<float>&, int) { return 0.5; };
  const TrainResult a = train(c, 1e-2, 0, d, nullptr, hooks);
  const TrainResult b = train(c, 1e-2, 0, d, nullptr, hooks);
  CHECK(a.epochs_run == 1);
  CHECK(bit_equal(a.best, b.best));
  CHECK_FALSE(bit_equal(a.best, Model<float>::initialize(c.architecture, 0)));
  CHECK(metric(a.log, "train", "loss") == metric(b.log, "train", "loss"));
}

TEST_CASE("patience stops a worsening run and keeps the first epoch") {
  const Dataset d = tiny_dataset("patience", 8, 5);
  TrainConfig c = tiny_config();
  c.patience = 1;
  c.max_epochs = 10;
  std::vector<Model<float>> seen;
  TrainHooks hooks;
  hooks.validator = [&](const Model<float>& m, int epoch) {
    seen.push_back(m);
    return 0.9 - 0.1 * epoch;
  };
  const TrainResult r = train(c, 1e-2, 0, d, nullptr, hooks);
  CHECK(r.epochs_run == 2);
  CHECK(r.best_epoch == 1);
  REQUIRE(seen.size() == 2);
  CHECK(bit_equal(r.best, seen[0]));
  CHECK_FALSE(bit_equal(r.best, seen[1]));
  CHECK(r.best_val_accuracy == doctest::Approx(0.8));
}

TEST_CASE("log contract and selection correctness") {
  const Dataset train_set = tiny_dataset("log_train", 8, 6);
  const Dataset val_set = tiny_dataset("log_val", 8, 7);
  TrainConfig c = tiny_config();
  c.max_epochs = 3;
  c.patience = 10;
  const TrainResult r = train(c, 1e-2, 0, train_set, &val_set);
  CHECK(r.epochs_run == 3);
  for (const char* m : {"loss", "lr", "wall_time", "accuracy", "grad_norm", "clipped"}) CHECK(metric(r.log, "train", m).size() == 3);
  CHECK(metric(r.log, "val", "accuracy").size() == 3);
  CHECK(metric(r.log, "val", "loss").size() == 3);
  const auto wall = metric(r.log, "train", "wall_time");
  CHECK(std::is_sorted(wall.begin(), wall.end()));
  const auto val = metric(r.log, "val", "accuracy");
  CHECK(r.best_val_accuracy == *std::max_element(val.begin(), val.end()));
  CHECK(val[static_cast<std::size_t>(r.best_epoch - 1)] == r.best_val_accuracy);

  const auto parsed = parse_log_csv(log_csv(r.log));
  REQUIRE(parsed.size() == r.log.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    CHECK(parsed[i].epoch == r.log[i].epoch);
    CHECK(parsed[i].split == r.log[i].split);
    CHECK(parsed[i].metric == r.log[i].metric);
    CHECK(parsed[i].value == r.log[i].value);
  }
}

TEST_CASE("lesioned gains stay bit-zero") {
  const Dataset d = tiny_dataset("lesion", 8, 8);
  TrainConfig c = tiny_config();
  c.architecture.variant.lesioned = {true, false, false, true};
  c.max_epochs = 3;
  c.patience = 10;
  TempDir out("intrack_lesion_sweep");
  const SweepResult s = sweep(c, d, d, out.path.string());
  const Model<float> saved = model_from_checkpoint(load_checkpoint((out.path / "lr_1e-02" / "best.intw").string()));
  for (const Model<float>* m : {&s.runs[0].best, &saved}) {
    CHECK((m->params[int_param::kGamma].array() == 0.0f).all());
    CHECK((m->params[int_param::kMu].array() == 0.0f).all());
    CHECK_FALSE((m->params[int_param::kNu].array() == 1.0f).all());
    for (Index i = 0; i < m->params[int_param::kGamma].size(); ++i) CHECK_FALSE(std::signbit(m->params[int_param::kGamma][i]));
  }
}

TEST_CASE("learning-rate selection") {
  CHECK(select_best({fake_run(1e-3, 0.9), fake_run(1e-4, 0.9)}) == 1);
  CHECK(select_best({fake_run(1e-4, 0.9), fake_run(1e-3, 0.9)}) == 0);
  CHECK(select_best({fake_run(1e-2, 0.7), fake_run(1e-3, 0.8), fake_run(1e-4, 0.6)}) == 1);
  CHECK(select_best({fake_run(1e-3, 0.9, true, 0), fake_run(1e-2, 0.6)}) == 1);
  CHECK(select_best({fake_run(1e-3, 0.9, true, 4), fake_run(1e-2, 0.6)}) == 0);
  try {
    select_best({fake_run(1e-2, -1, true, 0), fake_run(1e-3, -1, true, 0)});
    FAIL("expected SweepFailure");
  } catch (const SweepFailure& e) {
    const std::string what = e.what();
    CHECK(what.find("lr=0.010000") != std::string::npos);
    CHECK(what.find("lr=0.001000") != std::string::npos);
    CHECK(what.find("non-finite loss") != std::string::npos);
  }
  CHECK(run_name(3e-4, 0, 1) == "lr_3e-04");
  CHECK(run_name(1e-2, 2, 3) == "lr_1e-02_r2");
}

TEST_CASE("sweep over five rates writes five logs and reuses finished runs") {
  const Dataset train_set = tiny_dataset("sweep_train", 8, 10);
  const Dataset val_set = tiny_dataset("sweep_val", 8, 11);
  TrainConfig c = tiny_config();
  c.learning_rates = TrainConfig{}.learning_rates;
  c.max_epochs = 1;
  TempDir out("intrack_sweep5");
  int epochs = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](int, const std::vector<LogRow>&) { ++epochs; };
  const SweepResult s = sweep(c, train_set, val_set, out.path.string(), hooks);
  CHECK(s.runs.size() == 5);
  CHECK(epochs == 5);
  for (double lr : c.learning_rates) {
    const fs::path dir = out.path / run_name(lr, 0, 1);
    CHECK(fs::exists(dir / "log.csv"));
    CHECK(fs::exists(dir / "best.intw"));
  }
  const SweepResult again = sweep(c, train_set, val_set, out.path.string(), hooks);
  CHECK(epochs == 5);
  CHECK(again.best == s.best);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(bit_equal(again.runs[i].best, s.runs[i].best));
    CHECK(again.runs[i].best_val_accuracy == s.runs[i].best_val_accuracy);
  }
}

TEST_CASE("single-rate sweep equals train") {
  const Dataset train_set = tiny_dataset("single_train", 8, 12);
  const Dataset val_set = tiny_dataset("single_val", 8, 13);
  const TrainConfig c = tiny_config();
  const SweepResult s = sweep(c, train_set, val_set);
  const TrainResult r = train(c, c.learning_rates[0], 0, train_set, &val_set);
  REQUIRE(s.runs.size() == 1);
  CHECK(bit_equal(s.runs[0].best, r.best));
  CHECK(s.runs[0].best_val_accuracy == r.best_val_accuracy);
}

TEST_CASE("interrupted training resumes to the same result") {
  const Dataset d = tiny_dataset("resume", 8, 14);
  TrainConfig c = tiny_config();
  c.max_epochs = 3;
  c.patience = 10;
  TempDir dir("intrack_resume");
  fs::create_directories(dir.path);
  TrainHooks hooks;
  hooks.validator = [](const Model<float>& m, int) { return static_cast<double>(m.params[0][0]); };
  const TrainResult whole = train(c, 1e-2, 0, d, nullptr, hooks);

  hooks.state_dir = dir.path.string();
  TrainConfig first = c;
  first.max_epochs = 1;
  train(first, 1e-2, 0, d, nullptr, hooks);
  const TrainResult resumed = train(c, 1e-2, 0, d, nullptr, hooks);
  CHECK(resumed.epochs_run == 3);
  CHECK(resumed.best_epoch == whole.best_epoch);
  CHECK(bit_equal(resumed.best, whole.best));
  CHECK(metric(resumed.log, "train", "loss") == metric(whole.log, "train", "loss"));
}

TEST_CASE("divergence is logged and reported") {
  const Dataset d = tiny_dataset("diverge", 8, 15);
  TrainConfig c = tiny_config();
  c.architecture.variant.rectifier = Rectifier::kTanh;
  TrainHooks hooks;
  hooks.validator = [](const Model<float>&, int) { return 0.5; };
  // A huge rate drives the logits to overflow within the first epochs.
  c.max_epochs = 50;
  c.patience = 50;
  c.clip_norm = 1e30;
  const TrainResult r = train(c, 1e30, 0, d, nullptr, hooks);
  CHECK(r.diverged);
  CHECK_FALSE(r.message.empty());
  CHECK(metric(r.log, "train", "diverged").size() == 1);
}

TEST_CASE("evaluation") {
  SUBCASE("scored decisions") {
    const std::vector<bool> labels{true, false, true, false, true, false};
    CHECK(score_decisions(labels, labels).accuracy == 1.0);
    const EvalReport constant = score_decisions(std::vector<bool>(6, true), labels);
    CHECK(constant.accuracy == 0.5);
    CHECK(constant.correct == std::vector<bool>{true, false, true, false, true, false});
  }
  SUBCASE("repeatable and checkpoint-stable") {
    const Dataset d = tiny_dataset("eval", 10, 16);
    const Model<float> m = Model<float>::initialize({ModelKind::kInT, 4, {}}, 17);
    const EvalReport a = evaluate(m, d, 4), b = evaluate(m, d, 4);
    CHECK(a.decisions.size() == 10);
    CHECK(a.decisions == b.decisions);
    CHECK(a.logits == b.logits);
    for (std::size_t i = 0; i < a.logits.size(); ++i) CHECK(a.decisions[i] == (a.logits[i] > 0));
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(a.labels[i] == d.label(i));

    TempDir dir("intrack_eval_ckpt");
    fs::create_directories(dir.path);
    const std::string path = (dir.path / "m.intw").string();
    save_checkpoint(path, to_checkpoint(m));
    const EvalReport c = evaluate(model_from_checkpoint(load_checkpoint(path)), d, 4);
    CHECK(c.decisions == a.decisions);
    CHECK(c.logits == a.logits);
  }
}

TEST_CASE("overfit probe") {
  GenConfig g = tiny_gen(5);
  g.num_frames = 6;
  g.min_marker_separation = 4;
  const fs::path dir = fs::temp_directory_path() / "intrack_trainer_probe";
  fs::remove_all(dir);
  build_dataset(g, 64, dir.string(), 1);
  const Dataset probe = Dataset::load(dir.string());
  fs::remove_all(dir);

  TrainConfig c;
  c.learning_rates = {3e-2};
  c.batch_size = 32;
  c.patience = 1000;
  c.max_epochs = 500;
  c.architecture = {ModelKind::kInT, 8, {}};
  c.seed = 1;
  TrainHooks hooks;
  hooks.validator = [](const Model<float>&, int) { return 0.0; };
  const TrainResult r = train(c, 3e-2, 0, probe, nullptr, hooks);
  const std::vector<double> loss = metric(r.log, "train", "loss");
  REQUIRE(loss.size() == 500);
  CHECK(*std::min_element(loss.begin(), loss.end()) < 0.05);
  std::vector<double> first(loss.begin(), loss.begin() + 20);
  std::nth_element(first.begin(), first.begin() + 10, first.end());
  const double upper = first[10];
  std::nth_element(first.begin(), first.begin() + 9, first.end());
  CHECK(0.5 * (first[9] + upper) < loss.front());
}
