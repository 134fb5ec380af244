// Adam, the patience-based training loop, the learning-rate sweep and evaluation.
#pragma once

#include "intrack/circuit.hpp"
#include "intrack/pathgen.hpp"
#include "intrack/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace intrack {

struct TrainConfig {
  std::vector<double> learning_rates{1e-2, 1e-3, 1e-4, 3e-4, 1e-5};
  int repeats = 1;  // independent restarts per learning rate
  int batch_size = 32;
  int patience = 20;
  int max_epochs = 300;
  double clip_norm = 5.0;
  std::string train_path;
  std::string val_path;
  std::vector<std::string> test_paths;
  Architecture architecture;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> first;
  std::vector<Tensor<Scalar>> second;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam step. Slots with `frozen[i]` set are left untouched.
template <typename Scalar>
void adam_update(std::vector<Tensor<Scalar>>& params, const std::vector<Tensor<Scalar>>& grads,
                 AdamState<Scalar>& state, double lr, const std::vector<bool>& frozen = {}) {
  if (grads.size() != params.size())
    throw DimensionError("adam_update: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].shape()) throw DimensionError("adam_update gradient", grads[i].shape(), params[i].shape());
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.shape());
      state.second.emplace_back(p.shape());
    }
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto step_size = static_cast<Scalar>(lr / c1);
  const auto root_c2 = static_cast<Scalar>(std::sqrt(c2));
  const auto eps = static_cast<Scalar>(state.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i < frozen.size() && frozen[i]) continue;
    auto& m = state.first[i].array();
    auto& v = state.second[i].array();
    const auto& g = grads[i].array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i].array() -= step_size * m / (v.sqrt() / root_c2 + eps);
  }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(std::vector<Tensor<Scalar>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += g.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g.array() *= scale;
  }
  return norm;
}

/// Per-timestep B x 3 x H x W frames and {0,1} labels for the given samples.
struct Batch {
  std::vector<Var<float>> frames;
  std::vector<float> labels;
};

Batch assemble_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Deterministic permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

struct LogRow {
  int epoch;
  std::string split;
  std::string metric;
  double value;
};

struct EvalReport {
  std::string dataset;
  double accuracy = 0;
  double loss = 0;
  std::vector<float> logits;
  std::vector<bool> decisions;
  std::vector<bool> labels;
  std::vector<bool> correct;
};

/// Accuracy from decisions and labels; fills `correct`.
EvalReport score_decisions(std::vector<bool> decisions, std::vector<bool> labels);

/// Batches follow manifest order, so repeated evaluations see identical batch statistics.
EvalReport evaluate(const Model<float>& model, const Dataset& data, int batch_size = 32);

struct TrainHooks {
  /// Replaces validation-set evaluation; returns validation accuracy.
  std::function<double(const Model<float>&, int epoch)> validator;
  std::function<void(int epoch, const std::vector<LogRow>& rows)> on_epoch;
  /// Directory for resumable per-epoch state; empty disables it.
  std::string state_dir;
};

struct TrainResult {
  double learning_rate = 0;
  int repeat = 0;
  Model<float> best;
  double best_val_accuracy = -1;
  int best_epoch = 0;
  int epochs_run = 0;
  bool diverged = false;
  std::string message;
  std::vector<LogRow> log;
};

TrainResult train(const TrainConfig& config, double lr, int repeat, const Dataset& train_data,
                  const Dataset* val_data, const TrainHooks& hooks = {});

class SweepFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Index of the best non-diverged run: highest validation accuracy, ties to the lower learning rate.
std::size_t select_best(const std::vector<TrainResult>& runs);

struct SweepResult {
  std::vector<TrainResult> runs;
  std::size_t best = 0;
};

/// Trains every (learning rate, repeat) pair. With `out_dir`, each run writes
/// `<out_dir>/<run>/log.csv` and `best.intw`, and finished runs are reused.
SweepResult sweep(const TrainConfig& config, const Dataset& train_data, const Dataset& val_data,
                  const std::string& out_dir = {}, const TrainHooks& hooks = {});

std::string run_name(double lr, int repeat, int repeats);
std::string log_csv(const std::vector<LogRow>& rows);
std::vector<LogRow> parse_log_csv(const std::string& text);

}  // namespace intrack
