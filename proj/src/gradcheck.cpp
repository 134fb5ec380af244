#include "intrack/gradcheck.hpp"

#include "intrack/circuit.hpp"
#include "intrack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace intrack {

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng_() >> 11) * 0x1.0p-53); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }

  Tensor<double> tensor(const Shape& shape, double lo = -1, double hi = 1) {
    Tensor<double> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
  }
  // Magnitudes in [0.1, 1] with random sign, away from the relu kink.
  Tensor<double> signed_tensor(const Shape& shape) {
    Tensor<double> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = (rng_() & 1 ? 1 : -1) * uniform(0.1, 1.0);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

// Reduces an op output to a scalar with fixed random weights.
ScalarFunction weighted(std::function<Var<double>(const std::vector<Var<double>>&)> op, const Shape& out_shape,
                        std::uint64_t seed) {
  Sampler s(seed);
  Tensor<double> w = s.tensor(out_shape);
  return [op = std::move(op), w](const std::vector<Var<double>>& in) { return sum(op(in) * Var<double>(w)); };
}

struct Case {
  std::string name;
  ScalarFunction fn;
  std::vector<Tensor<double>> inputs;
};

Model<double> perturbed_model(const Architecture& arch, Sampler& s) {
  Model<double> m = Model<double>::initialize(arch, 7);
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (Index k = 0; k < m.params[i].size(); ++k) m.params[i][k] += s.uniform(-0.1, 0.1);
  return m;
}

Case unroll_case(const std::string& name, const Architecture& arch, Sampler& s) {
  constexpr Index kBatch = 2, kFrames = 4, kSize = 8;
  Model<double> model = perturbed_model(arch, s);
  std::vector<Var<double>> frames;
  for (Index t = 0; t < kFrames; ++t) {
    Tensor<double> f({kBatch, 3, kSize, kSize});
    for (Index i = 0; i < f.size(); ++i) f[i] = s.uniform(0, 1) < 0.2 ? 1.0 : 0.0;
    frames.emplace_back(f);
  }
  std::vector<double> labels = {1.0, 0.0};
  ScalarFunction fn = [model, frames, labels](const std::vector<Var<double>>& params) {
    const Forward<double> out = forward(model, params, std::span<const Var<double>>(frames));
    return bce_with_logits(out.logits, std::span<const double>(labels));
  };
  return {name, fn, model.params};
}

std::vector<Case> build_cases(std::uint64_t seed) {
  Sampler s(seed);
  std::vector<Case> cases;
  const Shape act{2, 3, 5, 6};

  cases.push_back({"conv2d 5x5",
                   weighted([](const auto& v) { return conv2d(v[0], v[1], v[2]); }, {2, 4, 5, 6}, seed + 1),
                   {s.tensor(act), s.tensor({5, 5, 3, 4}), s.tensor({4})}});
  cases.push_back({"conv2d 3x1",
                   weighted([](const auto& v) { return conv2d(v[0], v[1]); }, {2, 2, 5, 6}, seed + 2),
                   {s.tensor(act), s.tensor({3, 1, 3, 2})}});
  cases.push_back({"conv2d 1x1",
                   weighted([](const auto& v) { return conv2d(v[0], v[1], v[2]); }, {2, 4, 5, 6}, seed + 3),
                   {s.tensor(act), s.tensor({1, 1, 3, 4}), s.tensor({4})}});

  const std::pair<const char*, Pointwise> pointwise_ops[] = {
      {"softplus", Pointwise::kSoftplus}, {"sigmoid", Pointwise::kSigmoid},
      {"tanh", Pointwise::kTanh}, {"relu", Pointwise::kRelu}};
  for (const auto& [name, kind] : pointwise_ops) {
    Tensor<double> x = s.signed_tensor(act);
    if (kind != Pointwise::kRelu) x.array() *= 3.0;
    cases.push_back({name, weighted([kind](const auto& v) { return pointwise(kind, v[0]); }, act, seed + 4), {x}});
  }

  const std::pair<const char*, Elementwise> elementwise_ops[] = {
      {"add", Elementwise::kAdd}, {"sub", Elementwise::kSub}, {"mul", Elementwise::kMul}};
  for (const auto& [name, kind] : elementwise_ops) {
    cases.push_back({name, weighted([kind](const auto& v) { return elementwise(kind, v[0], v[1]); }, act, seed + 5),
                     {s.tensor(act), s.tensor(act)}});
    cases.push_back({std::string(name) + " channel broadcast",
                     weighted([kind](const auto& v) { return elementwise(kind, v[0], v[1]); }, act, seed + 6),
                     {s.tensor(act), s.tensor({3})}});
  }

  cases.push_back({"batchnorm",
                   weighted([](const auto& v) { return batchnorm_spatial(v[0], v[1], v[2]); }, act, seed + 7),
                   {s.tensor(act), s.tensor({3}, 0.5, 1.5), s.tensor({3})}});
  cases.push_back({"global mean", weighted([](const auto& v) { return global_mean(v[0]); }, {2}, seed + 8),
                   {s.tensor(act)}});
  cases.push_back({"spatial mean", weighted([](const auto& v) { return global_mean(v[0], false); }, {2, 3}, seed + 9),
                   {s.tensor(act)}});
  cases.push_back({"channel l2", weighted([](const auto& v) { return channel_l2(v[0]); }, {2, 3}, seed + 10),
                   {s.tensor(act)}});
  cases.push_back({"spatial softmax",
                   weighted([](const auto& v) { return spatial_softmax(v[0]); }, act, seed + 11),
                   {s.tensor(act, -2, 2)}});
  cases.push_back({"concat channels",
                   weighted([](const auto& v) { return concat_channels(v[0], v[1]); }, {2, 4, 5, 6}, seed + 12),
                   {s.tensor(act), s.tensor({2, 1, 5, 6})}});
  {
    std::vector<double> labels = {1.0, 0.0, 1.0, 0.0};
    cases.push_back({"bce with logits",
                     [labels](const auto& v) { return bce_with_logits(v[0], std::span<const double>(labels)); },
                     {s.tensor({4}, -3, 3)}});
  }

  cases.push_back(unroll_case("InT unroll", Architecture{ModelKind::kInT, 4, {}}, s));
  VariantSpec alt;
  alt.rectifier = Rectifier::kTanh;
  alt.attention = Attention::kSpatialSoftmax;
  cases.push_back(unroll_case("InT unroll tanh+spatial_softmax", Architecture{ModelKind::kInT, 4, alt}, s));
  cases.push_back(unroll_case("ConvGRU unroll", Architecture{ModelKind::kConvGru, 4, {}}, s));
  return cases;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult check_gradient(const std::string& name, const ScalarFunction& fn,
                               const std::vector<Tensor<double>>& inputs, const GradCheckOptions& options) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const Var<double> loss = fn(leaves);
  const Gradients<double> grads = tape.backward(loss);

  std::vector<Tensor<double>> probe = inputs;
  auto evaluate = [&] {
    std::vector<Var<double>> constants;
    for (const auto& t : probe) constants.emplace_back(t);
    return fn(constants).value()[0];
  };

  Sampler sampler(options.seed);
  GradCheckResult result{name, 0.0, 0, true};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<double>& analytic = grads[leaves[i]];
    const std::size_t n = static_cast<std::size_t>(inputs[i].size());
    const int count = static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(options.probes)));
    for (int p = 0; p < count; ++p) {
      const Index k = static_cast<Index>(n <= static_cast<std::size_t>(options.probes) ? p : sampler.index(n));
      const double original = probe[i][k];
      probe[i][k] = original + options.epsilon;
      const double plus = evaluate();
      probe[i][k] = original - options.epsilon;
      const double minus = evaluate();
      probe[i][k] = original;
      const double numeric = (plus - minus) / (2 * options.epsilon);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[k], numeric));
      ++result.probes;
    }
  }
  result.passed = result.max_relative_error < options.tolerance;
  return result;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  for (const Case& c : build_cases(options.seed)) results.push_back(check_gradient(c.name, c.fn, c.inputs, options));
  return results;
}

}  // namespace intrack
