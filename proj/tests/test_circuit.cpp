#include "intrack/checkpoint.hpp"
#include "intrack/circuit.hpp"
#include "intrack/gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

using namespace intrack;

namespace {

Tensor<float> random_frames(Index batch, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bit(0.2);
  Tensor<float> t({batch, 3, size, size});
  for (Index i = 0; i < t.size(); ++i) t[i] = bit(rng) ? 1.0f : 0.0f;
  return t;
}

Tensor<float> random_positive(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 2.0f);
  Tensor<float> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

Model<float> small_model(VariantSpec variant = {}, int channels = 4, std::uint64_t seed = 3) {
  return Model<float>::initialize({ModelKind::kInT, channels, variant}, seed);
}

template <typename S>
Bound<S> fixed(const Model<S>& m) {
  return bind(m, static_cast<Tape<S>*>(nullptr));
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) { return (a.array() - b.array()).abs().maxCoeff(); }

StepTrace<float> one_step(const Model<float>& m, const Bound<float>& p, Index batch, Index size, std::uint64_t seed) {
  const InTState<float> prev{Var<float>(random_positive({batch, m.arch.channels, size, size}, seed)),
                             Var<float>(random_positive({batch, m.arch.channels, size, size}, seed + 1))};
  const Var<float> z = encode_input(Var<float>(random_frames(batch, size, seed + 2)), p[int_param::kWz], p[int_param::kBz]);
  return int_step(prev, z, p, m.arch.variant);
}

}  // namespace

TEST_CASE("parameter shapes and count") {
  const Model<float> m = Model<float>::initialize({ModelKind::kInT, 32, {}}, 1);
  const auto names = parameter_names(ModelKind::kInT);
  REQUIRE(m.params.size() == names.size());
  using namespace int_param;
  CHECK(m.params[kWz].shape() == Shape{1, 1, 3, 32});
  CHECK(m.params[kWei].shape() == Shape{5, 5, 32, 32});
  CHECK(m.params[kWie].shape() == Shape{5, 5, 32, 32});
  CHECK(m.params[kWa].shape() == Shape{1, 1, 32, 32});
  for (int k : {kWg, kUg, kWh, kUh}) CHECK(m.params[k].shape() == Shape{1, 1, 32, 32});
  for (int k : {kGamma, kBeta, kNu, kMu}) CHECK(m.params[k].shape() == Shape{32});
  CHECK(m.params[kWr1].shape() == Shape{1, 1, 32, 1});
  CHECK(m.params[kWr2].shape() == Shape{5, 5, 2, 1});
  CHECK((m.params[kBn1Scale].array() == 0.1f).all());
  CHECK((m.params[kBn2Scale].array() == 0.1f).all());
  CHECK((m.params[kGamma].array() == 1.0f).all());
  CHECK((m.params[kBeta].array() == 0.0f).all());
  CHECK((m.params[kNu].array() == 1.0f).all());
  CHECK((m.params[kMu].array() == 0.0f).all());

  // Kernels 3*C + 2*25*C^2 + 5*C^2 + 2*C + 25*2; biases and vectors 4*C + 4*C + 4*C + 2.
  const Index c = 32;
  const Index expected = 3 * c + 2 * 25 * c * c + 5 * c * c + c + 50 + 4 * c + 4 * c + 4 * c + 2;
  CHECK(m.parameter_count() == expected);
  CHECK(expected == 56884);

  const Model<float> gru = Model<float>::initialize({ModelKind::kConvGru, 32, {}}, 1);
  CHECK(gru.parameter_count() <= 2 * m.parameter_count());
  CHECK(2 * gru.parameter_count() >= m.parameter_count());
}

TEST_CASE("encode_input") {
  Model<float> m = Model<float>::initialize({ModelKind::kInT, 32, {}}, 2);
  const Bound<float> p = fixed(m);
  const auto z0 = encode_input(Var<float>(Tensor<float>({1, 3, 32, 32})), p[int_param::kWz], p[int_param::kBz]);
  CHECK(z0.shape() == Shape{1, 32, 32, 32});
  for (Index i = 0; i < z0.value().size(); ++i) CHECK(z0.value()[i] == doctest::Approx(0.6931).epsilon(1e-4));
  const auto z = encode_input(Var<float>(random_frames(2, 32, 3)), p[int_param::kWz], p[int_param::kBz]);
  CHECK((z.array() >= 0).all());
  CHECK_THROWS_AS(encode_input(Var<float>(Tensor<float>({1, 2, 8, 8})), p[int_param::kWz], p[int_param::kBz]),
                  DimensionError);
}

TEST_CASE("initial state") {
  const auto s = initial_state<float>(2, 4, 8, 8);
  CHECK((s.inhibition.array() == s.excitation.array()).all());
  CHECK(s.inhibition.array().minCoeff() == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(s.inhibition.array().maxCoeff() == s.inhibition.array().minCoeff());
}

TEST_CASE("gates at their limits") {
  using namespace int_param;
  Model<float> m = small_model();
  for (int k : {kWg, kUg, kWh, kUh}) m.params[k].array().setZero();
  const InTState<float> prev{Var<float>(random_positive({2, 4, 8, 8}, 10)), Var<float>(random_positive({2, 4, 8, 8}, 11))};
  SUBCASE("closed gates keep the state") {
    m.params[kBg].array().setConstant(-1e4f);
    m.params[kBh].array().setConstant(-1e4f);
    const Bound<float> p = fixed(m);
    const auto z = encode_input(Var<float>(random_frames(2, 8, 12)), p[kWz], p[kBz]);
    const auto step = int_step(prev, z, p, m.arch.variant);
    CHECK((step.state.inhibition.array() == prev.inhibition.array()).all());
    CHECK((step.state.excitation.array() == prev.excitation.array()).all());
  }
  SUBCASE("open gates take the candidates") {
    m.params[kBg].array().setConstant(1e4f);
    m.params[kBh].array().setConstant(1e4f);
    const Bound<float> p = fixed(m);
    const auto z = encode_input(Var<float>(random_frames(2, 8, 12)), p[kWz], p[kBz]);
    const auto step = int_step(prev, z, p, m.arch.variant);
    CHECK(max_abs_diff(step.state.inhibition.value(), step.candidate_inhibition.value()) < 1e-5f);
    CHECK(max_abs_diff(step.state.excitation.value(), step.candidate_excitation.value()) < 1e-5f);
  }
}

TEST_CASE("step invariants across random parameters") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const Attention attention : {Attention::kSigmoid, Attention::kSpatialSoftmax}) {
      VariantSpec v;
      v.attention = attention;
      Model<float> m = small_model(v, 4, seed);
      // Spread the gains so the subtractive and divisive paths are exercised.
      std::mt19937_64 rng(seed);
      std::normal_distribution<float> g(0.0f, 1.0f);
      for (int k = int_param::kGamma; k <= int_param::kMu; ++k)
        for (Index i = 0; i < m.params[static_cast<std::size_t>(k)].size(); ++i) m.params[static_cast<std::size_t>(k)][i] = g(rng);
      const Bound<float> p = fixed(m);
      const StepTrace<float> s = one_step(m, p, 2, 8, 100 + seed);
      CHECK((s.candidate_inhibition.array() >= 0).all());
      CHECK((s.candidate_excitation.array() >= 0).all());
      for (const auto* gate : {&s.gate_inhibition, &s.gate_excitation}) {
        CHECK((gate->array() > 0).all());
        CHECK((gate->array() < 1).all());
      }
      if (attention == Attention::kSigmoid) {
        CHECK((s.attention.array() > 0).all());
        CHECK((s.attention.array() < 1).all());
      } else {
        const auto& a = s.attention.value();
        for (Index b = 0; b < 2; ++b)
          for (Index c = 0; c < 4; ++c) {
            double total = 0;
            for (Index r = 0; r < 8; ++r)
              for (Index k = 0; k < 8; ++k) total += a.at(b, c, r, k);
            CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
          }
      }
    }
  }
}

TEST_CASE("state update is a convex combination") {
  const Model<float> m = small_model();
  const Bound<float> p = fixed(m);
  InTState<float> state = initial_state<float>(2, 4, 8, 8);
  for (int t = 0; t < 1000; ++t) {
    const auto z = encode_input(Var<float>(random_frames(2, 8, 500 + static_cast<std::uint64_t>(t))), p[int_param::kWz],
                                p[int_param::kBz]);
    const auto s = int_step(state, z, p, m.arch.variant, t);
    const auto check = [](const Tensor<float>& prev, const Tensor<float>& cand, const Tensor<float>& next) {
      const Eigen::ArrayXf lo = prev.array().min(cand.array()), hi = prev.array().max(cand.array());
      const Eigen::ArrayXf slack = 1e-5f * (1.0f + hi.abs());
      return ((next.array() >= lo - slack) && (next.array() <= hi + slack)).all();
    };
    CHECK(check(state.inhibition.value(), s.candidate_inhibition.value(), s.state.inhibition.value()));
    CHECK(check(state.excitation.value(), s.candidate_excitation.value(), s.state.excitation.value()));
    CHECK((s.candidate_inhibition.array() >= 0).all());
    CHECK((s.candidate_excitation.array() >= 0).all());
    state = s.state;
  }
}

TEST_CASE("full gain lesion reduces the candidates") {
  VariantSpec v;
  v.lesioned = {true, true, true, true};
  const Model<float> m = small_model(v);
  for (int k = int_param::kGamma; k <= int_param::kMu; ++k) CHECK((m.params[static_cast<std::size_t>(k)].array() == 0).all());
  const Bound<float> p = fixed(m);
  const InTState<float> prev{Var<float>(random_positive({2, 4, 8, 8}, 20)), Var<float>(random_positive({2, 4, 8, 8}, 21))};
  const auto z = encode_input(Var<float>(random_frames(2, 8, 22)), p[int_param::kWz], p[int_param::kBz]);
  const auto s = int_step(prev, z, p, v);
  CHECK((s.candidate_inhibition.array() == softplus(z).array()).all());
  CHECK((s.candidate_excitation.array() == softplus(s.state.inhibition).array()).all());

  VariantSpec t = v;
  t.rectifier = Rectifier::kTanh;
  const auto st = int_step(prev, z, fixed(small_model(t)), t);
  CHECK((st.candidate_inhibition.array() == intrack::tanh(z).array()).all());
}

TEST_CASE("disabled attention is all ones") {
  VariantSpec v;
  v.attention = Attention::kDisabled;
  const Model<float> m = small_model(v);
  const auto s = one_step(m, fixed(m), 1, 8, 30);
  CHECK((s.attention.array() == 1).all());
}

TEST_CASE("single-frame sequence equals one step") {
  const Model<float> m = small_model();
  const Bound<float> p = fixed(m);
  const std::vector<Var<float>> frames{Var<float>(random_frames(2, 8, 40))};
  const auto seq = run_sequence(std::span<const Var<float>>(frames), p, m.arch.variant);
  const auto z = encode_input(frames[0], p[int_param::kWz], p[int_param::kBz]);
  const auto step = int_step(initial_state<float>(2, 4, 8, 8), z, p, m.arch.variant);
  CHECK((seq.final_state.array() == step.state.excitation.array()).all());
  REQUIRE(seq.attention.size() == 1);
  CHECK((seq.attention[0].array() == step.attention.array()).all());
}

TEST_CASE("shared weights receive the sum of per-step gradients") {
  using namespace int_param;
  const Model<double> m = small_model().cast<double>();
  std::vector<Var<double>> frames;
  for (int t = 0; t < 4; ++t) frames.emplace_back(random_frames(2, 8, 50 + static_cast<std::uint64_t>(t)).cast<double>());
  const auto loss_of = [&](const Var<double>& final_state, Tape<double>&) { return sum(final_state); };

  Tape<double> shared_tape;
  const Bound<double> p = bind(m, &shared_tape);
  const auto shared = shared_tape.backward(loss_of(run_sequence(std::span<const Var<double>>(frames), p, m.arch.variant).final_state, shared_tape));
  const Tensor<double> total = shared[p[kWei]];

  Tape<double> split_tape;
  const Bound<double> base = bind(m, &split_tape);
  std::vector<Var<double>> copies;
  InTState<double> state = initial_state<double>(2, 4, 8, 8);
  for (int t = 0; t < 4; ++t) {
    Bound<double> pt = base;
    copies.push_back(split_tape.leaf(m.params[kWei]));
    pt[kWei] = copies.back();
    const auto z = encode_input(frames[static_cast<std::size_t>(t)], pt[kWz], pt[kBz]);
    state = int_step(state, z, pt, m.arch.variant, t).state;
  }
  const auto split = split_tape.backward(loss_of(state.excitation, split_tape));
  Tensor<double> summed(total.shape());
  for (const auto& c : copies) {
    CHECK(split[c].array().abs().maxCoeff() > 0);
    summed.array() += split[c].array();
  }
  CHECK((total.array() - summed.array()).abs().maxCoeff() <= 1e-10 * (1 + total.array().abs().maxCoeff()));
}

TEST_CASE("long unroll with an empty tail stays finite") {
  const Model<float> m = Model<float>::initialize({ModelKind::kInT, 32, {}}, 4);
  const Bound<float> p = fixed(m);
  std::vector<Var<float>> frames;
  for (int t = 0; t < 64; ++t) frames.emplace_back(random_frames(1, 32, 60 + static_cast<std::uint64_t>(t)));
  for (int t = 0; t < 64; ++t) frames.emplace_back(Tensor<float>({1, 3, 32, 32}));
  const auto seq = run_sequence(std::span<const Var<float>>(frames), p, m.arch.variant, false);
  CHECK(seq.final_state.value().all_finite());
}

TEST_CASE("non-finite activity reports the timestep") {
  const Model<float> m = small_model();
  const Bound<float> p = fixed(m);
  std::vector<Var<float>> frames;
  for (int t = 0; t < 4; ++t) {
    Tensor<float> f = random_frames(1, 8, 70 + static_cast<std::uint64_t>(t));
    if (t == 2) f[5] = std::numeric_limits<float>::quiet_NaN();
    frames.emplace_back(f);
  }
  try {
    run_sequence(std::span<const Var<float>>(frames), p, m.arch.variant);
    FAIL("expected NumericDivergence");
  } catch (const NumericDivergence& e) {
    CHECK(e.timestep() == 2);
  }
}

TEST_CASE("readout") {
  using namespace int_param;
  Model<float> m = small_model();
  SUBCASE("zero readout is chance") {
    for (int k : {kWr1, kBr1, kWr2, kBr2}) m.params[k].array().setZero();
    const Bound<float> p = fixed(m);
    const auto logit = readout(Var<float>(random_positive({1, 4, 8, 8}, 80)), Var<float>(goal_channel(random_frames(1, 8, 81))),
                               p[kWr1], p[kBr1], p[kWr2], p[kBr2]);
    CHECK(logit.value()[0] == 0.0f);
    CHECK(sigmoid(logit).value()[0] == 0.5f);
  }
  SUBCASE("translation invariance for interior activity") {
    for (int k : {kBr1, kBr2}) m.params[k].array().setConstant(0.3f);
    const Bound<float> p = fixed(m);
    const Index size = 24;
    Tensor<float> e({1, 4, size, size}), goal({1, 1, size, size});
    Tensor<float> e2 = e, goal2 = goal;
    std::mt19937_64 rng(82);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (Index c = 0; c < 4; ++c)
      for (Index r = 5; r < 12; ++r)
        for (Index k = 5; k < 12; ++k) {
          const float v = u(rng);
          e.at(0, c, r, k) = v;
          e2.at(0, c, r + 4, k + 6) = v;
        }
    for (Index r = 6; r < 11; ++r)
      for (Index k = 6; k < 11; ++k) {
        goal.at(0, 0, r, k) = 1;
        goal2.at(0, 0, r + 4, k + 6) = 1;
      }
    const auto a = readout(Var<float>(e), Var<float>(goal), p[kWr1], p[kBr1], p[kWr2], p[kBr2]);
    const auto b = readout(Var<float>(e2), Var<float>(goal2), p[kWr1], p[kBr1], p[kWr2], p[kBr2]);
    CHECK(a.value()[0] == doctest::Approx(b.value()[0]).epsilon(1e-5));
  }
  SUBCASE("gradient with respect to the final state") {
    const Model<double> md = m.cast<double>();
    std::mt19937_64 rng(83);
    Tensor<double> e({2, 4, 6, 6});
    for (Index i = 0; i < e.size(); ++i) e[i] = std::uniform_real_distribution<double>(0, 2)(rng);
    const Tensor<double> goal = goal_channel(random_frames(2, 6, 84)).cast<double>();
    const auto r = check_gradient(
        "readout",
        [&](const std::vector<Var<double>>& in) {
          const Bound<double> p = fixed(md);
          return sum(readout(in[0], Var<double>(goal), p[kWr1], p[kBr1], p[kWr2], p[kBr2]));
        },
        {e});
    CAPTURE(r.max_relative_error);
    CHECK(r.passed);
  }
}

TEST_CASE("Conv-GRU limits") {
  using namespace gru_param;
  Model<float> m = Model<float>::initialize({ModelKind::kConvGru, 4, {}}, 5);
  const Var<float> h(random_positive({2, 4, 8, 8}, 90));
  SUBCASE("closed update gate keeps the state") {
    m.params[kWu].array().setZero();
    m.params[kUu].array().setZero();
    m.params[kBu].array().setConstant(-1e4f);
    const Bound<float> p = fixed(m);
    const auto z = encode_input(Var<float>(random_frames(2, 8, 91)), p[kWz], p[kBz]);
    CHECK((convgru_step(h, z, p).array() == h.array()).all());
  }
  SUBCASE("open gates take the candidate") {
    for (int k : {kWu, kUu, kWr, kUr}) m.params[k].array().setZero();
    m.params[kBu].array().setConstant(1e4f);
    m.params[kBr].array().setConstant(1e4f);
    const Bound<float> p = fixed(m);
    const auto z = encode_input(Var<float>(random_frames(2, 8, 91)), p[kWz], p[kBz]);
    const auto candidate = intrack::tanh(conv2d(z, p[kWc], p[kBc]) + conv2d(h, p[kUc]));
    CHECK(max_abs_diff(convgru_step(h, z, p).value(), candidate.value()) < 1e-5f);
  }
}

TEST_CASE("variant labels and checkpoints") {
  std::vector<VariantSpec> variants(5);
  variants[1].rectifier = Rectifier::kTanh;
  variants[2].attention = Attention::kDisabled;
  variants[3].attention = Attention::kSpatialSoftmax;
  variants[4].lesioned = {true, false, true, false};
  CHECK(variants[0].name() == "complete");
  CHECK(variants[1].name() == "complete+tanh");
  CHECK(variants[2].name() == "no_attention");
  for (const auto& v : variants) {
    CHECK(VariantSpec::parse(v.name()) == v);
    CHECK(VariantSpec::from_json(v.to_json()) == v);
    const Model<float> m = small_model(v, 4, 9);
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(to_checkpoint(m, R"({"epoch": 3})")));
    const Model<float> back = model_from_checkpoint(ck);
    CHECK(back.arch == m.arch);
    REQUIRE(back.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      CHECK(back.params[i].shape() == m.params[i].shape());
      CHECK(std::memcmp(back.params[i].data(), m.params[i].data(), sizeof(float) * static_cast<std::size_t>(m.params[i].size())) == 0);
    }
    CHECK(checkpoint_meta(ck).find("\"epoch\"") != std::string::npos);
  }
  auto bytes = encode_checkpoint(to_checkpoint(small_model()));
  bytes[0] = 'X';
  CHECK_THROWS(decode_checkpoint(bytes));
}
