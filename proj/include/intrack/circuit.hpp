// The InT recurrent circuit, its lesion variants, the PathTracker readout and a
// Conv-GRU reference cell. Everything is templated on the scalar type so the
// same code runs in float for training and double for gradient checks.
#pragma once

#include "intrack/ops.hpp"
#include "intrack/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace intrack {

enum class Rectifier { kSoftplus, kTanh };
enum class Attention { kSigmoid, kSpatialSoftmax, kDisabled };
enum class Gain { kGamma = 0, kBeta = 1, kNu = 2, kMu = 3 };
enum class ModelKind { kInT, kConvGru };

struct VariantSpec {
  Rectifier rectifier = Rectifier::kSoftplus;
  Attention attention = Attention::kSigmoid;
  std::array<bool, 4> lesioned{};  // indexed by Gain

  bool lesions(Gain g) const { return lesioned[static_cast<std::size_t>(g)]; }
  bool complete() const;
  /// Short label such as "complete", "complete+tanh", "no_attention", "lesion:gamma,beta".
  std::string name() const;
  std::string to_json() const;
  static VariantSpec from_json(const std::string& text);
  /// Parses the labels produced by name().
  static VariantSpec parse(const std::string& label);

  bool operator==(const VariantSpec&) const = default;
};

struct Architecture {
  ModelKind kind = ModelKind::kInT;
  int channels = 32;
  VariantSpec variant;

  std::string to_json() const;
  static Architecture from_json(const std::string& text);
  std::string describe() const;
  bool operator==(const Architecture&) const = default;
};

class NumericDivergence : public std::runtime_error {
 public:
  explicit NumericDivergence(int timestep)
      : std::runtime_error("non-finite activity at timestep " + std::to_string(timestep)), timestep_(timestep) {}
  int timestep() const { return timestep_; }

 private:
  int timestep_;
};

/// Parameter slots of the InT circuit.
namespace int_param {
enum Id : int {
  kWz, kBz,            // input encoder, 1x1x3xC
  kWei, kWie,          // horizontal kernels, 5x5xCxC
  kWa, kBa,            // attention, 1x1xCxC
  kWg, kUg, kBg,       // inhibitory gate
  kWh, kUh, kBh,       // excitatory gate
  kGamma, kBeta, kNu, kMu,
  kBn1Scale, kBn1Shift, kBn2Scale, kBn2Shift,
  kWr1, kBr1, kWr2, kBr2,  // readout
  kCount
};
}  // namespace int_param

/// Parameter slots of the Conv-GRU baseline.
namespace gru_param {
enum Id : int {
  kWz, kBz,
  kWu, kUu, kBu,  // update gate: 1x1 over Z, 5x5 over state
  kWr, kUr, kBr,  // reset gate
  kWc, kUc, kBc,  // candidate
  kWr1, kBr1, kWr2, kBr2,
  kCount
};
}  // namespace gru_param

std::vector<std::string> parameter_names(ModelKind kind);
std::vector<Shape> parameter_shapes(ModelKind kind, int channels);

/// Architecture plus its parameter tensors, in slot order.
template <typename Scalar>
struct Model {
  Architecture arch;
  std::vector<Tensor<Scalar>> params;

  /// Lesioned gain slots; they stay at zero and receive no updates.
  bool frozen(int slot) const {
    if (arch.kind != ModelKind::kInT) return false;
    if (slot < int_param::kGamma || slot > int_param::kMu) return false;
    return arch.variant.lesioned[static_cast<std::size_t>(slot - int_param::kGamma)];
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& t : params) n += t.size();
    return n;
  }

  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out{arch, {}};
    for (const auto& t : params) out.params.push_back(t.template cast<Other>());
    return out;
  }

  /// Fan-in uniform kernels, gains (1,0,1,0), BN scales 0.1, zero biases.
  static Model initialize(const Architecture& arch, std::uint64_t seed);
};

template <typename Scalar>
using Bound = std::vector<Var<Scalar>>;

/// Exposes the parameters as tape leaves (or untracked constants when `tape` is null).
template <typename Scalar>
Bound<Scalar> bind(const Model<Scalar>& model, Tape<Scalar>* tape) {
  Bound<Scalar> out;
  out.reserve(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (tape) out.push_back(tape->leaf(model.params[i], !model.frozen(static_cast<int>(i))));
    else out.push_back(Var<Scalar>(model.params[i]));
  }
  return out;
}

template <typename Scalar>
struct InTState {
  Var<Scalar> inhibition;  // I
  Var<Scalar> excitation;  // E
};

/// Every intermediate of one InT update, exposed for inspection.
template <typename Scalar>
struct StepTrace {
  InTState<Scalar> state;
  Var<Scalar> attention;       // A_t
  Var<Scalar> attention_logits;  // W_a * E_prev + b_a, before the attention nonlinearity
  Var<Scalar> gate_inhibition; // G_t
  Var<Scalar> gate_excitation; // H_t
  Var<Scalar> candidate_inhibition;
  Var<Scalar> candidate_excitation;
};

/// Hidden states start at softplus(0) everywhere.
template <typename Scalar>
InTState<Scalar> initial_state(Index batch, Index channels, Index height, Index width) {
  const Scalar init = detail::softplus(Scalar(0));
  Tensor<Scalar> t({batch, channels, height, width}, init);
  return {Var<Scalar>(t), Var<Scalar>(t)};
}

/// Z = softplus(W_z * frame + b_z).
template <typename Scalar>
Var<Scalar> encode_input(const Var<Scalar>& frame, const Var<Scalar>& w_z, const Var<Scalar>& b_z) {
  if (frame.shape().size() != 4 || frame.dim(1) != w_z.dim(2))
    throw DimensionError("encode_input channel mismatch", frame.shape(), w_z.shape());
  return softplus(conv2d(frame, w_z, b_z));
}

namespace detail {

template <typename Scalar>
Var<Scalar> rectify(Rectifier r, const Var<Scalar>& x) {
  return r == Rectifier::kSoftplus ? softplus(x) : intrack::tanh(x);
}

template <typename Scalar>
void require_finite(const Var<Scalar>& v, int timestep) {
  if (!v.value().all_finite()) throw NumericDivergence(timestep);
}

}  // namespace detail

template <typename Scalar>
StepTrace<Scalar> int_step(const InTState<Scalar>& prev, const Var<Scalar>& z, const Bound<Scalar>& p,
                           const VariantSpec& variant, int timestep = 0) {
  using namespace int_param;
  const auto& i_prev = prev.inhibition;
  const auto& e_prev = prev.excitation;
  if (i_prev.shape() != z.shape() || e_prev.shape() != z.shape())
    throw DimensionError("int_step state/input mismatch", i_prev.shape(), z.shape());

  StepTrace<Scalar> out;
  if (variant.attention == Attention::kDisabled) {
    out.attention_logits = Var<Scalar>(Tensor<Scalar>(z.shape()));
    out.attention = Var<Scalar>(Tensor<Scalar>(z.shape(), Scalar(1)));
  } else {
    out.attention_logits = conv2d(e_prev, p[kWa], p[kBa]);
    out.attention = variant.attention == Attention::kSigmoid ? sigmoid(out.attention_logits)
                                                             : spatial_softmax(out.attention_logits);
  }
  const Var<Scalar> m = batchnorm_spatial(conv2d(e_prev, p[kWei]), p[kBn1Scale], p[kBn1Shift]);
  out.gate_inhibition = sigmoid(conv2d(i_prev, p[kWg]) + conv2d(z, p[kUg], p[kBg]));

  // I~ = rho(Z - (gamma . A . I + beta) . M)
  const Var<Scalar> inhibit = (out.attention * i_prev) * p[kGamma] + p[kBeta];
  out.candidate_inhibition = detail::rectify(variant.rectifier, z - inhibit * m);
  const Var<Scalar> i_next =
      i_prev + out.gate_inhibition * (out.candidate_inhibition - i_prev);

  const Var<Scalar> n = batchnorm_spatial(conv2d(i_next, p[kWie]), p[kBn2Scale], p[kBn2Shift]);
  out.gate_excitation = sigmoid(conv2d(e_prev, p[kWh]) + conv2d(i_next, p[kUh], p[kBh]));

  // E~ = rho(I + (nu . I + mu) . N)
  const Var<Scalar> excite = i_next * p[kNu] + p[kMu];
  out.candidate_excitation = detail::rectify(variant.rectifier, i_next + excite * n);
  const Var<Scalar> e_next =
      e_prev + out.gate_excitation * (out.candidate_excitation - e_prev);

  detail::require_finite(i_next, timestep);
  detail::require_finite(e_next, timestep);
  out.state = {i_next, e_next};
  return out;
}

/// h' = h + u . (tanh(W_c * Z + U_c * (r . h)) - h).
template <typename Scalar>
Var<Scalar> convgru_step(const Var<Scalar>& h, const Var<Scalar>& z, const Bound<Scalar>& p, int timestep = 0) {
  using namespace gru_param;
  if (h.shape() != z.shape()) throw DimensionError("convgru_step state/input mismatch", h.shape(), z.shape());
  const Var<Scalar> update = sigmoid(conv2d(z, p[kWu], p[kBu]) + conv2d(h, p[kUu]));
  const Var<Scalar> reset = sigmoid(conv2d(z, p[kWr], p[kBr]) + conv2d(h, p[kUr]));
  const Var<Scalar> candidate = intrack::tanh(conv2d(z, p[kWc], p[kBc]) + conv2d(reset * h, p[kUc]));
  Var<Scalar> next = h + update * (candidate - h);
  detail::require_finite(next, timestep);
  return next;
}

/// logit = mean(W_r2 * [W_r1 * E_T ; goal]).
template <typename Scalar>
Var<Scalar> readout(const Var<Scalar>& final_state, const Var<Scalar>& goal_channel, const Var<Scalar>& w_r1,
                    const Var<Scalar>& b_r1, const Var<Scalar>& w_r2, const Var<Scalar>& b_r2) {
  const Var<Scalar> r1 = conv2d(final_state, w_r1, b_r1);
  return global_mean(conv2d(concat_channels(r1, goal_channel), w_r2, b_r2));
}

template <typename Scalar>
struct SequenceResult {
  Var<Scalar> final_state;
  std::vector<Var<Scalar>> attention;  // one B x C x H x W map per frame (InT only)
  std::vector<Var<Scalar>> attention_logits;
};

/// Unrolls the InT over `frames` (each B x 3 x H x W) with shared weights.
template <typename Scalar>
SequenceResult<Scalar> run_sequence(std::span<const Var<Scalar>> frames, const Bound<Scalar>& p,
                                    const VariantSpec& variant, bool keep_attention = true) {
  if (frames.empty()) throw std::invalid_argument("run_sequence needs at least one frame");
  const Shape& s = frames.front().shape();
  const Index channels = p[int_param::kWz].dim(3);
  InTState<Scalar> state = initial_state<Scalar>(s[0], channels, s[2], s[3]);
  SequenceResult<Scalar> out;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const Var<Scalar> z = encode_input(frames[t], p[int_param::kWz], p[int_param::kBz]);
    StepTrace<Scalar> step = int_step(state, z, p, variant, static_cast<int>(t));
    state = step.state;
    if (keep_attention) {
      out.attention.push_back(step.attention);
      out.attention_logits.push_back(step.attention_logits);
    }
  }
  out.final_state = state.excitation;
  return out;
}

template <typename Scalar>
Var<Scalar> run_convgru(std::span<const Var<Scalar>> frames, const Bound<Scalar>& p) {
  if (frames.empty()) throw std::invalid_argument("run_convgru needs at least one frame");
  const Shape& s = frames.front().shape();
  const Index channels = p[gru_param::kWz].dim(3);
  Var<Scalar> h(Tensor<Scalar>({s[0], channels, s[2], s[3]}));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const Var<Scalar> z = encode_input(frames[t], p[gru_param::kWz], p[gru_param::kBz]);
    h = convgru_step(h, z, p, static_cast<int>(t));
  }
  return h;
}

/// Channel 2 (goal marker) of a B x 3 x H x W frame, as B x 1 x H x W.
template <typename Scalar>
Tensor<Scalar> goal_channel(const Tensor<Scalar>& frame) {
  const Index batch = frame.dim(0), plane = frame.dim(2) * frame.dim(3);
  Tensor<Scalar> out({batch, 1, frame.dim(2), frame.dim(3)});
  for (Index b = 0; b < batch; ++b)
    out.array().segment(b * plane, plane) = frame.array().segment((b * 3 + 2) * plane, plane);
  return out;
}

template <typename Scalar>
struct Forward {
  Var<Scalar> logits;                  // shape B
  std::vector<Var<Scalar>> attention;  // InT only
  std::vector<Var<Scalar>> attention_logits;
};

/// Full model: encoder, recurrent unroll and readout.
template <typename Scalar>
Forward<Scalar> forward(const Model<Scalar>& model, const Bound<Scalar>& p, std::span<const Var<Scalar>> frames,
                        bool keep_attention = false) {
  const Var<Scalar> goal(goal_channel(frames.front().value()));
  Forward<Scalar> out;
  if (model.arch.kind == ModelKind::kInT) {
    using namespace int_param;
    SequenceResult<Scalar> seq = run_sequence(frames, p, model.arch.variant, keep_attention);
    out.logits = readout(seq.final_state, goal, p[kWr1], p[kBr1], p[kWr2], p[kBr2]);
    out.attention = std::move(seq.attention);
    out.attention_logits = std::move(seq.attention_logits);
  } else {
    using namespace gru_param;
    const Var<Scalar> h = run_convgru(frames, p);
    out.logits = readout(h, goal, p[kWr1], p[kBr1], p[kWr2], p[kBr2]);
  }
  return out;
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::initialize(const Architecture& arch, std::uint64_t seed) {
  Model<Scalar> m{arch, {}};
  const auto names = parameter_names(arch.kind);
  const auto shapes = parameter_shapes(arch.kind, arch.channels);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor<Scalar> t(shapes[i]);
    const std::string& name = names[i];
    if (shapes[i].size() == 4) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shapes[i][0] * shapes[i][1] * shapes[i][2]));
      for (Index k = 0; k < t.size(); ++k) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        t[k] = static_cast<Scalar>((2.0 * u - 1.0) * bound);
      }
    } else if (name == "gamma" || name == "nu") {
      t.array().setConstant(Scalar(1));
    } else if (name == "bn1_scale" || name == "bn2_scale") {
      t.array().setConstant(Scalar(0.1));
    }
    m.params.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (m.frozen(static_cast<int>(i))) m.params[i].array().setZero();
  return m;
}

}  // namespace intrack
