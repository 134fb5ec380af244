#include "intrack/circuit.hpp"

#include <json.hpp>

#include <algorithm>
#include <sstream>

namespace intrack {

namespace {

using nlohmann::json;

constexpr std::array<const char*, 4> kGainNames = {"gamma", "beta", "nu", "mu"};

const char* to_string(Rectifier r) { return r == Rectifier::kSoftplus ? "softplus" : "tanh"; }

const char* to_string(Attention a) {
  switch (a) {
    case Attention::kSigmoid: return "sigmoid";
    case Attention::kSpatialSoftmax: return "spatial_softmax";
    case Attention::kDisabled: return "disabled";
  }
  return "?";
}

Rectifier parse_rectifier(const std::string& s) {
  if (s == "softplus") return Rectifier::kSoftplus;
  if (s == "tanh") return Rectifier::kTanh;
  throw std::invalid_argument("unknown rectifier '" + s + "'");
}

Attention parse_attention(const std::string& s) {
  if (s == "sigmoid") return Attention::kSigmoid;
  if (s == "spatial_softmax") return Attention::kSpatialSoftmax;
  if (s == "disabled") return Attention::kDisabled;
  throw std::invalid_argument("unknown attention '" + s + "'");
}

json variant_json(const VariantSpec& v) {
  json lesions = json::array();
  for (std::size_t i = 0; i < 4; ++i)
    if (v.lesioned[i]) lesions.push_back(kGainNames[i]);
  return {{"rectifier", to_string(v.rectifier)}, {"attention", to_string(v.attention)}, {"lesions", lesions}};
}

VariantSpec variant_from(const json& j) {
  VariantSpec v;
  v.rectifier = parse_rectifier(j.at("rectifier").get<std::string>());
  v.attention = parse_attention(j.at("attention").get<std::string>());
  for (const auto& l : j.at("lesions")) {
    const auto name = l.get<std::string>();
    auto it = std::find(kGainNames.begin(), kGainNames.end(), name);
    if (it == kGainNames.end()) throw std::invalid_argument("unknown lesion '" + name + "'");
    v.lesioned[static_cast<std::size_t>(it - kGainNames.begin())] = true;
  }
  return v;
}

}  // namespace

bool VariantSpec::complete() const { return *this == VariantSpec{}; }

std::string VariantSpec::name() const {
  if (complete()) return "complete";
  std::vector<std::string> parts;
  if (rectifier == Rectifier::kTanh) parts.push_back(attention == Attention::kSigmoid ? "complete+tanh" : "tanh");
  if (attention == Attention::kDisabled) parts.push_back("no_attention");
  if (attention == Attention::kSpatialSoftmax) parts.push_back("spatial_softmax");
  std::string lesions;
  for (std::size_t i = 0; i < 4; ++i)
    if (lesioned[i]) lesions += (lesions.empty() ? "" : ",") + std::string(kGainNames[i]);
  if (!lesions.empty()) parts.push_back("lesion:" + lesions);
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "+") + p;
  return out;
}

VariantSpec VariantSpec::parse(const std::string& label) {
  VariantSpec v;
  std::stringstream ss(label);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "complete") continue;
    if (part == "tanh") v.rectifier = Rectifier::kTanh;
    else if (part == "no_attention") v.attention = Attention::kDisabled;
    else if (part == "spatial_softmax") v.attention = Attention::kSpatialSoftmax;
    else if (part.rfind("lesion:", 0) == 0) {
      std::stringstream gains(part.substr(7));
      std::string g;
      while (std::getline(gains, g, ',')) {
        auto it = std::find(kGainNames.begin(), kGainNames.end(), g);
        if (it == kGainNames.end()) throw std::invalid_argument("unknown lesion '" + g + "' in variant '" + label + "'");
        v.lesioned[static_cast<std::size_t>(it - kGainNames.begin())] = true;
      }
    } else {
      throw std::invalid_argument("unknown variant component '" + part + "' in '" + label + "'");
    }
  }
  return v;
}

std::string VariantSpec::to_json() const { return variant_json(*this).dump(); }

VariantSpec VariantSpec::from_json(const std::string& text) { return variant_from(json::parse(text)); }

std::string Architecture::to_json() const {
  return json{{"model", kind == ModelKind::kInT ? "int" : "convgru"},
              {"channels", channels},
              {"variant", variant_json(variant)}}
      .dump();
}

Architecture Architecture::from_json(const std::string& text) {
  const json j = json::parse(text);
  Architecture a;
  const auto model = j.at("model").get<std::string>();
  if (model == "int") a.kind = ModelKind::kInT;
  else if (model == "convgru") a.kind = ModelKind::kConvGru;
  else throw std::invalid_argument("unknown model '" + model + "'");
  a.channels = j.at("channels").get<int>();
  a.variant = variant_from(j.at("variant"));
  return a;
}

std::string Architecture::describe() const {
  std::ostringstream os;
  os << (kind == ModelKind::kInT ? "InT" : "ConvGRU") << "(channels=" << channels;
  if (kind == ModelKind::kInT) os << ", variant=" << variant.name();
  os << ")";
  return os.str();
}

std::vector<std::string> parameter_names(ModelKind kind) {
  if (kind == ModelKind::kInT)
    return {"w_z",   "b_z",  "w_ei", "w_ie",      "w_a",       "b_a",       "w_g",       "u_g",
            "b_g",   "w_h",  "u_h",  "b_h",       "gamma",     "beta",      "nu",        "mu",
            "bn1_scale", "bn1_shift", "bn2_scale", "bn2_shift", "w_r1", "b_r1", "w_r2", "b_r2"};
  return {"w_z", "b_z", "w_u", "u_u", "b_u", "w_r", "u_r", "b_r",
          "w_c", "u_c", "b_c", "w_r1", "b_r1", "w_r2", "b_r2"};
}

std::vector<Shape> parameter_shapes(ModelKind kind, int channels) {
  const Index c = channels;
  const Shape pointwise{1, 1, c, c}, spatial{5, 5, c, c}, vec{c};
  const Shape encoder{1, 1, 3, c};
  const Shape r1{1, 1, c, 1}, r1b{1}, r2{5, 5, 2, 1}, r2b{1};
  if (kind == ModelKind::kInT)
    return {encoder, vec, spatial, spatial, pointwise, vec, pointwise, pointwise,
            vec,     pointwise, pointwise, vec, vec, vec, vec, vec,
            vec,     vec, vec, vec, r1, r1b, r2, r2b};
  return {encoder, vec, pointwise, spatial, vec, pointwise, spatial, vec,
          pointwise, spatial, vec, r1, r1b, r2, r2b};
}

}  // namespace intrack
