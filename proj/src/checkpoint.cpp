#include "intrack/checkpoint.hpp"

#include "intrack/binary_io.hpp"

#include <json.hpp>

namespace intrack {

namespace {
constexpr char kMagic[4] = {'I', 'N', 'T', 'W'};
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(ckpt.header);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(tensor.rank()));
    for (Index d : tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(tensor.data(), sizeof(float) * static_cast<std::size_t>(tensor.size()));
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.header = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    nt.tensor = Tensor<float>(shape);
    r.get_bytes(nt.tensor.data(), sizeof(float) * static_cast<std::size_t>(nt.tensor.size()));
    ckpt.tensors.push_back(std::move(nt));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

Checkpoint to_checkpoint(const Model<float>& model, const std::string& meta_json) {
  nlohmann::json header{{"architecture", nlohmann::json::parse(model.arch.to_json())},
                        {"meta", nlohmann::json::parse(meta_json)}};
  Checkpoint ckpt{header.dump(), {}};
  const auto names = parameter_names(model.arch.kind);
  for (std::size_t i = 0; i < model.params.size(); ++i) ckpt.tensors.push_back({names[i], model.params[i]});
  return ckpt;
}

Architecture checkpoint_architecture(const Checkpoint& ckpt) {
  return Architecture::from_json(nlohmann::json::parse(ckpt.header).at("architecture").dump());
}

std::string checkpoint_meta(const Checkpoint& ckpt) {
  const auto header = nlohmann::json::parse(ckpt.header);
  return header.contains("meta") ? header["meta"].dump() : "{}";
}

Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<float> model{checkpoint_architecture(ckpt), {}};
  const auto names = parameter_names(model.arch.kind);
  const auto shapes = parameter_shapes(model.arch.kind, model.arch.channels);
  if (ckpt.tensors.size() != names.size())
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, " +
                      model.arch.describe() + " needs " + std::to_string(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& nt = ckpt.tensors[i];
    if (nt.name != names[i]) throw FormatError("checkpoint tensor '" + nt.name + "' where '" + names[i] + "' expected");
    if (nt.tensor.shape() != shapes[i])
      throw DimensionError("checkpoint tensor '" + nt.name + "' shape", nt.tensor.shape(), shapes[i]);
    model.params.push_back(nt.tensor);
  }
  return model;
}

}  // namespace intrack
