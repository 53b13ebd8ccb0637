#include "sparling/checkpoint.hpp"

#include <fstream>

#include "sparling/binio.hpp"

namespace sparling {

void Checkpoint::put(std::string name, Tensor value) {
  for (auto& r : records) {
    if (r.name == name) {
      r.value = std::move(value);
      return;
    }
  }
  records.push_back(CheckpointRecord{std::move(name), std::move(value)});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return r.value;
  }
  throw binio::FormatError("checkpoint has no record '" + name + "'");
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("SPRL", 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_string(os, ckpt.meta.dump());
  binio::put_u32(os, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    binio::put_string(os, r.name);
    binio::put_u32(os, static_cast<std::uint32_t>(r.value.rank()));
    for (int d : r.value.shape()) binio::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : r.value.data()) binio::put_f32(os, v);
  }
  if (!os) throw binio::FormatError("checkpoint write failed");
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw binio::FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, ckpt);
}

Checkpoint read_checkpoint(std::istream& is) {
  binio::expect_magic(is, "SPRL");
  const std::uint32_t version = binio::get_u32(is);
  if (version != kCheckpointVersion) {
    throw binio::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::ordered_json::parse(binio::get_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw binio::FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  const std::uint32_t count = binio::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = binio::get_string(is, 4096);
    const std::uint32_t rank = binio::get_u32(is);
    if (rank > 8) throw binio::FormatError("record '" + name + "' has implausible rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = binio::get_u32(is);
      if (dim == 0 || dim > (1u << 24)) throw binio::FormatError("record '" + name + "' has invalid dimension");
      shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    if (n > (std::size_t{1} << 28)) throw binio::FormatError("record '" + name + "' too large");
    std::vector<float> data(n);
    for (float& v : data) v = binio::get_f32(is);
    ckpt.records.push_back(CheckpointRecord{std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return ckpt;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw binio::FormatError("cannot open " + path);
  return read_checkpoint(is);
}

void put_sparsity(Checkpoint& ckpt, const SparsityState& state) {
  ckpt.put("sparsity/thresholds", state.thresholds);
  auto& s = ckpt.meta["sparsity"];
  s["variant"] = state.variant == ThresholdVariant::MultiThreshold ? "MT" : "ST";
  s["channels"] = state.channels;
  s["density"] = state.density;
  s["momentum"] = state.momentum;
}

SparsityState get_sparsity(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("sparsity")) throw binio::FormatError("checkpoint has no sparsity state");
  const auto& s = ckpt.meta.at("sparsity");
  const auto variant =
      s.at("variant").get<std::string>() == "ST" ? ThresholdVariant::SingleThreshold : ThresholdVariant::MultiThreshold;
  SparsityState state(s.at("channels").get<int>(), s.at("density").get<double>(), variant,
                      s.at("momentum").get<double>());
  const Tensor& t = ckpt.get("sparsity/thresholds");
  if (t.shape() != state.thresholds.shape()) throw binio::FormatError("sparsity thresholds have the wrong shape");
  state.thresholds = t;
  return state;
}

void put_optimizer(Checkpoint& ckpt, const OptimizerState& state, const std::vector<std::string>& param_names) {
  auto& o = ckpt.meta["adam"];
  o["learning_rate"] = state.learning_rate;
  o["beta1"] = state.beta1;
  o["beta2"] = state.beta2;
  o["epsilon"] = state.epsilon;
  o["step"] = state.step;
  if (state.first_moment.empty()) return;
  for (std::size_t i = 0; i < param_names.size(); ++i) {
    ckpt.put("adam/m/" + param_names[i], state.first_moment.at(i));
    ckpt.put("adam/v/" + param_names[i], state.second_moment.at(i));
  }
}

OptimizerState get_optimizer(const Checkpoint& ckpt, const std::vector<std::string>& param_names) {
  if (!ckpt.meta.contains("adam")) throw binio::FormatError("checkpoint has no optimizer state");
  const auto& o = ckpt.meta.at("adam");
  OptimizerState state;
  state.learning_rate = o.at("learning_rate").get<double>();
  state.beta1 = o.at("beta1").get<double>();
  state.beta2 = o.at("beta2").get<double>();
  state.epsilon = o.at("epsilon").get<double>();
  state.step = o.at("step").get<std::int64_t>();
  if (!param_names.empty() && ckpt.has("adam/m/" + param_names.front())) {
    for (const auto& name : param_names) {
      state.first_moment.push_back(ckpt.get("adam/m/" + name));
      state.second_moment.push_back(ckpt.get("adam/v/" + name));
    }
  }
  return state;
}

}  // namespace sparling
