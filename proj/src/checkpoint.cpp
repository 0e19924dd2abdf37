#include "mdd/checkpoint.hpp"

namespace mdd {

std::string encode_checkpoint(const Checkpoint& ck) {
  KeyValues meta = ck.metadata;
  for (const auto& [k, v] : ck.model.config().to_keys()) meta[k] = v;
  meta["schedule.steps"] = std::to_string(ck.schedule.steps());
  meta["schedule.beta_start"] = format_double(ck.schedule.beta_start());
  meta["schedule.beta_end"] = format_double(ck.schedule.beta_end());

  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.string(key_values_to_text(meta));
  const auto& params = ck.model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.string(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(p.value.values());
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  KeyValues meta = key_values_from_text(r.string());
  const ModelConfig config = ModelConfig::from_keys(meta);
  const int steps = std::stoi(meta.at("schedule.steps"));
  NoiseSchedule schedule(steps, parse_double(meta.at("schedule.beta_start")), parse_double(meta.at("schedule.beta_end")));

  const std::uint32_t count = r.u32();
  std::vector<Parameter<float>> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter<float> p;
    p.name = r.string();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    p.value = Tensor<float>(shape);
    r.f32s(p.value.values());
    params.push_back(std::move(p));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint parameters");

  // Only run metadata stays in `metadata`; architecture and schedule keys are
  // regenerated on encode.
  for (auto it = meta.begin(); it != meta.end();) {
    if (it->first.starts_with("arch.") || it->first.starts_with("schedule.")) {
      it = meta.erase(it);
    } else {
      ++it;
    }
  }
  return Checkpoint{DenoiserModel<float>(config, std::move(params), steps), std::move(schedule), std::move(meta)};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace mdd
