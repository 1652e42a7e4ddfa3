#include "tiledit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "config_json.hpp"
#include "json.hpp"

namespace tiledit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'V', 'D', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

json config_json(const DitConfig& c) {
  return {{"layers", c.layers},     {"heads", c.heads},   {"dim", c.dim},
          {"mlp_ratio", c.mlp_ratio}, {"frames", c.frames}, {"height", c.height},
          {"width", c.width},       {"channels", c.channels}, {"patch", c.patch},
          {"train_steps", c.train_steps}};
}

DitConfig config_from_json(const json& j) {
  DitConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.frames = j.at("frames").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.train_steps = j.at("train_steps").get<int>();
  return c;
}

std::vector<std::string> checkpoint_mask_paths(const std::string& path, std::size_t layers) {
  std::vector<std::string> out;
  for (std::size_t j = 0; j < layers; ++j) out.push_back(path + ".mask" + std::to_string(j) + ".json");
  return out;
}

void save_checkpoint(const std::string& path, const ToyDiT& m, const DiffusionSchedule& s) {
  m.validate();
  json meta;
  meta["config"] = config_json(m.config);
  meta["schedule"] = {{"kind", "linear"},
                      {"train_steps", s.train_steps()},
                      {"beta_start", s.beta_start()},
                      {"beta_end", s.beta_end()}};
  meta["dtype"] = "float64";
  json tensors = json::array();
  const auto named = named_tensors(m.params);
  for (const auto& [name, t] : named) tensors.push_back({{"name", name}, {"shape", t->shape()}});
  meta["tensors"] = tensors;

  const auto mask_paths = checkpoint_mask_paths(path, m.config.layers);
  json masks = json::array();
  for (std::size_t j = 0; j < mask_paths.size(); ++j) {
    save_mask_file(m.masks[j], mask_paths[j]);
    masks.push_back(fs::path(mask_paths[j]).filename().string());
  }
  meta["masks"] = masks;

  const std::string text = meta.dump();
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : named) {
    for (double v : t->values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string in = ss.str();
  if (in.size() < 16 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const auto version = static_cast<std::uint32_t>(get_le(in, 4, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported version " + std::to_string(version));
  const std::uint64_t meta_len = get_le(in, 8, 8);
  if (meta_len > in.size() - 16) throw CheckpointError(path + ": truncated metadata");

  json meta;
  try {
    meta = json::parse(in.substr(16, meta_len));
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": bad metadata: " + e.what());
  }

  Checkpoint ck;
  try {
    const DitConfig c = config_from_json(meta.at("config"));
    Rng dummy(0);
    ck.model = make_toy_dit(c, dummy);
    const auto& sj = meta.at("schedule");
    ck.schedule = DiffusionSchedule::linear(sj.at("train_steps").get<int>(),
                                            sj.at("beta_start").get<double>(),
                                            sj.at("beta_end").get<double>());
    if (meta.at("dtype") != "float64") throw CheckpointError(path + ": dtype must be float64");

    auto named = named_tensors(ck.model.params);
    const auto& tj = meta.at("tensors");
    if (tj.size() != named.size()) throw CheckpointError(path + ": tensor count mismatch");
    std::size_t pos = 16 + meta_len;
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto& [name, t] = named[i];
      if (tj[i].at("name").get<std::string>() != name ||
          tj[i].at("shape").get<std::vector<std::size_t>>() != t->shape()) {
        throw CheckpointError(path + ": unexpected tensor entry " + tj[i].dump());
      }
      if (in.size() - pos < t->size() * 8) throw CheckpointError(path + ": truncated payload");
      for (auto& v : t->values()) {
        v = std::bit_cast<double>(get_le(in, pos, 8));
        pos += 8;
      }
    }
    if (pos != in.size()) throw CheckpointError(path + ": trailing bytes after payload");

    const fs::path dir = fs::path(path).parent_path();
    std::vector<TileMask> masks;
    for (const auto& name : meta.at("masks")) masks.push_back(load_mask_file((dir / name.get<std::string>()).string()));
    ck.model.set_masks(std::move(masks));
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": bad metadata: " + e.what());
  }
  return ck;
}

}  // namespace tiledit
