#pragma once

// Checkpoint layout:
//   8 bytes   magic "ICLCKPT1"
//   8 bytes   header length L (little-endian u64)
//   L bytes   JSON header: {"model": ModelConfig, "seed", "step",
//                           "params": [{"name", "shape", "trainable"}...]}
//   then, for each param in header order, its values as little-endian f64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icl/model.hpp"

namespace icl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const IclModel& model, const CheckpointInfo& info,
                            const std::filesystem::path& path) {
  nlohmann::json header;
  header["model"] = to_json(model.config());
  header["seed"] = info.seed;
  header["step"] = info.step;
  header["params"] = nlohmann::json::array();
  for (const Param* p : model.parameters()) {
    header["params"].push_back(
        {{"name", p->name}, {"shape", p->value.shape()}, {"trainable", p->trainable}});
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Param* p : model.parameters()) {
    out.write(reinterpret_cast<const char*>(p->value.raw()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

struct LoadedCheckpoint {
  IclModel model;
  CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  if (len > (1u << 24)) throw IoError("checkpoint header too large: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint out{IclModel(model_config_from_json(header.at("model")), Rng(0)),
                       {header.at("seed").get<std::uint64_t>(),
                        header.at("step").get<std::uint64_t>()}};
  auto params = out.model.parameters();
  const auto& entries = header.at("params");
  if (entries.size() != params.size()) {
    throw IoError("checkpoint " + path.string() + " holds " + std::to_string(entries.size()) +
                  " params, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != p.name ||
        e.at("shape").get<Shape>() != p.value.shape()) {
      throw IoError("checkpoint param " + std::to_string(i) + " ('" +
                    e.at("name").get<std::string>() + "') does not match model param '" +
                    p.name + "'");
    }
    p.trainable = e.at("trainable").get<bool>();
    in.read(reinterpret_cast<char*>(p.value.raw()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint data: " + path.string());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes after checkpoint data: " + path.string());
  }
  return out;
}

}  // namespace icl
