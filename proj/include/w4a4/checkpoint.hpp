#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "w4a4/model.hpp"

namespace w4a4 {

/// AdamW moments, one pair per entry of Model::parameters().
struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// Everything a run needs to resume besides the config.
struct Checkpoint {
  std::unique_ptr<Model> model;
  std::string model_id;
  std::size_t step = 0;
  OptimizerState opt;
  std::string rng_state;
};

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kPtqVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Writes `<base>.json` (manifest) and `<base>.bin` (f32 little-endian tensors,
/// then packed weight codes for converted models). `opt` may be empty.
void save_checkpoint(const std::filesystem::path& base, Model& model, const std::string& model_id, std::size_t step,
                     const OptimizerState& opt = {}, const std::string& rng_state = {});
/// `path` may name the base, the .json or the .bin. Throws InputError on
/// missing or malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace w4a4
