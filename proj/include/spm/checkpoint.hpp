#pragma once

// Checkpoint container:
//
//   "SPMCKPT1"                      8-byte magic
//   u64 little-endian               manifest length in bytes
//   manifest (UTF-8, '\n' lines)
//     config<TAB>embed_dim=D<TAB>hidden_dim=H<TAB>source_vocab=Vs<TAB>target_vocab=Vt<TAB>layers=L
//     state<TAB>key=value ...       optional, free-form training state
//     tensor<TAB>name<TAB>d0xd1<TAB>offset<TAB>count
//   payload                         little-endian f64 values; offsets are
//                                   byte offsets from the payload start

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spm/model.hpp"

namespace spm {

inline constexpr char kCheckpointMagic[] = "SPMCKPT1";

struct Checkpoint {
  ModelParams params;
  std::map<std::string, std::string> state;
  std::vector<std::pair<std::string, Tensor>> extra;  // e.g. optimizer moments
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& state = {},
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reads only the config echo.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace spm
