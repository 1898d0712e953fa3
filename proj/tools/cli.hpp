#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "arsim/tensor_file.hpp"

namespace arsim::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Rollout output file: images [N+1, V, H, W, 3] and latents [N+1, V, S, C]
/// (frame 0 is the ground-truth initial frame) plus a key=value header.
inline constexpr const char* kRolloutFile = "rollout.bin";
void write_rollout_file(const std::string& path, const TensorFile& file);
TensorFile read_rollout_file(const std::string& path);

}  // namespace arsim::cli
