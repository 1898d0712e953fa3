#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "arsim/tensor.hpp"

namespace arsim {

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Contents of a tensor container file: a 4-byte magic, a version, an opaque
/// text header (empty for datasets, the serialized config for checkpoints) and
/// a table of named f32 tensors.
struct TensorFile {
    uint32_t version = 1;
    std::string header;
    std::vector<NamedTensor> tensors;

    const Tensor* find(const std::string& name) const;
    /// Throws FileError(Format) naming `path` when the tensor is absent.
    const Tensor& at(const std::string& name, const std::string& path) const;
};

// Layout (all little-endian):
//   magic[4] u32 version u32 header_len header[header_len] u32 n_tensors
//   n x { u32 name_len name u32 dtype(0 = f32) u32 rank u32 dims[rank] u64 offset }
//   payloads (raw f32) at the recorded absolute offsets
void write_tensor_file(const std::string& path, const std::array<char, 4>& magic, const TensorFile& file);

/// Throws FileError: Io (cannot open), Format (bad magic/dtype/table),
/// Version (unsupported version), Truncated (payload past end of file).
TensorFile read_tensor_file(const std::string& path, const std::array<char, 4>& magic, uint32_t max_version);

}  // namespace arsim
