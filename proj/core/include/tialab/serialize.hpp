// SPDX-License-Identifier: Apache-2.0
//
// Tensor blob: "TLAB1", u32 rank, u64 extents[rank], then numel f32 values.
// All integers and floats little-endian, values row-major.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "tialab/tensor.hpp"

namespace tialab {

inline constexpr char kBlobMagic[] = "TLAB1";

template <typename T>
void write_blob(std::ostream& os, const Tensor<T>& t);

// Throws LoadError on a malformed or truncated blob.
template <typename T>
Tensor<T> read_blob(std::istream& is);

template <typename T>
void save_blob(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_blob(const std::filesystem::path& path);

// Manifest: one line "<name> <rank> <extents...> trainable=<0|1>" per
// parameter; `blobs` holds the tensors in manifest order.
void save_parameters(const std::vector<const Parameter<float>*>& params, const std::filesystem::path& manifest,
                     const std::filesystem::path& blobs);
// Names and shapes must match `params` exactly (LoadError otherwise). The
// trainable flags of `params` are kept.
void load_parameters(const std::vector<Parameter<float>*>& params, const std::filesystem::path& manifest,
                     const std::filesystem::path& blobs);

}  // namespace tialab
