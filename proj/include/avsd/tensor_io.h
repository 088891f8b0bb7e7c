// include/avsd/tensor_io.h

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Tensor container: one JSON header line followed by raw little-endian f32
// data, row-major, tensors concatenated in header order.
//
//   {"dtype":"f32","byte_order":"little","tensors":[{"name":"x","shape":[2,3]}],"meta":{...}}\n
//   <24 bytes>
//
// A tensor of any rank is held in memory as a Matrix with rows = shape[0]
// and cols = product of the remaining dimensions.

#include <filesystem>
#include <string>
#include <vector>

#include "avsd/base.h"
#include "json.hpp"

namespace avsd {

struct NamedTensor {
  std::string name;
  std::vector<int64_t> shape;
  Matrix data;
};

struct TensorFile {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  void add(std::string name, const Matrix &m);
  void add(std::string name, std::vector<int64_t> shape, const Matrix &m);
  bool contains(const std::string &name) const;
  const NamedTensor &get(const std::string &name) const;
};

void write_tensor_file(const std::filesystem::path &path, const TensorFile &file);
TensorFile read_tensor_file(const std::filesystem::path &path);

std::string tensor_file_to_bytes(const TensorFile &file);
TensorFile tensor_file_from_bytes(const std::string &bytes, const std::string &origin = "<memory>");

}  // namespace avsd
