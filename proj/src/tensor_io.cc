// src/tensor_io.cc

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

#include "avsd/tensor_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace avsd {

std::string shape_str(const Matrix &m) {
  return "(" + std::to_string(m.rows()) + ", " + std::to_string(m.cols()) + ")";
}

namespace {

int64_t product(const std::vector<int64_t> &shape, size_t from) {
  int64_t p = 1;
  for (size_t i = from; i < shape.size(); ++i) p *= shape[i];
  return p;
}

uint32_t to_little(uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

void TensorFile::add(std::string name, const Matrix &m) {
  add(std::move(name), {m.rows(), m.cols()}, m);
}

void TensorFile::add(std::string name, std::vector<int64_t> shape, const Matrix &m) {
  if (shape.empty() || shape[0] != m.rows() || product(shape, 1) != m.cols())
    throw ShapeError("tensor '" + name + "' shape does not match matrix " + shape_str(m));
  tensors.push_back({std::move(name), std::move(shape), m});
}

bool TensorFile::contains(const std::string &name) const {
  for (const auto &t : tensors)
    if (t.name == name) return true;
  return false;
}

const NamedTensor &TensorFile::get(const std::string &name) const {
  for (const auto &t : tensors)
    if (t.name == name) return t;
  throw Error("tensor '" + name + "' not found in container");
}

std::string tensor_file_to_bytes(const TensorFile &file) {
  nlohmann::json header;
  header["dtype"] = "f32";
  header["byte_order"] = "little";
  header["tensors"] = nlohmann::json::array();
  for (const auto &t : file.tensors)
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  header["meta"] = file.meta;

  std::string out = header.dump();
  out.push_back('\n');
  for (const auto &t : file.tensors) {
    const Real *p = t.data.data();
    for (Eigen::Index i = 0; i < t.data.size(); ++i) {
      uint32_t bits = to_little(std::bit_cast<uint32_t>(static_cast<float>(p[i])));
      char buf[4];
      std::memcpy(buf, &bits, 4);
      out.append(buf, 4);
    }
  }
  return out;
}

TensorFile tensor_file_from_bytes(const std::string &bytes, const std::string &origin) {
  size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ParseError(origin + ": missing tensor container header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(origin + ": bad container header: " + e.what());
  }
  if (header.value("dtype", "") != "f32" || header.value("byte_order", "") != "little")
    throw ParseError(origin + ": unsupported dtype/byte_order");

  TensorFile file;
  file.meta = header.value("meta", nlohmann::json::object());
  size_t offset = nl + 1;
  for (const auto &entry : header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<int64_t>>();
    if (t.shape.empty()) throw ParseError(origin + ": tensor '" + t.name + "' has empty shape");
    int64_t rows = t.shape[0], cols = product(t.shape, 1);
    size_t need = static_cast<size_t>(rows * cols) * 4;
    if (offset + need > bytes.size())
      throw ParseError(origin + ": truncated data for tensor '" + t.name + "'");
    t.data.resize(rows, cols);
    Real *p = t.data.data();
    for (int64_t i = 0; i < rows * cols; ++i) {
      uint32_t bits;
      std::memcpy(&bits, bytes.data() + offset + 4 * i, 4);
      p[i] = std::bit_cast<float>(to_little(bits));
    }
    offset += need;
    file.tensors.push_back(std::move(t));
  }
  if (offset != bytes.size()) throw ParseError(origin + ": trailing bytes after tensor data");
  return file;
}

void write_tensor_file(const std::filesystem::path &path, const TensorFile &file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  std::string bytes = tensor_file_to_bytes(file);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed: " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return tensor_file_from_bytes(ss.str(), path.string());
}

}  // namespace avsd
