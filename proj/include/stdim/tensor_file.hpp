// Copyright 2026 The stdim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Named-tensor container.
//
// Layout:
//   [0, 8)        magic "STDIMNTC"
//   [8, 16)       u64 little-endian byte length N of the JSON index
//   [16, 16+N)    JSON index:
//                   { "format_version": 1,
//                     "metadata": {...},
//                     "payload_bytes": P,
//                     "tensors": [ {"name", "dtype": "f32"|"f64",
//                                   "shape": [...], "offset": bytes} ] }
//   [16+N, ...)   contiguous little-endian payload of P bytes

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "stdim/types.hpp"

namespace stdim {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host order; big-endian hosts unsupported");

inline constexpr int kTensorFileVersion = 1;
inline constexpr char kTensorFileMagic[8] = {'S', 'T', 'D', 'I', 'M', 'N', 'T', 'C'};

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

// Values are held as double in memory; f32 tensors round-trip exactly as long
// as every value is representable in float.
struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct TensorFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const NamedTensor& t) { return t.name == name; });
    return it == tensors.end() ? nullptr : &*it;
  }

  const NamedTensor& at(const std::string& name) const {
    const NamedTensor* t = find(name);
    if (t == nullptr) throw UnknownTensorError("tensor '" + name + "' not present in file");
    return *t;
  }

  void add(NamedTensor t) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel())
      throw DimensionError("tensor '" + t.name + "' data size does not match its shape");
    if (find(t.name) != nullptr) throw SchemaError("duplicate tensor name '" + t.name + "'");
    tensors.push_back(std::move(t));
  }
};

template <typename Derived>
NamedTensor make_tensor(std::string name, const Eigen::MatrixBase<Derived>& m,
                        DType dtype = DType::f32) {
  NamedTensor t;
  t.name = std::move(name);
  t.dtype = dtype;
  t.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  // Row-major on disk.
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t.data[k++] = static_cast<double>(m(r, c));
  return t;
}

template <typename Scalar>
Matrix<Scalar> tensor_to_matrix(const NamedTensor& t) {
  if (t.shape.size() != 2)
    throw DimensionError("tensor '" + t.name + "' is not rank 2");
  Matrix<Scalar> m(t.shape[0], t.shape[1]);
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<Scalar>(t.data[k++]);
  return m;
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  nlohmann::json index;
  index["format_version"] = kTensorFileVersion;
  index["metadata"] = file.metadata;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : file.tensors) {
    entries.push_back({{"name", t.name},
                       {"dtype", dtype_name(t.dtype)},
                       {"shape", t.shape},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype);
  }
  index["tensors"] = entries;
  index["payload_bytes"] = offset;
  const std::string header = index.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kTensorFileMagic, 8);
  const std::uint64_t n = header.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<char> buf;
  for (const auto& t : file.tensors) {
    buf.resize(t.data.size() * dtype_size(t.dtype));
    if (t.dtype == DType::f32) {
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const float v = static_cast<float>(t.data[i]);
        std::memcpy(buf.data() + 4 * i, &v, 4);
      }
    } else {
      std::memcpy(buf.data(), t.data.data(), buf.size());
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";

  if (bytes.size() < 16 || std::memcmp(bytes.data(), kTensorFileMagic, 8) != 0)
    throw FormatError("bad magic" + where);
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + 8, 8);
  if (n > bytes.size() - 16) throw FormatError("index length exceeds file size" + where);

  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("unparsable index") + where + ": " + e.what());
  }
  if (!index.contains("format_version") || !index["format_version"].is_number_integer())
    throw FormatError("missing format_version" + where);
  if (index["format_version"].get<int>() != kTensorFileVersion)
    throw FormatError("unsupported format_version " + index["format_version"].dump() + where);

  TensorFile file;
  const std::size_t base = 16 + n;
  try {
    file.metadata = index.value("metadata", nlohmann::json::object());
    const auto payload = index.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() - base < payload)
      throw TruncatedError("payload has " + std::to_string(bytes.size() - base) + " of " +
                           std::to_string(payload) + " bytes" + where);
    for (const auto& e : index.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      const auto dt = e.at("dtype").get<std::string>();
      if (dt == "f32") t.dtype = DType::f32;
      else if (dt == "f64") t.dtype = DType::f64;
      else throw FormatError("unknown dtype '" + dt + "' for tensor '" + t.name + "'" + where);
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const std::uint64_t nb = static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype);
      if (off + nb > payload)
        throw TruncatedError("tensor '" + t.name + "' extends past payload" + where);
      t.data.resize(static_cast<std::size_t>(t.numel()));
      const char* src = bytes.data() + base + off;
      if (t.dtype == DType::f32) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
          float v;
          std::memcpy(&v, src + 4 * i, 4);
          t.data[i] = v;
        }
      } else {
        std::memcpy(t.data.data(), src, nb);
      }
      file.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed index") + where + ": " + e.what());
  }
  return file;
}

}  // namespace stdim
