// Copyright 2026 The IMPACT Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef IMPACT_CHECKPOINT_HPP
#define IMPACT_CHECKPOINT_HPP

// Checkpoint archive layout (all integers little-endian):
//
//   "IMPCKPT1"                       8-byte magic
//   u32 n, n bytes                   format version string
//   u32 n, n bytes                   JSON metadata (model/train config, epoch, ...)
//   u32 count                        number of tensors
//   count x {
//     u32 n, n bytes                 tensor name
//     u32 ndim, ndim x u32           shape
//     prod(shape) x f32              row-major values
//   }
//
// Tensor names are prefixed with "student/", "teacher/", "optimizer.m/" and
// "optimizer.v/".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "impact/error.hpp"
#include "impact/model.hpp"
#include "impact/ssl_train.hpp"

namespace impact {

inline constexpr char kCheckpointMagic[8] = {'I', 'M', 'P', 'C', 'K', 'P', 'T', '1'};
inline constexpr const char* kCheckpointVersion = "impact-checkpoint/1";

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

struct TensorArchive {
  std::string version = kCheckpointVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace archive_detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void f32(float f) {
    std::uint32_t raw;
    std::memcpy(&raw, &f, 4);
    u32(raw);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorCode::kUnreadableFile, "checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    const auto* p = bytes_.data() + pos_;
    pos_ += 4;
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    const std::uint32_t raw = u32();
    float f;
    std::memcpy(&f, &raw, 4);
    return f;
  }
  void expect_magic() {
    need(8);
    require(std::memcmp(bytes_.data(), kCheckpointMagic, 8) == 0, ErrorCode::kUnreadableFile, "not a checkpoint");
    pos_ += 8;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace archive_detail

inline std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  archive_detail::ByteWriter w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic, kCheckpointMagic + 8);
  w.str(archive.version);
  w.str(archive.metadata.dump());
  w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& t : archive.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    std::size_t count = 1;
    for (auto d : t.shape) {
      w.u32(d);
      count *= d;
    }
    require(count == t.values.size(), ErrorCode::kShapeMismatch, "tensor '" + t.name + "' shape/value mismatch");
    for (float f : t.values) w.f32(f);
  }
  return std::move(w.bytes);
}

inline TensorArchive decode_archive(std::span<const std::uint8_t> bytes) {
  archive_detail::ByteReader r(bytes);
  r.expect_magic();
  TensorArchive archive;
  archive.version = r.str();
  require(archive.version == kCheckpointVersion, ErrorCode::kUnreadableFile,
          "unsupported checkpoint version '" + archive.version + "'");
  try {
    archive.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kUnreadableFile, std::string("bad checkpoint metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  archive.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t ndim = r.u32();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.u32());
      n *= t.shape.back();
    }
    r.need(n * 4);
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    archive.tensors.push_back(std::move(t));
  }
  require(r.done(), ErrorCode::kUnreadableFile, "trailing bytes after checkpoint tensors");
  return archive;
}

inline void write_archive(const std::string& path, const TensorArchive& archive) {
  const auto bytes = encode_archive(archive);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIoFailure, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  require(!out.fail(), ErrorCode::kIoFailure, "short write to " + path);
}

inline TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kUnreadableFile, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

inline void append_parameters(TensorArchive& archive, const std::string& prefix, const Parameters<float>& params) {
  params.visit([&](const std::string& name, const Mat<float>& m, TensorRole) {
    NamedTensor t;
    t.name = prefix + name;
    t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.values.assign(m.data(), m.data() + m.size());
    archive.tensors.push_back(std::move(t));
  });
}

inline void restore_parameters(const TensorArchive& archive, const std::string& prefix, Parameters<float>& params) {
  std::map<std::string, const NamedTensor*> index;
  for (const auto& t : archive.tensors) index[t.name] = &t;
  params.visit([&](const std::string& name, Mat<float>& m, TensorRole) {
    const auto it = index.find(prefix + name);
    require(it != index.end(), ErrorCode::kStructureMismatch, "checkpoint lacks tensor '" + prefix + name + "'");
    const auto& t = *it->second;
    require(t.shape.size() == 2 && t.shape[0] == m.rows() && t.shape[1] == m.cols(), ErrorCode::kStructureMismatch,
            "tensor '" + t.name + "' has the wrong shape");
    std::memcpy(m.data(), t.values.data(), t.values.size() * sizeof(float));
  });
}

inline TensorArchive make_checkpoint(const ModelState& state, const TrainConfig& train,
                                     const nlohmann::json& extra = nlohmann::json::object()) {
  TensorArchive archive;
  archive.metadata = extra;
  archive.metadata["model"] = state.student.config;
  archive.metadata["train"] = train;
  archive.metadata["epoch"] = state.epoch;
  archive.metadata["optimizer_step"] = state.optimizer.step;
  append_parameters(archive, "student/", state.student);
  append_parameters(archive, "teacher/", state.teacher);
  append_parameters(archive, "optimizer.m/", state.optimizer.m);
  append_parameters(archive, "optimizer.v/", state.optimizer.v);
  return archive;
}

inline void save_checkpoint(const std::string& path, const ModelState& state, const TrainConfig& train,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  write_archive(path, make_checkpoint(state, train, extra));
}

/// Restores a model state; the optimizer moments are optional in the archive.
inline ModelState state_from_archive(const TensorArchive& archive) {
  require(archive.metadata.contains("model"), ErrorCode::kUnreadableFile, "checkpoint metadata lacks model config");
  const auto config = archive.metadata.at("model").get<ModelConfig>();
  ModelState state;
  state.student = zero_parameters<float>(config);
  state.teacher = state.student;
  state.optimizer = make_adam_state(state.student);
  restore_parameters(archive, "student/", state.student);
  restore_parameters(archive, "teacher/", state.teacher);
  if (archive.find("optimizer.m/patch_embed.weight")) {
    restore_parameters(archive, "optimizer.m/", state.optimizer.m);
    restore_parameters(archive, "optimizer.v/", state.optimizer.v);
  }
  state.epoch = archive.metadata.value("epoch", 0);
  state.optimizer.step = archive.metadata.value("optimizer_step", std::int64_t{0});
  return state;
}

inline ModelState load_checkpoint(const std::string& path) { return state_from_archive(read_archive(path)); }

}  // namespace impact

#endif  // IMPACT_CHECKPOINT_HPP
