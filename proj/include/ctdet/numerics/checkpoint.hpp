#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ctdet/numerics/tensor.hpp"

namespace ctdet {

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

struct CheckpointEntry {
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> payload;

  DType dtype() const {
    return payload.index() == 0 ? DType::kFloat32 : DType::kFloat64;
  }
  std::size_t numel() const { return shape_numel(shape); }

  template <typename T>
  static CheckpointEntry from_tensor(const Tensor<T>& t) {
    return CheckpointEntry{t.shape(), std::vector<T>(t.data().begin(), t.data().end())};
  }

  // Values converted to T, whatever the stored dtype.
  template <typename T>
  std::vector<T> values_as() const {
    return std::visit(
        [](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, payload);
  }
};

// Binary container:
//   magic "CTDETCKP" | u32 version | u64 global_step | u32 metadata_len |
//   metadata bytes | u32 entry_count | entries...
// entry: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | payload
// All integers and IEEE-754 payloads are little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  std::uint64_t global_step = 0;
  std::string metadata;  // free-form, JSON by convention
  std::map<std::string, CheckpointEntry> entries;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const CheckpointEntry& at(const std::string& name) const;
};

}  // namespace ctdet
