#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/types.h>

namespace torch::nn {
class Module;
}

namespace bgvc::blob {

inline constexpr uint32_t kFormatVersion = 1;

/// On-disk container shared by model checkpoints, training states and
/// feature-extractor files:
///
///   "BGVCBLOB" | u32 version | kind | JSON header | named tensors | u64 FNV-1a
///
/// Strings are u32-length prefixed, the header is u64-length prefixed, every
/// integer is little-endian, and tensor payloads are raw contiguous bytes.
/// The trailing checksum covers every preceding byte.
struct Blob {
  std::string kind;
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write(const std::filesystem::path& path, const Blob& b);
std::vector<char> serialize(const Blob& b);

/// Throws FormatError on bad magic, version, checksum or truncation, and when
/// `expected_kind` is non-empty and differs from the stored kind.
Blob read(const std::filesystem::path& path, const std::string& expected_kind = {});
Blob deserialize(const std::vector<char>& bytes, const std::string& expected_kind = {});

/// Parameters and buffers of `m` under "prefix.name" keys, cloned to CPU.
void append_module(Blob& b, const std::string& prefix, const torch::nn::Module& m);
/// Copies stored tensors back into `m`; every parameter and buffer must be
/// present with an identical shape, otherwise ConfigError.
void load_module(const Blob& b, const std::string& prefix, torch::nn::Module& m);

/// Order-sensitive FNV-1a over names, dtypes, shapes and bytes.
uint64_t hash_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& ts);
uint64_t hash_module(const torch::nn::Module& m);
std::string hex(uint64_t h);

} // namespace bgvc::blob
