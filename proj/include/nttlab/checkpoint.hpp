#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nttlab/tensor.hpp"

namespace nttlab::nn {

inline constexpr std::string_view kCheckpointVersion = "nttlab-ckpt-1";

struct NamedArray {
  std::string name;
  Tensor value;
};

/// Layout: u64 little-endian header length, JSON header
/// {"version", "index": {name: {"offset", "shape"}}, "order", "meta"},
/// then the f64 little-endian payload. Offsets count bytes from the start
/// of the payload.
struct Checkpoint {
  std::vector<NamedArray> arrays;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor& at(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Written to a temporary file and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Atomic text write shared by every artifact writer.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace nttlab::nn
