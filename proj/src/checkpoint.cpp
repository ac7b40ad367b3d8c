#include "nttlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nttlab/error.hpp"

namespace nttlab::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw ValidationError("checkpoint has no array named '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json index = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (index.contains(a.name)) throw ValidationError("duplicate checkpoint array '" + a.name + "'");
    index[a.name] = {{"offset", offset}, {"shape", a.value.shape()}};
    order.push_back(a.name);
    offset += a.value.size() * sizeof(double);
  }
  const nlohmann::json header = {
      {"version", kCheckpointVersion}, {"index", index}, {"order", order}, {"meta", ckpt.meta}};
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  for (const auto& a : ckpt.arrays) {
    out.append(reinterpret_cast<const char*>(a.value.data()), a.value.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  std::uint64_t len = 0;
  if (bytes.size() < sizeof(len)) throw ValidationError("checkpoint truncated: missing header length");
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (len > bytes.size() - sizeof(len)) throw ValidationError("checkpoint truncated: header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(sizeof(len), len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("version", std::string()) != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version '" + header.value("version", std::string()) + "'");
  }
  const std::string_view payload = bytes.substr(sizeof(len) + len);
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  try {
    for (const auto& name_json : header.at("order")) {
      const auto name = name_json.get<std::string>();
      const auto& entry = header.at("index").at(name);
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto shape = entry.at("shape").get<Shape>();
      Tensor t(shape);
      const std::size_t nbytes = t.size() * sizeof(double);
      if (offset > payload.size() || nbytes > payload.size() - offset) {
        throw ValidationError("checkpoint array '" + name + "' extends past end of file");
      }
      std::memcpy(t.data(), payload.data() + offset, nbytes);
      ckpt.arrays.push_back({name, std::move(t)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint index: ") + e.what());
  }
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace nttlab::nn
