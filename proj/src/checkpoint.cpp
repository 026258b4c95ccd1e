#include "diffwin/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace diffwin::checkpoint {

namespace {

using nlohmann::json;

void write_le_doubles(std::ostream& os, const std::vector<double>& v) {
  for (double d : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

void read_le_doubles(std::istream& is, std::vector<double>& v) {
  for (double& d : v) {
    unsigned char bytes[8];
    is.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    std::memcpy(&d, &bits, sizeof(d));
  }
}

}  // namespace

void save(const std::string& path, const model::Model& m) {
  const auto named = m.named_params();

  json header;
  header["version"] = kVersion;
  header["config"] = json::parse(m.config.to_json());
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    dir.push_back(entry);
    offset += t.size() * sizeof(double);
  }
  header["tensors"] = dir;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os << header.dump() << "\n";
  for (const auto& [name, t] : named) write_le_doubles(os, t.values());
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

model::Model load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open for reading: " + path);

  std::string header_line;
  if (!std::getline(is, header_line)) throw FormatError("checkpoint: missing header: " + path);

  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: corrupt header in " + path + ": " + e.what());
  }
  if (!header.contains("version") || header["version"] != kVersion)
    throw FormatError("checkpoint: unsupported version in " + path + " (expected " +
                      std::string(kVersion) + ")");

  model::ModelConfig config;
  try {
    config = model::ModelConfig::from_json(header.at("config").dump());
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: bad config in " + path + ": " + e.what());
  }

  model::Model m = model::build(config, 0);
  auto named = m.named_params();
  const auto& dir = header.at("tensors");
  if (dir.size() != named.size())
    throw FormatError("checkpoint: tensor directory size mismatch in " + path);

  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = dir[i];
    if (entry.at("name").get<std::string>() != named[i].first)
      throw FormatError("checkpoint: tensor name mismatch at index " + std::to_string(i) +
                        " in " + path);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != named[i].second.shape())
      throw FormatError("checkpoint: shape mismatch for " + named[i].first + " in " + path);
    read_le_doubles(is, named[i].second.values());
    if (!is) throw FormatError("checkpoint: truncated tensor data in " + path);
    check_finite("checkpoint load", named[i].second.values());
  }
  return m;
}

}  // namespace diffwin::checkpoint
