#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace edge {

/// On-disk layout shared by motion, feature, constraint and checkpoint files:
///
///   MAGIC VERSION\n
///   key value...\n        (one field per line, value runs to end of line)
///   end\n
///   payload               (little-endian float32, count given by the fields)
struct Container {
  std::string magic;
  int version = 1;
  std::vector<std::pair<std::string, std::string>> fields;
  std::vector<float> payload;

  void set(const std::string& key, const std::string& value);
  const std::string* find(const std::string& key) const;

  std::string get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
};

/// Writes through a temporary sibling and renames, so readers never observe a
/// partially written file.
void write_container(const std::filesystem::path& path, const Container& c);

/// Throws BadHeader when the magic differs or the header is malformed, and
/// IoError when the file cannot be opened. `payload_count` floats are read
/// after the header; pass -1 to read to end of file.
Container read_container(const std::filesystem::path& path, const std::string& magic,
                         long long payload_count = -1);

/// Header-only read; payload is left empty.
Container read_container_header(const std::filesystem::path& path, const std::string& magic);

}  // namespace edge
