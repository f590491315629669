#include "edge/container.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "edge/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container payloads are written as native little-endian floats");

namespace edge {

void Container::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : fields) {
    if (k == key) {
      v = value;
      return;
    }
  }
  fields.emplace_back(key, value);
}

const std::string* Container::find(const std::string& key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return &v;
  return nullptr;
}

std::string Container::get(const std::string& key) const {
  const auto* v = find(key);
  if (!v) throw BadHeader(magic + " header is missing field '" + key + "'");
  return *v;
}

long long Container::get_int(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw BadHeader("field '" + key + "' is not an integer: " + v);
  }
}

double Container::get_double(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw BadHeader("field '" + key + "' is not a number: " + v);
  }
}

void write_container(const std::filesystem::path& path, const Container& c) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << c.magic << ' ' << c.version << '\n';
    for (const auto& [k, v] : c.fields) {
      if (k.empty() || k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
        throw IoError("invalid header field '" + k + "'");
      out << k << ' ' << v << '\n';
    }
    out << "end\n";
    out.write(reinterpret_cast<const char*>(c.payload.data()),
              static_cast<std::streamsize>(c.payload.size() * sizeof(float)));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

namespace {

Container read_impl(const std::filesystem::path& path, const std::string& magic, bool with_payload,
                    long long payload_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  Container c;
  std::string line;
  if (!std::getline(in, line)) throw BadHeader(path.string() + ": empty file");
  {
    std::istringstream first(line);
    first >> c.magic >> c.version;
    if (c.magic != magic || first.fail())
      throw BadHeader(path.string() + ": expected '" + magic + "' header, found '" + line.substr(0, 40) + "'");
  }
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      terminated = true;
      break;
    }
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0) throw BadHeader(path.string() + ": malformed line '" + line + "'");
    c.fields.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  if (!terminated) throw BadHeader(path.string() + ": header is not terminated");
  if (!with_payload) return c;

  const auto start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto available = static_cast<long long>(in.tellg() - start) / static_cast<long long>(sizeof(float));
  in.seekg(start);
  if (payload_count < 0) payload_count = available;
  if (payload_count != available)
    throw BadHeader(path.string() + ": payload holds " + std::to_string(available) + " floats, header implies " +
                    std::to_string(payload_count));
  c.payload.resize(static_cast<std::size_t>(payload_count));
  in.read(reinterpret_cast<char*>(c.payload.data()), payload_count * static_cast<long long>(sizeof(float)));
  if (!in) throw IoError("short read on " + path.string());
  return c;
}

}  // namespace

Container read_container(const std::filesystem::path& path, const std::string& magic, long long payload_count) {
  return read_impl(path, magic, true, payload_count);
}

Container read_container_header(const std::filesystem::path& path, const std::string& magic) {
  return read_impl(path, magic, false, 0);
}

}  // namespace edge
