#pragma once

// Container format shared by bundles, responses, trained maps and result
// matrices:
//
//   "FBN1" | u32 little-endian header length | UTF-8 header | payload
//
// The header is one `key=value` pair per line. The payload is a dense
// row-major matrix in the header's dtype (f32le or f64le).

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <openssl/evp.h>

#include "repspace/common.hpp"

namespace repspace {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kContainerMagic{'F', 'B', 'N', '1'};

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian; big-endian hosts need byte swapping");

/// Ordered header. Keys are written in insertion order so files are stable.
class Header {
 public:
  void set(const std::string& key, std::string value) {
    require(key.find_first_of("=\n") == std::string::npos, "header key contains '=' or newline: " + key);
    require(value.find('\n') == std::string::npos, "header value contains newline for key " + key);
    for (auto& kv : fields_) {
      if (kv.first == key) {
        kv.second = std::move(value);
        return;
      }
    }
    fields_.emplace_back(key, std::move(value));
  }
  void set(const std::string& key, double value) { set(key, format_double(value)); }
  void set(const std::string& key, long long value) { set(key, std::to_string(value)); }
  void set(const std::string& key, std::size_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }

  bool has(const std::string& key) const {
    for (const auto& kv : fields_)
      if (kv.first == key) return true;
    return false;
  }
  const std::string& get(const std::string& key) const {
    for (const auto& kv : fields_)
      if (kv.first == key) return kv.second;
    throw IoError("container header missing field '" + key + "'");
  }
  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }
  long long get_int(const std::string& key) const {
    const auto& v = get(key);
    std::size_t used = 0;
    long long out = 0;
    try {
      out = std::stoll(v, &used);
    } catch (const std::exception&) {
      throw IoError("header field '" + key + "' is not an integer: " + v);
    }
    if (used != v.size()) throw IoError("header field '" + key + "' is not an integer: " + v);
    return out;
  }
  double get_double(const std::string& key) const {
    const auto& v = get(key);
    std::size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      throw IoError("header field '" + key + "' is not a number: " + v);
    }
    if (used != v.size()) throw IoError("header field '" + key + "' is not a number: " + v);
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& fields() const { return fields_; }

  std::string encode() const {
    std::string out;
    for (const auto& [k, v] : fields_) {
      out += k;
      out += '=';
      out += v;
      out += '\n';
    }
    return out;
  }

  static Header decode(std::string_view text) {
    Header h;
    std::size_t pos = 0;
    while (pos < text.size()) {
      auto eol = text.find('\n', pos);
      if (eol == std::string_view::npos) eol = text.size();
      auto line = text.substr(pos, eol - pos);
      pos = eol + 1;
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string_view::npos) throw IoError("malformed header line: " + std::string(line));
      h.fields_.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    }
    return h;
  }

  static std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  std::vector<std::pair<std::string, std::string>> fields_;
};

enum class DType { F32, F64 };

inline const char* dtype_name(DType t) { return t == DType::F32 ? "f32le" : "f64le"; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32le") return DType::F32;
  if (s == "f64le") return DType::F64;
  throw IoError("unsupported dtype '" + s + "'");
}

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

struct RawContainer {
  Header header;
  std::string payload;
};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string encode_container(const Header& header, std::string_view payload) {
  const std::string text = header.encode();
  std::string out;
  out.reserve(8 + text.size() + payload.size());
  out.append(kContainerMagic.data(), kContainerMagic.size());
  const auto len = static_cast<std::uint32_t>(text.size());
  char lenbuf[4];
  std::memcpy(lenbuf, &len, 4);
  out.append(lenbuf, 4);
  out += text;
  out.append(payload.data(), payload.size());
  return out;
}

inline RawContainer decode_container(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kContainerMagic.data(), 4) != 0)
    throw IoError(origin + ": bad magic (expected FBN1)");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 4);
  if (8ull + len > bytes.size()) throw IoError(origin + ": header length exceeds file size");
  RawContainer c;
  c.header = Header::decode(bytes.substr(8, len));
  c.payload = std::string(bytes.substr(8 + len));
  return c;
}

inline std::string encode_payload(const Matrix& m, DType dtype) {
  std::string out;
  out.resize(static_cast<std::size_t>(m.size()) * dtype_size(dtype));
  char* dst = out.data();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (dtype == DType::F32) {
        const float f = static_cast<float>(m(r, c));
        std::memcpy(dst, &f, 4);
        dst += 4;
      } else {
        const double d = m(r, c);
        std::memcpy(dst, &d, 8);
        dst += 8;
      }
    }
  }
  return out;
}

inline Matrix decode_payload(std::string_view payload, long long rows, long long cols, DType dtype,
                             const std::string& origin) {
  if (rows < 0 || cols < 0) throw IoError(origin + ": negative shape in header");
  const auto expected = static_cast<unsigned long long>(rows) * static_cast<unsigned long long>(cols) *
                        dtype_size(dtype);
  if (payload.size() != expected)
    throw IoError(origin + ": payload size mismatch (header implies " + std::to_string(expected) +
                  " bytes, found " + std::to_string(payload.size()) + ")");
  Matrix m(rows, cols);
  const char* src = payload.data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (dtype == DType::F32) {
        float f;
        std::memcpy(&f, src, 4);
        src += 4;
        m(r, c) = f;
      } else {
        double d;
        std::memcpy(&d, src, 8);
        src += 8;
        m(r, c) = d;
      }
    }
  }
  return m;
}

/// Generic matrix file: header carries kind, rows, cols, dtype, layout plus
/// any caller fields.
inline void write_matrix_file(const fs::path& path, const Matrix& m, Header extra,
                              DType dtype = DType::F64) {
  if (!m.allFinite()) throw ValidationError(path.string() + ": matrix contains non-finite values");
  Header h;
  for (const auto& [k, v] : extra.fields()) h.set(k, v);
  h.set("rows", static_cast<long long>(m.rows()));
  h.set("cols", static_cast<long long>(m.cols()));
  h.set("dtype", dtype_name(dtype));
  if (!h.has("layout")) h.set("layout", "row-major");
  atomic_write(path, encode_container(h, encode_payload(m, dtype)));
}

struct MatrixFile {
  Header header;
  Matrix data;
};

inline MatrixFile read_matrix_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  auto raw = decode_container(bytes, path.string());
  MatrixFile out;
  out.header = raw.header;
  out.data = decode_payload(raw.payload, raw.header.get_int("rows"), raw.header.get_int("cols"),
                            parse_dtype(raw.header.get("dtype")), path.string());
  return out;
}

/// Hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

/// Stable 64-bit seed derived from a global seed and a list of identifiers.
inline std::uint64_t derive_seed(std::uint64_t global, std::initializer_list<std::string_view> parts) {
  std::string key = std::to_string(global);
  for (auto p : parts) {
    key += '\x1f';
    key += p;
  }
  const std::string h = sha256_hex(key);
  return std::stoull(h.substr(0, 16), nullptr, 16);
}

/// Delimited text table with a header row and a leading label column.
inline std::string format_table(const std::vector<std::string>& col_names,
                                const std::vector<std::string>& row_names, const Matrix& m,
                                const std::string& corner = "id") {
  require(static_cast<Eigen::Index>(row_names.size()) == m.rows(), "table: row label count mismatch");
  require(static_cast<Eigen::Index>(col_names.size()) == m.cols(), "table: column label count mismatch");
  std::string out = corner;
  for (const auto& c : col_names) out += "\t" + c;
  out += "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out += row_names[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < m.cols(); ++c) out += "\t" + Header::format_double(m(r, c));
    out += "\n";
  }
  return out;
}

}  // namespace repspace
