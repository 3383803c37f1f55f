#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "wenc/embedding.hpp"
#include "wenc/error.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

namespace fs = std::filesystem;

// Little-endian byte encoding independent of host order.
namespace bytes {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

// Bounds-checked cursor over an in-memory file.
class Reader {
 public:
  Reader(std::string_view data, std::string source)
      : data_(data), source_(std::move(source)) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(source_ + ": truncated " + what + " (need " +
                            std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()) + ")",
                        pos_);
    }
  }
  std::string_view take(std::uint64_t n, const char* what) {
    need(n, what);
    const auto v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::uint32_t u32(const char* what) {
    const auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::uint64_t u64(const char* what) {
    const auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  [[noreturn]] void fail(const std::string& msg, std::uint64_t at) const {
    throw FormatError(source_ + ": " + msg, at);
  }

 private:
  std::string_view data_;
  std::string source_;
  std::uint64_t pos_ = 0;
};

}  // namespace bytes

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return data;
}

inline void write_file(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

// Descriptor file: "WDSC", u32 version, u32 n, u32 d, then n*d float32
// row-major, all little-endian.
inline constexpr std::string_view kDescriptorMagic = "WDSC";
inline constexpr std::uint32_t kDescriptorVersion = 1;

inline std::string encode_descriptors(const Eigen::MatrixXf& rows) {
  std::string out;
  out.reserve(16 + static_cast<std::size_t>(rows.size()) * 4);
  out.append(kDescriptorMagic);
  bytes::put_u32(out, kDescriptorVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(rows.rows()));
  bytes::put_u32(out, static_cast<std::uint32_t>(rows.cols()));
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) bytes::put_f32(out, rows(r, c));
  }
  return out;
}

inline Eigen::MatrixXf decode_descriptors(std::string_view data,
                                          const std::string& source = "descriptors") {
  bytes::Reader rd(data, source);
  const auto magic = rd.take(4, "header");
  if (magic != kDescriptorMagic) rd.fail("bad magic, expected WDSC", 0);
  const std::uint32_t version = rd.u32("header");
  if (version != kDescriptorVersion) {
    rd.fail("unsupported descriptor file version " + std::to_string(version), 4);
  }
  const std::uint32_t n = rd.u32("header");
  const std::uint32_t d = rd.u32("header");
  const std::uint64_t payload = std::uint64_t{n} * d * 4;
  if (rd.remaining() < payload) {
    rd.fail("truncated payload: header declares " + std::to_string(n) + " x " +
                std::to_string(d) + " floats but only " +
                std::to_string(rd.remaining()) + " payload bytes remain",
            rd.offset() + rd.remaining());
  }
  Eigen::MatrixXf rows(n, d);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) rows(r, c) = rd.f32("payload");
  }
  if (rd.remaining() != 0) rd.fail("trailing bytes after payload", rd.offset());
  return rows;
}

inline void write_descriptors(const fs::path& path, const Eigen::MatrixXf& rows) {
  write_file(path, encode_descriptors(rows));
}

// Loads a descriptor file; values are promoted to double.
inline DescriptorSet load_descriptors(const fs::path& path) {
  DescriptorSet set;
  set.data = decode_descriptors(read_file(path), path.string()).cast<double>();
  return set;
}

enum class Split { kTrain, kTest };

inline std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

struct ManifestEntry {
  std::string doc_id;
  std::string writer_id;
  Split split = Split::kTest;
  fs::path path;  // resolved against the manifest's directory
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

// Tab-separated doc_id, writer_id, split, path; '#' starts a comment line.
inline Manifest parse_manifest(std::string_view text, const fs::path& base_dir = {},
                               const std::string& source = "manifest") {
  Manifest m;
  std::set<std::string> ids;
  std::set<std::string> train_writers, test_writers;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    pos = end + 1;
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string> fields;
    std::size_t f = 0;
    while (true) {
      const std::size_t tab = line.find('\t', f);
      fields.emplace_back(line.substr(f, tab == std::string_view::npos ? line.npos : tab - f));
      if (tab == std::string_view::npos) break;
      f = tab + 1;
    }
    const std::string where = source + " line " + std::to_string(line_no);
    if (fields.size() != 4) {
      throw FormatError(where + ": expected 4 tab-separated fields, got " +
                            std::to_string(fields.size()),
                        start);
    }
    ManifestEntry e;
    e.doc_id = fields[0];
    e.writer_id = fields[1];
    if (fields[2] == "train") e.split = Split::kTrain;
    else if (fields[2] == "test") e.split = Split::kTest;
    else throw FormatError(where + ": split must be train or test, got '" + fields[2] + "'", start);
    if (e.doc_id.empty() || e.writer_id.empty() || fields[3].empty()) {
      throw FormatError(where + ": empty field", start);
    }
    if (!ids.insert(e.doc_id).second) {
      throw FormatError(where + ": duplicate doc_id '" + e.doc_id + "'", start);
    }
    (e.split == Split::kTrain ? train_writers : test_writers).insert(e.writer_id);
    const fs::path p(fields[3]);
    e.path = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    m.entries.push_back(std::move(e));
  }
  for (const auto& w : train_writers) {
    if (test_writers.count(w)) {
      throw FormatError(source + ": writer '" + w + "' appears in both train and test splits", 0);
    }
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  return parse_manifest(read_file(path), path.parent_path(), path.string());
}

inline std::string format_manifest(const Manifest& m, const fs::path& relative_to = {}) {
  std::string out;
  for (const auto& e : m.entries) {
    const fs::path p = relative_to.empty() ? e.path : e.path.lexically_relative(relative_to);
    out += e.doc_id + '\t' + e.writer_id + '\t' + std::string(to_string(e.split)) + '\t' +
           p.generic_string() + '\n';
  }
  return out;
}

// Named matrices and strings in insertion order. On disk: "WMDL", u32
// version, u32 entry count, then per entry u32 name length, name, u8 type
// (0 = float64 matrix, 1 = text); matrices store u32 rows, u32 cols and
// row-major float64 values, text stores u32 length and bytes.
class Archive {
 public:
  using Value = std::variant<Matrix, std::string>;
  static constexpr std::string_view kMagic = "WMDL";
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, Value v) {
    for (auto& [k, existing] : entries_) {
      if (k == name) {
        existing = std::move(v);
        return;
      }
    }
    entries_.emplace_back(name, std::move(v));
  }
  void put_matrix(const std::string& name, Matrix m) { put(name, std::move(m)); }
  void put_vector(const std::string& name, const Vector& v) { put(name, Matrix(v.transpose())); }
  void put_text(const std::string& name, std::string s) { put(name, std::move(s)); }
  void put_scalar(const std::string& name, double v) { put(name, Matrix::Constant(1, 1, v)); }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const Matrix& matrix(const std::string& name) const {
    const Value* v = find(name);
    if (!v || !std::holds_alternative<Matrix>(*v)) {
      throw FormatError("archive entry '" + name + "' missing or not a matrix", 0);
    }
    return std::get<Matrix>(*v);
  }
  Vector vector(const std::string& name) const {
    const Matrix& m = matrix(name);
    if (m.rows() != 1) throw FormatError("archive entry '" + name + "' is not a row vector", 0);
    return m.row(0).transpose();
  }
  double scalar(const std::string& name) const {
    const Matrix& m = matrix(name);
    if (m.size() != 1) throw FormatError("archive entry '" + name + "' is not a scalar", 0);
    return m(0, 0);
  }
  const std::string& text(const std::string& name) const {
    const Value* v = find(name);
    if (!v || !std::holds_alternative<std::string>(*v)) {
      throw FormatError("archive entry '" + name + "' missing or not text", 0);
    }
    return std::get<std::string>(*v);
  }

  const std::vector<std::pair<std::string, Value>>& entries() const { return entries_; }

  std::string serialize() const {
    std::string out(kMagic);
    bytes::put_u32(out, kVersion);
    bytes::put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, value] : entries_) {
      bytes::put_u32(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      if (const auto* m = std::get_if<Matrix>(&value)) {
        out.push_back('\0');
        bytes::put_u32(out, static_cast<std::uint32_t>(m->rows()));
        bytes::put_u32(out, static_cast<std::uint32_t>(m->cols()));
        for (Eigen::Index r = 0; r < m->rows(); ++r) {
          for (Eigen::Index c = 0; c < m->cols(); ++c) bytes::put_f64(out, (*m)(r, c));
        }
      } else {
        const auto& s = std::get<std::string>(value);
        out.push_back('\1');
        bytes::put_u32(out, static_cast<std::uint32_t>(s.size()));
        out += s;
      }
    }
    return out;
  }

  static Archive deserialize(std::string_view data, const std::string& source = "archive") {
    bytes::Reader rd(data, source);
    if (rd.take(4, "header") != kMagic) rd.fail("bad magic, expected WMDL", 0);
    const std::uint32_t version = rd.u32("header");
    if (version != kVersion) rd.fail("unsupported archive version " + std::to_string(version), 4);
    const std::uint32_t count = rd.u32("header");
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t len = rd.u32("entry name length");
      std::string name(rd.take(len, "entry name"));
      const auto type_at = rd.offset();
      const auto type = static_cast<unsigned char>(rd.take(1, "entry type")[0]);
      if (type == 0) {
        const std::uint32_t rows = rd.u32("matrix shape");
        const std::uint32_t cols = rd.u32("matrix shape");
        rd.need(std::uint64_t{rows} * cols * 8, "matrix payload");
        Matrix m(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r) {
          for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = rd.f64("matrix payload");
        }
        a.entries_.emplace_back(std::move(name), std::move(m));
      } else if (type == 1) {
        const std::uint32_t n = rd.u32("text length");
        a.entries_.emplace_back(std::move(name), std::string(rd.take(n, "text")));
      } else {
        rd.fail("unknown entry type " + std::to_string(type), type_at);
      }
    }
    if (rd.remaining() != 0) rd.fail("trailing bytes after last entry", rd.offset());
    return a;
  }

  void save(const fs::path& path) const { write_file(path, serialize()); }
  static Archive load(const fs::path& path) {
    return deserialize(read_file(path), path.string());
  }

 private:
  const Value* find(const std::string& name) const {
    for (const auto& [k, v] : entries_) {
      if (k == name) return &v;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, Value>> entries_;
};

inline void store_whitening(Archive& a, const std::string& prefix, const WhiteningTransform& t) {
  a.put_text(prefix + ".mode", std::string(to_string(t.mode)));
  a.put_vector(prefix + ".mean", t.mean);
  a.put_matrix(prefix + ".rotation", t.rotation);
  a.put_vector(prefix + ".scale", t.scale);
  a.put_vector(prefix + ".eigenvalues", t.eigenvalues);
  a.put_scalar(prefix + ".eps", t.eps);
  Matrix dropped(1, 2);
  dropped << t.dropped_leading, t.dropped_trailing;
  a.put_matrix(prefix + ".dropped", dropped);
}

inline WhiteningTransform load_whitening(const Archive& a, const std::string& prefix) {
  WhiteningTransform t;
  try {
    t.mode = parse_whitening_mode(a.text(prefix + ".mode"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), 0);
  }
  t.mean = a.vector(prefix + ".mean");
  t.rotation = a.matrix(prefix + ".rotation");
  t.scale = a.vector(prefix + ".scale");
  t.eigenvalues = a.vector(prefix + ".eigenvalues");
  t.eps = a.scalar(prefix + ".eps");
  const Matrix& dropped = a.matrix(prefix + ".dropped");
  if (dropped.size() != 2) throw FormatError(prefix + ".dropped must hold 2 values", 0);
  t.dropped_leading = static_cast<int>(dropped(0, 0));
  t.dropped_trailing = static_cast<int>(dropped(0, 1));
  if (t.rotation.cols() != t.mean.size() || t.scale.size() != t.rotation.rows()) {
    throw FormatError("whitening '" + prefix + "' has inconsistent shapes", 0);
  }
  return t;
}

// "key = value" lines; '#' starts a comment. Keys keep their order.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(
    std::string_view text, const std::string& source = "config") {
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + " line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) {
      throw ConfigError(source + " line " + std::to_string(line_no) + ": empty key");
    }
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

}  // namespace wenc
