#include "nlspde/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <algorithm>

#include "nlspde/errors.hpp"

namespace nlspde {

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : path_(path) {
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) buffer_ += ',';
    buffer_ += header[i];
  }
  buffer_ += '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) buffer_ += ',';
    buffer_ += cells[i];
  }
  buffer_ += '\n';
}

void CsvWriter::close() {
  if (!open_) return;
  open_ = false;
  std::ofstream out(path_, std::ios::binary | std::ios::trunc);
  if (!out) throw SolverError(ErrorKind::BadConfig, "cannot write " + path_.string());
  out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
}

CsvWriter::~CsvWriter() {
  try {
    close();
  } catch (...) {
  }
}

std::uint64_t fnv1a_bytes(const void* data, size_t size) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SolverError(ErrorKind::BadConfig, "cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

std::vector<ManifestEntry> write_manifest(const std::filesystem::path& out_dir,
                                          const std::vector<std::filesystem::path>& files) {
  std::vector<ManifestEntry> entries;
  for (const auto& f : files) {
    ManifestEntry e;
    e.file = f.filename().string();
    e.bytes = std::filesystem::file_size(f);
    e.hash = fnv1a_file(f);
    entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.file < b.file; });
  CsvWriter w(out_dir / "manifest.csv", {"file", "bytes", "fnv1a64"});
  char hex[24];
  for (const auto& e : entries) {
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(e.hash));
    w.row({e.file, std::to_string(e.bytes), hex});
  }
  w.close();
  return entries;
}

}  // namespace nlspde
