#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace nlspde {

// CSV artifacts: UTF-8, header row, full-precision decimal floats.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void row(const std::vector<std::string>& cells);
  void close();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::string buffer_;
  bool open_ = true;
};

std::string format_double(double v);  // shortest round-trip decimal

// FNV-1a over the file bytes; the manifest content fingerprint.
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a_bytes(const void* data, size_t size);

struct ManifestEntry {
  std::string file;
  std::uint64_t bytes = 0;
  std::uint64_t hash = 0;
};

// Writes manifest.csv (file,bytes,fnv1a64) for the given artifacts, sorted
// by file name; returns the entries.
std::vector<ManifestEntry> write_manifest(const std::filesystem::path& out_dir,
                                          const std::vector<std::filesystem::path>& files);

}  // namespace nlspde
