#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace vflbd {

// SHA-1 of "blob <size>\0<content>", as git hashes file contents.
std::string git_blob_sha1(std::string_view content);
std::string git_blob_sha1_file(const std::filesystem::path& path);
std::string sha1_hex(std::string_view content);

struct ArtifactEntry {
  std::string path;  // relative to the run directory
  std::string sha1;
};

struct RunManifest {
  std::string run_id;
  std::string config_hash;
  std::string started;
  std::string finished;
  double runtime_seconds = 0.0;
  std::vector<ArtifactEntry> artifacts;
  std::filesystem::path directory;

  // Hashes `relative` inside `directory` and appends it.
  void add(const std::string& relative);
  void write(const std::filesystem::path& path) const;
  // Throws Io when an artifact is missing or its checksum differs.
  void verify() const;
};

RunManifest read_manifest(const std::filesystem::path& path);

std::string utc_timestamp();

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<PlotSeries>& series);

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace vflbd
