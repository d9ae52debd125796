#include "vflbd/report.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "vflbd/error.hpp"

namespace vflbd {

std::string sha1_hex(std::string_view content) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(content.data(), content.size(), md, &len, EVP_sha1(), nullptr) == 1, ErrorKind::Io,
          "SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string git_blob_sha1(std::string_view content) {
  std::string buf = "blob " + std::to_string(content.size());
  buf.push_back('\0');
  buf.append(content);
  return sha1_hex(buf);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot create " + path.string());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string git_blob_sha1_file(const std::filesystem::path& path) { return git_blob_sha1(read_text(path)); }

void RunManifest::add(const std::string& relative) {
  artifacts.push_back({relative, git_blob_sha1_file(directory / relative)});
}

void RunManifest::write(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["config_hash"] = config_hash;
  j["started"] = started;
  j["finished"] = finished;
  j["runtime_seconds"] = runtime_seconds;
  auto& arr = j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& a : artifacts) arr.push_back({{"path", a.path}, {"sha1", a.sha1}});
  write_text(path, j.dump(2) + "\n");
}

void RunManifest::verify() const {
  for (const auto& a : artifacts) {
    const auto p = directory / a.path;
    require(std::filesystem::exists(p), ErrorKind::Io, "manifest artifact missing: " + p.string());
    require(git_blob_sha1_file(p) == a.sha1, ErrorKind::Io, "checksum mismatch: " + p.string());
  }
}

RunManifest read_manifest(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  RunManifest m;
  m.run_id = j.at("run_id");
  m.config_hash = j.at("config_hash");
  m.started = j.at("started");
  m.finished = j.at("finished");
  m.runtime_seconds = j.at("runtime_seconds");
  for (const auto& a : j.at("artifacts")) m.artifacts.push_back({a.at("path"), a.at("sha1")});
  m.directory = path.parent_path();
  return m;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<PlotSeries>& series) {
  constexpr double W = 640, H = 400, ml = 70, mr = 150, mt = 40, mb = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << py(yv) << "\" x2=\"" << W - mr << "\" y2=\"" << py(yv)
       << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
  os << "<text transform=\"translate(18," << (mt + H - mb) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(ylabel) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % std::size(palette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i)
      if (std::isfinite(series[s].y[i])) os << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i)
      if (std::isfinite(series[s].y[i]))
        os << "<circle cx=\"" << px(series[s].x[i]) << "\" cy=\"" << py(series[s].y[i]) << "\" r=\"3\" fill=\"" << color
           << "\"/>\n";
    os << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 16 * (s + 1) << "\" fill=\"" << color << "\">"
       << escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  write_text(path, os.str());
}

}  // namespace vflbd
