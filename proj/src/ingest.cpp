#include "brainmass/ingest.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "brainmass/errors.hpp"

namespace brainmass {

static_assert(std::endian::native == std::endian::little,
              "binary scan and checkpoint formats assume a little-endian host");

namespace {

constexpr std::array<char, 4> kBtsMagic = {'B', 'T', 'S', '1'};

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_on(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

bool is_bts(const std::filesystem::path& path) { return path.extension() == ".bts"; }

void check_shape(std::size_t v, std::size_t t, const std::filesystem::path& path) {
  if (v < 2) throw ValidationError(path.string() + ": scan needs at least 2 ROIs, got " + std::to_string(v));
  if (t < 3) throw ValidationError(path.string() + ": scan needs at least 3 timepoints, got " + std::to_string(t));
}

void check_finite(const ScanMatrix& m, const std::filesystem::path& path) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j)))
        throw ValidationError(path.string() + ": non-finite value at row " + std::to_string(i + 1) +
                              ", column " + std::to_string(j + 1));
}

ScanMatrix load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scan '" + path.string() + "'");
  std::vector<std::vector<float>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    std::vector<float> row;
    for (auto field : split_on(body, ',')) {
      field = trim(field);
      if (!field.empty() && field.front() == '+') field.remove_prefix(1);
      float value = 0.0F;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
      if (ec == std::errc::result_out_of_range) {
        throw ValidationError(path.string() + ": non-finite value at row " + std::to_string(rows.size() + 1) +
                              ", column " + std::to_string(row.size() + 1));
      }
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw FormatError(path.string() + ": cannot parse '" + std::string(field) + "' at row " +
                          std::to_string(rows.size() + 1) + ", column " + std::to_string(row.size() + 1));
      }
      row.push_back(value);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError(path.string() + ": ragged rows, row " + std::to_string(rows.size() + 1) + " has " +
                        std::to_string(row.size()) + " values but row 1 has " +
                        std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": empty scan");
  ScanMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

ScanMatrix load_bts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open scan '" + path.string() + "'");
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kBtsMagic) throw FormatError(path.string() + ": missing BTS1 magic");
  std::uint32_t dims[2] = {0, 0};
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw FormatError(path.string() + ": truncated header");
  ScanMatrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
  const auto bytes = static_cast<std::streamsize>(sizeof(float) * m.size());
  in.read(reinterpret_cast<char*>(m.data()), bytes);
  if (in.gcount() != bytes) throw FormatError(path.string() + ": truncated payload");
  in.peek();
  if (!in.eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  return m;
}

int parse_label(std::string_view text, std::size_t line_no) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw FormatError("manifest line " + std::to_string(line_no) + ": label '" + std::string(text) +
                      "' is not an integer");
  if (value < kUnlabeled)
    throw ValidationError("manifest line " + std::to_string(line_no) + ": label must be >= -1");
  return value;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::pretrain_only: return "pretrain-only";
  }
  return "pretrain-only";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  if (text == "pretrain-only") return Split::pretrain_only;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

std::filesystem::path CohortManifest::resolve(const ManifestEntry& entry) const {
  if (entry.scan_path.is_absolute()) return entry.scan_path;
  return base_dir / entry.scan_path;
}

ScanMatrix load_scan(const std::filesystem::path& path) {
  ScanMatrix m = is_bts(path) ? load_bts(path) : load_csv(path);
  check_shape(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), path);
  check_finite(m, path);
  return m;
}

void write_scan(const std::filesystem::path& path, const ScanMatrix& data) {
  if (is_bts(path)) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(kBtsMagic.data(), kBtsMagic.size());
    const std::uint32_t dims[2] = {static_cast<std::uint32_t>(data.rows()),
                                   static_cast<std::uint32_t>(data.cols())};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(sizeof(float) * data.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  std::array<char, 32> buf{};
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), data(i, j));
      if (j > 0) out << ',';
      out.write(buf.data(), res.ptr - buf.data());
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

CohortManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  CohortManifest manifest;
  manifest.base_dir = path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty manifest");
  const auto header = split_on(trim(line), '\t');
  const std::vector<std::string_view> expected = split_on(kManifestHeader, '\t');
  std::set<std::string_view> seen;
  for (auto col : header) {
    if (!seen.insert(col).second) throw FormatError(path.string() + ": duplicate column '" + std::string(col) + "'");
  }
  for (auto col : expected) {
    if (!seen.contains(col)) throw FormatError(path.string() + ": missing column '" + std::string(col) + "'");
  }
  if (header != expected) {
    throw FormatError(path.string() + ": header must be exactly '" + std::string(kManifestHeader) + "'");
  }

  std::set<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto fields = split_on(body, '\t');
    if (fields.size() != expected.size())
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields, expected 5");
    ManifestEntry e;
    e.subject_id = std::string(trim(fields[0]));
    e.scan_path = std::string(trim(fields[1]));
    e.site = std::string(trim(fields[2]));
    e.label = parse_label(trim(fields[3]), line_no);
    e.split = parse_split(trim(fields[4]));
    if (e.subject_id.empty()) throw ValidationError(path.string() + ": empty subject_id on line " + std::to_string(line_no));
    if (!ids.insert(e.subject_id).second)
      throw ValidationError(path.string() + ": duplicate subject_id '" + e.subject_id + "'");
    manifest.entries.push_back(std::move(e));
  }
  if (manifest.entries.empty()) throw ValidationError(path.string() + ": manifest has no entries");

  std::filesystem::path first_path;
  for (const auto& e : manifest.entries) {
    const auto scan_path = manifest.resolve(e);
    if (!std::filesystem::exists(scan_path))
      throw IoError("scan '" + scan_path.string() + "' for subject '" + e.subject_id + "' does not exist");
    const auto rois = static_cast<std::size_t>(load_scan(scan_path).rows());
    if (manifest.atlas_rois == 0) {
      manifest.atlas_rois = rois;
      first_path = scan_path;
    } else if (rois != manifest.atlas_rois) {
      throw ValidationError("ROI count mismatch: '" + first_path.string() + "' has V=" +
                            std::to_string(manifest.atlas_rois) + " but '" + scan_path.string() +
                            "' has V=" + std::to_string(rois));
    }
  }
  return manifest;
}

void write_manifest(const std::filesystem::path& path, const CohortManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << kManifestHeader << '\n';
  for (const auto& e : manifest.entries) {
    out << e.subject_id << '\t' << e.scan_path.generic_string() << '\t' << e.site << '\t' << e.label << '\t'
        << to_string(e.split) << '\n';
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::vector<TimeseriesScan> load_cohort(const CohortManifest& manifest) {
  std::vector<TimeseriesScan> scans;
  scans.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    TimeseriesScan s{e.subject_id, e.site, e.label, e.split, load_scan(manifest.resolve(e))};
    if (manifest.atlas_rois != 0 && static_cast<std::size_t>(s.data.rows()) != manifest.atlas_rois)
      throw ValidationError("scan for '" + e.subject_id + "' has V=" + std::to_string(s.data.rows()) +
                            ", manifest expects " + std::to_string(manifest.atlas_rois));
    scans.push_back(std::move(s));
  }
  return scans;
}

}  // namespace brainmass
