#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "densestream/common.hpp"

// Data model and file IO for multi-modal volumetric studies: volumes
// (JSON header + raw little-endian f32 blob), findings CSV, predictions CSV,
// and the cohort manifest.

namespace densestream {

enum class Modality { T2w = 0, ADC = 1, DWI = 2, Ktrans = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::T2w, Modality::ADC,
                                                           Modality::DWI, Modality::Ktrans};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::T2w: return "t2w";
    case Modality::ADC: return "adc";
    case Modality::DWI: return "dwi";
    case Modality::Ktrans: return "ktrans";
  }
  throw data_error("invalid modality value");
}

inline Modality modality_from_name(const std::string& s) {
  for (Modality m : kAllModalities)
    if (s == modality_name(m)) return m;
  throw data_error("unknown modality name: '" + s + "'");
}

enum class ClinSig { Positive, Negative, Unknown };

inline const char* clin_sig_name(ClinSig c) {
  switch (c) {
    case ClinSig::Positive: return "1";
    case ClinSig::Negative: return "0";
    case ClinSig::Unknown: return "unknown";
  }
  throw data_error("invalid clin_sig value");
}

inline ClinSig clin_sig_from_string(const std::string& s) {
  if (s == "1") return ClinSig::Positive;
  if (s == "0") return ClinSig::Negative;
  if (s == "unknown") return ClinSig::Unknown;
  throw data_error("unknown clin_sig '" + s + "' (expected 1, 0 or unknown)");
}

enum class Cohort { Train, Test };

inline const char* cohort_name(Cohort c) { return c == Cohort::Train ? "train" : "test"; }

inline Cohort cohort_from_name(const std::string& s) {
  if (s == "train") return Cohort::Train;
  if (s == "test") return Cohort::Test;
  throw data_error("unknown cohort '" + s + "' (expected train or test)");
}

// One modality's scalar field. Voxels are stored C-order z-major; the world
// position of voxel (z,y,x) is origin + (x*dx, y*dy, z*dz), i.e. `origin` is
// the world position of the center of voxel (0,0,0).
struct Volume {
  Modality modality = Modality::T2w;
  int nz = 0, ny = 0, nx = 0;
  double dz = 0.0, dy = 0.0, dx = 0.0;
  Vec3 origin;
  std::vector<float> voxels;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(nz) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nx);
  }

  float at(int z, int y, int x) const {
    return voxels[(static_cast<std::size_t>(z) * ny + y) * nx + x];
  }
  float& at(int z, int y, int x) {
    return voxels[(static_cast<std::size_t>(z) * ny + y) * nx + x];
  }

  Vec3 world_at(int z, int y, int x) const {
    return {origin.x + x * dx, origin.y + y * dy, origin.z + z * dz};
  }

  // world extent covered by voxel centers (closed box)
  Vec3 world_max() const {
    return {origin.x + (nx - 1) * dx, origin.y + (ny - 1) * dy, origin.z + (nz - 1) * dz};
  }

  bool contains_world(const Vec3& p) const {
    const Vec3 hi = world_max();
    return p.x >= origin.x && p.x <= hi.x && p.y >= origin.y && p.y <= hi.y &&
           p.z >= origin.z && p.z <= hi.z;
  }

  void validate() const {
    if (nz < 1 || ny < 1 || nx < 1) throw data_error("volume dims must be >= 1");
    if (!(dz > 0.0 && dy > 0.0 && dx > 0.0)) throw data_error("volume spacing must be > 0");
    if (voxels.size() != voxel_count())
      throw data_error("voxel count does not match dims");
    if (!origin.finite()) throw data_error("volume origin must be finite");
    for (float v : voxels)
      if (!std::isfinite(v)) throw data_error("volume contains non-finite voxel");
  }
};

// Volume files come in pairs: `<base>.json` (header) + `<base>.raw` (blob).
inline void write_volume(const Volume& v, const std::filesystem::path& base) {
  v.validate();
  nlohmann::json header;
  header["modality"] = modality_name(v.modality);
  header["dims"] = {v.nz, v.ny, v.nx};
  header["spacing_mm"] = {v.dz, v.dy, v.dx};
  header["origin_mm"] = {v.origin.z, v.origin.y, v.origin.x};
  header["dtype"] = "f32le";
  header["order"] = "zyx";
  std::filesystem::path header_path = base;
  header_path += ".json";
  std::filesystem::path raw_path = base;
  raw_path += ".raw";
  header["raw"] = raw_path.filename().string();
  write_file_text(header_path, header.dump(2) + "\n");
  write_f32le(raw_path, v.voxels);
}

inline Volume read_volume(const std::filesystem::path& base) {
  std::filesystem::path header_path = base;
  header_path += ".json";
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(read_file_text(header_path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad volume header " + header_path.string() + ": " + e.what());
  }
  Volume v;
  try {
    v.modality = modality_from_name(header.at("modality").get<std::string>());
    auto dims = header.at("dims");
    v.nz = dims.at(0).get<int>();
    v.ny = dims.at(1).get<int>();
    v.nx = dims.at(2).get<int>();
    auto sp = header.at("spacing_mm");
    v.dz = sp.at(0).get<double>();
    v.dy = sp.at(1).get<double>();
    v.dx = sp.at(2).get<double>();
    auto org = header.at("origin_mm");
    v.origin = {org.at(2).get<double>(), org.at(1).get<double>(), org.at(0).get<double>()};
    if (header.at("dtype").get<std::string>() != "f32le")
      throw data_error("unsupported dtype in " + header_path.string());
    if (header.at("order").get<std::string>() != "zyx")
      throw data_error("unsupported voxel order in " + header_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad volume header " + header_path.string() + ": " + e.what());
  }
  std::filesystem::path raw_path = base;
  raw_path += ".raw";
  v.voxels = read_f32le(raw_path);
  v.validate();
  return v;
}

struct Finding {
  std::string subject_id;
  int finding_id = 0;
  Vec3 world_pos;
  ClinSig clin_sig = ClinSig::Unknown;
};

// CSV with header `subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig`.
inline std::vector<Finding> read_findings_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file_text(path));
  std::string line;
  if (!std::getline(in, line))
    throw data_error("findings csv is empty: " + path.string());
  static const std::string kHeader = "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig";
  if (trim(line) != kHeader)
    throw data_error("findings csv header mismatch in " + path.string() + " (expected '" +
                     kHeader + "')");
  std::vector<Finding> findings;
  std::set<std::pair<std::string, int>> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    auto fields = split_csv_line(trim(line));
    if (fields.size() != 6)
      throw data_error("malformed findings row (want 6 fields, got " +
                       std::to_string(fields.size()) + ") at " + where);
    Finding f;
    f.subject_id = fields[0];
    f.finding_id = static_cast<int>(parse_int(fields[1], where));
    f.world_pos.x = parse_double(fields[2], where);
    f.world_pos.y = parse_double(fields[3], where);
    f.world_pos.z = parse_double(fields[4], where);
    f.clin_sig = clin_sig_from_string(fields[5]);
    if (!f.world_pos.finite()) throw data_error("non-finite finding position at " + where);
    if (!seen.insert({f.subject_id, f.finding_id}).second)
      throw data_error("duplicate finding (" + f.subject_id + ", " +
                       std::to_string(f.finding_id) + ") at " + where);
    findings.push_back(std::move(f));
  }
  return findings;
}

inline void write_findings_csv(const std::vector<Finding>& findings,
                               const std::filesystem::path& path) {
  std::ostringstream os;
  os << "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n";
  for (const auto& f : findings) {
    os << f.subject_id << ',' << f.finding_id << ',' << format_fixed(f.world_pos.x, 3) << ','
       << format_fixed(f.world_pos.y, 3) << ',' << format_fixed(f.world_pos.z, 3) << ','
       << clin_sig_name(f.clin_sig) << '\n';
  }
  write_file_text(path, os.str());
}

struct PredictionRow {
  std::string subject_id;
  int finding_id = 0;
  double probability = 0.0;
};

inline void write_predictions_csv(std::vector<PredictionRow> rows,
                                  const std::filesystem::path& path) {
  for (const auto& r : rows) {
    if (!(r.probability >= 0.0 && r.probability <= 1.0))
      throw data_error("prediction probability outside [0,1] for (" + r.subject_id + ", " +
                       std::to_string(r.finding_id) + "): " + std::to_string(r.probability));
  }
  std::sort(rows.begin(), rows.end(), [](const PredictionRow& a, const PredictionRow& b) {
    return std::tie(a.subject_id, a.finding_id) < std::tie(b.subject_id, b.finding_id);
  });
  std::ostringstream os;
  os << "subject_id,finding_id,clin_sig_probability\n";
  for (const auto& r : rows)
    os << r.subject_id << ',' << r.finding_id << ',' << format_fixed(r.probability, 6) << '\n';
  write_file_text(path, os.str());
}

inline std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file_text(path));
  std::string line;
  if (!std::getline(in, line) || trim(line) != "subject_id,finding_id,clin_sig_probability")
    throw data_error("predictions csv header mismatch in " + path.string());
  std::vector<PredictionRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(trim(line));
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 3) throw data_error("malformed prediction row at " + where);
    rows.push_back({fields[0], static_cast<int>(parse_int(fields[1], where)),
                    parse_double(fields[2], where)});
  }
  return rows;
}

// One subject: all four aligned modality volumes, its findings, and the cohort
// it belongs to.
struct Study {
  std::string subject_id;
  std::array<Volume, 4> volumes;  // indexed by Modality
  std::vector<Finding> findings;
  Cohort cohort = Cohort::Train;

  const Volume& volume(Modality m) const { return volumes[static_cast<int>(m)]; }
  Volume& volume(Modality m) { return volumes[static_cast<int>(m)]; }

  void validate() const {
    for (Modality m : kAllModalities) {
      const Volume& v = volume(m);
      if (v.modality != m)
        throw data_error("study " + subject_id + ": volume slot " + modality_name(m) +
                         " holds modality " + modality_name(v.modality));
      v.validate();
      for (const auto& f : findings) {
        if (!v.contains_world(f.world_pos))
          throw data_error("study " + subject_id + ": finding " +
                           std::to_string(f.finding_id) + " lies outside the " +
                           modality_name(m) + " volume");
      }
    }
    for (const auto& f : findings)
      if (f.subject_id != subject_id)
        throw data_error("study " + subject_id + ": finding belongs to " + f.subject_id);
  }
};

struct StudyFiles {
  // volume entries are base paths (the loader appends .json/.raw)
  std::string t2w, adc, dwi, ktrans;
  std::string findings;
  Cohort cohort = Cohort::Train;

  const std::string& volume_base(Modality m) const {
    switch (m) {
      case Modality::T2w: return t2w;
      case Modality::ADC: return adc;
      case Modality::DWI: return dwi;
      case Modality::Ktrans: return ktrans;
    }
    throw data_error("invalid modality value");
  }
};

struct CohortManifest {
  std::filesystem::path root;  // resolved against the manifest's directory on load
  std::map<std::string, StudyFiles> studies;
  std::vector<std::string> exclude;

  bool excluded(const std::string& id) const {
    return std::find(exclude.begin(), exclude.end(), id) != exclude.end();
  }
};

inline CohortManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad manifest " + path.string() + ": " + e.what());
  }
  CohortManifest m;
  try {
    std::filesystem::path root = j.at("root").get<std::string>();
    m.root = root.is_absolute() ? root : path.parent_path() / root;
    for (auto& [id, entry] : j.at("studies").items()) {
      StudyFiles files;
      files.t2w = entry.at("t2w").get<std::string>();
      files.adc = entry.at("adc").get<std::string>();
      files.dwi = entry.at("dwi").get<std::string>();
      files.ktrans = entry.at("ktrans").get<std::string>();
      files.findings = entry.at("findings").get<std::string>();
      if (entry.contains("cohort"))
        files.cohort = cohort_from_name(entry.at("cohort").get<std::string>());
      m.studies[id] = std::move(files);
    }
    if (j.contains("exclude"))
      m.exclude = j.at("exclude").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad manifest " + path.string() + ": " + e.what());
  }
  return m;
}

inline void save_manifest(const CohortManifest& m, const std::filesystem::path& path,
                          const std::string& root_field = ".") {
  nlohmann::json j;
  j["root"] = root_field;
  j["studies"] = nlohmann::json::object();
  for (const auto& [id, files] : m.studies) {
    nlohmann::json e;
    e["t2w"] = files.t2w;
    e["adc"] = files.adc;
    e["dwi"] = files.dwi;
    e["ktrans"] = files.ktrans;
    e["findings"] = files.findings;
    e["cohort"] = cohort_name(files.cohort);
    j["studies"][id] = std::move(e);
  }
  j["exclude"] = m.exclude;
  write_file_text(path, j.dump(2) + "\n");
}

inline Study load_study(const CohortManifest& m, const std::string& id) {
  auto it = m.studies.find(id);
  if (it == m.studies.end()) throw data_error("manifest has no study '" + id + "'");
  const StudyFiles& files = it->second;
  Study s;
  s.subject_id = id;
  s.cohort = files.cohort;
  for (Modality mod : kAllModalities) {
    const std::filesystem::path base = m.root / files.volume_base(mod);
    std::filesystem::path header = base;
    header += ".json";
    if (!std::filesystem::exists(header))
      throw data_error("study '" + id + "': missing volume file " + header.string());
    s.volume(mod) = read_volume(base);
  }
  const std::filesystem::path findings_path = m.root / files.findings;
  if (!std::filesystem::exists(findings_path))
    throw data_error("study '" + id + "': missing findings file " + findings_path.string());
  // the CSV may be shared across subjects; keep only this subject's rows
  for (auto& f : read_findings_csv(findings_path))
    if (f.subject_id == id) s.findings.push_back(std::move(f));
  s.validate();
  return s;
}

// Loads every non-excluded study. The exclusion list is how studies with
// off-spec geometry or mismatching coordinates are dropped from a cohort.
inline std::vector<Study> load_cohort(const CohortManifest& m) {
  std::vector<Study> studies;
  for (const auto& [id, files] : m.studies) {
    if (m.excluded(id)) continue;
    studies.push_back(load_study(m, id));
  }
  return studies;
}

}  // namespace densestream
