#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/rng.hpp"
#include "densestream/volume.hpp"

// Finding-anchored modality alignment, semi-random center sampling with the
// 10x finding boost, and co-centered multi-size patch extraction.

namespace densestream {

// (h, w, d) = (y, x, z) extents in voxels
struct PatchGeometry {
  int h = 0, w = 0, d = 0;
  friend bool operator==(const PatchGeometry&, const PatchGeometry&) = default;
  std::string name() const { return std::to_string(h); }  // sizes are distinct in-plane
};

inline constexpr std::array<PatchGeometry, 4> kPatchGeometries = {
    {{42, 42, 1}, {48, 48, 3}, {64, 64, 3}, {96, 96, 3}}};
inline constexpr int kEnvelopeIndex = 3;  // the 96 geometry contains the others

enum class Family { Composite = 0, Solo = 1 };

inline const char* family_name(Family f) { return f == Family::Composite ? "composite" : "solo"; }

inline Family family_from_name(const std::string& s) {
  if (s == "composite") return Family::Composite;
  if (s == "solo") return Family::Solo;
  throw data_error("unknown channel family '" + s + "'");
}

// fixed channel orders per family
inline constexpr std::array<Modality, 3> kCompositeChannels = {Modality::T2w, Modality::ADC,
                                                               Modality::DWI};
inline constexpr std::array<Modality, 1> kSoloChannels = {Modality::Ktrans};

inline int family_channels(Family f) { return f == Family::Composite ? 3 : 1; }

struct PatchSpec {
  std::array<PatchGeometry, 4> geometries = kPatchGeometries;
  int patches_per_study = 100;
  double finding_boost = 10.0;
  double r_pos_mm = 5.0;

  void validate() const {
    if (patches_per_study < 1) throw data_error("patches_per_study must be >= 1");
    if (finding_boost < 0.0) throw data_error("finding boost must be >= 0");
    if (!(r_pos_mm > 0.0)) throw data_error("r_pos must be > 0");
    const PatchGeometry env = geometries[kEnvelopeIndex];
    for (const auto& g : geometries) {
      if (g.h < 1 || g.w < 1 || g.d < 1) throw data_error("patch extents must be >= 1");
      if (g.h % 2 != env.h % 2 || g.w % 2 != env.w % 2 || g.d % 2 != env.d % 2)
        throw data_error("patch geometries must share parity so a common center exists");
      if (g.h > env.h || g.w > env.w || g.d > env.d)
        throw data_error("the envelope geometry must contain all others");
    }
  }
};

enum class Provenance { FindingCentered, SemiRandom };

inline const char* provenance_name(Provenance p) {
  return p == Provenance::FindingCentered ? "finding_centered" : "semi_random";
}

inline Provenance provenance_from_name(const std::string& s) {
  if (s == "finding_centered") return Provenance::FindingCentered;
  if (s == "semi_random") return Provenance::SemiRandom;
  throw data_error("unknown provenance '" + s + "'");
}

// which proposal produced a semi-random draw (the boost-frequency contract is
// checked against this)
enum class SampleLaw { Forced, FindingNeighborhood, Uniform };

struct CenterSample {
  Index3 center;
  Provenance provenance = Provenance::SemiRandom;
  int finding_id = -1;  // set for FindingCentered samples
  SampleLaw law = SampleLaw::Uniform;
};

// Admissible range of centers along one axis for a patch of extent `size`:
// the in-patch center sits at offset floor(size/2), and start indices sweep
// the half-open [0, n - size), giving centers in [off, n - size + off).
struct AxisRange {
  int lo = 0;  // inclusive
  int hi = 0;  // exclusive
  bool contains(int c) const { return c >= lo && c < hi; }
  int clamp(int c) const { return std::min(std::max(c, lo), hi - 1); }
};

inline AxisRange admissible_axis(int n, int size) {
  const int off = size / 2;
  return {off, n - size + off};
}

struct AdmissibleRegion {
  AxisRange z, y, x;
  bool contains(Index3 c) const { return z.contains(c.z) && y.contains(c.y) && x.contains(c.x); }
  Index3 clamp(Index3 c) const { return {z.clamp(c.z), y.clamp(c.y), x.clamp(c.x)}; }
};

inline AdmissibleRegion admissible_region(const Volume& v, const PatchGeometry& envelope) {
  AdmissibleRegion r{admissible_axis(v.nz, envelope.d), admissible_axis(v.ny, envelope.h),
                     admissible_axis(v.nx, envelope.w)};
  if (r.z.hi <= r.z.lo || r.y.hi <= r.y.lo || r.x.hi <= r.x.lo)
    throw data_error("volume " + std::to_string(v.nz) + "x" + std::to_string(v.ny) + "x" +
                     std::to_string(v.nx) + " too small to retain a " + std::to_string(envelope.h) +
                     "x" + std::to_string(envelope.w) + "x" + std::to_string(envelope.d) +
                     " patch");
  return r;
}

// Nearest voxel index (round-half-up per axis) of a world position in each
// modality. The preprocessed grids are unified, so all four must agree; a
// divergence means the study escaped unification and is rejected.
inline Index3 align_modalities(const Study& study, const Finding& finding) {
  std::optional<Index3> common;
  for (Modality m : kAllModalities) {
    const Volume& v = study.volume(m);
    const Index3 idx{round_half_up((finding.world_pos.z - v.origin.z) / v.dz),
                     round_half_up((finding.world_pos.y - v.origin.y) / v.dy),
                     round_half_up((finding.world_pos.x - v.origin.x) / v.dx)};
    if (!common) {
      common = idx;
    } else if (!(idx == *common)) {
      throw data_error("study " + study.subject_id + ", finding " +
                       std::to_string(finding.finding_id) + ": voxel index diverges across " +
                       "modalities (" + modality_name(m) + " maps to " + index_to_string(idx) +
                       " vs " + index_to_string(*common) + "); grids are not unified");
    }
  }
  return *common;
}

// Semi-random center sampling. Every finding's exact center is force-included
// once; each remaining draw picks a proposal family with probability
// proportional to weight (`finding_boost` per finding vs 1 for the uniform
// law), then samples within it.
inline std::vector<CenterSample> sample_centers(const Study& study, const PatchSpec& spec,
                                                std::uint64_t seed) {
  spec.validate();
  const Volume& ref = study.volume(Modality::T2w);
  const AdmissibleRegion region = admissible_region(ref, spec.geometries[kEnvelopeIndex]);

  const int n_findings = static_cast<int>(study.findings.size());
  if (n_findings > spec.patches_per_study)
    throw data_error("study " + study.subject_id + " has more findings (" +
                     std::to_string(n_findings) + ") than patches_per_study (" +
                     std::to_string(spec.patches_per_study) + ")");

  std::vector<CenterSample> samples;
  samples.reserve(static_cast<std::size_t>(spec.patches_per_study));
  for (const auto& f : study.findings) {
    CenterSample s;
    s.center = region.clamp(align_modalities(study, f));
    s.provenance = Provenance::FindingCentered;
    s.finding_id = f.finding_id;
    s.law = SampleLaw::Forced;
    samples.push_back(s);
  }

  Rng rng(seed);
  const double total_weight = spec.finding_boost * n_findings + 1.0;
  while (samples.size() < static_cast<std::size_t>(spec.patches_per_study)) {
    CenterSample s;
    s.provenance = Provenance::SemiRandom;
    const double r = rng.uniform01() * total_weight;
    if (n_findings > 0 && r < spec.finding_boost * n_findings) {
      const int k = std::min(static_cast<int>(r / spec.finding_boost), n_findings - 1);
      const Finding& f = study.findings[static_cast<std::size_t>(k)];
      const Vec3 p = f.world_pos + rng.in_ball(spec.r_pos_mm);
      const Index3 raw{round_half_up((p.z - ref.origin.z) / ref.dz),
                       round_half_up((p.y - ref.origin.y) / ref.dy),
                       round_half_up((p.x - ref.origin.x) / ref.dx)};
      s.center = region.clamp(raw);
      s.law = SampleLaw::FindingNeighborhood;
    } else {
      s.center = {rng.uniform_int(region.z.lo, region.z.hi),
                  rng.uniform_int(region.y.lo, region.y.hi),
                  rng.uniform_int(region.x.lo, region.x.hi)};
      s.law = SampleLaw::Uniform;
    }
    samples.push_back(s);
  }
  return samples;
}

// One geometry's voxels for one channel family, laid out [c][z][y][x].
struct PatchTensor {
  PatchGeometry geom;
  int channels = 0;
  std::vector<float> data;

  float at(int c, int z, int y, int x) const {
    return data[((static_cast<std::size_t>(c) * geom.d + z) * geom.h + y) * geom.w + x];
  }
};

struct PatchSet {
  Index3 center;
  Vec3 center_world;
  std::array<PatchTensor, 4> composite;
  std::array<PatchTensor, 4> solo;
  ClinSig label = ClinSig::Unknown;
  Provenance provenance = Provenance::SemiRandom;
  int finding_id = -1;

  const std::array<PatchTensor, 4>& family(Family f) const {
    return f == Family::Composite ? composite : solo;
  }
};

namespace detail {

inline PatchTensor slice_patch(const Study& study, Index3 center, const PatchGeometry& g,
                               Family fam) {
  PatchTensor t;
  t.geom = g;
  t.channels = family_channels(fam);
  t.data.resize(static_cast<std::size_t>(t.channels) * g.d * g.h * g.w);
  const int z0 = center.z - g.d / 2;
  const int y0 = center.y - g.h / 2;
  const int x0 = center.x - g.w / 2;
  std::size_t idx = 0;
  for (int c = 0; c < t.channels; ++c) {
    const Modality m = fam == Family::Composite ? kCompositeChannels[static_cast<std::size_t>(c)]
                                                : kSoloChannels[static_cast<std::size_t>(c)];
    const Volume& v = study.volume(m);
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const float* row = &v.voxels[((static_cast<std::size_t>(z0 + z) * v.ny) + (y0 + y)) *
                                         static_cast<std::size_t>(v.nx) +
                                     static_cast<std::size_t>(x0)];
        std::copy(row, row + g.w, t.data.begin() + static_cast<std::ptrdiff_t>(idx));
        idx += static_cast<std::size_t>(g.w);
      }
  }
  return t;
}

}  // namespace detail

// Patch label: Positive if a clinically significant finding lies within
// r_pos of the center; Unknown if only unlabeled findings do, or if the study
// itself carries no labels (test cohort); Negative otherwise.
inline ClinSig patch_label(const Study& study, const Vec3& center_world, double r_pos_mm) {
  bool unknown_nearby = false;
  for (const auto& f : study.findings) {
    if ((f.world_pos - center_world).norm() <= r_pos_mm) {
      if (f.clin_sig == ClinSig::Positive) return ClinSig::Positive;
      if (f.clin_sig == ClinSig::Unknown) unknown_nearby = true;
    }
  }
  if (unknown_nearby || study.cohort == Cohort::Test) return ClinSig::Unknown;
  return ClinSig::Negative;
}

inline PatchSet extract_patch_set(const Study& study, const CenterSample& sample,
                                  const PatchSpec& spec) {
  const Volume& ref = study.volume(Modality::T2w);
  const AdmissibleRegion region = admissible_region(ref, spec.geometries[kEnvelopeIndex]);
  if (!region.contains(sample.center))
    throw data_error("study " + study.subject_id + ": center " + index_to_string(sample.center) +
                     " cannot retain the patch envelope");
  PatchSet set;
  set.center = sample.center;
  set.center_world = ref.world_at(sample.center.z, sample.center.y, sample.center.x);
  for (int gi = 0; gi < 4; ++gi) {
    set.composite[static_cast<std::size_t>(gi)] = detail::slice_patch(
        study, sample.center, spec.geometries[static_cast<std::size_t>(gi)], Family::Composite);
    set.solo[static_cast<std::size_t>(gi)] = detail::slice_patch(
        study, sample.center, spec.geometries[static_cast<std::size_t>(gi)], Family::Solo);
  }
  set.label = patch_label(study, set.center_world, spec.r_pos_mm);
  set.provenance = sample.provenance;
  set.finding_id = sample.finding_id;
  return set;
}

// ---------------------------------------------------------------------------
// patch archive: `<subject>.patches.json` (header) + `.bin` (f32le records)
// + `.csv` (per-record center/label/provenance index)

struct PatchRecordMeta {
  Index3 center;
  Vec3 center_world;
  ClinSig label = ClinSig::Unknown;
  Provenance provenance = Provenance::SemiRandom;
  int finding_id = -1;
};

struct PatchArchive {
  std::string subject_id;
  Cohort cohort = Cohort::Train;
  PatchSpec spec;
  std::vector<PatchRecordMeta> records;
  std::vector<float> blob;  // records * record_floats()

  // record layout: composite patches geometry-ascending, then solo
  static std::size_t patch_floats(const PatchGeometry& g, Family f) {
    return static_cast<std::size_t>(family_channels(f)) * g.d * g.h * g.w;
  }

  std::size_t record_floats() const {
    std::size_t n = 0;
    for (const auto& g : spec.geometries) n += patch_floats(g, Family::Composite);
    for (const auto& g : spec.geometries) n += patch_floats(g, Family::Solo);
    return n;
  }

  std::size_t patch_offset(Family f, int geometry_index) const {
    std::size_t off = 0;
    for (Family fam : {Family::Composite, Family::Solo})
      for (int gi = 0; gi < 4; ++gi) {
        if (fam == f && gi == geometry_index) return off;
        off += patch_floats(spec.geometries[static_cast<std::size_t>(gi)], fam);
      }
    throw data_error("bad patch slot");
  }

  void append(const PatchSet& set) {
    records.push_back({set.center, set.center_world, set.label, set.provenance, set.finding_id});
    for (const auto& p : set.composite) blob.insert(blob.end(), p.data.begin(), p.data.end());
    for (const auto& p : set.solo) blob.insert(blob.end(), p.data.begin(), p.data.end());
  }

  // view of one stored patch
  const float* patch_data(std::size_t record, Family f, int geometry_index) const {
    return blob.data() + record * record_floats() + patch_offset(f, geometry_index);
  }
};

inline void save_patch_archive(const PatchArchive& a, const std::filesystem::path& base) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["subject_id"] = a.subject_id;
  j["cohort"] = cohort_name(a.cohort);
  j["dtype"] = "f32le";
  j["records"] = a.records.size();
  j["record_floats"] = a.record_floats();
  j["patches_per_study"] = a.spec.patches_per_study;
  j["finding_boost"] = a.spec.finding_boost;
  j["r_pos_mm"] = a.spec.r_pos_mm;
  j["geometries"] = nlohmann::json::array();
  for (const auto& g : a.spec.geometries) j["geometries"].push_back({g.h, g.w, g.d});
  j["composite_channels"] = {"t2w", "adc", "dwi"};
  j["solo_channels"] = {"ktrans"};
  std::filesystem::path header = base;
  header += ".json";
  write_file_text(header, j.dump(2) + "\n");

  std::filesystem::path bin = base;
  bin += ".bin";
  write_f32le(bin, a.blob);

  std::ostringstream csv;
  csv << "record,cz,cy,cx,world_x_mm,world_y_mm,world_z_mm,label,provenance,finding_id\n";
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& r = a.records[i];
    csv << i << ',' << r.center.z << ',' << r.center.y << ',' << r.center.x << ','
        << format_fixed(r.center_world.x, 3) << ',' << format_fixed(r.center_world.y, 3) << ','
        << format_fixed(r.center_world.z, 3) << ',' << clin_sig_name(r.label) << ','
        << provenance_name(r.provenance) << ','
        << (r.finding_id >= 0 ? std::to_string(r.finding_id) : "") << '\n';
  }
  std::filesystem::path csvp = base;
  csvp += ".csv";
  write_file_text(csvp, csv.str());
}

inline PatchArchive load_patch_archive(const std::filesystem::path& base) {
  std::filesystem::path header = base;
  header += ".json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(header));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad patch archive header " + header.string() + ": " + e.what());
  }
  PatchArchive a;
  try {
    a.subject_id = j.at("subject_id").get<std::string>();
    a.cohort = cohort_from_name(j.at("cohort").get<std::string>());
    a.spec.patches_per_study = j.at("patches_per_study").get<int>();
    a.spec.finding_boost = j.at("finding_boost").get<double>();
    a.spec.r_pos_mm = j.at("r_pos_mm").get<double>();
    const auto& gs = j.at("geometries");
    for (int gi = 0; gi < 4; ++gi) {
      a.spec.geometries[static_cast<std::size_t>(gi)] = {gs.at(gi).at(0).get<int>(),
                                                         gs.at(gi).at(1).get<int>(),
                                                         gs.at(gi).at(2).get<int>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad patch archive header " + header.string() + ": " + e.what());
  }

  std::filesystem::path csvp = base;
  csvp += ".csv";
  std::istringstream in(read_file_text(csvp));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto f = split_csv_line(trim(line));
    if (f.size() != 10) throw data_error("malformed patch index row in " + csvp.string());
    PatchRecordMeta r;
    r.center = {static_cast<int>(parse_int(f[1], "cz")), static_cast<int>(parse_int(f[2], "cy")),
                static_cast<int>(parse_int(f[3], "cx"))};
    r.center_world = {parse_double(f[4], "wx"), parse_double(f[5], "wy"), parse_double(f[6], "wz")};
    r.label = clin_sig_from_string(f[7]);
    r.provenance = provenance_from_name(f[8]);
    r.finding_id = f[9].empty() ? -1 : static_cast<int>(parse_int(f[9], "finding_id"));
    a.records.push_back(r);
  }

  std::filesystem::path bin = base;
  bin += ".bin";
  a.blob = read_f32le(bin);
  if (a.blob.size() != a.records.size() * a.record_floats())
    throw data_error("patch archive blob size mismatch for " + base.string());
  if (a.records.size() != j.at("records").get<std::size_t>())
    throw data_error("patch archive record count mismatch for " + base.string());
  return a;
}

// Extracts the full patch archive for one study (preprocessed + standardized).
inline PatchArchive extract_study_patches(const Study& study, const PatchSpec& spec,
                                          std::uint64_t seed) {
  PatchArchive a;
  a.subject_id = study.subject_id;
  a.cohort = study.cohort;
  a.spec = spec;
  for (const auto& sample : sample_centers(study, spec, seed))
    a.append(extract_patch_set(study, sample, spec));
  return a;
}

}  // namespace densestream
