#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/preprocess.hpp"
#include "densestream/rng.hpp"
#include "densestream/volume.hpp"

// Deterministic synthetic cohort generator. Each modality is produced on its
// own acquisition grid (different spacing, dims and origin), but origins are
// solved so that resample-to-target + center-crop lands every modality of a
// study on the identical unified grid. Lesions are soft-edged ellipsoids whose
// cross-modality contrast signature differs by class.

namespace densestream {

struct AcquisitionGrid {
  int nz = 0, ny = 0, nx = 0;
  double slice_mm = 3.0;
  double in_plane_mm = 0.5;
};

struct ClassContrast {
  // absolute intensity offsets added inside a lesion, indexed by Modality
  std::array<double, 4> by_modality{};
};

struct PhantomSpec {
  int n_subjects = 100;
  int min_lesions = 1;
  int max_lesions = 2;
  double positive_fraction = 0.23;
  double test_fraction = 0.0;
  bool unknown_test_labels = true;

  GridSpec grid;  // unified target grid the cohort is designed against

  std::array<AcquisitionGrid, 4> acquisition = {{
      {11, 368, 368, 3.0, 0.5},  // T2w
      {11, 92, 92, 3.0, 2.0},    // ADC
      {11, 92, 92, 3.0, 2.0},    // DWI
      {21, 122, 122, 1.5, 1.5},  // Ktrans
  }};

  std::array<double, 4> base_intensity = {400.0, 1200.0, 300.0, 2.0};
  double background_amp = 0.08;  // relative amplitude of the smooth structure
  ClassContrast positive_contrast{{-80.0, -500.0, 150.0, 1.2}};
  ClassContrast negative_contrast{{-25.0, -150.0, 45.0, 0.35}};

  double lesion_radius_min_mm = 4.0;
  double lesion_radius_max_mm = 8.0;
  double min_lesion_separation_mm = 14.0;
  double noise_level = 0.05;  // noise stddev as a fraction of base intensity

  std::uint64_t master_seed = 1;

  void validate() const {
    if (n_subjects < 1) throw data_error("phantom: n_subjects must be >= 1");
    if (min_lesions < 0 || max_lesions < min_lesions)
      throw data_error("phantom: bad lesions_per_subject range");
    if (!(positive_fraction > 0.0 && positive_fraction < 1.0))
      throw data_error("phantom: positive_fraction must lie in (0,1)");
    if (test_fraction < 0.0 || test_fraction >= 1.0)
      throw data_error("phantom: test_fraction must lie in [0,1)");
    if (!(lesion_radius_min_mm > 0.0) || lesion_radius_max_mm < lesion_radius_min_mm)
      throw data_error("phantom: bad lesion radius range");
    grid.validate();
  }
};

// The patch envelope every sampling center must retain, in unified-grid voxels.
inline constexpr int kEnvelopeInPlane = 96;
inline constexpr int kEnvelopeSlices = 3;

namespace detail {

struct UnifiedLayout {
  int nz = 0;                       // unified slice count (shared by all modalities)
  std::array<Vec3, 4> origins;      // per-modality raw origin solving the alignment
  Vec3 cropped_origin;              // origin of the unified cropped grid
};

// Solve per-modality raw origins such that resample + center-crop yields the
// same grid for every modality: cropped origin = raw origin + crop_start * s.
inline UnifiedLayout unified_layout(const PhantomSpec& spec) {
  UnifiedLayout lay;
  lay.cropped_origin = {0.0, 0.0, 0.0};
  int nz_unified = -1;
  for (int mi = 0; mi < 4; ++mi) {
    const AcquisitionGrid& acq = spec.acquisition[mi];
    const int ny_out = resampled_axis_dims(acq.ny, acq.in_plane_mm, spec.grid.in_plane_mm);
    const int nx_out = resampled_axis_dims(acq.nx, acq.in_plane_mm, spec.grid.in_plane_mm);
    const int nz_out = resampled_axis_dims(acq.nz, acq.slice_mm, spec.grid.slice_mm);
    if (ny_out < spec.grid.crop || nx_out < spec.grid.crop)
      throw data_error(std::string("phantom: ") + modality_name(kAllModalities[mi]) +
                       " resamples to " + std::to_string(ny_out) + "x" + std::to_string(nx_out) +
                       " in-plane, smaller than crop " + std::to_string(spec.grid.crop));
    if (nz_unified < 0) nz_unified = nz_out;
    if (nz_out != nz_unified)
      throw data_error(std::string("phantom: ") + modality_name(kAllModalities[mi]) +
                       " z grid resamples to " + std::to_string(nz_out) +
                       " slices, but the study grid has " + std::to_string(nz_unified) +
                       "; adjust acquisition dims");
    const int sy = crop_start(ny_out, spec.grid.crop);
    const int sx = crop_start(nx_out, spec.grid.crop);
    lay.origins[mi] = {lay.cropped_origin.x - sx * spec.grid.in_plane_mm,
                       lay.cropped_origin.y - sy * spec.grid.in_plane_mm,
                       lay.cropped_origin.z};
  }
  lay.nz = nz_unified;
  return lay;
}

// world-mm box of admissible patch-envelope centers on the unified grid
struct PlacementBox {
  Vec3 lo, hi;
};

inline PlacementBox placement_box(const PhantomSpec& spec, const UnifiedLayout& lay) {
  const int half = kEnvelopeInPlane / 2;
  const int zoff = kEnvelopeSlices / 2;
  const int lo_ip = half;
  const int hi_ip = spec.grid.crop - kEnvelopeInPlane + half;  // exclusive
  const int lo_z = zoff;
  const int hi_z = lay.nz - kEnvelopeSlices + zoff;  // exclusive
  if (hi_ip <= lo_ip)
    throw data_error("phantom: crop " + std::to_string(spec.grid.crop) +
                     " leaves no admissible in-plane centers for the " +
                     std::to_string(kEnvelopeInPlane) + "-pixel patch envelope");
  if (hi_z <= lo_z)
    throw data_error("phantom: " + std::to_string(lay.nz) +
                     " unified slices leave no admissible slice centers for the " +
                     std::to_string(kEnvelopeSlices) + "-slice patch envelope");
  PlacementBox box;
  box.lo = {lay.cropped_origin.x + lo_ip * spec.grid.in_plane_mm,
            lay.cropped_origin.y + lo_ip * spec.grid.in_plane_mm,
            lay.cropped_origin.z + lo_z * spec.grid.slice_mm};
  box.hi = {lay.cropped_origin.x + (hi_ip - 1) * spec.grid.in_plane_mm,
            lay.cropped_origin.y + (hi_ip - 1) * spec.grid.in_plane_mm,
            lay.cropped_origin.z + (hi_z - 1) * spec.grid.slice_mm};
  return box;
}

struct SmoothField {
  // sum of three cosine waves; |value| <= 1
  std::array<Vec3, 3> wave_vec;  // 2*pi * direction / wavelength
  std::array<double, 3> phase;
  std::array<double, 3> amp;

  double value(const Vec3& p) const {
    double v = 0.0;
    for (int k = 0; k < 3; ++k)
      v += amp[k] * std::cos(wave_vec[k].x * p.x + wave_vec[k].y * p.y + wave_vec[k].z * p.z +
                             phase[k]);
    return v;
  }
};

inline SmoothField draw_smooth_field(Rng& rng) {
  SmoothField f;
  for (int k = 0; k < 3; ++k) {
    // random direction via normalized gaussian triple
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::max(d.norm(), 1e-12);
    const double wavelength = rng.uniform(40.0, 90.0);
    const double w = 2.0 * 3.14159265358979323846 / wavelength;
    f.wave_vec[k] = {d.x / n * w, d.y / n * w, d.z / n * w};
    f.phase[k] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    f.amp[k] = rng.uniform(0.5, 1.0) / 3.0;
  }
  return f;
}

struct Lesion {
  Vec3 center;
  Vec3 radii;  // axis-aligned ellipsoid semi-axes, mm
  ClinSig clin_sig = ClinSig::Negative;
};

// cosine-tapered ellipsoid profile: exactly 1 in the core, exactly 0 outside
inline double lesion_taper(const Lesion& l, const Vec3& p) {
  const double ux = (p.x - l.center.x) / l.radii.x;
  const double uy = (p.y - l.center.y) / l.radii.y;
  const double uz = (p.z - l.center.z) / l.radii.z;
  const double u = std::sqrt(ux * ux + uy * uy + uz * uz);
  constexpr double kCore = 0.6;
  if (u <= kCore) return 1.0;
  if (u >= 1.0) return 0.0;
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * (u - kCore) / (1.0 - kCore)));
}

}  // namespace detail

// Closed-form lesion-free intensity at a world point, exposed so tests can
// check generated voxels against it.
inline double phantom_background(const PhantomSpec& spec, int subject_index, Modality modality,
                                 const Vec3& p) {
  Rng rng(derive_seed(spec.master_seed, "phantom/background/" + std::to_string(subject_index) +
                                            "/" + modality_name(modality)));
  const detail::SmoothField field = detail::draw_smooth_field(rng);
  const double base = spec.base_intensity[static_cast<int>(modality)];
  return base * (1.0 + spec.background_amp * field.value(p));
}

namespace detail {

inline std::vector<Lesion> draw_lesions(const PhantomSpec& spec, int subject_index,
                                        const std::vector<ClinSig>& classes,
                                        const PlacementBox& box) {
  Rng rng(derive_seed(spec.master_seed, "phantom/lesions/" + std::to_string(subject_index)));
  std::vector<Lesion> lesions;
  for (ClinSig cls : classes) {
    Lesion l;
    l.clin_sig = cls;
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      l.center = {rng.uniform(box.lo.x, box.hi.x), rng.uniform(box.lo.y, box.hi.y),
                  rng.uniform(box.lo.z, box.hi.z)};
      placed = true;
      for (const auto& other : lesions)
        if ((l.center - other.center).norm() < spec.min_lesion_separation_mm) {
          placed = false;
          break;
        }
    }
    if (!placed)
      throw data_error("phantom: cannot place " + std::to_string(classes.size()) +
                       " lesions with separation " +
                       std::to_string(spec.min_lesion_separation_mm) +
                       " mm inside the admissible box; enlarge dims or crop");
    l.radii = {rng.uniform(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm),
               rng.uniform(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm),
               rng.uniform(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm)};
    lesions.push_back(l);
  }
  return lesions;
}

inline Volume generate_volume(const PhantomSpec& spec, int subject_index, Modality modality,
                              const Vec3& origin, const std::vector<Lesion>& lesions) {
  const int mi = static_cast<int>(modality);
  const AcquisitionGrid& acq = spec.acquisition[mi];
  Volume v;
  v.modality = modality;
  v.nz = acq.nz;
  v.ny = acq.ny;
  v.nx = acq.nx;
  v.dz = acq.slice_mm;
  v.dy = acq.in_plane_mm;
  v.dx = acq.in_plane_mm;
  v.origin = origin;
  v.voxels.resize(v.voxel_count());

  // accumulate in double and quantize to f32 once at the end, so a stored
  // voxel is exactly float(background + sum of lesion terms + noise)
  std::vector<double> field_values(v.voxel_count());

  {
    Rng rng(derive_seed(spec.master_seed, "phantom/background/" + std::to_string(subject_index) +
                                              "/" + modality_name(modality)));
    const SmoothField field = draw_smooth_field(rng);
    const double base = spec.base_intensity[mi];
    std::size_t idx = 0;
    for (int z = 0; z < v.nz; ++z)
      for (int y = 0; y < v.ny; ++y)
        for (int x = 0; x < v.nx; ++x) {
          const Vec3 p = v.world_at(z, y, x);
          field_values[idx++] = base * (1.0 + spec.background_amp * field.value(p));
        }
  }

  // lesions, each over its bounding sub-box only
  auto value_at = [&](int z, int y, int x) -> double& {
    return field_values[(static_cast<std::size_t>(z) * v.ny + y) * v.nx + x];
  };
  for (const auto& l : lesions) {
    const double contrast = (l.clin_sig == ClinSig::Positive
                                 ? spec.positive_contrast
                                 : spec.negative_contrast)
                                .by_modality[mi];
    const int z0 = std::max(0, static_cast<int>(std::floor((l.center.z - l.radii.z - origin.z) / v.dz)));
    const int z1 = std::min(v.nz - 1, static_cast<int>(std::ceil((l.center.z + l.radii.z - origin.z) / v.dz)));
    const int y0 = std::max(0, static_cast<int>(std::floor((l.center.y - l.radii.y - origin.y) / v.dy)));
    const int y1 = std::min(v.ny - 1, static_cast<int>(std::ceil((l.center.y + l.radii.y - origin.y) / v.dy)));
    const int x0 = std::max(0, static_cast<int>(std::floor((l.center.x - l.radii.x - origin.x) / v.dx)));
    const int x1 = std::min(v.nx - 1, static_cast<int>(std::ceil((l.center.x + l.radii.x - origin.x) / v.dx)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double t = lesion_taper(l, v.world_at(z, y, x));
          if (t > 0.0) value_at(z, y, x) += contrast * t;
        }
  }

  if (spec.noise_level > 0.0) {
    Rng rng(derive_seed(spec.master_seed, "phantom/noise/" + std::to_string(subject_index) + "/" +
                                              modality_name(modality)));
    const double sigma = spec.noise_level * spec.base_intensity[mi];
    for (auto& x : field_values) x += sigma * rng.normal();
  }

  for (std::size_t i = 0; i < field_values.size(); ++i)
    v.voxels[i] = static_cast<float>(field_values[i]);
  return v;
}

}  // namespace detail

// Per-lesion class labels for the whole cohort. Lesion counts are drawn per
// subject; labels are then dealt from a shuffled vector holding exactly
// round(total * positive_fraction) positives, so the realized fraction always
// matches the spec up to rounding.
inline std::vector<std::vector<ClinSig>> assign_lesion_classes(const PhantomSpec& spec) {
  std::vector<int> counts(static_cast<std::size_t>(spec.n_subjects));
  int total = 0;
  for (int i = 0; i < spec.n_subjects; ++i) {
    Rng rng(derive_seed(spec.master_seed, "phantom/count/" + std::to_string(i)));
    counts[static_cast<std::size_t>(i)] = rng.uniform_int(spec.min_lesions, spec.max_lesions + 1);
    total += counts[static_cast<std::size_t>(i)];
  }
  const int positives = static_cast<int>(std::llround(spec.positive_fraction * total));
  std::vector<ClinSig> pool(static_cast<std::size_t>(total), ClinSig::Negative);
  for (int i = 0; i < positives; ++i) pool[static_cast<std::size_t>(i)] = ClinSig::Positive;
  Rng rng(derive_seed(spec.master_seed, "phantom/labels"));
  rng.shuffle(pool);
  std::vector<std::vector<ClinSig>> per_subject;
  per_subject.reserve(counts.size());
  std::size_t next = 0;
  for (int c : counts) {
    per_subject.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(next),
                             pool.begin() + static_cast<std::ptrdiff_t>(next + c));
    next += static_cast<std::size_t>(c);
  }
  return per_subject;
}

inline std::string phantom_subject_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "P%04d", index);
  return buf;
}

// Generates one subject; `classes` must come from assign_lesion_classes so
// per-subject generation stays independent and parallelizable.
inline Study generate_subject(const PhantomSpec& spec, int subject_index,
                              const std::vector<ClinSig>& classes) {
  spec.validate();
  const detail::UnifiedLayout lay = detail::unified_layout(spec);
  const detail::PlacementBox box = detail::placement_box(spec, lay);
  const auto lesions = detail::draw_lesions(spec, subject_index, classes, box);

  Study s;
  s.subject_id = phantom_subject_id(subject_index);
  const int n_train = spec.n_subjects -
                      static_cast<int>(std::llround(spec.test_fraction * spec.n_subjects));
  s.cohort = subject_index < n_train ? Cohort::Train : Cohort::Test;
  for (Modality m : kAllModalities)
    s.volume(m) = detail::generate_volume(spec, subject_index, m,
                                          lay.origins[static_cast<int>(m)], lesions);
  int fid = 1;
  for (const auto& l : lesions) {
    Finding f;
    f.subject_id = s.subject_id;
    f.finding_id = fid++;
    f.world_pos = l.center;
    f.clin_sig = l.clin_sig;
    s.findings.push_back(f);
  }
  s.validate();
  return s;
}

inline std::vector<Study> generate_cohort(const PhantomSpec& spec) {
  spec.validate();
  const auto classes = assign_lesion_classes(spec);
  std::vector<Study> cohort;
  cohort.reserve(static_cast<std::size_t>(spec.n_subjects));
  for (int i = 0; i < spec.n_subjects; ++i)
    cohort.push_back(generate_subject(spec, i, classes[static_cast<std::size_t>(i)]));
  return cohort;
}

// ---------------------------------------------------------------------------
// JSON round trip for the spec document

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j["n_subjects"] = s.n_subjects;
  j["lesions_per_subject"] = {s.min_lesions, s.max_lesions};
  j["positive_fraction"] = s.positive_fraction;
  j["test_fraction"] = s.test_fraction;
  j["unknown_test_labels"] = s.unknown_test_labels;
  j["grid"] = {{"in_plane_mm", s.grid.in_plane_mm},
               {"slice_mm", s.grid.slice_mm},
               {"crop", s.grid.crop}};
  for (Modality m : kAllModalities) {
    const auto& a = s.acquisition[static_cast<int>(m)];
    j["acquisition"][modality_name(m)] = {{"dims", {a.nz, a.ny, a.nx}},
                                          {"slice_mm", a.slice_mm},
                                          {"in_plane_mm", a.in_plane_mm}};
    j["base_intensity"][modality_name(m)] = s.base_intensity[static_cast<int>(m)];
    j["positive_contrast"][modality_name(m)] = s.positive_contrast.by_modality[static_cast<int>(m)];
    j["negative_contrast"][modality_name(m)] = s.negative_contrast.by_modality[static_cast<int>(m)];
  }
  j["background_amp"] = s.background_amp;
  j["lesion_radius_mm"] = {s.lesion_radius_min_mm, s.lesion_radius_max_mm};
  j["min_lesion_separation_mm"] = s.min_lesion_separation_mm;
  j["noise_level"] = s.noise_level;
  j["master_seed"] = s.master_seed;
}

inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s = PhantomSpec{};
  s.n_subjects = j.value("n_subjects", s.n_subjects);
  if (j.contains("lesions_per_subject")) {
    s.min_lesions = j.at("lesions_per_subject").at(0).get<int>();
    s.max_lesions = j.at("lesions_per_subject").at(1).get<int>();
  }
  s.positive_fraction = j.value("positive_fraction", s.positive_fraction);
  s.test_fraction = j.value("test_fraction", s.test_fraction);
  s.unknown_test_labels = j.value("unknown_test_labels", s.unknown_test_labels);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    s.grid.in_plane_mm = g.value("in_plane_mm", s.grid.in_plane_mm);
    s.grid.slice_mm = g.value("slice_mm", s.grid.slice_mm);
    s.grid.crop = g.value("crop", s.grid.crop);
  }
  for (Modality m : kAllModalities) {
    const int mi = static_cast<int>(m);
    if (j.contains("acquisition") && j.at("acquisition").contains(modality_name(m))) {
      const auto& a = j.at("acquisition").at(modality_name(m));
      s.acquisition[mi].nz = a.at("dims").at(0).get<int>();
      s.acquisition[mi].ny = a.at("dims").at(1).get<int>();
      s.acquisition[mi].nx = a.at("dims").at(2).get<int>();
      s.acquisition[mi].slice_mm = a.value("slice_mm", s.acquisition[mi].slice_mm);
      s.acquisition[mi].in_plane_mm = a.value("in_plane_mm", s.acquisition[mi].in_plane_mm);
    }
    if (j.contains("base_intensity"))
      s.base_intensity[mi] = j.at("base_intensity").value(modality_name(m), s.base_intensity[mi]);
    if (j.contains("positive_contrast"))
      s.positive_contrast.by_modality[mi] =
          j.at("positive_contrast").value(modality_name(m), s.positive_contrast.by_modality[mi]);
    if (j.contains("negative_contrast"))
      s.negative_contrast.by_modality[mi] =
          j.at("negative_contrast").value(modality_name(m), s.negative_contrast.by_modality[mi]);
  }
  s.background_amp = j.value("background_amp", s.background_amp);
  if (j.contains("lesion_radius_mm")) {
    s.lesion_radius_min_mm = j.at("lesion_radius_mm").at(0).get<double>();
    s.lesion_radius_max_mm = j.at("lesion_radius_mm").at(1).get<double>();
  }
  s.min_lesion_separation_mm = j.value("min_lesion_separation_mm", s.min_lesion_separation_mm);
  s.noise_level = j.value("noise_level", s.noise_level);
  s.master_seed = j.value("master_seed", s.master_seed);
}

}  // namespace densestream
