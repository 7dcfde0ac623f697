#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "densestream/volume.hpp"

// Spatial unification (trilinear resample to a common grid, center crop) and
// per-modality intensity standardization with statistics fitted on the
// training cohort only.

namespace densestream {

struct GridSpec {
  double in_plane_mm = 0.5;
  double slice_mm = 3.0;
  int crop = 320;  // in-plane crop, pixels

  void validate() const {
    if (!(in_plane_mm > 0.0) || !(slice_mm > 0.0)) throw data_error("grid spacing must be > 0");
    if (crop < 2 || crop % 2 != 0) throw data_error("grid crop size must be even and >= 2");
  }
};

// Output sample count along one axis: keep the same origin and cover the
// source extent without stepping past the last source sample.
inline int resampled_axis_dims(int n_in, double s_in, double s_out) {
  const double extent = (n_in - 1) * s_in;
  return static_cast<int>(std::floor(extent / s_out + 1e-9)) + 1;
}

inline int crop_start(int n, int crop) { return (n - crop) / 2; }  // ties toward lower index

namespace detail {

// Per-axis interpolation support: sample at continuous source coordinate t
// uses voxels i0 and i0+1 with weight w on the upper one. Points outside the
// source support clamp to the nearest voxel (w pinned to 0 or 1).
struct AxisSample {
  int i0 = 0;
  int i1 = 0;
  double w = 0.0;
};

inline AxisSample axis_sample(double world, double origin, double spacing, int n) {
  AxisSample a;
  const double t = (world - origin) / spacing;
  if (n == 1) return {0, 0, 0.0};
  if (t <= 0.0) return {0, 1, 0.0};
  if (t >= n - 1) return {n - 2, n - 1, 1.0};
  const double f = std::floor(t);
  a.i0 = static_cast<int>(f);
  a.i1 = a.i0 + 1;
  a.w = t - f;
  return a;
}

// Fixed 8-corner accumulation order; the test oracle reproduces it verbatim
// so impl and oracle agree bitwise.
inline double trilinear_at(const Volume& v, double wz, double wy, double wx) {
  const AxisSample az = axis_sample(wz, v.origin.z, v.dz, v.nz);
  const AxisSample ay = axis_sample(wy, v.origin.y, v.dy, v.ny);
  const AxisSample ax = axis_sample(wx, v.origin.x, v.dx, v.nx);
  const double c000 = v.at(az.i0, ay.i0, ax.i0);
  const double c001 = v.at(az.i0, ay.i0, ax.i1);
  const double c010 = v.at(az.i0, ay.i1, ax.i0);
  const double c011 = v.at(az.i0, ay.i1, ax.i1);
  const double c100 = v.at(az.i1, ay.i0, ax.i0);
  const double c101 = v.at(az.i1, ay.i0, ax.i1);
  const double c110 = v.at(az.i1, ay.i1, ax.i0);
  const double c111 = v.at(az.i1, ay.i1, ax.i1);
  const double uz = 1.0 - az.w, uy = 1.0 - ay.w, ux = 1.0 - ax.w;
  return c000 * (uz * uy * ux) + c001 * (uz * uy * ax.w) + c010 * (uz * ay.w * ux) +
         c011 * (uz * ay.w * ax.w) + c100 * (az.w * uy * ux) + c101 * (az.w * uy * ax.w) +
         c110 * (az.w * ay.w * ux) + c111 * (az.w * ay.w * ax.w);
}

}  // namespace detail

inline Volume resample(const Volume& src, const GridSpec& grid) {
  src.validate();
  grid.validate();
  Volume out;
  out.modality = src.modality;
  out.origin = src.origin;
  out.dz = grid.slice_mm;
  out.dy = grid.in_plane_mm;
  out.dx = grid.in_plane_mm;
  out.nz = resampled_axis_dims(src.nz, src.dz, out.dz);
  out.ny = resampled_axis_dims(src.ny, src.dy, out.dy);
  out.nx = resampled_axis_dims(src.nx, src.dx, out.dx);
  out.voxels.resize(out.voxel_count());
  std::size_t idx = 0;
  for (int z = 0; z < out.nz; ++z) {
    const double wz = out.origin.z + z * out.dz;
    for (int y = 0; y < out.ny; ++y) {
      const double wy = out.origin.y + y * out.dy;
      for (int x = 0; x < out.nx; ++x) {
        const double wx = out.origin.x + x * out.dx;
        out.voxels[idx++] = static_cast<float>(detail::trilinear_at(src, wz, wy, wx));
      }
    }
  }
  return out;
}

inline Volume center_crop(const Volume& src, const GridSpec& grid) {
  grid.validate();
  if (src.ny < grid.crop || src.nx < grid.crop)
    throw data_error("volume in-plane dims (" + std::to_string(src.ny) + "x" +
                     std::to_string(src.nx) + ") smaller than crop " +
                     std::to_string(grid.crop) + "; exclude the study instead");
  const int sy = crop_start(src.ny, grid.crop);
  const int sx = crop_start(src.nx, grid.crop);
  Volume out;
  out.modality = src.modality;
  out.nz = src.nz;
  out.ny = grid.crop;
  out.nx = grid.crop;
  out.dz = src.dz;
  out.dy = src.dy;
  out.dx = src.dx;
  out.origin = {src.origin.x + sx * src.dx, src.origin.y + sy * src.dy, src.origin.z};
  out.voxels.resize(out.voxel_count());
  for (int z = 0; z < src.nz; ++z)
    for (int y = 0; y < grid.crop; ++y) {
      const float* row = &src.voxels[(static_cast<std::size_t>(z) * src.ny + sy + y) * src.nx + sx];
      std::copy(row, row + grid.crop, &out.at(z, y, 0));
    }
  return out;
}

struct ModalityStats {
  Modality modality = Modality::T2w;
  double mean = 0.0;
  double stddev = 0.0;  // population (divisor N)
  std::uint64_t count = 0;
};

inline constexpr double kStdFloor = 1e-8;

// Mean/std over all voxels of all training-cohort volumes of one modality,
// two passes in double precision.
inline ModalityStats fit_stats(const std::vector<Study>& training, Modality modality) {
  std::uint64_t n = 0;
  double sum = 0.0;
  for (const auto& s : training) {
    const Volume& v = s.volume(modality);
    for (float x : v.voxels) sum += x;
    n += v.voxel_count();
  }
  if (n == 0) throw data_error("fit_stats: empty training cohort");
  const double mean = sum / static_cast<double>(n);
  double ssq = 0.0;
  for (const auto& s : training)
    for (float x : s.volume(modality).voxels) {
      const double d = x - mean;
      ssq += d * d;
    }
  ModalityStats st;
  st.modality = modality;
  st.mean = mean;
  st.stddev = std::sqrt(ssq / static_cast<double>(n));
  st.count = n;
  return st;
}

inline Volume standardize(const Volume& src, const ModalityStats& stats) {
  if (src.modality != stats.modality)
    throw data_error(std::string("standardize: stats are for ") + modality_name(stats.modality) +
                     " but volume is " + modality_name(src.modality));
  Volume out = src;
  const double denom = std::max(stats.stddev, kStdFloor);
  for (auto& v : out.voxels) v = static_cast<float>((v - stats.mean) / denom);
  return out;
}

using StatsTable = std::array<ModalityStats, 4>;

inline StatsTable fit_all_stats(const std::vector<Study>& training) {
  StatsTable t;
  for (Modality m : kAllModalities) t[static_cast<int>(m)] = fit_stats(training, m);
  return t;
}

inline void save_stats(const StatsTable& table, const std::filesystem::path& path) {
  nlohmann::json j;
  for (const auto& st : table) {
    nlohmann::json e;
    e["mean"] = st.mean;
    e["std"] = st.stddev;
    e["count"] = st.count;
    j[modality_name(st.modality)] = std::move(e);
  }
  write_file_text(path, j.dump(2) + "\n");
}

inline StatsTable load_stats(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad stats file " + path.string() + ": " + e.what());
  }
  StatsTable t;
  for (Modality m : kAllModalities) {
    const auto& e = j.at(modality_name(m));
    ModalityStats st;
    st.modality = m;
    st.mean = e.at("mean").get<double>();
    st.stddev = e.at("std").get<double>();
    st.count = e.at("count").get<std::uint64_t>();
    t[static_cast<int>(m)] = st;
  }
  return t;
}

// resample + crop for every modality of a study (standardization is applied
// separately once training stats exist)
inline Study unify_study(const Study& src, const GridSpec& grid) {
  Study out;
  out.subject_id = src.subject_id;
  out.cohort = src.cohort;
  out.findings = src.findings;
  for (Modality m : kAllModalities)
    out.volume(m) = center_crop(resample(src.volume(m), grid), grid);
  return out;
}

inline Study standardize_study(const Study& src, const StatsTable& stats) {
  Study out = src;
  for (Modality m : kAllModalities)
    out.volume(m) = standardize(src.volume(m), stats[static_cast<int>(m)]);
  return out;
}

}  // namespace densestream
