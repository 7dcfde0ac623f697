#include "densestream/preprocess.hpp"

#include <gtest/gtest.h>

#include "densestream/rng.hpp"

using namespace densestream;

namespace {

Volume filled(Modality m, int nz, int ny, int nx, double dz, double dy, double dx, Vec3 origin,
              float value) {
  Volume v;
  v.modality = m;
  v.nz = nz;
  v.ny = ny;
  v.nx = nx;
  v.dz = dz;
  v.dy = dy;
  v.dx = dx;
  v.origin = origin;
  v.voxels.assign(v.voxel_count(), value);
  return v;
}

// Naive per-voxel trilinear oracle, written independently of resample():
// recomputes the source support and corner weights for every output voxel.
Volume resample_oracle(const Volume& src, const GridSpec& grid) {
  Volume out;
  out.modality = src.modality;
  out.origin = src.origin;
  out.dz = grid.slice_mm;
  out.dy = grid.in_plane_mm;
  out.dx = grid.in_plane_mm;
  out.nz = static_cast<int>(std::floor((src.nz - 1) * src.dz / out.dz + 1e-9)) + 1;
  out.ny = static_cast<int>(std::floor((src.ny - 1) * src.dy / out.dy + 1e-9)) + 1;
  out.nx = static_cast<int>(std::floor((src.nx - 1) * src.dx / out.dx + 1e-9)) + 1;
  out.voxels.resize(out.voxel_count());

  auto corner = [](double world, double origin, double spacing, int n, int& i0, int& i1, double& w) {
    double t = (world - origin) / spacing;
    if (n == 1) { i0 = i1 = 0; w = 0.0; return; }
    if (t <= 0.0) { i0 = 0; i1 = 1; w = 0.0; return; }
    if (t >= n - 1) { i0 = n - 2; i1 = n - 1; w = 1.0; return; }
    i0 = static_cast<int>(std::floor(t));
    i1 = i0 + 1;
    w = t - std::floor(t);
  };

  for (int z = 0; z < out.nz; ++z)
    for (int y = 0; y < out.ny; ++y)
      for (int x = 0; x < out.nx; ++x) {
        int z0, z1, y0, y1, x0, x1;
        double wz, wy, wx;
        corner(out.origin.z + z * out.dz, src.origin.z, src.dz, src.nz, z0, z1, wz);
        corner(out.origin.y + y * out.dy, src.origin.y, src.dy, src.ny, y0, y1, wy);
        corner(out.origin.x + x * out.dx, src.origin.x, src.dx, src.nx, x0, x1, wx);
        const double uz = 1.0 - wz, uy = 1.0 - wy, ux = 1.0 - wx;
        const double v = src.at(z0, y0, x0) * (uz * uy * ux) + src.at(z0, y0, x1) * (uz * uy * wx) +
                         src.at(z0, y1, x0) * (uz * wy * ux) + src.at(z0, y1, x1) * (uz * wy * wx) +
                         src.at(z1, y0, x0) * (wz * uy * ux) + src.at(z1, y0, x1) * (wz * uy * wx) +
                         src.at(z1, y1, x0) * (wz * wy * ux) + src.at(z1, y1, x1) * (wz * wy * wx);
        out.at(z, y, x) = static_cast<float>(v);
      }
  return out;
}

TEST(Resample, ConstantFieldStaysConstant) {
  Volume v = filled(Modality::ADC, 4, 8, 8, 3.0, 2.0, 2.0, {5.0, -3.0, 0.0}, 7.5f);
  GridSpec grid{0.5, 3.0, 4};
  Volume r = resample(v, grid);
  EXPECT_EQ(r.dz, 3.0);
  EXPECT_EQ(r.dy, 0.5);
  EXPECT_EQ(r.dx, 0.5);
  EXPECT_EQ(r.origin, v.origin);
  for (float x : r.voxels) EXPECT_EQ(x, 7.5f);
}

TEST(Resample, ReproducesAffineField) {
  Volume v = filled(Modality::T2w, 5, 9, 9, 2.0, 1.5, 1.5, {1.0, 2.0, -3.0}, 0.0f);
  const double ax = 0.11, ay = -0.07, az = 0.05, b = 0.4;
  for (int z = 0; z < v.nz; ++z)
    for (int y = 0; y < v.ny; ++y)
      for (int x = 0; x < v.nx; ++x) {
        const Vec3 p = v.world_at(z, y, x);
        v.at(z, y, x) = static_cast<float>(ax * p.x + ay * p.y + az * p.z + b);
      }
  GridSpec grid{0.5, 1.0, 4};
  Volume r = resample(v, grid);
  double max_err = 0.0;
  for (int z = 0; z < r.nz; ++z)
    for (int y = 0; y < r.ny; ++y)
      for (int x = 0; x < r.nx; ++x) {
        const Vec3 p = r.world_at(z, y, x);
        const double want = ax * p.x + ay * p.y + az * p.z + b;
        max_err = std::max(max_err, std::abs(r.at(z, y, x) - want));
      }
  EXPECT_LE(max_err, 1e-5);
}

TEST(Resample, MatchesNaiveOracleVoxelForVoxel) {
  Volume v = filled(Modality::Ktrans, 4, 4, 4, 1.0, 1.0, 1.0, {0.25, -1.0, 3.0}, 0.0f);
  Rng rng(99);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-2.0, 2.0));
  GridSpec grid{2.0, 1.0, 2};  // 2x in-plane downsample, z unchanged
  Volume got = resample(v, grid);
  Volume want = resample_oracle(v, grid);
  ASSERT_EQ(got.nz, want.nz);
  ASSERT_EQ(got.ny, want.ny);
  ASSERT_EQ(got.nx, want.nx);
  for (std::size_t i = 0; i < got.voxels.size(); ++i)
    EXPECT_EQ(got.voxels[i], want.voxels[i]) << "voxel " << i;
}

TEST(Resample, IdempotentOnMatchingGrid) {
  Volume v = filled(Modality::DWI, 3, 6, 6, 3.0, 0.5, 0.5, {-4.0, 2.0, 1.0}, 0.0f);
  Rng rng(3);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  GridSpec grid{0.5, 3.0, 4};
  Volume r = resample(v, grid);
  ASSERT_EQ(r.voxels.size(), v.voxels.size());
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    EXPECT_NEAR(r.voxels[i], v.voxels[i], 1e-6);
}

TEST(CenterCrop, WindowArithmetic) {
  Volume v = filled(Modality::T2w, 2, 640, 640, 3.0, 0.5, 0.5, {0.0, 0.0, 0.0}, 0.0f);
  GridSpec grid{0.5, 3.0, 320};
  Volume c = center_crop(v, grid);
  EXPECT_EQ(c.ny, 320);
  EXPECT_EQ(c.nx, 320);
  EXPECT_EQ(c.nz, 2);
  // window [160, 480) -> origin shifts by 160 * 0.5 mm
  EXPECT_DOUBLE_EQ(c.origin.x, 80.0);
  EXPECT_DOUBLE_EQ(c.origin.y, 80.0);
  EXPECT_DOUBLE_EQ(c.origin.z, 0.0);
}

TEST(CenterCrop, TieBreaksTowardLowerIndex) {
  Volume v = filled(Modality::T2w, 1, 321, 321, 3.0, 0.5, 0.5, {0.0, 0.0, 0.0}, 0.0f);
  GridSpec grid{0.5, 3.0, 320};
  Volume c = center_crop(v, grid);
  EXPECT_DOUBLE_EQ(c.origin.x, 0.0);  // window starts at index 0
  EXPECT_DOUBLE_EQ(c.origin.y, 0.0);
}

TEST(CenterCrop, TooSmallInputErrors) {
  Volume v = filled(Modality::T2w, 1, 128, 128, 3.0, 0.5, 0.5, {0.0, 0.0, 0.0}, 0.0f);
  GridSpec grid{0.5, 3.0, 320};
  EXPECT_THROW(center_crop(v, grid), data_error);
}

TEST(CenterCrop, PreservesVoxelValues) {
  Volume v = filled(Modality::T2w, 2, 8, 8, 1.0, 1.0, 1.0, {0.0, 0.0, 0.0}, 0.0f);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
  GridSpec grid{1.0, 1.0, 4};
  Volume c = center_crop(v, grid);
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        EXPECT_EQ(c.at(z, y, x), v.at(z, y + 2, x + 2));
}

Study study_of(Volume v) {
  Study s;
  s.subject_id = "S";
  for (Modality m : kAllModalities) {
    Volume copy = v;
    copy.modality = m;
    s.volume(m) = copy;
  }
  return s;
}

TEST(FitStats, ConstantFieldTriggersDegenerateGuard) {
  Study s = study_of(filled(Modality::T2w, 2, 4, 4, 1, 1, 1, {0, 0, 0}, 5.0f));
  ModalityStats st = fit_stats({s}, Modality::T2w);
  EXPECT_DOUBLE_EQ(st.mean, 5.0);
  EXPECT_DOUBLE_EQ(st.stddev, 0.0);
  Volume out = standardize(s.volume(Modality::T2w), st);
  for (float x : out.voxels) EXPECT_EQ(x, 0.0f);  // (5-5)/max(0,eps)
}

TEST(FitStats, TwoConstantVolumesHandArithmetic) {
  Study a = study_of(filled(Modality::ADC, 2, 3, 3, 1, 1, 1, {0, 0, 0}, 0.0f));
  Study b = study_of(filled(Modality::ADC, 2, 3, 3, 1, 1, 1, {0, 0, 0}, 2.0f));
  ModalityStats st = fit_stats({a, b}, Modality::ADC);
  EXPECT_DOUBLE_EQ(st.mean, 1.0);
  EXPECT_DOUBLE_EQ(st.stddev, 1.0);
  EXPECT_EQ(st.count, 36u);
}

TEST(FitStats, EmptyCohortErrors) {
  EXPECT_THROW(fit_stats({}, Modality::T2w), data_error);
}

TEST(FitStats, MatchesStreamingWelfordOracle) {
  std::vector<Study> cohort;
  Rng rng(17);
  for (int i = 0; i < 3; ++i) {
    Volume v = filled(Modality::DWI, 3, 5, 7, 1, 1, 1, {0, 0, 0}, 0.0f);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-10.0, 10.0));
    cohort.push_back(study_of(v));
  }
  // streaming oracle (Welford), a different computation path
  double mean = 0.0, m2 = 0.0;
  std::uint64_t n = 0;
  for (const auto& s : cohort)
    for (float x : s.volume(Modality::DWI).voxels) {
      ++n;
      const double d = x - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (x - mean);
    }
  const double std_oracle = std::sqrt(m2 / static_cast<double>(n));
  ModalityStats st = fit_stats(cohort, Modality::DWI);
  EXPECT_EQ(st.count, n);
  EXPECT_NEAR(st.mean, mean, 1e-6 * std::max(1.0, std::abs(mean)));
  EXPECT_NEAR(st.stddev, std_oracle, 1e-6 * std_oracle);
}

TEST(Standardize, TrainingCohortBecomesZeroMeanUnitStd) {
  std::vector<Study> cohort;
  Rng rng(23);
  for (int i = 0; i < 2; ++i) {
    Volume v = filled(Modality::Ktrans, 2, 6, 6, 1, 1, 1, {0, 0, 0}, 0.0f);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(0.0, 4.0));
    cohort.push_back(study_of(v));
  }
  ModalityStats st = fit_stats(cohort, Modality::Ktrans);
  double sum = 0.0, ssq = 0.0;
  std::uint64_t n = 0;
  for (const auto& s : cohort) {
    Volume out = standardize(s.volume(Modality::Ktrans), st);
    for (float x : out.voxels) {
      sum += x;
      ssq += static_cast<double>(x) * x;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double stddev = std::sqrt(ssq / static_cast<double>(n) - mean * mean);
  EXPECT_LE(std::abs(mean), 1e-6);
  EXPECT_LE(std::abs(stddev - 1.0), 1e-6);
}

TEST(Standardize, IdentityStatsIsIdentityMap) {
  Volume v = filled(Modality::T2w, 1, 3, 3, 1, 1, 1, {0, 0, 0}, 0.0f);
  Rng rng(5);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  ModalityStats st{Modality::T2w, 0.0, 1.0, 9};
  Volume out = standardize(v, st);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) EXPECT_EQ(out.voxels[i], v.voxels[i]);
}

TEST(Standardize, ModalityMismatchErrors) {
  Volume v = filled(Modality::T2w, 1, 2, 2, 1, 1, 1, {0, 0, 0}, 0.0f);
  ModalityStats st{Modality::ADC, 0.0, 1.0, 4};
  EXPECT_THROW(standardize(v, st), data_error);
}

TEST(Standardize, FrozenTrainStatsLeaveTestCohortOffCenter) {
  Study train = study_of(filled(Modality::T2w, 2, 4, 4, 1, 1, 1, {0, 0, 0}, 1.0f));
  Rng rng(31);
  for (auto& x : train.volume(Modality::T2w).voxels) x = static_cast<float>(rng.uniform(0.0, 2.0));
  ModalityStats st = fit_stats({train}, Modality::T2w);
  Volume test_vol = filled(Modality::T2w, 2, 4, 4, 1, 1, 1, {0, 0, 0}, 0.0f);
  for (auto& x : test_vol.voxels) x = static_cast<float>(rng.uniform(2.0, 5.0));  // shifted cohort
  Volume out = standardize(test_vol, st);
  double mean = 0.0;
  for (float x : out.voxels) mean += x;
  mean /= static_cast<double>(out.voxels.size());
  EXPECT_GT(std::abs(mean), 0.1);
}

TEST(Standardize, AffineAndInvertible) {
  Volume v = filled(Modality::DWI, 1, 4, 4, 1, 1, 1, {0, 0, 0}, 0.0f);
  Rng rng(41);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-5.0, 5.0));
  ModalityStats st{Modality::DWI, 1.25, 2.5, 16};
  Volume out = standardize(v, st);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    const double back = static_cast<double>(out.voxels[i]) * st.stddev + st.mean;
    EXPECT_NEAR(back, v.voxels[i], 1e-6);
  }
}

// A world point maps inside the cropped volume iff it lay inside the central
// crop-extent window of the original (checked away from the half-voxel
// boundary band, where the property is ill-posed).
TEST(WorldCoordinates, CropWindowConsistency) {
  Volume v = filled(Modality::T2w, 3, 400, 400, 3.0, 0.5, 0.5, {-7.0, 11.0, 2.0}, 0.0f);
  GridSpec grid{0.5, 3.0, 320};
  Volume c = center_crop(v, grid);
  const double window_mm = grid.crop * grid.in_plane_mm;  // 160 mm
  const Vec3 full_lo = v.origin;
  const Vec3 full_hi = v.world_max();
  const double cx = (full_lo.x + full_hi.x) / 2.0;
  const double cy = (full_lo.y + full_hi.y) / 2.0;
  Rng rng(53);
  for (int trial = 0; trial < 500; ++trial) {
    Vec3 p{rng.uniform(full_lo.x, full_hi.x), rng.uniform(full_lo.y, full_hi.y),
           rng.uniform(full_lo.z, full_hi.z)};
    const bool in_window = std::abs(p.x - cx) < window_mm / 2.0 - 1.0 &&
                           std::abs(p.y - cy) < window_mm / 2.0 - 1.0;
    const bool out_window = std::abs(p.x - cx) > window_mm / 2.0 + 1.0 ||
                            std::abs(p.y - cy) > window_mm / 2.0 + 1.0;
    if (in_window) EXPECT_TRUE(c.contains_world(p));
    if (out_window) EXPECT_FALSE(c.contains_world(p));
  }
}

TEST(StatsIo, RoundTrip) {
  StatsTable t;
  for (Modality m : kAllModalities)
    t[static_cast<int>(m)] = {m, 1.5 + static_cast<int>(m), 0.25, 1000};
  const auto path = std::filesystem::temp_directory_path() / "densestream_stats_test.json";
  save_stats(t, path);
  StatsTable r = load_stats(path);
  for (Modality m : kAllModalities) {
    EXPECT_EQ(r[static_cast<int>(m)].mean, t[static_cast<int>(m)].mean);
    EXPECT_EQ(r[static_cast<int>(m)].stddev, t[static_cast<int>(m)].stddev);
    EXPECT_EQ(r[static_cast<int>(m)].count, t[static_cast<int>(m)].count);
  }
  std::filesystem::remove(path);
}

}  // namespace
