#include "densestream/volume.hpp"

#include <gtest/gtest.h>

#include "densestream/rng.hpp"
#include "support/tempdir.hpp"

using namespace densestream;

namespace {

Volume make_volume(Modality m, int nz, int ny, int nx, double dz, double dy, double dx,
                   Vec3 origin = {}) {
  Volume v;
  v.modality = m;
  v.nz = nz;
  v.ny = ny;
  v.nx = nx;
  v.dz = dz;
  v.dy = dy;
  v.dx = dx;
  v.origin = origin;
  v.voxels.assign(v.voxel_count(), 0.0f);
  return v;
}

Volume seeded_volume(Modality m, int nz, int ny, int nx, std::uint64_t seed) {
  Volume v = make_volume(m, nz, ny, nx, 3.0, 0.5, 0.5);
  Rng rng(seed);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-3.0, 3.0));
  return v;
}

TEST(VolumeIo, ConstantVolumeBlobIsEightIdenticalWords) {
  TempDir dir;
  Volume v = make_volume(Modality::T2w, 2, 2, 2, 3.0, 0.5, 0.5);
  v.voxels.assign(8, 1.0f);
  write_volume(v, dir / "const");
  auto bytes = read_file_bytes(dir / "const.raw");
  ASSERT_EQ(bytes.size(), 32u);
  for (int i = 0; i < 8; ++i)
    EXPECT_EQ(0, std::memcmp(bytes.data(), bytes.data() + 4 * i, 4));
  float word;
  std::memcpy(&word, bytes.data(), 4);
  EXPECT_EQ(word, 1.0f);
}

TEST(VolumeIo, RoundTripIsBitwiseExact) {
  TempDir dir;
  Volume v = seeded_volume(Modality::DWI, 8, 8, 8, 42);
  v.origin = {1.5, -2.25, 10.0};
  write_volume(v, dir / "rt");
  Volume r = read_volume(dir / "rt");
  EXPECT_EQ(r.modality, Modality::DWI);
  ASSERT_EQ(r.voxels.size(), v.voxels.size());
  EXPECT_EQ(0, std::memcmp(r.voxels.data(), v.voxels.data(), v.voxels.size() * 4));
  EXPECT_EQ(r.origin, v.origin);
}

TEST(VolumeIo, HeaderSpacingSurvivesReload) {
  TempDir dir;
  Volume v = make_volume(Modality::ADC, 4, 6, 6, 3.0, 0.5, 0.5);
  write_volume(v, dir / "sp");
  Volume r = read_volume(dir / "sp");
  EXPECT_EQ(r.dz, 3.0);
  EXPECT_EQ(r.dy, 0.5);
  EXPECT_EQ(r.dx, 0.5);
}

TEST(VolumeIo, NonFiniteVoxelRejectedBeforeWrite) {
  TempDir dir;
  Volume v = make_volume(Modality::T2w, 2, 2, 2, 1.0, 1.0, 1.0);
  v.voxels[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(write_volume(v, dir / "bad"), data_error);
  EXPECT_FALSE(std::filesystem::exists(dir / "bad.raw"));
}

TEST(VolumeIo, MissingFileErrorNamesPath) {
  TempDir dir;
  try {
    read_volume(dir / "nope");
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

TEST(FindingsCsv, ParsesDirectRow) {
  TempDir dir;
  write_file_text(dir / "f.csv",
                  "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n"
                  "S001,1,10.0,-4.5,12.0,1\n");
  auto fs = read_findings_csv(dir / "f.csv");
  ASSERT_EQ(fs.size(), 1u);
  EXPECT_EQ(fs[0].subject_id, "S001");
  EXPECT_EQ(fs[0].finding_id, 1);
  EXPECT_EQ(fs[0].world_pos, (Vec3{10.0, -4.5, 12.0}));
  EXPECT_EQ(fs[0].clin_sig, ClinSig::Positive);
}

TEST(FindingsCsv, UnknownLabelParses) {
  TempDir dir;
  write_file_text(dir / "f.csv",
                  "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n"
                  "S001,1,0,0,0,unknown\n");
  auto fs = read_findings_csv(dir / "f.csv");
  ASSERT_EQ(fs.size(), 1u);
  EXPECT_EQ(fs[0].clin_sig, ClinSig::Unknown);
}

TEST(FindingsCsv, HeaderOnlyYieldsEmptyList) {
  TempDir dir;
  write_file_text(dir / "f.csv", "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n");
  EXPECT_TRUE(read_findings_csv(dir / "f.csv").empty());
}

TEST(FindingsCsv, MalformedRowErrorCarriesLineNumber) {
  TempDir dir;
  write_file_text(dir / "f.csv",
                  "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n"
                  "S001,1,0,0,0,1\n"
                  "S002,not_a_number,0,0,0,1\n");
  try {
    read_findings_csv(dir / "f.csv");
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(FindingsCsv, DuplicateKeyRejected) {
  TempDir dir;
  write_file_text(dir / "f.csv",
                  "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n"
                  "S001,1,0,0,0,1\n"
                  "S001,1,1,1,1,0\n");
  EXPECT_THROW(read_findings_csv(dir / "f.csv"), data_error);
}

TEST(FindingsCsv, ParseSerializeIdempotentModuloOrder) {
  TempDir dir;
  std::vector<Finding> fs = {
      {"S002", 2, {3.25, -1.5, 9.0}, ClinSig::Negative},
      {"S001", 1, {10.0, -4.5, 12.0}, ClinSig::Positive},
      {"S003", 1, {0.0, 0.0, 0.0}, ClinSig::Unknown},
  };
  write_findings_csv(fs, dir / "a.csv");
  auto once = read_findings_csv(dir / "a.csv");
  write_findings_csv(once, dir / "b.csv");
  auto twice = read_findings_csv(dir / "b.csv");
  ASSERT_EQ(once.size(), twice.size());
  for (std::size_t i = 0; i < once.size(); ++i) {
    EXPECT_EQ(once[i].subject_id, twice[i].subject_id);
    EXPECT_EQ(once[i].finding_id, twice[i].finding_id);
    EXPECT_EQ(once[i].world_pos, twice[i].world_pos);
    EXPECT_EQ(once[i].clin_sig, twice[i].clin_sig);
  }
}

TEST(PredictionsCsv, FormatsSortsAndGuards) {
  TempDir dir;
  write_predictions_csv({{"S002", 1, 0.01}, {"S001", 1, 0.95}}, dir / "p.csv");
  EXPECT_EQ(read_file_text(dir / "p.csv"),
            "subject_id,finding_id,clin_sig_probability\n"
            "S001,1,0.950000\n"
            "S002,1,0.010000\n");
  EXPECT_THROW(write_predictions_csv({{"S003", 2, 1.2}}, dir / "q.csv"), data_error);
}

TEST(Manifest, ExclusionYieldsDisjointStudySet) {
  TempDir dir;
  // two tiny studies on disk
  for (const std::string id : {"A", "B"}) {
    for (Modality m : kAllModalities) {
      Volume v = seeded_volume(m, 2, 4, 4, fnv1a64(id) ^ static_cast<std::uint64_t>(m));
      v.modality = m;
      write_volume(v, dir / (id + "_" + modality_name(m)));
    }
    write_file_text(dir / (id + "_findings.csv"),
                    "subject_id,finding_id,pos_x_mm,pos_y_mm,pos_z_mm,clin_sig\n" + id +
                        ",1,0.5,0.5,1.0,1\n");
  }
  CohortManifest m;
  m.root = dir.path;
  for (const std::string id : {"A", "B"}) {
    StudyFiles f;
    f.t2w = id + "_t2w";
    f.adc = id + "_adc";
    f.dwi = id + "_dwi";
    f.ktrans = id + "_ktrans";
    f.findings = id + "_findings.csv";
    m.studies[id] = f;
  }
  m.exclude = {"B"};
  save_manifest(m, dir / "manifest.json");
  CohortManifest loaded = load_manifest(dir / "manifest.json");
  auto cohort = load_cohort(loaded);
  ASSERT_EQ(cohort.size(), 1u);
  EXPECT_EQ(cohort[0].subject_id, "A");
  for (const auto& s : cohort) EXPECT_FALSE(loaded.excluded(s.subject_id));
}

TEST(Manifest, MissingReferencedFileFailsAtLoad) {
  TempDir dir;
  CohortManifest m;
  m.root = dir.path;
  StudyFiles f;
  f.t2w = "ghost_t2w";
  f.adc = "ghost_adc";
  f.dwi = "ghost_dwi";
  f.ktrans = "ghost_ktrans";
  f.findings = "ghost.csv";
  m.studies["G"] = f;
  save_manifest(m, dir / "manifest.json");
  EXPECT_THROW(load_cohort(load_manifest(dir / "manifest.json")), data_error);
}

}  // namespace
