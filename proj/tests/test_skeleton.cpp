#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "smartpc/skeleton.hpp"
#include "support.hpp"

using namespace smartpc;
using smartpc::testing::scratch_dir;

TEST(SphereSurface, PointsLieAtRadius) {
  for (std::size_t n : {1u, 2u, 7u, 64u, 1000u}) {
    for (const auto& p : sample_sphere_surface({{0, 0, 0}, 2.0}, n)) EXPECT_NEAR(norm(p), 2.0, 1e-6);
  }
  Rng rng(1);
  for (int c = 0; c < 100; ++c) {
    const SkeletalSphere s{{uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3)}, uniform(rng, 0.01, 4)};
    for (const auto& p : sample_sphere_surface(s, 1 + rng() % 50)) EXPECT_NEAR(distance(p, s.center), s.radius, 1e-6);
  }
}

TEST(SphereSurface, SinglePointUsesEquatorDirection) {
  // n=1: z_0 = 1 - 2(0.5) = 0, azimuth 0, so v_0 = (1,0,0).
  auto p = sample_sphere_surface({{1, 2, 3}, 0.5}, 1);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_NEAR(p[0].x, 1.5, 1e-12);
  EXPECT_NEAR(p[0].y, 2.0, 1e-12);
  EXPECT_NEAR(p[0].z, 3.0, 1e-12);
}

TEST(SphereSurface, LatticeMeanNearCenter) {
  Rng rng(2);
  for (int c = 0; c < 20; ++c) {
    const SkeletalSphere s{{uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2)}, uniform(rng, 0.1, 3)};
    EXPECT_LE(distance(centroid(sample_sphere_surface(s, 64)), s.center), 0.15 * s.radius);
  }
}

TEST(SphereSurface, ZeroCountRejected) {
  EXPECT_THROW(sample_sphere_surface({{0, 0, 0}, 1.0}, 0), InvalidArgument);
}

TEST(Fibonacci, UnitAndDistinct) {
  for (std::size_t n : {1u, 3u, 100u, 4096u}) {
    auto dirs = fibonacci_directions(n);
    std::set<std::tuple<double, double, double>> seen;
    for (const auto& d : dirs) {
      EXPECT_NEAR(norm(d), 1.0, 1e-12);
      seen.insert({d.x, d.y, d.z});
    }
    EXPECT_EQ(seen.size(), n);
  }
}

TEST(Fibonacci, RotatedCentersEqualRotatedSamples) {
  const Mat3 r = rotation_axis_angle({0.2, 0.9, -0.4}, 2.3);
  const SkeletalSphere s{{0.4, -0.1, 0.7}, 0.6};
  auto samples = sample_sphere_surface(s, 32);
  // Rotating the whole sphere about the origin moves the center to R c and
  // each sample to R c + r R v.
  auto rotated = apply_rigid(samples, r);
  const Vec3 rc = r * s.center;
  auto dirs = fibonacci_directions(32);
  for (std::size_t i = 0; i < 32; ++i) {
    const Vec3 expect = rc + s.radius * (r * dirs[i]);
    EXPECT_NEAR(distance(rotated[i], expect), 0.0, 1e-12);
    EXPECT_NEAR(distance(rotated[i], rc), s.radius, 1e-6);
  }
}

TEST(Reconstruct, OneSphereMatchesSurfaceSampling) {
  const SkeletalSphere s{{1, 1, 1}, 0.3};
  EXPECT_EQ(reconstruct({s}, 9), sample_sphere_surface(s, 9));
}

TEST(Reconstruct, TwoClustersAtTheirRadii) {
  const SkeletalCloud skel{{{0, 0, 0}, 1.0}, {{10, 0, 0}, 2.0}};
  auto pts = reconstruct(skel, 16);
  ASSERT_EQ(pts.size(), 32u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(distance(pts[i], skel[0].center), 1.0, 1e-6);
  for (std::size_t i = 16; i < 32; ++i) EXPECT_NEAR(distance(pts[i], skel[1].center), 2.0, 1e-6);
  EXPECT_THROW(reconstruct(skel, 0), InvalidArgument);
}

TEST(SkeletonCsv, UnitSphereRow) {
  auto dir = scratch_dir("skel_row");
  export_skeleton({{{0, 0, 0}, 1.0}}, dir / "s.csv");
  std::ifstream in(dir / "s.csv");
  std::string header, row, rest;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "cx,cy,cz,r");
  EXPECT_EQ(row, "0,0,0,1");
  EXPECT_FALSE(std::getline(in, rest));
}

TEST(SkeletonCsv, RoundTripIsExact) {
  auto dir = scratch_dir("skel_rt");
  Rng rng(7);
  SkeletalCloud skel;
  for (int i = 0; i < 32; ++i)
    skel.push_back({{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)}, uniform(rng, 1e-6, 1)});
  export_skeleton(skel, dir / "s.csv");
  EXPECT_EQ(import_skeleton(dir / "s.csv"), skel);
  std::ifstream in(dir / "s.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 33u);
}

TEST(SkeletonCsv, Errors) {
  auto dir = scratch_dir("skel_err");
  EXPECT_THROW(import_skeleton(dir / "missing.csv"), IoError);
  EXPECT_THROW(export_skeleton({{{0, 0, 0}, 1.0}}, dir / "no" / "such" / "dir.csv"), IoError);
  std::ofstream(dir / "bad.csv") << "cx,cy,cz,r\n0,0,0,1\n1,2,x,1\n";
  try {
    import_skeleton(dir / "bad.csv");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::ofstream(dir / "hdr.csv") << "x,y,z,r\n";
  EXPECT_THROW(import_skeleton(dir / "hdr.csv"), ParseError);
}

TEST(SkeletonValidity, RejectsNonPositiveRadius) {
  EXPECT_THROW(require_valid({{{0, 0, 0}, 0.0}}, "t"), InvalidArgument);
  EXPECT_THROW(require_valid({}, "t"), InvalidArgument);
  EXPECT_NO_THROW(require_valid({{{0, 0, 0}, 1e-9}}, "t"));
}
