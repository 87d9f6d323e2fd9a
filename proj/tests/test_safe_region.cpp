#include "region_fixtures.hpp"

#include <gtest/gtest.h>

using namespace prefflock;
using namespace prefflock::region;
using namespace prefflock::testing;

TEST(ClosestPoint, BallAndFace) {
    Ellipsoid E;
    const Box wall(Vec3(2, -1, -1), Vec3(3, 1, 1));
    const auto P = separating_hyperplanes({wall}, E, Box(Vec3::Constant(-10), Vec3::Constant(10)));
    ASSERT_EQ(P.rows(), 7);
    EXPECT_NEAR((P.A.row(0).transpose() - Vec3(1, 0, 0)).norm(), 0.0, 1e-12);
    EXPECT_NEAR(P.b[0], 2.0, 1e-12);
}

TEST(ClosestPoint, MatchesGridMinimumInEllipsoidMetric) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        Mat3 R = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized().toRotationMatrix();
        const Mat3 C = R * Vec3(0.5 + std::abs(u(rng)), 0.5 + std::abs(u(rng)), 0.2 + std::abs(u(rng))).asDiagonal() *
                       R.transpose();
        const Mat3 Q = (C * C).inverse();
        const Vec3 d(u(rng), u(rng), u(rng));
        const Vec3 lo(1.5 + u(rng), u(rng) - 1.0, u(rng) - 1.0);
        const Box box(lo, lo + Vec3(0.5 + std::abs(u(rng)), 1.0 + std::abs(u(rng)), 1.0 + std::abs(u(rng))));
        const Vec3 x = closest_point_in_metric(box, Q, d);
        ASSERT_TRUE(box.contains(x));
        const double got = (x - d).dot(Q * (x - d));
        const int n = 24;
        double grid = std::numeric_limits<double>::infinity();
        for (int i = 0; i <= n; ++i)
            for (int j = 0; j <= n; ++j)
                for (int k = 0; k <= n; ++k) {
                    const Vec3 p = box.min_corner + box.extent().cwiseProduct(Vec3(i, j, k) / n);
                    grid = std::min(grid, (p - d).dot(Q * (p - d)));
                }
        EXPECT_LE(got, grid + 1e-12);
    }
}

TEST(SeparatingHyperplanes, NoObstaclesGivesBounds) {
    const Box W(Vec3::Zero(), Vec3(4, 5, 6));
    const auto P = separating_hyperplanes({}, Ellipsoid{0.1 * Mat3::Identity(), Vec3(1, 1, 1)}, W);
    EXPECT_EQ(P.rows(), 6);
    EXPECT_TRUE(P.contains(Vec3(4, 5, 6)));
    EXPECT_FALSE(P.contains(Vec3(4.01, 5, 6)));
}

TEST(SeparatingHyperplanes, ObstacleVerticesOnFarSide) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto scene = random_scene(rng, 6);
        const Ellipsoid E{0.3 * Mat3::Identity(), scene.seed};
        const auto P = separating_hyperplanes(scene.obstacles, E, scene.bounds);
        for (int j = 0; j < P.rows(); ++j) {
            EXPECT_NEAR(P.A.row(j).norm(), 1.0, 1e-12);
            EXPECT_LT(P.A.row(j).dot(E.d), P.b[j]);
        }
        // each obstacle lies wholly beyond at least one plane
        for (const auto &o : scene.obstacles) {
            bool cut = false;
            for (int j = 0; j < P.rows() && !cut; ++j) {
                double worst = -std::numeric_limits<double>::infinity();
                for (const auto &v : o.vertices()) worst = std::max(worst, P.b[j] - P.A.row(j).dot(v));
                cut = worst <= 1e-12;
            }
            EXPECT_TRUE(cut) << "trial " << trial;
        }
    }
}

TEST(SeparatingHyperplanes, CenterInsideObstacleRejected) {
    EXPECT_THROW(separating_hyperplanes({Box(Vec3::Constant(-1), Vec3::Constant(1))}, Ellipsoid{},
                                        Box(Vec3::Constant(-5), Vec3::Constant(5))),
                 RegionError);
}

TEST(MaxVolumeEllipsoid, CubeGivesUnitBall) {
    const auto fit = max_volume_ellipsoid(bounds_polytope(Box(Vec3::Constant(-1), Vec3::Constant(1))));
    EXPECT_LE((fit.ellipsoid.C - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LE(fit.ellipsoid.d.norm(), 1e-6);
    EXPECT_NEAR(fit.ellipsoid.C.determinant(), 1.0, 1e-4);
}

TEST(MaxVolumeEllipsoid, AxisAlignedBox) {
    const auto fit = max_volume_ellipsoid(bounds_polytope(Box(Vec3(-2, -1, -1), Vec3(2, 1, 1))));
    const Mat3 want = Vec3(2, 1, 1).asDiagonal();
    EXPECT_LE((fit.ellipsoid.C - want).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LE(fit.ellipsoid.containment_gap(bounds_polytope(Box(Vec3(-2, -1, -1), Vec3(2, 1, 1)))), 1e-7);
}

TEST(MaxVolumeEllipsoid, RegularTetrahedronAgainstGridSearch) {
    const Polytope P = regular_tetrahedron(3.0);
    const auto fit = max_volume_ellipsoid(P);
    EXPECT_LE(fit.ellipsoid.containment_gap(P), 1e-7);
    const double grid = diagonal_grid_search_det(P);
    EXPECT_GE(fit.ellipsoid.C.determinant(), grid * (1 - 1e-9));
    EXPECT_LE(std::abs(fit.ellipsoid.C.determinant() - grid), 0.05 * grid);
    // inscribed sphere radius of a regular tetrahedron is edge / (2 sqrt 6)
    const double r = 3.0 / (2 * std::sqrt(6.0));
    EXPECT_NEAR(fit.ellipsoid.C.determinant(), r * r * r, 1e-6);
}

TEST(MaxVolumeEllipsoid, EmptyInteriorRejected) {
    Polytope P = bounds_polytope(Box(Vec3::Constant(-1), Vec3::Constant(1)));
    P.add(Vec3(1, 0, 0), -2.0);
    EXPECT_THROW(max_volume_ellipsoid(P), RegionError);
}

TEST(MaxVolumeEllipsoid, ContainmentOnRandomPolytopes) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const auto scene = random_scene(rng, 5);
        const auto P = separating_hyperplanes(scene.obstacles, Ellipsoid{0.2 * Mat3::Identity(), scene.seed}, scene.bounds);
        const auto fit = max_volume_ellipsoid(P);
        EXPECT_LE(fit.ellipsoid.containment_gap(P), 1e-7);
        EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat3>(fit.ellipsoid.C).eigenvalues().minCoeff(), 0.0);
    }
}

TEST(InflateRegion, EmptyBoxRegionIsTheBox) {
    const Box W(Vec3(0, 0, 0), Vec3(6, 4, 2));
    const auto r = inflate_region({}, W, Vec3(1, 1, 0.5));
    EXPECT_EQ(r.polytope.rows(), 6);
    EXPECT_LE((r.ellipsoid.C - Mat3(Vec3(3, 2, 1).asDiagonal())).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LE((r.ellipsoid.d - W.center()).norm(), 1e-6);
}

TEST(InflateRegion, CorridorBetweenWalls) {
    const Box W(Vec3(0, 0, 0), Vec3(30, 10, 6));
    const std::vector<Box> walls{Box(Vec3(0, 0, 0), Vec3(30, 3, 6)), Box(Vec3(0, 7, 0), Vec3(30, 10, 6))};
    const auto r = inflate_region(walls, W, Vec3(15, 5, 3));
    EXPECT_LE(2 * (r.ellipsoid.C * Vec3::UnitY()).norm(), 4.0 + 1e-9);
    EXPECT_EQ(count_points_inside(r.polytope, walls, 10000, 6), 0);
    for (std::size_t k = 1; k < r.logdet_history.size(); ++k)
        EXPECT_GE(r.logdet_history[k], r.logdet_history[k - 1] - 1e-9);
}

TEST(InflateRegion, RandomScenesExcludeObstaclesAndGrowMonotonically) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const auto scene = random_scene(rng, 8);
        const auto r = inflate_region(scene.obstacles, scene.bounds, scene.seed);
        EXPECT_LE(r.ellipsoid.containment_gap(r.polytope), 1e-7);
        EXPECT_EQ(count_points_inside(r.polytope, scene.obstacles, 10000, trial), 0);
        EXPECT_TRUE(r.polytope.contains(scene.seed));
        for (std::size_t k = 1; k < r.logdet_history.size(); ++k)
            EXPECT_GE(r.logdet_history[k], r.logdet_history[k - 1] - 1e-9);
        EXPECT_LE(r.iterations, 10);
    }
}

TEST(InflateRegion, SeedInObstacleRejected) {
    EXPECT_THROW(inflate_region({Box(Vec3::Zero(), Vec3::Ones())}, Box(Vec3::Constant(-5), Vec3::Constant(5)),
                                Vec3::Constant(0.5)),
                 RegionError);
}

TEST(Dilate, IdentityAndInnerCubeAndEmpty) {
    const Polytope P = bounds_polytope(Box(Vec3::Constant(-1), Vec3::Constant(1)));
    EXPECT_EQ(dilate(P, 0.0, 0.0).poly.b, P.b);
    const auto inner = dilate(P, 0.0, 0.5);
    EXPECT_FALSE(inner.empty);
    for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(inner.poly.b[j], 0.5);
    const auto robot = dilate(P, 0.4, 0.0);
    for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(robot.poly.b[j], 0.8);
    EXPECT_TRUE(dilate(P, 0.0, 1.5).empty);
}

TEST(Dilate, ObliqueFaceUsesCubeSupport) {
    Polytope P = bounds_polytope(Box(Vec3::Constant(-3), Vec3::Constant(3)));
    const Vec3 a = Vec3(1, 1, 0).normalized();
    P.add(a, 1.0);
    const auto D = dilate(P, 1.0, 0.25);
    EXPECT_NEAR(D.poly.b[6], 1.0 - 0.5 * std::sqrt(2.0) - 0.25, 1e-12);
}
