#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "kge/geometry.hpp"
#include "kge/rng.hpp"

using namespace kge;
using namespace kge::geometry;

namespace {

constexpr double kPi = std::numbers::pi;

template <std::size_t N>
void expect_matrix(const Operator<N>& op, const std::vector<std::vector<double>>& want, double tol = 1e-12) {
  ASSERT_EQ(want.size(), N + 1);
  for (std::size_t i = 0; i <= N; ++i) {
    for (std::size_t j = 0; j <= N; ++j) EXPECT_NEAR(op.m[i][j], want[i][j], tol) << "entry " << i << "," << j;
  }
}

// Gauss-Jordan inverse with partial pivoting, independent of invert().
template <std::size_t N>
std::vector<std::vector<double>> dense_inverse(const Operator<N>& op) {
  const std::size_t n = N + 1;
  std::vector<std::vector<double>> a(n, std::vector<double>(2 * n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i][j] = op.m[i][j];
    a[i][n + i] = 1.0;
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    }
    std::swap(a[p], a[c]);
    const double d = a[c][c];
    for (auto& x : a[c]) x /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t j = 0; j < 2 * n; ++j) a[r][j] -= f * a[c][j];
    }
  }
  std::vector<std::vector<double>> inv(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) inv[i][j] = a[i][n + j];
  }
  return inv;
}

Params3D random_params(Rng& rng) {
  Params3D p;
  for (auto& x : p.translation) x = rng.uniform(-2, 2);
  for (auto& x : p.scale) x = rng.uniform(0.3, 2.0) * (rng.coin() ? 1 : -1);
  p.alpha = rng.angle();
  p.beta = rng.angle();
  p.gamma = rng.angle();
  double n2 = 0;
  for (auto& x : p.normal) {
    x = rng.uniform(-1, 1);
    n2 += x * x;
  }
  for (auto& x : p.normal) x /= std::sqrt(n2);
  p.shear = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
             rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return p;
}

}  // namespace

TEST(Geometry, ComposeTranslateRotateScale2D) {
  const auto m = compose({translation2d(1.0, -1.0), rotation2d(kPi / 2), scaling2d(2.0, 3.0)});
  expect_matrix<2>(m, {{0, -3, 1}, {2, 0, -1}, {0, 0, 1}});
  EXPECT_EQ(m.group, Group::Aff);
}

TEST(Geometry, ReflectionAcrossDiagonalPlane) {
  const double s = 1.0 / std::sqrt(2.0);
  expect_matrix<3>(reflection(s, s, 0.0), {{0, -1, 0, 0}, {-1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
}

TEST(Geometry, YawQuarterTurn) {
  expect_matrix<3>(rotation3d(kPi / 2, 0.0, 0.0), {{0, -1, 0, 0}, {1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
}

TEST(Geometry, InvertScaling) {
  expect_matrix<2>(invert(scaling2d(2.0, 4.0)), {{0.5, 0, 0}, {0, 0.25, 0}, {0, 0, 1}});
}

TEST(Geometry, SingularScalingNamesAxis) {
  try {
    (void)invert(scaling3d(1.0, 0.0, 2.0));
    FAIL() << "expected SingularityError";
  } catch (const SingularityError& e) {
    EXPECT_NE(std::string(e.what()).find("s_y"), std::string::npos) << e.what();
  }
}

TEST(Geometry, ReflectionRejectsNonUnitNormal) {
  EXPECT_THROW((void)reflection(1.0, 1.0, 0.0), ParameterError);
}

TEST(Geometry, EmptyComposeIsIdentity) {
  const auto id = compose<3, double>(std::span<const Operator3>{});
  EXPECT_EQ(identity_residual(id), 0.0);
}

TEST(Geometry, TwoDimensionsRejectReflectAndShear) {
  EXPECT_THROW((void)make_operator_2d(OpKind::Reflect, {}), ParameterError);
  EXPECT_THROW(validate_ops<2>(parse_ops("TH")), ParameterError);
  EXPECT_THROW(validate_ops<3>(parse_ops("TT")), ParameterError);
  EXPECT_THROW((void)parse_ops("TX"), ParameterError);
}

TEST(Geometry, RotationMatchesClosedForm) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.angle(), b = rng.angle(), g = rng.angle();
    const auto m = rotation3d(a, b, g);
    const auto c = rotation3d_closed_form(a, b, g);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t k = 0; k < 4; ++k) ASSERT_NEAR(m.m[r][k], c.m[r][k], 1e-12);
    }
  }
}

TEST(Geometry, GroupLawsOnRandomDraws) {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_params(rng);
    const auto r = make_operator_3d(OpKind::Rotate, p);
    const auto t = make_operator_3d(OpKind::Translate, p);
    ASSERT_TRUE(satisfies_group(r));
    EXPECT_NEAR(determinant(r), 1.0, 1e-9);
    EXPECT_LT(orthogonality_residual(r), 1e-9);
    const auto se = t * r * make_operator_3d(OpKind::Rotate, random_params(rng)) * t;
    EXPECT_EQ(se.group, Group::SE);
    EXPECT_TRUE(satisfies_group(se));
    const auto f = make_operator_3d(OpKind::Reflect, p);
    EXPECT_LT(identity_residual(f * f), 1e-9);
    EXPECT_NEAR(determinant(f), -1.0, 1e-9);
    const auto r2 = rotation2d(rng.angle()) * rotation2d(rng.angle());
    EXPECT_TRUE(satisfies_group(r2));
  }
}

TEST(Geometry, InverseAgreesWithDenseOracle) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_params(rng);
    std::vector<Operator3> ops;
    for (auto k : parse_ops("TSRFH")) ops.push_back(make_operator_3d(k, p, rng.coin() ? ShearForm::Product : ShearForm::Displayed));
    const auto m = compose<3, double>(ops);
    if (std::abs(determinant(m)) < 1e-3) continue;
    const auto inv = invert(m);
    EXPECT_LT(identity_residual(m * inv), 1e-9);
    const auto oracle = dense_inverse(m);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 4; ++c) ASSERT_NEAR(inv.m[r][c], oracle[r][c], 1e-9 * std::max(1.0, std::abs(oracle[r][c])));
    }
  }
}

TEST(Geometry, ShearProductFormIsFactorProduct) {
  const ShearCoefficients<double> sh{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto p = shear(sh, ShearForm::Product);
  const auto expect = shear_yz(0.3, 0.5) * shear_xz(0.1, 0.6) * shear_xy(0.2, 0.4);
  EXPECT_LT(identity_residual(p * invert(expect)), 1e-12);
  const auto d = shear(sh, ShearForm::Displayed);
  expect_matrix<3>(d, {{1, 0.1, 0.2, 0}, {0.3, 1, 0.4, 0}, {0.5, 0.6, 1, 0}, {0, 0, 0, 1}});
}

template <std::size_t N>
void check_block_diagonal(const std::string& ops, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t blocks = 5;
  for (int trial = 0; trial < 1000; ++trial) {
    CompoundParams<N> cp = CompoundParams<N>::identity(blocks, {parse_ops(ops), rng.coin() ? ShearForm::Product : ShearForm::Displayed, true});
    for (auto& x : cp.values) x = rng.uniform(-1.5, 1.5);
    std::vector<double> v(N * blocks);
    for (auto& x : v) x = rng.uniform(-2, 2);
    const auto fast = apply_block_diagonal<N, double>(cp, v);
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto m = block_operator<N, double>(cp.spec, cp.block(b));
      for (std::size_t i = 0; i < N; ++i) {
        double acc = m.m[i][N];
        for (std::size_t j = 0; j < N; ++j) acc += m.m[i][j] * v[b * N + j];
        ASSERT_NEAR(fast[b * N + i], acc, 1e-9) << ops << " block " << b;
      }
    }
  }
}

TEST(Geometry, BlockDiagonalMatchesDense2D) { check_block_diagonal<2>("TSR", 1); }
TEST(Geometry, BlockDiagonalMatchesDense3D) { check_block_diagonal<3>("TSRFH", 2); }
TEST(Geometry, BlockDiagonalMatchesDenseReordered) {
  check_block_diagonal<2>("RST", 3);
  check_block_diagonal<3>("HFRST", 4);
}

TEST(Geometry, BlockDiagonalRejectsMismatchedLength) {
  auto cp = CompoundParams<2>::identity(2, {parse_ops("TSR")});
  std::vector<double> odd(3), wrong(6);
  EXPECT_THROW((void)(apply_block_diagonal<2, double>(cp, odd)), ParameterError);
  EXPECT_THROW((void)(apply_block_diagonal<2, double>(cp, wrong)), ParameterError);
}

TEST(Geometry, StrictReflectionNormalValidated) {
  auto cp = CompoundParams<3>::identity(1, {parse_ops("F"), ShearForm::Product, false});
  cp.values[BlockLayout<3>::kReflect] = 2.0;
  EXPECT_THROW(cp.validate(), ParameterError);
}

TEST(Geometry, PrintsGroupAndEntries) {
  std::ostringstream s;
  s << translation2d(1.0, 2.0);
  EXPECT_NE(s.str().find("SE(2)"), std::string::npos);
}
