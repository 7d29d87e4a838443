#pragma once

// Homogeneous-coordinate affine operators in 2D and 3D: translation, scaling,
// rotation, Householder reflection and shear, their compounds, inverses, and
// block-diagonal application to embedding vectors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kge/error.hpp"

namespace kge::geometry {

// Nested matrix groups, ordered so that the weakest group of a product is
// the maximum of its factors' tags.
enum class Group : int { SO = 0, SE = 1, Aff = 2 };

inline const char* to_string(Group g) {
  switch (g) {
    case Group::SO: return "SO";
    case Group::SE: return "SE";
    case Group::Aff: return "Aff";
  }
  return "?";
}

enum class OpKind : char { Translate = 'T', Scale = 'S', Rotate = 'R', Reflect = 'F', Shear = 'H' };

// How the 3D shear operator is assembled from its six coefficients.
//  Product:   H_yz * H_xz * H_xy, the literal product of the three factors.
//  Displayed: unit diagonal with the six coefficients placed off-diagonal.
enum class ShearForm { Product, Displayed };

inline constexpr double kSingularThreshold = 1e-12;
inline constexpr double kUnitNormalTolerance = 1e-6;

template <std::size_t N, typename T = double>
struct Operator {
  static_assert(N == 2 || N == 3, "operators are 2D or 3D");
  static constexpr std::size_t kDim = N + 1;
  using Matrix = std::array<std::array<T, kDim>, kDim>;

  Matrix m{};
  Group group = Group::SO;

  static Operator identity(Group g = Group::SO) {
    Operator op;
    for (std::size_t i = 0; i < kDim; ++i) op.m[i][i] = T(1);
    op.group = g;
    return op;
  }

  T& operator()(std::size_t i, std::size_t j) { return m[i][j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return m[i][j]; }

  // Cartesian action: A x + v.
  std::array<T, N> apply(std::span<const T, N> x) const {
    std::array<T, N> y{};
    for (std::size_t i = 0; i < N; ++i) {
      T acc = T(0);
      for (std::size_t j = 0; j < N; ++j) acc += m[i][j] * x[j];
      y[i] = acc + m[i][N];
    }
    return y;
  }

  friend Operator operator*(const Operator& a, const Operator& b) {
    Operator c;
    for (std::size_t i = 0; i < kDim; ++i) {
      for (std::size_t j = 0; j < kDim; ++j) {
        T acc = T(0);
        for (std::size_t k = 0; k < kDim; ++k) acc += a.m[i][k] * b.m[k][j];
        c.m[i][j] = acc;
      }
    }
    c.group = std::max(a.group, b.group);
    return c;
  }

  friend std::ostream& operator<<(std::ostream& os, const Operator& op) {
    std::ostringstream s;
    s << std::setprecision(6);
    s << to_string(op.group) << "(" << N << ")\n";
    for (std::size_t i = 0; i < kDim; ++i) {
      s << "[";
      for (std::size_t j = 0; j < kDim; ++j) s << (j ? ", " : "") << op.m[i][j];
      s << "]\n";
    }
    return os << s.str();
  }
};

using Operator2 = Operator<2, double>;
using Operator3 = Operator<3, double>;

template <std::size_t N, typename T>
T determinant(const Operator<N, T>& op) {
  const auto& a = op.m;
  if constexpr (N == 2) {
    return a[0][0] * a[1][1] - a[0][1] * a[1][0];
  } else {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
           a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  }
}

// max |(A^T A - I)_ij| over the linear block.
template <std::size_t N, typename T>
T orthogonality_residual(const Operator<N, T>& op) {
  T worst = T(0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < N; ++k) acc += op.m[k][i] * op.m[k][j];
      worst = std::max(worst, std::abs(acc - (i == j ? T(1) : T(0))));
    }
  }
  return worst;
}

// max |M_ij - I_ij| over the full homogeneous matrix.
template <std::size_t N, typename T>
T identity_residual(const Operator<N, T>& op) {
  T worst = T(0);
  for (std::size_t i = 0; i <= N; ++i) {
    for (std::size_t j = 0; j <= N; ++j) worst = std::max(worst, std::abs(op.m[i][j] - (i == j ? T(1) : T(0))));
  }
  return worst;
}

template <std::size_t N, typename T>
bool has_affine_last_row(const Operator<N, T>& op) {
  for (std::size_t j = 0; j < N; ++j) {
    if (op.m[N][j] != T(0)) return false;
  }
  return op.m[N][N] == T(1);
}

// Checks the invariants implied by the operator's group tag.
template <std::size_t N, typename T>
bool satisfies_group(const Operator<N, T>& op, double tol = 1e-9) {
  if (!has_affine_last_row(op)) return false;
  switch (op.group) {
    case Group::SO:
      for (std::size_t i = 0; i < N; ++i) {
        if (op.m[i][N] != T(0)) return false;
      }
      [[fallthrough]];
    case Group::SE:
      return orthogonality_residual(op) <= tol && std::abs(determinant(op) - T(1)) <= tol;
    case Group::Aff:
      return true;
  }
  return false;
}

// --- elementary 2D operators -------------------------------------------------

template <typename T = double>
Operator<2, T> translation2d(T vx, T vy) {
  auto op = Operator<2, T>::identity(Group::SE);
  op.m[0][2] = vx;
  op.m[1][2] = vy;
  return op;
}

template <typename T = double>
Operator<2, T> rotation2d(T theta) {
  auto op = Operator<2, T>::identity(Group::SE);
  const T c = std::cos(theta), s = std::sin(theta);
  op.m[0][0] = c;
  op.m[0][1] = -s;
  op.m[1][0] = s;
  op.m[1][1] = c;
  return op;
}

template <typename T = double>
Operator<2, T> scaling2d(T sx, T sy) {
  auto op = Operator<2, T>::identity(Group::Aff);
  op.m[0][0] = sx;
  op.m[1][1] = sy;
  return op;
}

// --- elementary 3D operators -------------------------------------------------

template <typename T = double>
Operator<3, T> translation3d(T vx, T vy, T vz) {
  auto op = Operator<3, T>::identity(Group::SE);
  op.m[0][3] = vx;
  op.m[1][3] = vy;
  op.m[2][3] = vz;
  return op;
}

template <typename T = double>
Operator<3, T> scaling3d(T sx, T sy, T sz) {
  auto op = Operator<3, T>::identity(Group::Aff);
  op.m[0][0] = sx;
  op.m[1][1] = sy;
  op.m[2][2] = sz;
  return op;
}

// Yaw, about z.
template <typename T = double>
Operator<3, T> rotation_z(T alpha) {
  auto op = Operator<3, T>::identity(Group::SO);
  const T c = std::cos(alpha), s = std::sin(alpha);
  op.m[0][0] = c;
  op.m[0][1] = -s;
  op.m[1][0] = s;
  op.m[1][1] = c;
  return op;
}

// Pitch, about y. Sign convention chosen so that R_z R_y R_x reproduces the
// closed-form entries a..i (g = -sin(beta)).
template <typename T = double>
Operator<3, T> rotation_y(T beta) {
  auto op = Operator<3, T>::identity(Group::SO);
  const T c = std::cos(beta), s = std::sin(beta);
  op.m[0][0] = c;
  op.m[0][2] = s;
  op.m[2][0] = -s;
  op.m[2][2] = c;
  return op;
}

// Roll, about x.
template <typename T = double>
Operator<3, T> rotation_x(T gamma) {
  auto op = Operator<3, T>::identity(Group::SO);
  const T c = std::cos(gamma), s = std::sin(gamma);
  op.m[1][1] = c;
  op.m[1][2] = -s;
  op.m[2][1] = s;
  op.m[2][2] = c;
  return op;
}

template <typename T = double>
Operator<3, T> rotation3d(T alpha, T beta, T gamma) {
  return rotation_z(alpha) * rotation_y(beta) * rotation_x(gamma);
}

// Closed-form entries of R_z(alpha) R_y(beta) R_x(gamma).
template <typename T = double>
Operator<3, T> rotation3d_closed_form(T alpha, T beta, T gamma) {
  using std::cos, std::sin;
  auto op = Operator<3, T>::identity(Group::SO);
  const T ca = cos(alpha), sa = sin(alpha), cb = cos(beta), sb = sin(beta), cg = cos(gamma), sg = sin(gamma);
  op.m[0] = {ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg, T(0)};
  op.m[1] = {sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg, T(0)};
  op.m[2] = {-sb, cb * sg, cb * cg, T(0)};
  return op;
}

// Householder reflection I - 2 n n^T. Orthogonal with determinant -1, so it
// is tagged Aff rather than SO.
template <typename T = double>
Operator<3, T> reflection(T nx, T ny, T nz) {
  const double norm = std::sqrt(double(nx) * nx + double(ny) * ny + double(nz) * nz);
  if (!(std::abs(norm - 1.0) <= kUnitNormalTolerance)) {
    std::ostringstream msg;
    msg << "reflection normal must have unit length, got |n| = " << norm;
    throw ParameterError(msg.str());
  }
  auto op = Operator<3, T>::identity(Group::Aff);
  const std::array<T, 3> n{nx, ny, nz};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) op.m[i][j] = (i == j ? T(1) : T(0)) - T(2) * n[i] * n[j];
  }
  return op;
}

// Shifts y and z by multiples of x.
template <typename T = double>
Operator<3, T> shear_yz(T sh_x_y, T sh_x_z) {
  auto op = Operator<3, T>::identity(Group::Aff);
  op.m[1][0] = sh_x_y;
  op.m[2][0] = sh_x_z;
  return op;
}

// Shifts x and z by multiples of y.
template <typename T = double>
Operator<3, T> shear_xz(T sh_y_x, T sh_y_z) {
  auto op = Operator<3, T>::identity(Group::Aff);
  op.m[0][1] = sh_y_x;
  op.m[2][1] = sh_y_z;
  return op;
}

// Shifts x and y by multiples of z.
template <typename T = double>
Operator<3, T> shear_xy(T sh_z_x, T sh_z_y) {
  auto op = Operator<3, T>::identity(Group::Aff);
  op.m[0][2] = sh_z_x;
  op.m[1][2] = sh_z_y;
  return op;
}

// Shear coefficients in storage order. `a_b` is Sh^a_b: the b component is
// shifted by a multiple of the a component.
template <typename T = double>
struct ShearCoefficients {
  T y_x = 0, z_x = 0, x_y = 0, z_y = 0, x_z = 0, y_z = 0;
};

template <typename T = double>
Operator<3, T> shear(const ShearCoefficients<T>& sh, ShearForm form = ShearForm::Product) {
  if (form == ShearForm::Product) {
    return shear_yz(sh.x_y, sh.x_z) * shear_xz(sh.y_x, sh.y_z) * shear_xy(sh.z_x, sh.z_y);
  }
  auto op = Operator<3, T>::identity(Group::Aff);
  op.m[0][1] = sh.y_x;
  op.m[0][2] = sh.z_x;
  op.m[1][0] = sh.x_y;
  op.m[1][2] = sh.z_y;
  op.m[2][0] = sh.x_z;
  op.m[2][1] = sh.y_z;
  return op;
}

// --- parameter blocks ---------------------------------------------------------

struct Params2D {
  double vx = 0, vy = 0;
  double theta = 0;
  double sx = 1, sy = 1;
};

struct Params3D {
  std::array<double, 3> translation{0, 0, 0};
  std::array<double, 3> scale{1, 1, 1};
  double alpha = 0, beta = 0, gamma = 0;
  std::array<double, 3> normal{1, 0, 0};
  ShearCoefficients<double> shear;
};

inline Operator2 make_operator_2d(OpKind kind, const Params2D& p) {
  switch (kind) {
    case OpKind::Translate: return translation2d(p.vx, p.vy);
    case OpKind::Rotate: return rotation2d(p.theta);
    case OpKind::Scale: return scaling2d(p.sx, p.sy);
    default: break;
  }
  throw ParameterError(std::string("operator kind '") + static_cast<char>(kind) + "' is not available in 2D");
}

inline Operator3 make_operator_3d(OpKind kind, const Params3D& p, ShearForm form = ShearForm::Product) {
  switch (kind) {
    case OpKind::Translate: return translation3d(p.translation[0], p.translation[1], p.translation[2]);
    case OpKind::Scale: return scaling3d(p.scale[0], p.scale[1], p.scale[2]);
    case OpKind::Rotate: return rotation3d(p.alpha, p.beta, p.gamma);
    case OpKind::Reflect: return reflection(p.normal[0], p.normal[1], p.normal[2]);
    case OpKind::Shear: return shear(p.shear, form);
  }
  throw ParameterError("unknown operator kind");
}

// Left-to-right product; the empty product is the identity.
template <std::size_t N, typename T>
Operator<N, T> compose(std::span<const Operator<N, T>> ops) {
  auto out = Operator<N, T>::identity(Group::SO);
  for (const auto& op : ops) out = out * op;
  return out;
}

template <std::size_t N, typename T>
Operator<N, T> compose(std::initializer_list<Operator<N, T>> ops) {
  return compose(std::span<const Operator<N, T>>(ops.begin(), ops.size()));
}

// [[A, v], [0, 1]]^-1 = [[A^-1, -A^-1 v], [0, 1]].
template <std::size_t N, typename T>
Operator<N, T> invert(const Operator<N, T>& op) {
  const T det = determinant(op);
  if (!(std::abs(det) > kSingularThreshold)) {
    // Name the axis whose column collapsed; for scaling compounds that is the
    // vanishing scale factor.
    static constexpr const char* kAxis[] = {"s_x", "s_y", "s_z"};
    std::size_t worst = 0;
    T worst_norm = T(0);
    for (std::size_t j = 0; j < N; ++j) {
      T norm = T(0);
      for (std::size_t i = 0; i < N; ++i) norm += op.m[i][j] * op.m[i][j];
      if (j == 0 || norm < worst_norm) {
        worst = j;
        worst_norm = norm;
      }
    }
    std::ostringstream msg;
    msg << "operator is singular: |det A| = " << std::abs(det) << " <= " << kSingularThreshold << "; scale "
        << kAxis[worst] << " is near zero (column norm " << std::sqrt(worst_norm) << ")";
    throw SingularityError(msg.str());
  }
  Operator<N, T> inv;
  inv.group = op.group;
  const auto& a = op.m;
  if constexpr (N == 2) {
    inv.m[0][0] = a[1][1] / det;
    inv.m[0][1] = -a[0][1] / det;
    inv.m[1][0] = -a[1][0] / det;
    inv.m[1][1] = a[0][0] / det;
  } else {
    inv.m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
    inv.m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    inv.m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    inv.m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
    inv.m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    inv.m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    inv.m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
    inv.m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    inv.m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
  }
  for (std::size_t i = 0; i < N; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < N; ++j) acc += inv.m[i][j] * a[j][N];
    inv.m[i][N] = -acc;
  }
  inv.m[N][N] = T(1);
  return inv;
}

// --- compound operators over flat parameter blocks -----------------------------

// Flat per-block storage:
//   2D: [vx, vy, theta, sx, sy]
//   3D: [vx, vy, vz, sx, sy, sz, alpha, beta, gamma, nx, ny, nz,
//        Sh^y_x, Sh^z_x, Sh^x_y, Sh^z_y, Sh^x_z, Sh^y_z]
template <std::size_t N>
struct BlockLayout;

template <>
struct BlockLayout<2> {
  static constexpr std::size_t kTranslate = 0, kRotate = 2, kScale = 3;
  static constexpr std::size_t kSize = 5;
};

template <>
struct BlockLayout<3> {
  static constexpr std::size_t kTranslate = 0, kScale = 3, kRotate = 6, kReflect = 9, kShear = 12;
  static constexpr std::size_t kSize = 18;
};

template <std::size_t N>
inline constexpr std::size_t kParamsPerBlock = BlockLayout<N>::kSize;

// Which operators make up a compound, in left-to-right product order.
struct CompoundSpec {
  std::vector<OpKind> ops;
  ShearForm shear_form = ShearForm::Product;
  // Stored reflection normals are unconstrained vectors normalized on use.
  // When false the stored normal must already be unit length.
  bool normalize_reflection = true;
};

inline std::vector<OpKind> parse_ops(const std::string& s) {
  std::vector<OpKind> ops;
  for (char c : s) {
    switch (c) {
      case 'T': case 'S': case 'R': case 'F': case 'H':
        ops.push_back(static_cast<OpKind>(c));
        break;
      default:
        throw ParameterError(std::string("unknown operator kind '") + c + "' (expected T, S, R, F or H)");
    }
  }
  return ops;
}

inline std::string ops_to_string(const std::vector<OpKind>& ops) {
  std::string s;
  for (auto k : ops) s.push_back(static_cast<char>(k));
  return s;
}

inline std::vector<OpKind> default_ops(std::size_t n) {
  return n == 2 ? parse_ops("TSR") : parse_ops("TSRFH");
}

template <std::size_t N>
void validate_ops(const std::vector<OpKind>& ops) {
  std::array<int, 128> seen{};
  for (auto k : ops) {
    if (N == 2 && (k == OpKind::Reflect || k == OpKind::Shear)) {
      throw ParameterError(std::string("operator kind '") + static_cast<char>(k) + "' is not available in 2D");
    }
    if (seen[static_cast<unsigned char>(k)]++) {
      throw ParameterError(std::string("operator kind '") + static_cast<char>(k) + "' listed twice");
    }
  }
}

template <typename T>
std::array<T, 3> unit_normal(std::span<const T> p, bool normalize) {
  std::array<T, 3> n{p[0], p[1], p[2]};
  if (!normalize) return n;
  const T norm = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
  if (!(norm > T(0))) return {T(1), T(0), T(0)};
  for (auto& x : n) x /= norm;
  return n;
}

// The compound operator of one block.
template <std::size_t N, typename T>
Operator<N, T> block_operator(const CompoundSpec& spec, std::span<const T> p) {
  using L = BlockLayout<N>;
  auto out = Operator<N, T>::identity(Group::SO);
  for (auto kind : spec.ops) {
    if constexpr (N == 2) {
      switch (kind) {
        case OpKind::Translate: out = out * translation2d<T>(p[L::kTranslate], p[L::kTranslate + 1]); break;
        case OpKind::Rotate: out = out * rotation2d<T>(p[L::kRotate]); break;
        case OpKind::Scale: out = out * scaling2d<T>(p[L::kScale], p[L::kScale + 1]); break;
        default: throw ParameterError("operator kind not available in 2D");
      }
    } else {
      switch (kind) {
        case OpKind::Translate:
          out = out * translation3d<T>(p[L::kTranslate], p[L::kTranslate + 1], p[L::kTranslate + 2]);
          break;
        case OpKind::Scale: out = out * scaling3d<T>(p[L::kScale], p[L::kScale + 1], p[L::kScale + 2]); break;
        case OpKind::Rotate:
          out = out * rotation_z<T>(p[L::kRotate]) * rotation_y<T>(p[L::kRotate + 1]) *
                rotation_x<T>(p[L::kRotate + 2]);
          break;
        case OpKind::Reflect: {
          const auto n = unit_normal<T>(p.subspan(L::kReflect, 3), spec.normalize_reflection);
          out = out * reflection<T>(n[0], n[1], n[2]);
          break;
        }
        case OpKind::Shear: {
          const auto s = p.subspan(L::kShear, 6);
          out = out * shear<T>({s[0], s[1], s[2], s[3], s[4], s[5]}, spec.shear_form);
          break;
        }
      }
    }
  }
  return out;
}

namespace detail {

enum class ElemKind { Translate, Scale, Rotate2, RotateZ, RotateY, RotateX, Reflect, ShearYZ, ShearXZ, ShearXY, ShearFull };

// One elementary factor of a compound in Cartesian form, z -> A z + v.
template <std::size_t N, typename T>
struct Elem {
  ElemKind kind{};
  std::array<std::array<T, N>, N> a{};
  std::array<T, N> v{};
  std::size_t base = 0;      // first parameter slot read by this factor
  T c = 0, s = 0;            // rotations
  std::array<T, 3> n{};      // reflection: unit normal
  T norm = 1;                // reflection: norm of the stored normal
};

template <std::size_t N, typename T>
void set_identity(Elem<N, T>& e) {
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) e.a[i][j] = i == j ? T(1) : T(0);
    e.v[i] = T(0);
  }
}

// Rotation by angle in the (i, j) coordinate plane: +s at (j, i), -s at (i, j).
template <std::size_t N, typename T>
void set_plane_rotation(Elem<N, T>& e, std::size_t i, std::size_t j, T c, T s) {
  set_identity(e);
  e.a[i][i] = c;
  e.a[j][j] = c;
  e.a[i][j] = -s;
  e.a[j][i] = s;
}

// Expands a compound into elementary factors whose left-to-right product is
// block_operator(). 3D rotation contributes R_z, R_y, R_x and product-form
// shear its three factors.
template <std::size_t N, typename T>
std::size_t expand(const CompoundSpec& spec, std::span<const T> p, std::array<Elem<N, T>, 9>& out) {
  using L = BlockLayout<N>;
  std::size_t k = 0;
  auto next = [&](ElemKind kind, std::size_t base) -> Elem<N, T>& {
    auto& e = out[k++];
    e.kind = kind;
    e.base = base;
    set_identity(e);
    return e;
  };
  auto rot = [&](ElemKind kind, std::size_t slot, std::size_t i, std::size_t j) {
    auto& e = next(kind, slot);
    e.c = std::cos(p[slot]);
    e.s = std::sin(p[slot]);
    set_plane_rotation(e, i, j, e.c, e.s);
  };
  for (auto kind : spec.ops) {
    switch (kind) {
      case OpKind::Translate: {
        auto& e = next(ElemKind::Translate, L::kTranslate);
        for (std::size_t i = 0; i < N; ++i) e.v[i] = p[L::kTranslate + i];
        break;
      }
      case OpKind::Scale: {
        auto& e = next(ElemKind::Scale, L::kScale);
        for (std::size_t i = 0; i < N; ++i) e.a[i][i] = p[L::kScale + i];
        break;
      }
      case OpKind::Rotate:
        if constexpr (N == 2) {
          rot(ElemKind::Rotate2, L::kRotate, 0, 1);
        } else {
          rot(ElemKind::RotateZ, L::kRotate, 0, 1);
          rot(ElemKind::RotateY, L::kRotate + 1, 2, 0);
          rot(ElemKind::RotateX, L::kRotate + 2, 1, 2);
        }
        break;
      case OpKind::Reflect:
        if constexpr (N == 3) {
          auto& e = next(ElemKind::Reflect, L::kReflect);
          const auto raw = p.subspan(L::kReflect, 3);
          e.n = unit_normal<T>(raw, spec.normalize_reflection);
          e.norm = T(1);
          if (spec.normalize_reflection) {
            e.norm = std::sqrt(raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]);
            if (!(e.norm > T(0))) e.norm = T(1);
          }
          for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) e.a[i][j] = (i == j ? T(1) : T(0)) - T(2) * e.n[i] * e.n[j];
          }
        }
        break;
      case OpKind::Shear:
        if constexpr (N == 3) {
          const auto s = p.subspan(L::kShear, 6);  // y_x, z_x, x_y, z_y, x_z, y_z
          if (spec.shear_form == ShearForm::Product) {
            auto& yz = next(ElemKind::ShearYZ, L::kShear);
            yz.a[1][0] = s[2];
            yz.a[2][0] = s[4];
            auto& xz = next(ElemKind::ShearXZ, L::kShear);
            xz.a[0][1] = s[0];
            xz.a[2][1] = s[5];
            auto& xy = next(ElemKind::ShearXY, L::kShear);
            xy.a[0][2] = s[1];
            xy.a[1][2] = s[3];
          } else {
            auto& e = next(ElemKind::ShearFull, L::kShear);
            e.a[0][1] = s[0];
            e.a[0][2] = s[1];
            e.a[1][0] = s[2];
            e.a[1][2] = s[3];
            e.a[2][0] = s[4];
            e.a[2][1] = s[5];
          }
        }
        break;
    }
  }
  return k;
}

// z <- A z + v for one factor.
template <std::size_t N, typename T>
void apply_elem(const Elem<N, T>& e, std::array<T, N>& z) {
  switch (e.kind) {
    case ElemKind::Translate:
      for (std::size_t i = 0; i < N; ++i) z[i] += e.v[i];
      return;
    case ElemKind::Scale:
      for (std::size_t i = 0; i < N; ++i) z[i] *= e.a[i][i];
      return;
    default: {
      std::array<T, N> y;
      for (std::size_t i = 0; i < N; ++i) {
        T acc = T(0);
        for (std::size_t c = 0; c < N; ++c) acc += e.a[i][c] * z[c];
        y[i] = acc;
      }
      z = y;
    }
  }
}

}  // namespace detail

namespace detail {

// Direct 2D paths for the T / S / R compounds, avoiding factor matrices.
template <typename T>
void apply_block2(const std::vector<OpKind>& ops, std::span<const T> p, std::array<T, 2>& z) {
  using L = BlockLayout<2>;
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    switch (*it) {
      case OpKind::Translate:
        z[0] += p[L::kTranslate];
        z[1] += p[L::kTranslate + 1];
        break;
      case OpKind::Scale:
        z[0] *= p[L::kScale];
        z[1] *= p[L::kScale + 1];
        break;
      case OpKind::Rotate: {
        const T c = std::cos(p[L::kRotate]), s = std::sin(p[L::kRotate]);
        z = {c * z[0] - s * z[1], s * z[0] + c * z[1]};
        break;
      }
      default:
        throw ParameterError("operator kind not available in 2D");
    }
  }
}

template <typename T>
void backward_block2(const std::vector<OpKind>& ops, std::span<const T> p, std::span<const T> x,
                     std::span<const T> gy, std::span<T> gx, std::span<T> gp) {
  using L = BlockLayout<2>;
  const std::size_t k = ops.size();
  std::array<std::array<T, 2>, 4> in;  // in[j] is the input of ops[j]
  T c = T(1), s = T(0);
  in[k] = {x[0], x[1]};
  for (std::size_t j = k; j-- > 0;) {
    auto z = in[j + 1];
    switch (ops[j]) {
      case OpKind::Translate:
        z[0] += p[L::kTranslate];
        z[1] += p[L::kTranslate + 1];
        break;
      case OpKind::Scale:
        z[0] *= p[L::kScale];
        z[1] *= p[L::kScale + 1];
        break;
      case OpKind::Rotate:
        c = std::cos(p[L::kRotate]);
        s = std::sin(p[L::kRotate]);
        z = {c * z[0] - s * z[1], s * z[0] + c * z[1]};
        break;
      default:
        throw ParameterError("operator kind not available in 2D");
    }
    in[j] = z;
  }
  std::array<T, 2> g{gy[0], gy[1]};
  for (std::size_t j = 0; j < k; ++j) {
    const auto& z = in[j + 1];
    switch (ops[j]) {
      case OpKind::Translate:
        gp[L::kTranslate] += g[0];
        gp[L::kTranslate + 1] += g[1];
        break;
      case OpKind::Scale:
        gp[L::kScale] += g[0] * z[0];
        gp[L::kScale + 1] += g[1] * z[1];
        g[0] *= p[L::kScale];
        g[1] *= p[L::kScale + 1];
        break;
      case OpKind::Rotate:
        gp[L::kRotate] += g[0] * (-s * z[0] - c * z[1]) + g[1] * (c * z[0] - s * z[1]);
        g = {c * g[0] + s * g[1], -s * g[0] + c * g[1]};
        break;
      default:
        break;
    }
  }
  gx[0] += g[0];
  gx[1] += g[1];
}

}  // namespace detail

// Reverse-mode pass through one block. Given x and dL/dy for y = O x in
// Cartesian form, accumulates dL/dx into gx and dL/dparams into gp.
template <std::size_t N, typename T>
void block_backward(const CompoundSpec& spec, std::span<const T> p, std::span<const T> x, std::span<const T> gy,
                    std::span<T> gx, std::span<T> gp) {
  if constexpr (N == 2) {
    detail::backward_block2<T>(spec.ops, p, x, gy, gx, gp);
    return;
  }
  using detail::ElemKind;
  std::array<detail::Elem<N, T>, 9> elems;
  const std::size_t k = detail::expand<N, T>(spec, p, elems);
  // z[j] is the input of factor j; factors apply right to left.
  std::array<std::array<T, N>, 10> z;
  for (std::size_t i = 0; i < N; ++i) z[k][i] = x[i];
  for (std::size_t j = k; j-- > 0;) {
    z[j] = z[j + 1];
    detail::apply_elem(elems[j], z[j]);
  }
  std::array<T, N> g;
  for (std::size_t i = 0; i < N; ++i) g[i] = gy[i];
  for (std::size_t j = 0; j < k; ++j) {
    const auto& e = elems[j];
    const auto& in = z[j + 1];
    const std::size_t b = e.base;
    switch (e.kind) {
      case ElemKind::Translate:
        for (std::size_t i = 0; i < N; ++i) gp[b + i] += g[i];
        break;
      case ElemKind::Scale:
        for (std::size_t i = 0; i < N; ++i) gp[b + i] += g[i] * in[i];
        break;
      case ElemKind::Rotate2:
      case ElemKind::RotateZ:
        // d/dtheta [[c, -s], [s, c]] = [[-s, -c], [c, -s]] on the (0, 1) plane
        gp[b] += g[0] * (-e.s * in[0] - e.c * in[1]) + g[1] * (e.c * in[0] - e.s * in[1]);
        break;
      case ElemKind::RotateY:
        if constexpr (N == 3) gp[b] += g[0] * (-e.s * in[0] + e.c * in[2]) + g[2] * (-e.c * in[0] - e.s * in[2]);
        break;
      case ElemKind::RotateX:
        if constexpr (N == 3) gp[b] += g[1] * (-e.s * in[1] - e.c * in[2]) + g[2] * (e.c * in[1] - e.s * in[2]);
        break;
      case ElemKind::Reflect:
        if constexpr (N == 3) {
          // F = I - 2 n n^T, so g^T dF in = -2 [(g.dn)(n.in) + (g.n)(dn.in)].
          const T gn = g[0] * e.n[0] + g[1] * e.n[1] + g[2] * e.n[2];
          const T ni = in[0] * e.n[0] + in[1] * e.n[1] + in[2] * e.n[2];
          const T d_gn = gn, d_ni = ni;
          for (std::size_t q = 0; q < 3; ++q) {
            T g_dn, dn_in;
            if (spec.normalize_reflection) {
              // dn/draw_q = (e_q - n n_q) / |raw|
              g_dn = (g[q] - d_gn * e.n[q]) / e.norm;
              dn_in = (in[q] - d_ni * e.n[q]) / e.norm;
            } else {
              g_dn = g[q];
              dn_in = in[q];
            }
            gp[b + q] += T(-2) * (g_dn * ni + gn * dn_in);
          }
        }
        break;
      case ElemKind::ShearYZ:
        if constexpr (N == 3) {
          gp[b + 2] += g[1] * in[0];  // Sh^x_y at (1, 0)
          gp[b + 4] += g[2] * in[0];  // Sh^x_z at (2, 0)
        }
        break;
      case ElemKind::ShearXZ:
        if constexpr (N == 3) {
          gp[b + 0] += g[0] * in[1];  // Sh^y_x at (0, 1)
          gp[b + 5] += g[2] * in[1];  // Sh^y_z at (2, 1)
        }
        break;
      case ElemKind::ShearXY:
        if constexpr (N == 3) {
          gp[b + 1] += g[0] * in[2];  // Sh^z_x at (0, 2)
          gp[b + 3] += g[1] * in[2];  // Sh^z_y at (1, 2)
        }
        break;
      case ElemKind::ShearFull:
        if constexpr (N == 3) {
          gp[b + 0] += g[0] * in[1];
          gp[b + 1] += g[0] * in[2];
          gp[b + 2] += g[1] * in[0];
          gp[b + 3] += g[1] * in[2];
          gp[b + 4] += g[2] * in[0];
          gp[b + 5] += g[2] * in[1];
        }
        break;
    }
    std::array<T, N> next;
    for (std::size_t c = 0; c < N; ++c) {
      T acc = T(0);
      for (std::size_t r = 0; r < N; ++r) acc += e.a[r][c] * g[r];
      next[c] = acc;
    }
    g = next;
  }
  for (std::size_t i = 0; i < N; ++i) gx[i] += g[i];
}
// Per-block parameters of a block-diagonal relation operator.
template <std::size_t N, typename T = double>
struct CompoundParams {
  CompoundSpec spec;
  std::vector<T> values;  // blocks() * kParamsPerBlock<N>

  std::size_t blocks() const { return values.size() / kParamsPerBlock<N>; }

  std::span<const T> block(std::size_t b) const {
    return std::span<const T>(values).subspan(b * kParamsPerBlock<N>, kParamsPerBlock<N>);
  }
  std::span<T> block(std::size_t b) {
    return std::span<T>(values).subspan(b * kParamsPerBlock<N>, kParamsPerBlock<N>);
  }

  // Parameters of `blocks` identity blocks.
  static CompoundParams identity(std::size_t blocks, CompoundSpec spec) {
    CompoundParams cp;
    cp.spec = std::move(spec);
    cp.values.assign(blocks * kParamsPerBlock<N>, T(0));
    for (std::size_t b = 0; b < blocks; ++b) {
      auto p = cp.block(b);
      for (std::size_t i = 0; i < N; ++i) p[BlockLayout<N>::kScale + i] = T(1);
      if constexpr (N == 3) p[BlockLayout<3>::kReflect] = T(1);
    }
    return cp;
  }

  void validate() const {
    validate_ops<N>(spec.ops);
    if (values.size() % kParamsPerBlock<N> != 0) {
      throw ParameterError("compound parameter count is not a multiple of the block size");
    }
    if constexpr (N == 3) {
      const bool uses_reflection = std::find(spec.ops.begin(), spec.ops.end(), OpKind::Reflect) != spec.ops.end();
      if (uses_reflection && !spec.normalize_reflection) {
        for (std::size_t b = 0; b < blocks(); ++b) {
          const auto n = block(b).subspan(BlockLayout<3>::kReflect, 3);
          const double norm = std::sqrt(double(n[0]) * n[0] + double(n[1]) * n[1] + double(n[2]) * n[2]);
          if (!(std::abs(norm - 1.0) <= kUnitNormalTolerance)) {
            throw ParameterError("reflection normal of block " + std::to_string(b) + " is not unit length");
          }
        }
      }
    }
  }
};

// Applies the block-diagonal compound operator to `v` in Cartesian form: each
// consecutive N-slice x becomes A_b x + v_b.
template <std::size_t N, typename T>
void apply_blocks(const CompoundSpec& spec, std::span<const T> params, std::span<const T> v, std::span<T> out) {
  const std::size_t blocks = v.size() / N;
  if constexpr (N == 2) {
    for (std::size_t b = 0; b < blocks; ++b) {
      std::array<T, 2> z{v[2 * b], v[2 * b + 1]};
      detail::apply_block2<T>(spec.ops, params.subspan(b * kParamsPerBlock<2>, kParamsPerBlock<2>), z);
      out[2 * b] = z[0];
      out[2 * b + 1] = z[1];
    }
    return;
  }
  std::array<detail::Elem<N, T>, 9> elems;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t k =
        detail::expand<N, T>(spec, params.subspan(b * kParamsPerBlock<N>, kParamsPerBlock<N>), elems);
    std::array<T, N> z;
    for (std::size_t i = 0; i < N; ++i) z[i] = v[b * N + i];
    for (std::size_t j = k; j-- > 0;) detail::apply_elem(elems[j], z);
    for (std::size_t i = 0; i < N; ++i) out[b * N + i] = z[i];
  }
}

template <std::size_t N, typename T>
std::vector<T> apply_block_diagonal(const CompoundParams<N, T>& params, std::span<const T> v) {
  params.validate();
  if (v.size() % N != 0) {
    throw ParameterError("vector length " + std::to_string(v.size()) + " is not divisible by block dimension " +
                         std::to_string(N));
  }
  if (v.size() / N != params.blocks()) {
    throw ParameterError("vector has " + std::to_string(v.size() / N) + " blocks but parameters describe " +
                         std::to_string(params.blocks()));
  }
  std::vector<T> out(v.size());
  apply_blocks<N, T>(params.spec, params.values, v, out);
  return out;
}

}  // namespace kge::geometry
