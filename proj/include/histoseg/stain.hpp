#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/image.hpp"
#include "json.hpp"

namespace histoseg {

struct StainParams {
  double io_intensity = 255.0;  // transmitted-light reference
  double beta = 0.15;           // OD floor for basis estimation
  double alpha = 1.0;           // angle percentile, percent
  double concentration_percentile = 99.0;

  void validate() const {
    require(io_intensity > 0.0, ErrorKind::InvalidArgument, "io_intensity must be > 0");
    require(alpha > 0.0 && alpha < 50.0, ErrorKind::InvalidArgument, "alpha must be in (0, 50)");
    require(beta >= 0.0, ErrorKind::InvalidArgument, "beta must be >= 0");
    require(concentration_percentile > 50.0 && concentration_percentile <= 100.0, ErrorKind::InvalidArgument,
            "concentration_percentile must be in (50, 100]");
  }

  friend bool operator==(const StainParams&, const StainParams&) = default;
};

/// Optical density image, three values per pixel, all >= 0.
struct OdImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> od;

  std::size_t pixel_count() const { return height * width; }
  const double* pixel(std::size_t i) const { return od.data() + 3 * i; }
};

/// Columns are unit-norm stain OD vectors: column 0 hematoxylin-like, column 1 eosin-like.
using StainBasis = Eigen::Matrix<double, 3, 2>;

struct StainProfile {
  StainBasis basis = StainBasis::Zero();
  std::array<double, 2> max_concentration{0.0, 0.0};

  friend bool operator==(const StainProfile& a, const StainProfile& b) {
    return a.basis == b.basis && a.max_concentration == b.max_concentration;
  }
};

/// Per-pixel stain concentrations, stored stain-major: values[s * count + i].
struct ConcentrationMap {
  std::size_t count = 0;
  std::vector<double> values;

  double at(std::size_t stain, std::size_t pixel) const { return values[stain * count + pixel]; }
};

/// Nearest-rank percentile of an ascending-sorted sequence.
inline double percentile_nearest_rank(const std::vector<double>& sorted, double percent) {
  require(!sorted.empty(), ErrorKind::InvalidArgument, "percentile of an empty sequence");
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(percent / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline OdImage rgb_to_od(const RasterImage& image, const StainParams& params) {
  require(image.channels() == 3, ErrorKind::InvalidArgument, "optical density requires an RGB image");
  OdImage out{image.height(), image.width(), std::vector<double>(image.pixels().size())};
  for (std::size_t i = 0; i < out.od.size(); ++i) {
    const double v = std::max(image.pixels()[i], 1.0);
    out.od[i] = std::max(0.0, -std::log10(v / params.io_intensity));
  }
  return out;
}

inline RasterImage od_to_rgb(const OdImage& od, const StainParams& params) {
  RasterImage out(od.height, od.width, 3);
  for (std::size_t i = 0; i < od.od.size(); ++i)
    out.pixels()[i] = std::clamp(params.io_intensity * std::pow(10.0, -od.od[i]), 0.0, 255.0);
  return out;
}

/// Smallest angle between the two estimated stain directions below which the
/// image is treated as single-stain.
inline constexpr double kMinStainSeparationDegrees = 1.0;

/// Two-stain basis from the extreme angles of OD pixels projected onto the
/// plane of the two leading covariance eigenvectors.
inline StainBasis estimate_stain_basis(const OdImage& od, const StainParams& params) {
  params.validate();
  std::vector<std::array<double, 3>> kept;
  kept.reserve(od.pixel_count());
  for (std::size_t i = 0; i < od.pixel_count(); ++i) {
    const double* p = od.pixel(i);
    if (p[0] >= params.beta && p[1] >= params.beta && p[2] >= params.beta) kept.push_back({p[0], p[1], p[2]});
  }
  require(kept.size() >= 2, ErrorKind::DegenerateInput,
          "fewer than 2 pixels above the optical density floor");
  // Fixed accumulation order makes the result independent of pixel order.
  std::sort(kept.begin(), kept.end());

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : kept) mean += Eigen::Vector3d(p[0], p[1], p[2]);
  mean /= static_cast<double>(kept.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : kept) {
    const Eigen::Vector3d d = Eigen::Vector3d(p[0], p[1], p[2]) - mean;
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(kept.size() - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  require(eig.info() == Eigen::Success, ErrorKind::DegenerateInput, "covariance eigen-decomposition failed");
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  require(eig.eigenvalues()(2) > 0.0, ErrorKind::DegenerateInput, "optical density has no variance");
  if (e1.sum() < 0.0) e1 = -e1;
  if (e2.sum() < 0.0) e2 = -e2;

  std::vector<double> angles;
  angles.reserve(kept.size());
  for (const auto& p : kept) {
    const Eigen::Vector3d v(p[0], p[1], p[2]);
    angles.push_back(std::atan2(v.dot(e2), v.dot(e1)));
  }
  std::sort(angles.begin(), angles.end());
  const double phi_min = percentile_nearest_rank(angles, params.alpha);
  const double phi_max = percentile_nearest_rank(angles, 100.0 - params.alpha);

  auto plane_vector = [&](double phi) {
    Eigen::Vector3d v = std::cos(phi) * e1 + std::sin(phi) * e2;
    v = v.cwiseMax(0.0);
    const double n = v.norm();
    require(n > 0.0, ErrorKind::DegenerateInput, "stain vector vanished after nonnegativity clamp");
    return Eigen::Vector3d(v / n);
  };
  const Eigen::Vector3d a = plane_vector(phi_min);
  const Eigen::Vector3d b = plane_vector(phi_max);

  const double separation = std::acos(std::clamp(a.dot(b), -1.0, 1.0)) * 180.0 / std::numbers::pi;
  require(separation >= kMinStainSeparationDegrees, ErrorKind::DegenerateInput,
          "image contains a single stain direction");

  StainBasis basis;
  if (a(0) >= b(0)) {
    basis.col(0) = a;
    basis.col(1) = b;
  } else {
    basis.col(0) = b;
    basis.col(1) = a;
  }
  return basis;
}

/// Least-squares unmixing of every pixel, clamped to nonnegative concentrations.
inline ConcentrationMap compute_concentrations(const OdImage& od, const StainBasis& basis) {
  Eigen::JacobiSVD<StainBasis> svd(basis);
  const auto sv = svd.singularValues();
  require(sv(0) > 0.0 && sv(1) > 1e-10 * sv(0), ErrorKind::RankDeficient, "stain basis is rank deficient");
  const Eigen::Matrix<double, 2, 3> pinv = basis.completeOrthogonalDecomposition().pseudoInverse();

  const std::size_t n = od.pixel_count();
  ConcentrationMap out{n, std::vector<double>(2 * n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = od.pixel(i);
    const Eigen::Vector2d c = pinv * Eigen::Vector3d(p[0], p[1], p[2]);
    out.values[i] = std::max(0.0, c(0));
    out.values[n + i] = std::max(0.0, c(1));
  }
  return out;
}

inline std::array<double, 2> concentration_percentiles(const ConcentrationMap& conc, double percent) {
  std::array<double, 2> out{};
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> v(conc.values.begin() + static_cast<std::ptrdiff_t>(s * conc.count),
                          conc.values.begin() + static_cast<std::ptrdiff_t>((s + 1) * conc.count));
    std::sort(v.begin(), v.end());
    out[s] = percentile_nearest_rank(v, percent);
  }
  return out;
}

inline StainProfile fit_target_profile(const RasterImage& target, const StainParams& params) {
  validate_rgb(target, "target image");
  const OdImage od = rgb_to_od(target, params);
  StainProfile profile;
  profile.basis = estimate_stain_basis(od, params);
  profile.max_concentration = concentration_percentiles(compute_concentrations(od, profile.basis),
                                                        params.concentration_percentile);
  return profile;
}

/// Maps `source` into the target's stain space: concentrations are rescaled per
/// stain to the target's percentile and recomposed through the target basis.
inline RasterImage normalize_to_target(const RasterImage& source, const StainProfile& profile,
                                       const StainParams& params) {
  validate_rgb(source, "source image");
  const OdImage od = rgb_to_od(source, params);
  const StainBasis src_basis = estimate_stain_basis(od, params);
  ConcentrationMap conc = compute_concentrations(od, src_basis);
  const auto src_max = concentration_percentiles(conc, params.concentration_percentile);
  for (std::size_t s = 0; s < 2; ++s) {
    require(src_max[s] > 0.0, ErrorKind::DegenerateInput, "source stain has zero concentration percentile");
    const double scale = profile.max_concentration[s] / src_max[s];
    for (std::size_t i = 0; i < conc.count; ++i) conc.values[s * conc.count + i] *= scale;
  }

  OdImage out_od{od.height, od.width, std::vector<double>(od.od.size())};
  for (std::size_t i = 0; i < conc.count; ++i) {
    const double c0 = conc.values[i], c1 = conc.values[conc.count + i];
    for (std::size_t ch = 0; ch < 3; ++ch)
      out_od.od[3 * i + ch] = profile.basis(static_cast<Eigen::Index>(ch), 0) * c0 +
                              profile.basis(static_cast<Eigen::Index>(ch), 1) * c1;
  }
  return od_to_rgb(out_od, params);
}

namespace detail {
/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
}  // namespace detail

/// {"basis": [row-major 3x2], "max_concentration": [2]} in shortest round-trip form.
inline std::string profile_to_json(const StainProfile& profile) {
  std::string out = "{\n  \"basis\": [";
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index c = 0; c < 2; ++c) {
      if (r || c) out += ", ";
      out += detail::format_double(profile.basis(r, c));
    }
  out += "],\n  \"max_concentration\": [" + detail::format_double(profile.max_concentration[0]) + ", " +
         detail::format_double(profile.max_concentration[1]) + "]\n}\n";
  return out;
}

inline StainProfile profile_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("stain profile JSON: ") + e.what());
  }
  require(j.contains("basis") && j["basis"].is_array() && j["basis"].size() == 6, ErrorKind::Parse,
          "stain profile needs a 6-element basis");
  require(j.contains("max_concentration") && j["max_concentration"].is_array() &&
              j["max_concentration"].size() == 2,
          ErrorKind::Parse, "stain profile needs a 2-element max_concentration");
  StainProfile p;
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index c = 0; c < 2; ++c) p.basis(r, c) = j["basis"][static_cast<std::size_t>(2 * r + c)].get<double>();
  p.max_concentration = {j["max_concentration"][0].get<double>(), j["max_concentration"][1].get<double>()};
  return p;
}

}  // namespace histoseg
