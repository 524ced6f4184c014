#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "histoseg/image.hpp"
#include "histoseg/rng.hpp"
#include "histoseg/stain.hpp"

// Procedural H&E-like data for tests, demos and the overfit checks.

namespace histoseg::synthetic {

/// Hematoxylin-like and eosin-like OD directions (unit norm), H first.
inline StainBasis reference_basis() {
  StainBasis m;
  m.col(0) = Eigen::Vector3d(0.65, 0.70, 0.29).normalized();
  m.col(1) = Eigen::Vector3d(0.27, 0.85, 0.45).normalized();
  return m;
}

/// RGB image with OD = basis * c for per-pixel concentrations `conc`
/// (stain-major layout, as in ConcentrationMap).
inline RasterImage compose_stains(const StainBasis& basis, std::size_t height, std::size_t width,
                                  const std::vector<double>& conc, double io = 255.0) {
  const std::size_t n = height * width;
  RasterImage img(height, width, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const auto r = static_cast<Eigen::Index>(ch);
      const double od = basis(r, 0) * conc[i] + basis(r, 1) * conc[n + i];
      img.pixels()[3 * i + ch] = std::clamp(io * std::pow(10.0, -od), 0.0, 255.0);
    }
  return img;
}

/// Random two-stain concentrations: a third of the pixels pure stain 0, a third
/// pure stain 1 and the rest mixed. Values keep every OD channel above the
/// default noise floor and below the 8-bit saturation point.
inline std::vector<double> two_stain_concentrations(std::size_t n, SeededRng& rng) {
  std::vector<double> conc(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto kind = rng.uniform_index(3);
    double c0 = rng.uniform(0.6, 1.6), c1 = rng.uniform(0.6, 1.6);
    if (kind == 0) c1 = 0.0;
    if (kind == 1) c0 = 0.0;
    if (kind == 2) {
      c0 *= 0.6;
      c1 *= 0.6;
    }
    conc[i] = c0;
    conc[n + i] = c1;
  }
  return conc;
}

struct BlobOptions {
  std::size_t blobs = 6;
  double radius_min = 5.0;
  double radius_max = 9.0;
  /// When nonzero, blob centres are snapped onto the lines row % period == 0
  /// or col % period == 0 so they straddle patch borders.
  std::size_t border_period = 0;
  double noise = 0.04;
};

struct SyntheticSlide {
  RasterImage image;
  BinaryMask mask;
};

/// Pink eosin background with dark hematoxylin disks; the mask marks the disks.
inline SyntheticSlide make_blob_slide(std::size_t height, std::size_t width, const BlobOptions& opts,
                                      SeededRng& rng, const StainBasis& basis = reference_basis()) {
  struct Blob {
    double r, c, radius;
  };
  std::vector<Blob> blobs;
  for (std::size_t k = 0; k < opts.blobs; ++k) {
    double r = rng.uniform(0.0, static_cast<double>(height));
    double c = rng.uniform(0.0, static_cast<double>(width));
    if (opts.border_period > 0) {
      const auto snap = [&](double v, std::size_t extent) {
        const auto lines = extent / opts.border_period;
        if (lines < 2) return v;
        const auto line = 1 + rng.uniform_index(lines - 1);
        return static_cast<double>(line * opts.border_period) + rng.uniform(-2.0, 2.0);
      };
      if (rng.uniform_index(2) == 0)
        r = snap(r, height);
      else
        c = snap(c, width);
    }
    blobs.push_back({r, c, rng.uniform(opts.radius_min, opts.radius_max)});
  }
  const std::size_t n = height * width;
  std::vector<double> conc(2 * n);
  SyntheticSlide out{RasterImage(), BinaryMask(height, width)};
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      bool inside = false;
      for (const auto& b : blobs) {
        const double dr = static_cast<double>(r) + 0.5 - b.r, dc = static_cast<double>(c) + 0.5 - b.c;
        if (dr * dr + dc * dc <= b.radius * b.radius) inside = true;
      }
      const std::size_t i = r * width + c;
      out.mask.set(i, inside);
      if (inside) {
        conc[i] = 0.9 + opts.noise * rng.normal();
        conc[n + i] = 0.15 + opts.noise * rng.normal();
      } else {
        conc[i] = 0.12 + opts.noise * rng.normal();
        conc[n + i] = 0.55 + opts.noise * rng.normal();
      }
      conc[i] = std::max(0.0, conc[i]);
      conc[n + i] = std::max(0.0, conc[n + i]);
    }
  out.image = compose_stains(basis, height, width, conc);
  return out;
}

}  // namespace histoseg::synthetic
