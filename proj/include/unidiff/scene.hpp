#pragma once

// Procedural scenes of spheres resting on a tilted ground plane, rendered by an
// orthographic ray caster with analytic normals, depth and class labels.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

enum class Style { A, B };

inline std::string to_string(Style s) { return s == Style::A ? "A" : "B"; }

inline Style parse_style(const std::string& s) {
  if (s == "A" || s == "a") return Style::A;
  if (s == "B" || s == "b") return Style::B;
  throw ParameterError("unknown style '" + s + "' (expected A or B)");
}

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

inline Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

struct Sphere {
  Vec3 center;
  double radius;
  Vec3 albedo;
  int class_id;  // 1..3
};

struct SceneSpec {
  double tilt = 0;  // rotation of the ground plane about the x axis (radians)
  Vec3 ground_albedo{0.6, 0.6, 0.6};
  std::vector<Sphere> spheres;
  Vec3 light_dir{0, 0, 1};
  Style style = Style::A;
  std::uint64_t seed = 0;

  Vec3 ground_normal() const { return {0, std::sin(tilt), std::cos(tilt)}; }
};

inline constexpr int kNumClasses = 4;     // ground + three sphere classes
inline constexpr int kDescriptorDim = 6;  // 3 class counts, total, 2 style flags
inline constexpr int kMaxSpheres = 5;
inline constexpr double kCameraZ = 10.0;

struct StyleParams {
  double radius_lo, radius_hi;
  std::array<Vec3, 4> palette;  // ground, class 1..3
};

inline StyleParams style_params(Style s) {
  if (s == Style::A)
    return {0.20, 0.45, {{{0.55, 0.55, 0.50}, {0.90, 0.25, 0.20}, {0.20, 0.75, 0.30}, {0.25, 0.35, 0.90}}}};
  return {0.30, 0.60, {{{0.35, 0.40, 0.55}, {0.95, 0.70, 0.15}, {0.70, 0.30, 0.85}, {0.20, 0.80, 0.80}}}};
}

/// Height of the ground plane (through the origin) above point (x, y).
inline double ground_z(double tilt, double x, double y) {
  (void)x;
  return -std::sin(tilt) * y / std::cos(tilt);
}

inline SceneSpec sample_scene(std::uint64_t seed, Style style) {
  Rng rng = make_rng(seed, 0x5ce2e);
  const StyleParams sp = style_params(style);
  SceneSpec s;
  s.seed = seed;
  s.style = style;
  s.tilt = uniform(rng, -0.5, 0.5);
  const double gj = uniform(rng, 0.9, 1.1);
  for (int c = 0; c < 3; ++c) s.ground_albedo[c] = std::min(1.0, sp.palette[0][c] * gj);
  s.light_dir = normalized({uniform(rng, -0.6, 0.6), uniform(rng, -0.6, 0.6), 1.0});
  const Vec3 n = s.ground_normal();
  const int count = uniform_int(rng, 1, kMaxSpheres);
  for (int i = 0; i < count; ++i) {
    Sphere sph;
    sph.radius = uniform(rng, sp.radius_lo, sp.radius_hi);
    sph.class_id = uniform_int(rng, 1, 3);
    const double lim = 1.0 - sph.radius;
    const double x = uniform(rng, -lim, lim), y = uniform(rng, -lim, lim);
    const double z = ground_z(s.tilt, x, y);
    sph.center = {x + sph.radius * n[0], y + sph.radius * n[1], z + sph.radius * n[2]};
    const double j = uniform(rng, 0.85, 1.0);
    for (int c = 0; c < 3; ++c) sph.albedo[c] = sp.palette[static_cast<std::size_t>(sph.class_id)][c] * j;
    s.spheres.push_back(sph);
  }
  return s;
}

inline std::vector<float> scene_descriptor(const SceneSpec& s) {
  std::vector<float> d(kDescriptorDim, 0.0f);
  for (const auto& sph : s.spheres) d[static_cast<std::size_t>(sph.class_id - 1)] += 1.0f / kMaxSpheres;
  d[3] = static_cast<float>(s.spheres.size()) / kMaxSpheres;
  d[s.style == Style::A ? 4 : 5] = 1.0f;
  return d;
}

/// Image with dense labels and its conditioning descriptor.
struct Sample {
  Tensor<float> image;    // (3, h, w) in [0, 1]
  Tensor<float> normals;  // (3, h, w) unit vectors
  Tensor<float> depth;    // (1, h, w) positive
  std::vector<int> seg;   // (h * w) class indices
  std::vector<std::uint8_t> valid;  // (h * w)
  std::vector<float> descriptor;
  std::string id;
  Style style = Style::A;

  int size() const { return image.dim(1); }
  bool has_labels() const { return !normals.empty(); }
};

inline Sample render(const SceneSpec& s, int resolution) {
  if (resolution < 1 || (resolution & (resolution - 1)))
    throw ParameterError("render resolution must be a power of two, got " + std::to_string(resolution));
  const int r = resolution, hw = r * r;
  Sample out;
  out.image = Tensor<float>({3, r, r});
  out.normals = Tensor<float>({3, r, r});
  out.depth = Tensor<float>({1, r, r});
  out.seg.assign(static_cast<std::size_t>(hw), 0);
  out.valid.assign(static_cast<std::size_t>(hw), 1);
  out.descriptor = scene_descriptor(s);
  out.style = s.style;
  const Vec3 gn = s.ground_normal();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) {
      const double u = (j + 0.5) / r * 2.0 - 1.0;
      const double v = 1.0 - (i + 0.5) / r * 2.0;
      // Ray (u, v, kCameraZ) + d * (0, 0, -1).
      double best = (kCameraZ - ground_z(s.tilt, u, v));
      Vec3 n = gn;
      Vec3 albedo = s.ground_albedo;
      int cls = 0;
      for (const auto& sph : s.spheres) {
        const double dx = u - sph.center[0], dy = v - sph.center[1];
        const double q = sph.radius * sph.radius - dx * dx - dy * dy;
        if (q < 0) continue;
        const double d = kCameraZ - sph.center[2] - std::sqrt(q);
        if (d < best) {
          best = d;
          const double hz = kCameraZ - d;
          n = {dx / sph.radius, dy / sph.radius, (hz - sph.center[2]) / sph.radius};
          n = normalized(n);
          albedo = sph.albedo;
          cls = sph.class_id;
        }
      }
      const int p = i * r + j;
      const double shade = std::max(0.0, dot(n, s.light_dir));
      for (int c = 0; c < 3; ++c) {
        out.image[static_cast<std::size_t>(c * hw + p)] = static_cast<float>(std::min(1.0, shade * albedo[static_cast<std::size_t>(c)]));
        out.normals[static_cast<std::size_t>(c * hw + p)] = static_cast<float>(n[static_cast<std::size_t>(c)]);
      }
      out.depth[static_cast<std::size_t>(p)] = static_cast<float>(best);
      out.seg[static_cast<std::size_t>(p)] = cls;
      out.valid[static_cast<std::size_t>(p)] = n[2] > 1e-3 ? 1 : 0;
    }
  return out;
}

/// Renders `count` scenes with seeds derived from (seed, index).
inline std::vector<Sample> render_dataset(int count, Style style, int resolution, std::uint64_t seed,
                                          const std::string& id_prefix) {
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    Sample smp = render(sample_scene(mix_seed(seed * 1000003ULL + static_cast<std::uint64_t>(i)), style), resolution);
    smp.id = id_prefix + std::to_string(i);
    out.push_back(std::move(smp));
  }
  return out;
}

}  // namespace unidiff
