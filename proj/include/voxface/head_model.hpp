// Copyright 2026 Voxface Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>

#include "voxface/serialize.hpp"
#include "voxface/tensor.hpp"

namespace voxface {

// Joint layout: root (global), neck, jaw, left eye, right eye.
inline constexpr std::size_t kNumJoints = 4;       // k
inline constexpr std::size_t kNumTransforms = 5;   // k + 1 (global included)
inline constexpr std::size_t kPoseDim = 3 * kNumJoints + 3;
inline constexpr int kJointParent[kNumTransforms] = {-1, 0, 1, 1, 1};
inline constexpr std::size_t kJawTransform = 2;

/// One landmark: either a plain vertex index or barycentric coordinates on a
/// triangle of the template topology.
struct LandmarkSpec {
  bool barycentric = false;
  std::vector<std::size_t> vertex_indices;            // plain form, size n_j
  std::vector<std::size_t> triangles;                 // barycentric form, size n_j
  std::vector<std::array<double, 3>> weights;         // barycentric form, size n_j
  std::size_t count() const { return barycentric ? triangles.size() : vertex_indices.size(); }
};

/// Everything the parametric head model needs: template geometry, linear
/// shape/expression bases, joint regressor, skinning weights, landmark and lip
/// index sets, and the landmark role map used by the expression descriptor.
struct HeadAssets {
  std::size_t n_v = 0;
  std::size_t n_j = 0;
  std::size_t n_beta = 0;
  std::size_t n_psi = 0;

  Tensor template_verts;   // [n_v, 3], meters
  Tensor shape_basis;      // [3*n_v, n_beta]
  Tensor expr_basis;       // [3*n_v, n_psi]
  Tensor pose_basis;       // optional [3*n_v, 9*k]; undefined when absent
  Tensor joint_regressor;  // [k+1, n_v]
  Tensor skin_weights;     // [n_v, k+1], rows sum to 1

  std::vector<std::array<std::size_t, 3>> faces;
  LandmarkSpec landmarks;
  std::vector<std::size_t> lip_indices;
  std::map<std::string, std::size_t> landmark_roles;  // role name -> landmark index

  bool has_pose_basis() const { return pose_basis.defined(); }

  void validate() const {
    if (n_v < 12) throw DataError(cat("assets: n_v=", n_v, " below minimum of 12"));
    if (n_j < 4) throw DataError(cat("assets: n_j=", n_j, " below minimum of 4"));
    if (template_verts.shape() != Shape{n_v, 3})
      throw DataError(cat("assets: template shape ", template_verts.shape()));
    if (shape_basis.shape() != Shape{3 * n_v, n_beta})
      throw DataError(cat("assets: shape basis shape ", shape_basis.shape()));
    if (expr_basis.shape() != Shape{3 * n_v, n_psi})
      throw DataError(cat("assets: expression basis shape ", expr_basis.shape()));
    if (has_pose_basis() && pose_basis.shape() != Shape{3 * n_v, 9 * kNumJoints})
      throw DataError(cat("assets: pose basis shape ", pose_basis.shape()));
    if (joint_regressor.shape() != Shape{kNumTransforms, n_v})
      throw DataError(cat("assets: joint regressor shape ", joint_regressor.shape()));
    if (skin_weights.shape() != Shape{n_v, kNumTransforms})
      throw DataError(cat("assets: skinning weights shape ", skin_weights.shape()));
    for (std::size_t i = 0; i < n_v; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < kNumTransforms; ++j) {
        const double w = skin_weights.at2(i, j);
        if (w < 0.0) throw DataError(cat("assets: negative skinning weight at row ", i));
        row += w;
      }
      if (std::abs(row - 1.0) > 1e-9)
        throw DataError(cat("assets: skinning row ", i, " sums to ", row));
    }
    if (landmarks.count() != n_j)
      throw DataError(cat("assets: landmark count ", landmarks.count(), " != n_j ", n_j));
    if (landmarks.barycentric) {
      for (std::size_t t : landmarks.triangles)
        if (t >= faces.size())
          throw DataError(cat("assets: landmark triangle index ", t, " out of range"));
    } else {
      for (std::size_t v : landmarks.vertex_indices)
        if (v >= n_v) throw DataError(cat("assets: landmark vertex index ", v, " out of range"));
    }
    if (lip_indices.empty()) throw DataError("assets: empty lip index set");
    for (std::size_t v : lip_indices)
      if (v >= n_v) throw DataError(cat("assets: lip index ", v, " out of range (n_v=", n_v, ")"));
    for (const auto& f : faces)
      for (std::size_t v : f)
        if (v >= n_v) throw DataError(cat("assets: face vertex index ", v, " out of range"));
    for (const auto& [role, idx] : landmark_roles)
      if (idx >= n_j) throw DataError(cat("assets: role '", role, "' points past landmark set"));
  }
};

/// Identity coefficients.
struct HeadShape {
  std::vector<double> beta;
};

/// Full pose vector: global, neck, jaw, left-eye, right-eye axis-angle.
struct PoseParams {
  std::vector<double> theta = std::vector<double>(kPoseDim, 0.0);

  std::array<double, 3> jaw() const {
    return {theta[3 * kJawTransform], theta[3 * kJawTransform + 1], theta[3 * kJawTransform + 2]};
  }
  void set_jaw(const std::array<double, 3>& j) {
    for (int i = 0; i < 3; ++i) theta[3 * kJawTransform + i] = j[i];
  }
};

/// Per-frame animation state: expression coefficients plus jaw pose.
struct FacialFrame {
  std::vector<double> psi;
  std::array<double, 3> jaw{0.0, 0.0, 0.0};
};

struct AnimationSequence {
  std::vector<FacialFrame> frames;
  double fps = 25.0;

  std::size_t length() const { return frames.size(); }
};

struct MeshOutput {
  Tensor vertices;   // [n_v, 3]
  Tensor landmarks;  // [n_j, 3]
};

// ---------------------------------------------------------------------------
// Forward model
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor landmark_select(const HeadAssets& a, const Tensor& verts) {
  if (!a.landmarks.barycentric) return gather_rows(verts, a.landmarks.vertex_indices);
  std::vector<std::size_t> i0(a.n_j), i1(a.n_j), i2(a.n_j);
  std::vector<double> w0(a.n_j), w1(a.n_j), w2(a.n_j);
  for (std::size_t l = 0; l < a.n_j; ++l) {
    const auto& tri = a.faces[a.landmarks.triangles[l]];
    i0[l] = tri[0];
    i1[l] = tri[1];
    i2[l] = tri[2];
    w0[l] = a.landmarks.weights[l][0];
    w1[l] = a.landmarks.weights[l][1];
    w2[l] = a.landmarks.weights[l][2];
  }
  Tensor p0 = scale_rows(gather_rows(verts, i0), Tensor::from({a.n_j}, w0));
  Tensor p1 = scale_rows(gather_rows(verts, i1), Tensor::from({a.n_j}, w1));
  Tensor p2 = scale_rows(gather_rows(verts, i2), Tensor::from({a.n_j}, w2));
  return add(add(p0, p1), p2);
}

}  // namespace detail

/// Differentiable forward model: blendshapes, joint regression, linear blend
/// skinning over the joint chain, landmark selection. The jaw rotation always
/// comes from `jaw`; `extra_pose` supplies global/neck/eye rotations (its jaw
/// slot is ignored) and defaults to the neutral pose.
inline MeshOutput flame_forward_t(const HeadAssets& a, const Tensor& beta, const Tensor& psi,
                                  const Tensor& jaw, const Tensor* extra_pose = nullptr) {
  if (beta.rank() != 1 || beta.size() != a.n_beta)
    throw ShapeError(cat("flame_forward: beta shape ", beta.shape(), ", expected ", a.n_beta));
  if (psi.rank() != 1 || psi.size() != a.n_psi)
    throw ShapeError(cat("flame_forward: psi shape ", psi.shape(), ", expected ", a.n_psi));
  if (jaw.size() != 3) throw ShapeError(cat("flame_forward: jaw shape ", jaw.shape()));
  if (extra_pose && extra_pose->size() != kPoseDim)
    throw ShapeError(cat("flame_forward: pose shape ", extra_pose->shape(), ", expected ", kPoseDim));

  // Per-transform axis-angle vectors.
  std::vector<Tensor> theta(kNumTransforms);
  const Tensor zero3 = Tensor::zeros({3});
  for (std::size_t j = 0; j < kNumTransforms; ++j) {
    if (j == kJawTransform)
      theta[j] = jaw.rank() == 1 ? jaw : reshape(jaw, {3});
    else if (extra_pose)
      theta[j] = reshape(slice_rows(reshape(*extra_pose, {kNumTransforms, 3}), j, 1), {3});
    else
      theta[j] = zero3;
  }

  std::vector<Tensor> rot(kNumTransforms);
  for (std::size_t j = 0; j < kNumTransforms; ++j) rot[j] = rodrigues(theta[j]);

  // Blendshape the template.
  Tensor shaped_flat = reshape(a.template_verts, {3 * a.n_v, 1});
  if (a.n_beta > 0)
    shaped_flat = add(shaped_flat, matmul(a.shape_basis, reshape(beta, {a.n_beta, 1})));
  if (a.n_psi > 0)
    shaped_flat = add(shaped_flat, matmul(a.expr_basis, reshape(psi, {a.n_psi, 1})));
  if (a.has_pose_basis()) {
    // Pose feature: flattened (R_j - I) of the non-global joints.
    const Tensor eye3 = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    std::vector<Tensor> feat;
    for (std::size_t j = 1; j < kNumTransforms; ++j)
      feat.push_back(reshape(sub(rot[j], eye3), {9}));
    Tensor pose_feat = concat(feat, 0);
    shaped_flat = add(shaped_flat, matmul(a.pose_basis, reshape(pose_feat, {9 * kNumJoints, 1})));
  }
  Tensor shaped = reshape(shaped_flat, {a.n_v, 3});

  Tensor joints = matmul(a.joint_regressor, shaped);  // [k+1, 3]

  // World affine per transform: x -> M x + t, rotations about joint positions
  // composed down the parent chain.
  std::vector<Tensor> M(kNumTransforms), tvec(kNumTransforms);
  for (std::size_t j = 0; j < kNumTransforms; ++j) {
    Tensor jc = transpose2d(slice_rows(joints, j, 1));  // [3,1]
    Tensor local_t = sub(jc, matmul(rot[j], jc));
    const int parent = kJointParent[j];
    if (parent < 0) {
      M[j] = rot[j];
      tvec[j] = local_t;
    } else {
      M[j] = matmul(M[parent], rot[j]);
      tvec[j] = add(matmul(M[parent], local_t), tvec[parent]);
    }
  }

  // Linear blend skinning.
  Tensor skinned;
  for (std::size_t j = 0; j < kNumTransforms; ++j) {
    Tensor part = add_rowwise(matmul(shaped, transpose2d(M[j])), reshape(tvec[j], {3}));
    Tensor w_col = reshape(slice_cols(a.skin_weights, j, 1), {a.n_v});
    Tensor weighted = scale_rows(part, w_col);
    skinned = j == 0 ? weighted : add(skinned, weighted);
  }

  MeshOutput out;
  out.vertices = skinned;
  out.landmarks = detail::landmark_select(a, skinned);
  return out;
}

inline MeshOutput flame_forward(const HeadAssets& a, const HeadShape& shape,
                                const FacialFrame& frame,
                                const std::optional<PoseParams>& extra_pose = std::nullopt) {
  Tensor beta = Tensor::from({a.n_beta}, shape.beta);
  Tensor psi = Tensor::from({a.n_psi}, frame.psi);
  Tensor jaw = Tensor::from({3}, {frame.jaw[0], frame.jaw[1], frame.jaw[2]});
  if (extra_pose) {
    Tensor pose = Tensor::from({kPoseDim}, extra_pose->theta);
    return flame_forward_t(a, beta, psi, jaw, &pose);
  }
  return flame_forward_t(a, beta, psi, jaw, nullptr);
}

/// Rows of V at the lip index set, order preserved.
inline Tensor lip_vertices(const HeadAssets& a, const Tensor& verts) {
  if (verts.rank() != 2 || verts.dim(0) != a.n_v || verts.dim(1) != 3)
    throw ShapeError(cat("lip_vertices: vertex shape ", verts.shape(), ", expected ", a.n_v, "x3"));
  return gather_rows(verts, a.lip_indices);
}

/// Per-frame forward with a shared identity; evaluation only (no gradients).
inline std::vector<MeshOutput> animate(const HeadAssets& a, const HeadShape& shape,
                                       const AnimationSequence& seq) {
  if (seq.frames.empty()) throw ShapeError("animate: empty sequence");
  NoGradGuard ng;
  std::vector<MeshOutput> out;
  out.reserve(seq.frames.size());
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    try {
      out.push_back(flame_forward(a, shape, seq.frames[t]));
    } catch (const Error& e) {
      throw Error(cat("animate: frame ", t, ": ", e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mini assets
// ---------------------------------------------------------------------------

struct MiniDims {
  std::size_t n_v = 64;
  std::size_t n_j = 16;
  std::size_t n_beta = 8;
  std::size_t n_psi = 8;
};

namespace detail {

inline double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Gram-Schmidt on columns, then rescale every column so that displacements
/// have a ~1 cm RMS per unit coefficient.
inline void orthogonalize_columns(std::vector<double>& m, std::size_t rows, std::size_t cols,
                                  double rms) {
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < rows; ++r) dot += m[r * cols + c] * m[r * cols + p];
      for (std::size_t r = 0; r < rows; ++r) m[r * cols + c] -= dot * m[r * cols + p];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < rows; ++r) norm += m[r * cols + c] * m[r * cols + c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw Error("mini assets: degenerate basis column");
    for (std::size_t r = 0; r < rows; ++r) m[r * cols + c] /= norm;
  }
  const double scale = rms * std::sqrt(static_cast<double>(rows));
  for (double& v : m) v *= scale;
}

}  // namespace detail

/// Deterministic-by-seed stand-in assets: a blob mesh built from latitude
/// bands of a bumpy sphere (face looking along +z, +y up), smooth synthetic
/// skinning with jaw weights concentrated on the lower front so a jaw
/// rotation opens the mouth region, and an expression basis whose first
/// column is a smile-like displacement (mouth corners lifted toward the
/// eyes). Landmarks are plain vertex indices; the first entries carry the
/// role map used by the expression descriptor.
inline HeadAssets make_mini_assets(std::uint64_t seed, const MiniDims& dims = {}) {
  if (dims.n_v < 12 || dims.n_j < 4)
    throw DataError(cat("make_mini_assets: n_v=", dims.n_v, " n_j=", dims.n_j, " below minimums"));
  if (dims.n_j > dims.n_v)
    throw DataError("make_mini_assets: more landmarks than vertices");
  Rng rng(seed);
  HeadAssets a;
  a.n_v = dims.n_v;
  a.n_j = dims.n_j;
  a.n_beta = dims.n_beta;
  a.n_psi = dims.n_psi;

  const double radius = 0.1;  // meters; head-ish scale

  // Latitude bands between -72 and +72 degrees, point counts proportional to
  // band circumference.
  const std::size_t n_bands = std::max<std::size_t>(4, static_cast<std::size_t>(
                                                           std::lround(std::sqrt(double(a.n_v) / 2.0))));
  std::vector<double> lats(n_bands);
  std::vector<double> circ(n_bands);
  double circ_total = 0.0;
  for (std::size_t b = 0; b < n_bands; ++b) {
    lats[b] = -1.25 + 2.5 * (static_cast<double>(b) + 0.5) / static_cast<double>(n_bands);
    circ[b] = std::cos(lats[b]);
    circ_total += circ[b];
  }
  std::vector<std::size_t> band_count(n_bands);
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < n_bands; ++b) {
    band_count[b] = std::max<std::size_t>(3, static_cast<std::size_t>(
                                                 std::floor(double(a.n_v) * circ[b] / circ_total)));
    assigned += band_count[b];
  }
  // Distribute the remainder (or take back the excess) round-robin.
  std::size_t b = 0;
  while (assigned < a.n_v) {
    ++band_count[b % n_bands];
    ++assigned;
    ++b;
  }
  b = 0;
  while (assigned > a.n_v) {
    if (band_count[b % n_bands] > 3) {
      --band_count[b % n_bands];
      --assigned;
    }
    ++b;
  }

  std::uniform_real_distribution<double> bump(-0.08, 0.08);
  std::vector<std::array<double, 3>> verts;
  std::vector<std::vector<std::size_t>> band_vertex_ids(n_bands);
  for (std::size_t bb = 0; bb < n_bands; ++bb) {
    for (std::size_t i = 0; i < band_count[bb]; ++i) {
      const double lon = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(band_count[bb]);
      const double r = radius * (1.0 + bump(rng));
      // z forward at lon = 0, x to the right, y up.
      const double cl = std::cos(lats[bb]);
      band_vertex_ids[bb].push_back(verts.size());
      verts.push_back({r * cl * std::sin(lon), r * std::sin(lats[bb]), r * cl * std::cos(lon)});
    }
  }

  // Zipper-triangulate consecutive bands by longitude.
  for (std::size_t bb = 0; bb + 1 < n_bands; ++bb) {
    const auto& lo = band_vertex_ids[bb];
    const auto& hi = band_vertex_ids[bb + 1];
    std::size_t i = 0, j = 0;
    auto lon_of = [&](const std::vector<std::size_t>& ring, std::size_t idx) {
      return 2.0 * M_PI * static_cast<double>(idx % ring.size()) / static_cast<double>(ring.size());
    };
    while (i < lo.size() || j < hi.size()) {
      const bool advance_lo =
          j >= hi.size() ||
          (i < lo.size() && lon_of(lo, i + 1) <= lon_of(hi, j + 1) + 1e-12);
      if (advance_lo && i < lo.size()) {
        a.faces.push_back({lo[i], lo[(i + 1) % lo.size()], hi[j % hi.size()]});
        ++i;
      } else {
        a.faces.push_back({hi[j], lo[i % lo.size()], hi[(j + 1) % hi.size()]});
        ++j;
      }
    }
  }

  std::vector<double> tmpl(3 * a.n_v);
  for (std::size_t v = 0; v < a.n_v; ++v)
    for (int d = 0; d < 3; ++d) tmpl[3 * v + d] = verts[v][d];
  a.template_verts = Tensor::from({a.n_v, 3}, tmpl);

  // Synthetic joint sites (root, neck, jaw, left eye, right eye).
  const std::array<std::array<double, 3>, kNumTransforms> joint_site = {{
      {0.0, 0.005, 0.0},
      {0.0, -0.05, 0.0},
      {0.0, -0.035, 0.05},
      {-0.035, 0.035, 0.07},
      {0.035, 0.035, 0.07},
  }};
  const std::array<double, kNumTransforms> reg_width = {0.12, 0.08, 0.05, 0.04, 0.04};

  // Joint regressor rows: normalized Gaussian falloff around each site.
  std::vector<double> regressor(kNumTransforms * a.n_v);
  for (std::size_t j = 0; j < kNumTransforms; ++j) {
    double total = 0.0;
    for (std::size_t v = 0; v < a.n_v; ++v) {
      const double d = detail::dist3(verts[v], joint_site[j]);
      const double w = std::exp(-(d * d) / (reg_width[j] * reg_width[j]));
      regressor[j * a.n_v + v] = w;
      total += w;
    }
    for (std::size_t v = 0; v < a.n_v; ++v) regressor[j * a.n_v + v] /= total;
  }
  a.joint_regressor = Tensor::from({kNumTransforms, a.n_v}, regressor);

  // Skinning weights: Gaussian falloff with gates; jaw concentrates on the
  // lower front so opening the jaw moves the lower lip region.
  std::vector<double> skin(a.n_v * kNumTransforms);
  for (std::size_t v = 0; v < a.n_v; ++v) {
    const auto& p = verts[v];
    std::array<double, kNumTransforms> w{};
    w[0] = 0.6;  // root baseline keeps rows strictly positive
    const double dn = detail::dist3(p, joint_site[1]);
    w[1] = (p[1] < -0.02 ? 1.0 : 0.05) * std::exp(-(dn * dn) / (0.08 * 0.08));
    const double dj = detail::dist3(p, joint_site[2]);
    w[2] = (p[1] < -0.025 && p[2] > 0.0 ? 4.0 : 0.02) * std::exp(-(dj * dj) / (0.07 * 0.07));
    for (std::size_t e = 3; e < kNumTransforms; ++e) {
      const double de = detail::dist3(p, joint_site[e]);
      w[e] = 0.8 * std::exp(-(de * de) / (0.03 * 0.03));
    }
    double total = 0.0;
    for (double x : w) total += x;
    for (std::size_t j = 0; j < kNumTransforms; ++j) skin[v * kNumTransforms + j] = w[j] / total;
  }
  a.skin_weights = Tensor::from({a.n_v, kNumTransforms}, skin);

  // Role landmarks: nearest distinct vertex to each semantic site.
  const std::vector<std::pair<std::string, std::array<double, 3>>> role_sites = {
      {"mouth_corner_l", {-0.045, -0.030, 0.075}},
      {"mouth_corner_r", {0.045, -0.030, 0.075}},
      {"lip_top", {0.0, -0.012, 0.095}},
      {"lip_bottom", {0.0, -0.055, 0.085}},
      {"eye_top_l", {-0.035, 0.045, 0.075}},
      {"eye_bottom_l", {-0.035, 0.018, 0.087}},
      {"eye_top_r", {0.035, 0.045, 0.075}},
      {"eye_bottom_r", {0.035, 0.018, 0.087}},
      {"brow_l", {-0.035, 0.065, 0.060}},
      {"brow_r", {0.035, 0.065, 0.060}},
      {"eye_outer_l", {-0.060, 0.032, 0.060}},
      {"eye_outer_r", {0.060, 0.032, 0.060}},
  };
  std::vector<std::size_t> lmk;
  std::vector<bool> used(a.n_v, false);
  const std::size_t n_roles = std::min(a.n_j, role_sites.size());
  for (std::size_t r = 0; r < n_roles; ++r) {
    std::size_t best = a.n_v;
    double best_d = 1e30;
    for (std::size_t v = 0; v < a.n_v; ++v) {
      if (used[v]) continue;
      const double d = detail::dist3(verts[v], role_sites[r].second);
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    used[best] = true;
    a.landmark_roles[role_sites[r].first] = lmk.size();
    lmk.push_back(best);
  }
  // Fill the rest with evenly spread unused vertices.
  std::size_t stride = std::max<std::size_t>(1, a.n_v / (a.n_j + 1));
  for (std::size_t v = 0; lmk.size() < a.n_j && v < a.n_v; v += stride) {
    std::size_t cand = v;
    while (cand < a.n_v && used[cand]) ++cand;
    if (cand < a.n_v) {
      used[cand] = true;
      lmk.push_back(cand);
    }
  }
  for (std::size_t v = 0; lmk.size() < a.n_j; ++v) {
    if (!used[v]) {
      used[v] = true;
      lmk.push_back(v);
    }
  }
  a.landmarks.barycentric = false;
  a.landmarks.vertex_indices = lmk;

  // Lip set: vertices near the mouth center.
  const std::array<double, 3> mouth_center = {0.0, -0.033, 0.09};
  for (std::size_t v = 0; v < a.n_v; ++v)
    if (detail::dist3(verts[v], mouth_center) < 0.05) a.lip_indices.push_back(v);
  if (a.lip_indices.empty()) a.lip_indices.push_back(a.landmarks.vertex_indices[3]);

  // Shape basis: random orthonormal columns, ~1 cm RMS displacement.
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> sbasis(3 * a.n_v * a.n_beta);
  for (double& x : sbasis) x = gauss(rng);
  detail::orthogonalize_columns(sbasis, 3 * a.n_v, a.n_beta, 0.01);
  a.shape_basis = Tensor::from({3 * a.n_v, a.n_beta}, sbasis);

  // Expression basis: column 0 is a hand-built smile field (corners lifted
  // toward the eyes, slight widening), remaining columns random; the whole
  // set is orthogonalized with the smile column first.
  std::vector<double> ebasis(3 * a.n_v * a.n_psi);
  for (double& x : ebasis) x = gauss(rng);
  for (std::size_t v = 0; v < a.n_v; ++v) {
    const auto& p = verts[v];
    const double dl = detail::dist3(p, role_sites[0].second);
    const double dr = detail::dist3(p, role_sites[1].second);
    const double s =
        std::exp(-(dl * dl) / (0.04 * 0.04)) + std::exp(-(dr * dr) / (0.04 * 0.04));
    const double sx = p[0] >= 0.0 ? 1.0 : -1.0;
    ebasis[(3 * v + 0) * a.n_psi] = s * 0.25 * sx;
    ebasis[(3 * v + 1) * a.n_psi] = s * 1.0;
    ebasis[(3 * v + 2) * a.n_psi] = s * 0.1;
  }
  detail::orthogonalize_columns(ebasis, 3 * a.n_v, a.n_psi, 0.01);
  a.expr_basis = Tensor::from({3 * a.n_v, a.n_psi}, ebasis);

  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Asset container ("LTHA")
// ---------------------------------------------------------------------------

inline constexpr char kAssetMagic[5] = "LTHA";
inline constexpr std::uint32_t kAssetVersion = 1;

inline void save_assets(const HeadAssets& a, const std::filesystem::path& path) {
  a.validate();
  atomic_write_file(path, [&](std::ostream& os) {
    BinaryWriter w(os);
    w.magic(kAssetMagic);
    w.u32(kAssetVersion);
    w.u64(a.n_v);
    w.u64(a.n_j);
    w.u64(kNumJoints);
    w.u64(a.n_beta);
    w.u64(a.n_psi);
    std::uint32_t flags = 0;
    if (a.has_pose_basis()) flags |= 1u;
    if (a.landmarks.barycentric) flags |= 2u;
    w.u32(flags);
    w.tensor("template", a.template_verts);
    w.tensor("shape_basis", a.shape_basis);
    w.tensor("expr_basis", a.expr_basis);
    if (a.has_pose_basis()) w.tensor("pose_basis", a.pose_basis);
    w.tensor("joint_regressor", a.joint_regressor);
    w.tensor("skin_weights", a.skin_weights);
    w.u64(a.faces.size());
    for (const auto& f : a.faces) {
      w.u64(f[0]);
      w.u64(f[1]);
      w.u64(f[2]);
    }
    if (a.landmarks.barycentric) {
      for (std::size_t l = 0; l < a.n_j; ++l) {
        w.u64(a.landmarks.triangles[l]);
        for (double x : a.landmarks.weights[l]) w.f64(x);
      }
    } else {
      for (std::size_t v : a.landmarks.vertex_indices) w.u64(v);
    }
    w.u64(a.lip_indices.size());
    for (std::size_t v : a.lip_indices) w.u64(v);
    w.u64(a.landmark_roles.size());
    for (const auto& [role, idx] : a.landmark_roles) {
      w.str(role);
      w.u64(idx);
    }
  });
}

inline HeadAssets load_assets(const std::filesystem::path& path) {
  std::ifstream is = open_input(path);
  BinaryReader r(is, cat("assets '", path.string(), "'"));
  r.expect_magic(kAssetMagic);
  const std::uint32_t version = r.u32();
  if (version != kAssetVersion)
    throw DataError(cat("assets '", path.string(), "': unsupported version ", version));
  HeadAssets a;
  a.n_v = r.u64();
  a.n_j = r.u64();
  const std::uint64_t k = r.u64();
  if (k != kNumJoints) throw DataError(cat("assets: joint count ", k, ", expected ", kNumJoints));
  a.n_beta = r.u64();
  a.n_psi = r.u64();
  const std::uint32_t flags = r.u32();

  auto named = [&](const char* want) {
    auto [name, t] = r.tensor();
    if (name != want) throw DataError(cat("assets: expected tensor '", want, "', found '", name, "'"));
    return t;
  };
  a.template_verts = named("template");
  a.shape_basis = named("shape_basis");
  a.expr_basis = named("expr_basis");
  if (flags & 1u) a.pose_basis = named("pose_basis");
  a.joint_regressor = named("joint_regressor");
  a.skin_weights = named("skin_weights");

  const std::uint64_t n_faces = r.u64();
  if (n_faces > (std::uint64_t(1) << 24)) throw DataError("assets: implausible face count");
  a.faces.resize(n_faces);
  for (auto& f : a.faces) {
    f[0] = r.u64();
    f[1] = r.u64();
    f[2] = r.u64();
  }
  a.landmarks.barycentric = (flags & 2u) != 0;
  if (a.landmarks.barycentric) {
    a.landmarks.triangles.resize(a.n_j);
    a.landmarks.weights.resize(a.n_j);
    for (std::size_t l = 0; l < a.n_j; ++l) {
      a.landmarks.triangles[l] = r.u64();
      for (double& x : a.landmarks.weights[l]) x = r.f64();
    }
  } else {
    a.landmarks.vertex_indices.resize(a.n_j);
    for (auto& v : a.landmarks.vertex_indices) v = r.u64();
  }
  const std::uint64_t n_lip = r.u64();
  if (n_lip > a.n_v) throw DataError("assets: lip set larger than vertex count");
  a.lip_indices.resize(n_lip);
  for (auto& v : a.lip_indices) v = r.u64();
  const std::uint64_t n_roles = r.u64();
  for (std::uint64_t i = 0; i < n_roles; ++i) {
    std::string role = r.str();
    a.landmark_roles[role] = r.u64();
  }
  r.check();
  a.validate();
  return a;
}

}  // namespace voxface
