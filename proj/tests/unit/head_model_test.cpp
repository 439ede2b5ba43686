#include "voxface/head_model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "voxface/optim.hpp"
#include "../support/lbs_oracle.hpp"

namespace vf = voxface;
namespace vt = voxface_test;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

std::vector<double> random_vec(std::size_t n, vf::Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(MiniAssets, DeterministicBySeed) {
  vf::HeadAssets a = vf::make_mini_assets(42);
  vf::HeadAssets b = vf::make_mini_assets(42);
  ASSERT_EQ(a.n_v, b.n_v);
  for (std::size_t i = 0; i < a.template_verts.size(); ++i)
    EXPECT_EQ(a.template_verts.values()[i], b.template_verts.values()[i]);
  for (std::size_t i = 0; i < a.expr_basis.size(); ++i)
    EXPECT_EQ(a.expr_basis.values()[i], b.expr_basis.values()[i]);
  EXPECT_EQ(a.landmarks.vertex_indices, b.landmarks.vertex_indices);
  EXPECT_EQ(a.lip_indices, b.lip_indices);
}

TEST(MiniAssets, SkinningRowsSumToOne) {
  vf::HeadAssets a = vf::make_mini_assets(7);
  for (std::size_t v = 0; v < a.n_v; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < vf::kNumTransforms; ++j) s += a.skin_weights.at2(v, j);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(MiniAssets, DimsContractHolds) {
  vf::MiniDims dims;
  dims.n_v = 64;
  dims.n_psi = 8;
  vf::HeadAssets a = vf::make_mini_assets(3, dims);
  EXPECT_EQ(a.expr_basis.shape(), (vf::Shape{64 * 3, 8}));
  EXPECT_EQ(a.template_verts.shape(), (vf::Shape{64, 3}));
}

TEST(MiniAssets, InvalidDimsRejected) {
  vf::MiniDims dims;
  dims.n_v = 8;  // below minimum
  EXPECT_THROW(vf::make_mini_assets(1, dims), vf::DataError);
}

TEST(AssetContainer, RoundTripIsIdentical) {
  vf::HeadAssets a = vf::make_mini_assets(11);
  const fs::path path = temp_file("vf_assets_roundtrip.ltha");
  vf::save_assets(a, path);
  vf::HeadAssets b = vf::load_assets(path);
  EXPECT_EQ(a.n_v, b.n_v);
  EXPECT_EQ(a.n_j, b.n_j);
  EXPECT_EQ(a.n_beta, b.n_beta);
  EXPECT_EQ(a.n_psi, b.n_psi);
  for (std::size_t i = 0; i < a.template_verts.size(); ++i)
    EXPECT_EQ(a.template_verts.values()[i], b.template_verts.values()[i]);
  for (std::size_t i = 0; i < a.skin_weights.size(); ++i)
    EXPECT_EQ(a.skin_weights.values()[i], b.skin_weights.values()[i]);
  EXPECT_EQ(a.faces, b.faces);
  EXPECT_EQ(a.landmarks.vertex_indices, b.landmarks.vertex_indices);
  EXPECT_EQ(a.lip_indices, b.lip_indices);
  EXPECT_EQ(a.landmark_roles, b.landmark_roles);
  fs::remove(path);
}

TEST(AssetContainer, TruncatedFileRejected) {
  vf::HeadAssets a = vf::make_mini_assets(11);
  const fs::path path = temp_file("vf_assets_trunc.ltha");
  vf::save_assets(a, path);
  const auto full_size = fs::file_size(path);
  fs::resize_file(path, full_size / 2);
  EXPECT_THROW(vf::load_assets(path), vf::DataError);
  fs::remove(path);
}

TEST(AssetContainer, BadMagicRejected) {
  const fs::path path = temp_file("vf_assets_badmagic.ltha");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPEgarbage";
  }
  EXPECT_THROW(vf::load_assets(path), vf::DataError);
  fs::remove(path);
}

TEST(AssetContainer, OutOfRangeLipIndexRejected) {
  vf::HeadAssets a = vf::make_mini_assets(11);
  a.lip_indices.push_back(a.n_v + 5);
  const fs::path path = temp_file("vf_assets_badlip.ltha");
  EXPECT_THROW(vf::save_assets(a, path), vf::DataError);  // validated before write
}

TEST(HeadModel, ZeroParametersReturnTemplate) {
  vf::HeadAssets a = vf::make_mini_assets(5);
  vf::HeadShape shape{std::vector<double>(a.n_beta, 0.0)};
  vf::FacialFrame frame;
  frame.psi.assign(a.n_psi, 0.0);
  vf::MeshOutput out = vf::flame_forward(a, shape, frame);
  for (std::size_t v = 0; v < a.n_v; ++v)
    for (int d = 0; d < 3; ++d)
      EXPECT_NEAR(out.vertices.at2(v, d), a.template_verts.at2(v, d), 1e-12);
  // Landmarks are template rows.
  for (std::size_t l = 0; l < a.n_j; ++l)
    for (int d = 0; d < 3; ++d)
      EXPECT_NEAR(out.landmarks.at2(l, d),
                  a.template_verts.at2(a.landmarks.vertex_indices[l], d), 1e-12);
}

TEST(HeadModel, BlendshapeLinearityAtZeroPose) {
  vf::HeadAssets a = vf::make_mini_assets(6);
  vf::FacialFrame zero_frame;
  zero_frame.psi.assign(a.n_psi, 0.0);

  const double c = 0.7;
  std::vector<double> beta(a.n_beta, 0.0);
  beta[1] = c;
  vf::MeshOutput out = vf::flame_forward(a, vf::HeadShape{beta}, zero_frame);
  for (std::size_t v = 0; v < a.n_v; ++v)
    for (int d = 0; d < 3; ++d)
      EXPECT_NEAR(out.vertices.at2(v, d),
                  a.template_verts.at2(v, d) + c * a.shape_basis.at2(3 * v + d, 1), 1e-12);

  // M(b1+b2, psi, 0) - M(b2, psi, 0) == M(b1, 0, 0) - M(0, 0, 0)
  vf::Rng rng(8);
  std::vector<double> b1 = random_vec(a.n_beta, rng, 0.5);
  std::vector<double> b2 = random_vec(a.n_beta, rng, 0.5);
  std::vector<double> psi = random_vec(a.n_psi, rng, 0.5);
  std::vector<double> b12(a.n_beta);
  for (std::size_t i = 0; i < a.n_beta; ++i) b12[i] = b1[i] + b2[i];
  vf::FacialFrame f;
  f.psi = psi;
  vf::MeshOutput m12 = vf::flame_forward(a, vf::HeadShape{b12}, f);
  vf::MeshOutput m2 = vf::flame_forward(a, vf::HeadShape{b2}, f);
  vf::MeshOutput m1 = vf::flame_forward(a, vf::HeadShape{b1}, zero_frame);
  vf::MeshOutput m0 = vf::flame_forward(a, vf::HeadShape{std::vector<double>(a.n_beta, 0.0)},
                                        zero_frame);
  for (std::size_t i = 0; i < m12.vertices.size(); ++i)
    EXPECT_NEAR(m12.vertices.values()[i] - m2.vertices.values()[i],
                m1.vertices.values()[i] - m0.vertices.values()[i], 1e-10);
}

TEST(HeadModel, MatchesNaiveLoopOracleOnRandomConfigs) {
  vf::HeadAssets a = vf::make_mini_assets(13);
  vf::Rng rng(100);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> beta = random_vec(a.n_beta, rng, 0.8);
    std::vector<double> psi = random_vec(a.n_psi, rng, 0.8);
    std::vector<double> theta = random_vec(vf::kPoseDim, rng, 0.3);
    vf::PoseParams pose;
    pose.theta = theta;
    vf::FacialFrame frame;
    frame.psi = psi;
    frame.jaw = pose.jaw();
    vf::MeshOutput got = vf::flame_forward(a, vf::HeadShape{beta}, frame, pose);
    vt::OracleResult want = vt::lbs_oracle(a, beta, psi, theta);
    double max_err = 0.0;
    for (std::size_t v = 0; v < a.n_v; ++v)
      for (int d = 0; d < 3; ++d)
        max_err = std::max(max_err, std::abs(got.vertices.at2(v, d) - want.vertices[v][d]));
    for (std::size_t l = 0; l < a.n_j; ++l)
      for (int d = 0; d < 3; ++d)
        max_err = std::max(max_err, std::abs(got.landmarks.at2(l, d) - want.landmarks[l][d]));
    ASSERT_LT(max_err, 1e-10) << "trial " << trial;
  }
}

TEST(HeadModel, GlobalRotationRotatesVerticesAndLandmarksTogether) {
  vf::HeadAssets a = vf::make_mini_assets(21);
  vf::FacialFrame frame;
  frame.psi.assign(a.n_psi, 0.0);
  vf::HeadShape shape{std::vector<double>(a.n_beta, 0.0)};

  vf::MeshOutput base = vf::flame_forward(a, shape, frame);
  vf::PoseParams pose;
  pose.theta[0] = 0.4;
  pose.theta[1] = -0.2;
  pose.theta[2] = 0.1;
  vf::MeshOutput rotated = vf::flame_forward(a, shape, frame, pose);

  // The model rotates about the root joint; recover the same affine map from
  // the oracle pieces and check both outputs follow it.
  const vt::Mat3 R = vt::rodrigues_oracle({0.4, -0.2, 0.1});
  // Root joint of the unposed mesh:
  vt::Vec3 j0 = {0, 0, 0};
  for (std::size_t v = 0; v < a.n_v; ++v)
    for (int d = 0; d < 3; ++d) j0[d] += a.joint_regressor.at2(0, v) * base.vertices.at2(v, d);
  auto apply = [&](double x, double y, double z) {
    const vt::Vec3 p = {x - j0[0], y - j0[1], z - j0[2]};
    const vt::Vec3 rp = vt::apply3(R, p);
    return vt::Vec3{rp[0] + j0[0], rp[1] + j0[1], rp[2] + j0[2]};
  };
  for (std::size_t v = 0; v < a.n_v; ++v) {
    const auto want = apply(base.vertices.at2(v, 0), base.vertices.at2(v, 1),
                            base.vertices.at2(v, 2));
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(rotated.vertices.at2(v, d), want[d], 1e-10);
  }
  for (std::size_t l = 0; l < a.n_j; ++l) {
    const auto want = apply(base.landmarks.at2(l, 0), base.landmarks.at2(l, 1),
                            base.landmarks.at2(l, 2));
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(rotated.landmarks.at2(l, d), want[d], 1e-10);
  }
}

TEST(HeadModel, GradientsMatchFiniteDifferences) {
  vf::MiniDims dims;
  dims.n_v = 24;
  dims.n_j = 12;
  dims.n_beta = 4;
  dims.n_psi = 4;
  vf::HeadAssets a = vf::make_mini_assets(17, dims);
  vf::Rng rng(3);
  std::vector<vf::Tensor> point = {
      vf::Tensor::randn({a.n_beta}, rng, 0.5),
      vf::Tensor::randn({a.n_psi}, rng, 0.5),
      vf::Tensor::randn({3}, rng, 0.2),
  };
  auto f = [&a](const std::vector<vf::Tensor>& p) {
    vf::MeshOutput out = vf::flame_forward_t(a, p[0], p[1], p[2]);
    return vf::sum(out.vertices);
  };
  EXPECT_LT(vf::gradient_check(f, point, 1e-5), 1e-4);
}

TEST(HeadModel, LipVerticesSelectsRowsInOrder) {
  vf::HeadAssets a = vf::make_mini_assets(9);
  a.lip_indices = {0, 2};
  vf::Tensor v = vf::Tensor::from({a.n_v, 3}, [&] {
    std::vector<double> vals(a.n_v * 3);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i);
    return vals;
  }());
  vf::Tensor lips = vf::lip_vertices(a, v);
  ASSERT_EQ(lips.shape(), (vf::Shape{2, 3}));
  EXPECT_EQ(lips.at2(0, 0), v.at2(0, 0));
  EXPECT_EQ(lips.at2(1, 0), v.at2(2, 0));
}

TEST(HeadModel, EmptyLipSetFailsAssetValidation) {
  vf::HeadAssets a = vf::make_mini_assets(9);
  a.lip_indices.clear();
  EXPECT_THROW(a.validate(), vf::DataError);
}

TEST(Animate, SingleFrameReducesToForward) {
  vf::HeadAssets a = vf::make_mini_assets(19);
  vf::Rng rng(4);
  vf::FacialFrame f;
  f.psi = random_vec(a.n_psi, rng, 0.5);
  f.jaw = {0.1, 0.0, 0.05};
  vf::HeadShape shape{random_vec(a.n_beta, rng, 0.5)};
  vf::AnimationSequence seq;
  seq.frames = {f};
  auto meshes = vf::animate(a, shape, seq);
  ASSERT_EQ(meshes.size(), 1u);
  vf::MeshOutput direct = vf::flame_forward(a, shape, f);
  for (std::size_t i = 0; i < direct.vertices.size(); ++i)
    EXPECT_EQ(meshes[0].vertices.values()[i], direct.vertices.values()[i]);
}

TEST(Animate, DifferentBetaGivesConstantOffsetFieldAtZeroPose) {
  vf::HeadAssets a = vf::make_mini_assets(23);
  vf::Rng rng(5);
  vf::AnimationSequence seq;
  for (int t = 0; t < 4; ++t) {
    vf::FacialFrame f;
    f.psi = random_vec(a.n_psi, rng, 0.5);
    f.jaw = {0.0, 0.0, 0.0};
    seq.frames.push_back(f);
  }
  vf::HeadShape s1{random_vec(a.n_beta, rng, 0.5)};
  vf::HeadShape s2{random_vec(a.n_beta, rng, 0.5)};
  auto m1 = vf::animate(a, s1, seq);
  auto m2 = vf::animate(a, s2, seq);
  // Offset field between the two identities must not depend on the frame.
  std::vector<double> offset0(a.n_v * 3);
  for (std::size_t i = 0; i < offset0.size(); ++i)
    offset0[i] = m1[0].vertices.values()[i] - m2[0].vertices.values()[i];
  for (std::size_t t = 1; t < seq.frames.size(); ++t)
    for (std::size_t i = 0; i < offset0.size(); ++i)
      EXPECT_NEAR(m1[t].vertices.values()[i] - m2[t].vertices.values()[i], offset0[i], 1e-12);
}

TEST(Animate, DeterministicAcrossRuns) {
  vf::HeadAssets a = vf::make_mini_assets(29);
  vf::Rng rng(6);
  vf::AnimationSequence seq;
  for (int t = 0; t < 3; ++t) {
    vf::FacialFrame f;
    f.psi = random_vec(a.n_psi, rng, 0.5);
    f.jaw = {0.05 * t, 0.0, 0.0};
    seq.frames.push_back(f);
  }
  vf::HeadShape shape{random_vec(a.n_beta, rng, 0.5)};
  auto m1 = vf::animate(a, shape, seq);
  auto m2 = vf::animate(a, shape, seq);
  for (std::size_t t = 0; t < seq.frames.size(); ++t)
    for (std::size_t i = 0; i < m1[t].vertices.size(); ++i)
      EXPECT_EQ(m1[t].vertices.values()[i], m2[t].vertices.values()[i]);
}
