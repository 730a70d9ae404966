#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "motionparse/io.hpp"

using namespace motionparse;
using namespace motionparse::io;

namespace {

struct Shapes {
  std::mt19937_64 rng{2024};
  std::uniform_int_distribution<int> side{1, 12};
  std::pair<int, int> next() { return {side(rng), side(rng)}; }
};

std::uint32_t be32(const Bytes& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

std::size_t offset_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return SIZE_MAX;
}

}  // namespace

TEST(Flo, RoundTripRandomFields) {
  Shapes s;
  std::normal_distribution<float> n(0.0f, 40.0f);
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    VectorField f(w, h, 2);
    for (auto& v : f.data()) v = n(s.rng);
    const Bytes b = encode_flo(f);
    ASSERT_EQ(b.size(), 12u + static_cast<std::size_t>(w * h) * 8u);
    ASSERT_EQ(decode_flo(b), f);
  }
}

TEST(Flo, Layout) {
  VectorField f(2, 1, 2);
  f(0, 0, 0) = 1.5;
  f(0, 0, 1) = -2.0;
  f(1, 0, 0) = 3.0;
  const Bytes b = encode_flo(f);
  float magic, u;
  std::int32_t w, h;
  std::memcpy(&magic, b.data(), 4);
  std::memcpy(&w, b.data() + 4, 4);
  std::memcpy(&h, b.data() + 8, 4);
  std::memcpy(&u, b.data() + 12, 4);
  EXPECT_EQ(magic, 202021.25f);
  EXPECT_EQ(w, 2);
  EXPECT_EQ(h, 1);
  EXPECT_EQ(u, 1.5f);
  std::memcpy(&u, b.data() + 20, 4);
  EXPECT_EQ(u, 3.0f);
}

TEST(Flo, Errors) {
  VectorField f(3, 2, 2, 1.0);
  Bytes b = encode_flo(f);
  Bytes bad = b;
  bad[0] ^= 0xff;
  EXPECT_EQ(offset_of([&] { decode_flo(bad); }), 0u);
  Bytes short_ = b;
  short_.resize(20);
  EXPECT_EQ(offset_of([&] { decode_flo(short_); }), 20u);
  Bytes tiny(6, 0);
  EXPECT_THROW(decode_flo(tiny), FormatError);
  EXPECT_THROW(encode_flo(VectorField(2, 2, 1)), DomainError);
}

TEST(Pfm, RoundTripRandomFields) {
  Shapes s;
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    ScalarField f(w, h, t % 4 == 0 ? 3 : 1);
    for (auto& v : f.data()) v = u(s.rng);
    ASSERT_EQ(decode_pfm(encode_pfm(f)), f);
  }
}

TEST(Pfm, HeaderAndRowOrder) {
  ScalarField f(2, 2);
  f(0, 0) = 1.0;
  f(0, 1) = 7.0;
  const Bytes b = encode_pfm(f);
  const std::string header = "Pf\n2 2\n-1.0\n";
  ASSERT_EQ(std::string(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
  float first;
  std::memcpy(&first, b.data() + header.size(), 4);
  EXPECT_EQ(first, 7.0f);  // bottom row first
}

TEST(Pfm, Errors) {
  const std::string bad_magic = "Px\n2 2\n-1.0\n";
  EXPECT_EQ(offset_of([&] { decode_pfm(Bytes(bad_magic.begin(), bad_magic.end())); }), 0u);
  const std::string big_endian = "Pf\n1 1\n1.0\nabcd";
  EXPECT_EQ(offset_of([&] { decode_pfm(Bytes(big_endian.begin(), big_endian.end())); }), 7u);
  const std::string bad_width = "Pf\nx 1\n-1.0\nabcd";
  EXPECT_EQ(offset_of([&] { decode_pfm(Bytes(bad_width.begin(), bad_width.end())); }), 3u);
  const std::string truncated = "Pf\n2 1\n-1.0\nabcd";
  EXPECT_EQ(offset_of([&] { decode_pfm(Bytes(truncated.begin(), truncated.end())); }), 12u);
}

TEST(KittiFlow, PublishedEncoding) {
  VectorField f(1, 1, 2);
  f(0, 0, 0) = 1.0;
  f(0, 0, 1) = -0.5;
  const RawImage img = decode_png(encode_kitti_flow(f));
  ASSERT_EQ(img.channels, 3);
  ASSERT_EQ(img.bit_depth, 16);
  EXPECT_EQ(img.samples[0], 32832);
  EXPECT_EQ(img.samples[1], 32768 - 32);
  EXPECT_EQ(img.samples[2], 1);
}

TEST(KittiFlow, RoundTripRandomFields) {
  Shapes s;
  std::uniform_int_distribution<int> q(-200 * 64, 200 * 64);
  std::bernoulli_distribution keep(0.8);
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    VectorField f(w, h, 2);
    MaskField valid(w, h);
    for (auto& v : f.data()) v = q(s.rng) / 64.0;
    for (auto& v : valid.data()) v = keep(s.rng);
    const KittiFlow r = decode_kitti_flow(encode_kitti_flow(f, &valid));
    ASSERT_EQ(r.valid, valid);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 2; ++c) ASSERT_EQ(r.flow(x, y, c), valid(x, y) ? f(x, y, c) : 0.0);
  }
  VectorField out_of_range(1, 1, 2, 600.0);
  EXPECT_THROW(encode_kitti_flow(out_of_range), DomainError);
}

TEST(KittiDepth, PublishedEncoding) {
  const ScalarField d(1, 1, 1, 5.0);
  const RawImage img = decode_png(encode_kitti_depth(d));
  ASSERT_EQ(img.channels, 1);
  ASSERT_EQ(img.bit_depth, 16);
  EXPECT_EQ(img.samples[0], 1280);
  EXPECT_EQ(decode_kitti_depth(encode_kitti_depth(d)).depth(0, 0), 5.0);
}

TEST(KittiDepth, RoundTripRandomFields) {
  Shapes s;
  std::uniform_int_distribution<int> q(1, 65535);
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    ScalarField d(w, h);
    for (auto& v : d.data()) v = q(s.rng) / 256.0;
    const KittiDepth r = decode_kitti_depth(encode_kitti_depth(d));
    ASSERT_EQ(r.depth, d);
    for (auto v : r.valid.data()) ASSERT_EQ(v, 1);
  }
  MaskField none(1, 1, 1, 0);
  EXPECT_EQ(decode_kitti_depth(encode_kitti_depth(ScalarField(1, 1, 1, 3.0), &none)).valid(0, 0), 0);
}

TEST(Png, RoundTripRawImages) {
  Shapes s;
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    RawImage img{w, h, 1 + t % 4, t % 2 == 0 ? 8 : 16, {}};
    std::uniform_int_distribution<int> q(0, img.bit_depth == 8 ? 255 : 65535);
    img.samples.resize(static_cast<std::size_t>(w * h * img.channels));
    for (auto& v : img.samples) v = static_cast<std::uint16_t>(q(s.rng));
    const RawImage r = decode_png(encode_png(img));
    ASSERT_EQ(r.width, w);
    ASSERT_EQ(r.height, h);
    ASSERT_EQ(r.channels, img.channels);
    ASSERT_EQ(r.bit_depth, img.bit_depth);
    ASSERT_EQ(r.samples, img.samples);
  }
}

TEST(Png, GrayAndMaskRoundTrip) {
  Shapes s;
  std::uniform_int_distribution<int> q(0, 255);
  std::bernoulli_distribution b(0.5);
  for (int t = 0; t < 1000; ++t) {
    const auto [w, h] = s.next();
    ScalarField g(w, h);
    MaskField m(w, h);
    for (auto& v : g.data()) v = q(s.rng) / 255.0;
    for (auto& v : m.data()) v = b(s.rng);
    const ScalarField gr = decode_image_gray(encode_image_gray(g));
    for (std::size_t i = 0; i < g.size(); ++i) ASSERT_NEAR(gr.data()[i], g.data()[i], 1e-15);
    ASSERT_EQ(decode_mask(encode_mask(m)), m);
  }
}

TEST(Png, LumaFromColour) {
  RawImage img{1, 1, 3, 8, {255, 0, 0}};
  EXPECT_NEAR(decode_image_gray(encode_png(img))(0, 0), 0.299, 1e-12);
}

TEST(Png, CrcErrorNamesOffset) {
  Bytes b = encode_kitti_depth(ScalarField(3, 2, 1, 5.0));
  // IHDR data starts at 16; its CRC sits at 8 + 8 + 13 = 29.
  ASSERT_EQ(be32(b, 8), 13u);
  b[18] ^= 0x01;
  EXPECT_EQ(offset_of([&] { decode_kitti_depth(b); }), 29u);
  Bytes sig = encode_mask(MaskField(2, 2));
  sig[1] = 'X';
  EXPECT_EQ(offset_of([&] { decode_mask(sig); }), 0u);
  Bytes cut = encode_mask(MaskField(2, 2));
  cut.resize(cut.size() - 6);
  EXPECT_THROW(decode_mask(cut), FormatError);
}

TEST(Png, WrongKindRejected) {
  const Bytes gray8 = encode_mask(MaskField(2, 2));
  EXPECT_THROW(decode_kitti_flow(gray8), FormatError);
  EXPECT_THROW(decode_kitti_depth(gray8), FormatError);
}

TEST(Text, IntrinsicsRoundTrip) {
  const CameraIntrinsics k{60.25, 59.5, 31.5, 30.75, 64, 48};
  const CameraIntrinsics r = parse_intrinsics(format_intrinsics(k));
  EXPECT_EQ(r.fx, k.fx);
  EXPECT_EQ(r.cy, k.cy);
  EXPECT_EQ(r.width, 64);
  EXPECT_EQ(r.height, 48);
  EXPECT_THROW(parse_intrinsics("1 2 3"), FormatError);
  EXPECT_THROW(parse_intrinsics("60 60 31.5 31.5 64 64 extra"), FormatError);
}

TEST(Text, PosesRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<Pose> poses;
  for (int i = 0; i < 50; ++i) poses.push_back(pose_from_twist(Twist{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)}));
  const auto r = parse_poses(format_poses(poses));
  ASSERT_EQ(r.size(), poses.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(r[i].translation.x, poses[i].translation.x);
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(r[i].rotation(a, c), poses[i].rotation(a, c));
  }
  const std::string text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n";
  EXPECT_EQ(offset_of([&] { parse_poses(text); }), 24u);
}

TEST(Files, ReadWrite) {
  const auto dir = std::filesystem::temp_directory_path() / "motionparse_test_io";
  std::filesystem::create_directories(dir);
  const Bytes b{1, 2, 3, 250};
  write_file(dir / "x.bin", b);
  EXPECT_EQ(read_file(dir / "x.bin"), b);
  EXPECT_THROW(read_file(dir / "missing.bin"), DomainError);
  std::filesystem::remove_all(dir);
}
