#include <doctest.h>

#include <sstream>

#include "stmd/checkpoint.hpp"
#include "stmd/errors.hpp"
#include "stmd/stmd_format.hpp"
#include "stmd/synth.hpp"

using namespace stmd;

TEST_CASE("STMD round trip is exact") {
  SynthConfig sc;
  const Trajectory t = synth_generate(sc, 10, 3);
  std::stringstream ss;
  write_stmd(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "STMD");
  CHECK(bytes.size() == 4 + 16 + 8 + 10 * 8 * 7 * 8);
  const Trajectory back = read_stmd(ss);
  REQUIRE(back.length() == 10);
  CHECK(back.uniform_stride_ns() == t.uniform_stride_ns());
  for (std::size_t l = 0; l < 10; ++l)
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(back[l].frames[i].translation == t[l].frames[i].translation);
      CHECK(back[l].frames[i].rotation.quaternion().coeffs() == t[l].frames[i].rotation.quaternion().coeffs());
    }
  std::stringstream again;
  write_stmd(again, back);
  CHECK(again.str() == bytes);
}

TEST_CASE("STMD per-frame strides") {
  std::vector<FrameSet> f(3, FrameSet(4));
  const Trajectory t(f, std::vector<double>{0.1, 0.3});
  std::stringstream ss;
  write_stmd(ss, t);
  const Trajectory back = read_stmd(ss);
  CHECK(!back.has_uniform_stride());
  CHECK(back.stride_ns(1) == 0.3);
}

TEST_CASE("STMD rejects malformed input") {
  std::stringstream bad("XXXX0000");
  CHECK_THROWS_AS(read_stmd(bad), FormatError);
  std::vector<FrameSet> f(2, FrameSet(3));
  std::stringstream ss;
  write_stmd(ss, Trajectory(f, 0.1));
  std::string s = ss.str();
  std::stringstream truncated(s.substr(0, s.size() - 5));
  CHECK_THROWS_AS(read_stmd(truncated), FormatError);
  // Scale the first quaternion w (offset: header 20 + stride 8 + 3 translations).
  std::string scaled = s;
  const double w = 2.0;
  std::memcpy(scaled.data() + 28 + 24, &w, sizeof w);
  std::stringstream nonunit(scaled);
  CHECK_THROWS_AS(read_stmd(nonunit), FormatError);
  std::stringstream nonunit2(scaled);
  ReadOptions ro;
  ro.renormalize = true;
  const Trajectory fixed = read_stmd(nonunit2, ro);
  CHECK(fixed[0].frames[0].rotation.w() == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip") {
  DenoiserConfig dc;
  dc.model_dim = 16;
  dc.heads = 2;
  NoiseSchedule ns;
  ns.sigma_max = 1.2;
  Denoiser m(dc, ns);
  Rng rng(4);
  m.initialize(rng, InitStyle::random);
  std::stringstream ss;
  save_checkpoint(ss, m);
  CHECK(ss.str().substr(0, 8) == "STMDCKPT");
  const Denoiser back = load_checkpoint(ss);
  CHECK(back.config().model_dim == 16);
  CHECK(back.schedule().sigma_max == 1.2);
  REQUIRE(back.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(back.params()[i] == m.params()[i]);
  std::stringstream bad("NOTACKPT");
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
}
