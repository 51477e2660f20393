#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "lods/checkpoint.hpp"
#include "lods/config.hpp"
#include "lods/io.hpp"

using namespace lods;

TEST_CASE("toml subset parsing") {
  const auto doc = parse_toml(
      "# comment\n[run]\nseed = 3\nout_dir = \"runs/x\" # trailing\n[prior]\nw = inf\nflag = true\nv = [1, 2.5]\n");
  CHECK(doc.at("run").at("seed").number == 3.0);
  CHECK(doc.at("run").at("out_dir").text == "runs/x");
  CHECK(std::isinf(doc.at("prior").at("w").number));
  CHECK(doc.at("prior").at("flag").boolean);
  CHECK(doc.at("prior").at("v").array.size() == 2);
  CHECK_THROWS_AS(parse_toml("[run\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_toml("[run]\nseed 3\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_toml("[run]\nseed = 1\nseed = 2\n"), std::runtime_error);
}

TEST_CASE("run config round-trips through toml") {
  RunConfig c;
  c.seed = 42;
  c.prior.variant = Variant::LodsAdapter;
  c.prior.w = kInfiniteGuidance;
  c.prior.theta_optim.lr = 0.125;
  c.generator.kind = GeneratorKind::Splats;
  c.generator.splats.count = 5;
  c.oracle.preset = "unequal-variance";
  const RunConfig back = config_from_toml(parse_toml(to_toml(c)));
  CHECK(back.seed == 42);
  CHECK(back.prior.variant == Variant::LodsAdapter);
  CHECK(std::isinf(back.prior.w));
  CHECK(back.prior.theta_optim.lr == 0.125);
  CHECK(back.generator.kind == GeneratorKind::Splats);
  CHECK(back.generator.splats.count == 5);
  CHECK(back.oracle.preset == "unequal-variance");
  CHECK(to_toml(back) == to_toml(c));
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS(config_from_toml(parse_toml("[prior]\nweight = 3\n")));
  CHECK_THROWS(config_from_toml(parse_toml("[nope]\nw = 3\n")));
  CHECK_THROWS(config_from_toml(parse_toml("[prior]\nvariant = \"lods\"\n")));
  CHECK_THROWS(config_from_toml(parse_toml("[run]\nseed = \"three\"\n")));
  CHECK_THROWS(config_from_toml(parse_toml("[distill]\nsteps = 1.5\n")));
}

TEST_CASE("overrides") {
  RunConfig c;
  apply_override(c, "prior.w=inf");
  apply_override(c, "prior.variant=lods_embedding");
  apply_override(c, "run.out_dir=runs/o");
  apply_override(c, "distill.steps=12");
  CHECK(std::isinf(c.prior.w));
  CHECK(c.prior.variant == Variant::LodsEmbedding);
  CHECK(c.out_dir == "runs/o");
  CHECK(c.distill_steps == 12);
  CHECK_THROWS(apply_override(c, "prior.w"));
  CHECK_THROWS(apply_override(c, "w=3"));
  CHECK_THROWS(apply_override(c, "prior.nope=3"));
}

TEST_CASE("checkpoint round trip and corruption") {
  Checkpoint ck;
  Tensor<double> a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<float> b(Shape{4}, std::vector<float>{0.5f, -1.f, 2.f, 8.f});
  ck.put("a", a);
  ck.put("b", b);
  ck.put_scalar("s", 7.0);
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.get<double>("a").value() == a.value());
  CHECK(back.get<double>("b").value()(0, 3) == 8.0);
  CHECK(back.get<float>("a").value()(1, 2) == 6.0f);
  CHECK(back.get_scalar("s") == 7.0);
  CHECK(back.get<double>("a").shape() == Shape{2, 3});
  CHECK_FALSE(back.contains("missing"));
  CHECK_THROWS(back.get<double>("missing"));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH(decode_checkpoint(bad), doctest::Contains("bad magic"));
  auto trunc = bytes;
  trunc.resize(trunc.size() - 3);
  CHECK_THROWS_WITH(decode_checkpoint(trunc), doctest::Contains("truncated"));
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_WITH(decode_checkpoint(extra), doctest::Contains("trailing"));
  auto ver = bytes;
  ver[4] = 9;
  CHECK_THROWS_WITH(decode_checkpoint(ver), doctest::Contains("unsupported version"));
}

TEST_CASE("denoiser survives a checkpoint round trip exactly") {
  NetworkConfig nc;
  nc.width = 8;
  nc.hidden_layers = 1;
  nc.embed_dim = 4;
  nc.time_dim = 4;
  NetworkDenoiser<float> net(nc, make_schedule(ScheduleKind::Cosine, 500), 3);
  Checkpoint ck;
  store_denoiser(ck, net);
  auto back = restore_denoiser<float>(decode_checkpoint(encode_checkpoint(ck)));
  CHECK(back->schedule().steps() == 500);
  CHECK(back->schedule().kind() == ScheduleKind::Cosine);
  CounterRng rng(0, 0, Stream::Generic);
  const auto z = rng.normal_tensor<float>(Shape{5, 2});
  CHECK(net.predict(z, {100}, Condition<float>::of(1)).value() ==
        back->predict(z, {100}, Condition<float>::of(1)).value());
}

TEST_CASE("metrics csv format") {
  DistillStepRecord r;
  r.step = 3;
  r.distill_grad_norm = 0.25;
  r.t = 17;
  r.forwards = 3;
  r.backwards = 1;
  const auto csv = metrics_csv({r});
  CHECK(csv == std::string(kMetricsHeader) + "\n3,0.25,nan,17,3,1\n");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-std::numeric_limits<double>::infinity()) == "-inf");
}

TEST_CASE("datasets") {
  const auto m = make_mixture2d(100, 1.5, 0.0, 1);
  CHECK(m.size() == 200);
  for (Index i = 0; i < m.size(); ++i) {
    const double prod = m.samples(i, 0) * m.samples(i, 1);
    CHECK(prod == doctest::Approx(m.labels[i] == 0 ? 2.25 : -2.25));
  }
  CHECK(class_samples(m, 1).rows() == 100);
  const auto s = make_shapes(3, 8, 1, 0);
  CHECK(s.dim() == 64);
  CHECK(s.samples.maxCoeff() <= 1.0);
  CHECK(s.samples.minCoeff() >= 0.0);
  CHECK_THROWS(make_shapes(3, 8, 2, 0));
}

TEST_CASE("pnm export") {
  const auto path = (std::filesystem::temp_directory_path() / "lods_unit_test.pgm").string();
  Tensor<double> img(Shape{2, 3, 1}, std::vector<double>{0, 0.5, 1, 1, 1, 2});
  write_pnm(path, img);
  const auto text = read_text(path);
  CHECK(text.rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(text.size() == 11 + 6);
  CHECK(static_cast<unsigned char>(text.back()) == 255);
  std::remove(path.c_str());
  CHECK_THROWS(write_pnm(path, Tensor<double>(Shape{2, 2})));
}
