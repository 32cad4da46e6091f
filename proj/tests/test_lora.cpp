#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "securegate/lora.hpp"

using namespace securegate;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 100;
  cfg.embed_dim = 16;
  cfg.n_layers = 1;
  cfg.context_len = 24;
  return cfg;
}

void randomize(LowRankAdapter& a, std::uint64_t seed) {
  Rng rng(seed);
  a.for_each_tensor([&](Tensor& t) {
    for (double& v : t.data) v = rng.uniform(-0.3, 0.3);
  });
}

}  // namespace

TEST_CASE("fresh adapter has exactly zero delta") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kSecure, 7);
  for (const auto& [name, d] : dense_delta_of(a)) CHECK(d.max_abs() == 0.0);
  Rng rng(3);
  Tensor x = Tensor::randn({5, 16}, rng);
  CHECK(apply(a, m.attachment_points()[0].name, x).max_abs() == 0.0);
}

TEST_CASE("adapter init is deterministic and shaped by rank") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 16, Role::kRevealing, 9, true);
  LowRankAdapter b = init_adapter(m, 16, Role::kRevealing, 9, true);
  for (const auto& [name, pt] : a.points) {
    CHECK(pt.A.shape == std::vector<std::size_t>{16, 16});
    CHECK(pt.B.shape == std::vector<std::size_t>{16, 16});
    CHECK(pt.A.data == b.points.at(name).A.data);
  }
  CHECK(a.lora_alpha == 64.0);
}

TEST_CASE("rank validation") {
  TinyLM m = init_model(tiny_config(), 1);
  CHECK_THROWS_AS(init_adapter(m, 5, Role::kSecure, 1), std::invalid_argument);
  CHECK_NOTHROW(init_adapter(m, 5, Role::kSecure, 1, true));
  CHECK_THROWS_AS(init_adapter(m, 32, Role::kSecure, 1, true), std::invalid_argument);
}

TEST_CASE("apply uses the 4r scaling and is linear without dropout") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kSecure, 7);
  randomize(a, 11);
  const std::string point = m.attachment_points()[0].name;
  Rng rng(5);
  Tensor x = Tensor::randn({3, 16}, rng);

  // scale() is exactly 4 and apply equals 4 * (x A^T) B^T
  CHECK(a.scale() == 4.0);
  Tensor expect = matmul(matmul(x, a.points.at(point).A, false, true),
                         a.points.at(point).B, false, true);
  for (double& v : expect.data) v *= 4.0;
  Tensor got = apply(a, point, x, false);
  for (std::size_t i = 0; i < got.numel(); ++i)
    CHECK(got.data[i] == Catch::Approx(expect.data[i]).margin(1e-15));

  Tensor zero = Tensor::zeros({3, 16});
  CHECK(apply(a, point, zero).max_abs() == 0.0);
}

TEST_CASE("training dropout differs from eval but stays deterministic") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 8, Role::kSecure, 3);
  randomize(a, 13);
  a.dropout_p = 0.5;
  const std::string point = m.attachment_points()[1].name;
  Rng rng(5);
  Tensor x = Tensor::randn({4, 16}, rng);
  Tensor t1 = apply(a, point, x, true, 99);
  Tensor t2 = apply(a, point, x, true, 99);
  CHECK(t1.data == t2.data);
}

TEST_CASE("fuse with unit and zero coefficients") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kGlobal, 1);
  LowRankAdapter b = init_adapter(m, 4, Role::kSecure, 2);
  randomize(a, 21);
  randomize(b, 22);
  a.id = "global";
  b.id = "local";

  DenseDelta identity = fuse({&a, &b}, {1.0, 0.0});
  auto ea = dense_delta_of(a);
  for (const auto& [name, d] : identity.deltas) {
    const Tensor& ref = ea.at(name);
    for (std::size_t i = 0; i < d.numel(); ++i)
      CHECK(d.data[i] == Catch::Approx(ref.data[i]).margin(1e-15));
  }
  REQUIRE(identity.provenance.size() == 2);
  CHECK(identity.provenance[0] == std::pair<std::string, double>{"global", 1.0});

  DenseDelta zero = fuse({&a, &b}, {0.0, 0.0});
  for (const auto& [name, d] : zero.deltas) CHECK(d.max_abs() == 0.0);
}

TEST_CASE("fuse of scalar-like adapters averages known products") {
  // rank-1 adapters on a 1x1-style slice: use B row and A row so the top-left
  // delta entry is scale * B[0][0] * A[0][0]
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kSecure, 1);
  LowRankAdapter b = init_adapter(m, 4, Role::kSecure, 2);
  const std::string point = m.attachment_points()[0].name;
  for (auto* ad : {&a, &b}) {
    ad->for_each_tensor([](Tensor& t) {
      for (double& v : t.data) v = 0.0;
    });
  }
  // effective top-left entries: 4 * 0.5 * 1.0 = 2.0 and 4 * 1.5 * 1.0 = 6.0
  a.points.at(point).A.at(0, 0) = 1.0;
  a.points.at(point).B.at(0, 0) = 0.5;
  b.points.at(point).A.at(0, 0) = 1.0;
  b.points.at(point).B.at(0, 0) = 1.5;
  DenseDelta mean = fuse({&a, &b}, {0.5, 0.5});
  CHECK(mean.deltas.at(point).at(0, 0) == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("fuse is linear in its coefficients") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kGlobal, 5);
  LowRankAdapter b = init_adapter(m, 4, Role::kSecure, 6);
  randomize(a, 31);
  randomize(b, 32);
  std::vector<const LowRankAdapter*> xs = {&a, &b};
  DenseDelta fa = fuse(xs, {0.7, -0.2});
  DenseDelta fb = fuse(xs, {0.1, 0.9});
  DenseDelta fab = fuse(xs, {0.8, 0.7});
  for (const auto& [name, d] : fab.deltas)
    for (std::size_t i = 0; i < d.numel(); ++i)
      CHECK(std::abs(d.data[i] - (fa.deltas.at(name).data[i] +
                                  fb.deltas.at(name).data[i])) < 1e-12);
}

TEST_CASE("fused delta distributes over application") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kGlobal, 5);
  LowRankAdapter b = init_adapter(m, 8, Role::kSecure, 6);
  randomize(a, 41);
  randomize(b, 42);
  const std::string point = m.attachment_points()[0].name;
  const std::vector<double> coeffs = {0.6, -0.8};
  DenseDelta fused = fuse({&a, &b}, coeffs);
  Rng rng(9);
  Tensor x = Tensor::randn({4, 16}, rng);
  Tensor via_delta = matmul(x, fused.deltas.at(point), false, true);
  Tensor pa = apply(a, point, x, false);
  Tensor pb = apply(b, point, x, false);
  for (std::size_t i = 0; i < via_delta.numel(); ++i)
    CHECK(std::abs(via_delta.data[i] -
                   (coeffs[0] * pa.data[i] + coeffs[1] * pb.data[i])) < 1e-9);
}

TEST_CASE("fuse input validation") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kSecure, 1);
  CHECK_THROWS_AS(fuse({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(fuse({&a}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("adapter checkpoint round-trips at f32") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 8, Role::kRevealing, 77);
  randomize(a, 78);
  a.id = "client3/revealing";
  Bytes bytes = adapter_to_bytes(a);
  LowRankAdapter back = adapter_from_bytes(bytes);
  CHECK(back.role == Role::kRevealing);
  CHECK(back.rank == 8);
  CHECK(back.id == a.id);
  CHECK(back.lora_alpha == a.lora_alpha);
  for (const auto& [name, pt] : a.points) {
    const AdapterPoint& r = back.points.at(name);
    for (std::size_t i = 0; i < pt.A.numel(); ++i)
      CHECK(r.A.data[i] == double(float(pt.A.data[i])));
    for (std::size_t i = 0; i < pt.B.numel(); ++i)
      CHECK(r.B.data[i] == double(float(pt.B.data[i])));
  }

  Bytes bad = bytes;
  bad[2] = 'Z';
  CHECK_THROWS_WITH(adapter_from_bytes(bad),
                    Catch::Matchers::ContainsSubstring("bad magic"));
}

TEST_CASE("dense delta checkpoint keeps provenance and local-only flag") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kGlobal, 5);
  LowRankAdapter b = init_adapter(m, 4, Role::kRevealing, 6);
  randomize(a, 51);
  randomize(b, 52);
  a.id = "global";
  b.id = "c0/revealing";
  DenseDelta d = fuse({&a, &b}, {0.25, 1.25});
  d.id = "c0/personalized-revealing";
  d.role = Role::kFusedRevealing;
  d.local_only = true;

  DenseDelta back = delta_from_bytes(delta_to_bytes(d));
  CHECK(back.local_only);
  CHECK(back.role == Role::kFusedRevealing);
  REQUIRE(back.provenance.size() == 2);
  CHECK(back.provenance[1].first == "c0/revealing");
  CHECK(back.provenance[1].second == 1.25);

  // a dense payload cannot masquerade as a low-rank adapter
  CHECK_THROWS_WITH(adapter_from_bytes(delta_to_bytes(d)),
                    Catch::Matchers::ContainsSubstring("not a low-rank role"));
}

TEST_CASE("truncated adapter file is rejected") {
  TinyLM m = init_model(tiny_config(), 1);
  LowRankAdapter a = init_adapter(m, 4, Role::kSecure, 5);
  Bytes bytes = adapter_to_bytes(a);
  Bytes cut(bytes.begin(), bytes.begin() + bytes.size() - 7);
  CHECK_THROWS_WITH(adapter_from_bytes(cut),
                    Catch::Matchers::ContainsSubstring("truncated"));
}
