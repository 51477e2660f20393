#include "doctest.h"

#include "lods/gradcore.hpp"
#include "lods/oracle.hpp"
#include "lods/rng.hpp"

using namespace lods;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed) {
  CounterRng rng(seed, 0, Stream::Generic);
  return rng.normal_tensor<double>(s);
}

}  // namespace

TEST_CASE("tensor layout") {
  CHECK(Tensor<double>::scalar(2.0).rows() == 1);
  Tensor<double> v(Shape{5});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 5);
  Tensor<double> img(Shape{4, 3, 2});
  CHECK(img.rows() == 4);
  CHECK(img.cols() == 6);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(img.reshaped(Shape{5}), std::invalid_argument);
  CHECK(img.reshaped(Shape{24}).cols() == 24);
}

TEST_CASE("leaf gradients accumulate across backward passes") {
  Tensor<double> a(Shape{2}, std::vector<double>{1.0, -2.0}, true);
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(square(tape.leaf(a))));
  }
  CHECK(a.grad()(0, 0) == doctest::Approx(4.0));
  CHECK(a.grad()(0, 1) == doctest::Approx(-8.0));
  a.zero_grad();
  CHECK_FALSE(a.has_grad());
}

TEST_CASE("reused variable sums both paths") {
  Tensor<double> a(Shape{}, std::vector<double>{3.0}, true);
  Tape<double> tape;
  auto x = tape.leaf(a);
  tape.backward(sum(mul(x, x) + x));
  CHECK(a.grad()(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("backward needs a scalar root") {
  Tensor<double> a(Shape{3}, true);
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(tape.leaf(a)), std::invalid_argument);
}

TEST_CASE("constants receive no gradient") {
  Tensor<double> a(Shape{2}, std::vector<double>{1.0, 2.0}, false);
  Tape<double> tape;
  auto y = sum(square(tape.leaf(a)));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("binary ops reject mismatched shapes") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  auto b = tape.constant(Tensor<double>(Shape{3, 2}));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("finite differences agree with every primitive") {
  const Tensor<double> x = randn(Shape{3, 4}, 1);
  const Tensor<double> w = randn(Shape{4, 2}, 2);
  const Tensor<double> row = randn(Shape{4}, 3);
  const Tensor<double> c = randn(Shape{3, 4}, 4);

  using Fn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"matmul", [&](Tape<double>& t, const Var<double>& v) { return sum(square(matmul(v, t.constant(w)))); }},
      {"sigmoid", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(sigmoid(v), t.constant(c))); }},
      {"tanh", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(tanh(v), t.constant(c))); }},
      {"silu", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(silu(v), t.constant(c))); }},
      {"exp", [&](Tape<double>&, const Var<double>& v) { return mean(exp(scale(v, 0.3))); }},
      {"row broadcast", [&](Tape<double>& t, const Var<double>& v) { return sum(square(sub(v, t.constant(row)))); }},
      {"mse", [&](Tape<double>& t, const Var<double>& v) { return mse(v, t.constant(c)); }},
      {"gather", [&](Tape<double>& t, const Var<double>& v) {
         return sum(mul(gather_rows(v, {2, 0, 2}), t.constant(randn(Shape{3, 4}, 5))));
       }},
      {"concat", [&](Tape<double>& t, const Var<double>& v) {
         return sum(square(concat_cols(std::vector<Var<double>>{v, scale(v, 2.0), t.constant(c)})));
       }},
      {"reshape", [&](Tape<double>& t, const Var<double>& v) {
         return sum(mul(reshape(v, Shape{12}), t.constant(randn(Shape{12}, 6))));
       }},
  };
  for (const auto& [name, fn] : cases) {
    CAPTURE(name);
    CHECK(finite_diff_check(fn, x) < 1e-6);
  }
}

TEST_CASE("detach blocks the gradient path") {
  Tensor<double> a(Shape{2}, std::vector<double>{1.5, -0.5}, true);
  Tape<double> tape;
  auto v = tape.leaf(a);
  tape.backward(sum(mul(detach(v), v)));
  CHECK(a.grad()(0, 0) == doctest::Approx(1.5));
  CHECK(a.grad()(0, 1) == doctest::Approx(-0.5));
}

TEST_CASE("float tensors differentiate too") {
  Tensor<float> a(Shape{2}, std::vector<float>{1.0f, 2.0f}, true);
  Tape<float> tape;
  tape.backward(sum(square(tape.leaf(a))));
  CHECK(a.grad()(0, 1) == doctest::Approx(4.0f));
}
