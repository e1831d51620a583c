#include <cmath>
#include <vector>

#include "doctest.h"
#include "dal/autodiff.hpp"

using namespace dal;
namespace ad = dal::ad;

namespace {

ad::Var random_param(Shape shape, Rng& rng, double a = 1.0) {
  return ad::parameter(tensor_init(shape, Init::uniform(a), rng));
}

ad::Var vec(std::initializer_list<double> xs) {
  return ad::constant(Tensor(Shape{static_cast<Index>(xs.size())}, std::vector<double>(xs)));
}

}  // namespace

TEST_CASE("matmul by hand") {
  auto a = ad::constant(Tensor(Shape{1, 2}, {1, 2}));
  auto b = ad::constant(Tensor(Shape{2, 1}, {3, 4}));
  CHECK(ad::matmul(a, b)->value.item() == 11.0);

  auto eye = ad::constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  auto m = ad::constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  CHECK(ad::matmul(eye, m)->value == m->value);

  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
}

TEST_CASE("elementwise values and errors") {
  auto z = vec({0.0});
  CHECK(ad::sigmoid(z)->value[0] == 0.5);
  CHECK(ad::tanh(z)->value[0] == 0.0);
  CHECK(ad::relu(vec({-1.0}))->value[0] == 0.0);
  CHECK(ad::exp(z)->value[0] == 1.0);
  CHECK_THROWS_AS(ad::log(vec({0.0})), DomainError);
  CHECK_THROWS_AS(ad::log(vec({-2.0})), DomainError);
  CHECK_THROWS_AS(ad::add(vec({1, 2}), vec({1})), ShapeError);

  // tanh agrees with libm across the range, including saturation.
  for (double x : {-40.0, -3.0, -0.5, 1e-9, 0.25, 2.0, 19.0, 400.0})
    CHECK(ad::tanh(vec({x}))->value[0] == doctest::Approx(std::tanh(x)).epsilon(1e-14));
}

TEST_CASE("sigmoid slope at zero") {
  auto x = ad::parameter(Tensor(Shape{1}, {0.0}));
  ad::backward(ad::sum(ad::sigmoid(x)));
  CHECK(x->grad[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("mean_axis") {
  auto a = ad::parameter(Tensor(Shape{2, 2}, {1, 3, 3, 5}));
  auto m = ad::mean_axis(a);
  CHECK(m->value == Tensor(Shape{2}, {2, 4}));
  ad::backward(ad::sum(m));
  for (Index i = 0; i < 4; ++i) CHECK(a->grad[i] == 0.5);

  auto one = ad::constant(Tensor(Shape{1, 2}, {7, 9}));
  CHECK(ad::mean_axis(one)->value == Tensor(Shape{2}, {7, 9}));
}

TEST_CASE("softmax properties") {
  auto s = ad::softmax(vec({0, 0}));
  CHECK(s->value[0] == 0.5);
  auto t = ad::softmax(vec({3.7, 3.7, 3.7}));
  for (Index i = 0; i < 3; ++i) CHECK(t->value[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    Tensor x = tensor_init(Shape{6}, Init::uniform(5.0), rng);
    Tensor y = x;
    y.flat().array() += 12.5;
    const auto a = ad::softmax(ad::constant(x))->value;
    const auto b = ad::softmax(ad::constant(y))->value;
    CHECK(std::abs(a.flat().sum() - 1.0) <= 1e-9);
    CHECK((a.flat() - b.flat()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("concat") {
  auto c = ad::concat(std::vector<ad::Var>{vec({1}), vec({2, 3})});
  CHECK(c->value == Tensor(Shape{3}, {1, 2, 3}));
  auto x = ad::parameter(Tensor(Shape{2}, {4, 5}));
  CHECK(ad::concat(std::vector<ad::Var>{x})->value == x->value);
  auto y = ad::parameter(Tensor(Shape{1}, {6}));
  ad::backward(ad::sum(ad::concat(std::vector<ad::Var>{x, y})));
  CHECK(x->grad == Tensor(Shape{2}, {1, 1}));
  CHECK(y->grad == Tensor(Shape{1}, {1}));
  CHECK_THROWS_AS(ad::concat(std::vector<ad::Var>{}), ValidationError);
}

TEST_CASE("cross_entropy") {
  CHECK(ad::cross_entropy(vec({0.0, 1.0}), 1)->value.item() == doctest::Approx(0.0).epsilon(1e-11));
  CHECK(ad::cross_entropy(vec({0.5, 0.5}), 1)->value.item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(ad::cross_entropy(vec({0.5, 0.5}), 2), ValidationError);
  CHECK_THROWS_AS(ad::cross_entropy(vec({0.5, 0.5}), -1), ValidationError);

  // d/dz of CE(softmax(z)) = softmax(z) - onehot
  auto z = ad::parameter(Tensor(Shape{2}, {0.3, -1.2}));
  ad::backward(ad::cross_entropy(ad::softmax(z), 0));
  const auto p = ad::softmax(ad::constant(z->value))->value;
  CHECK(z->grad[0] == doctest::Approx(p[0] - 1.0).epsilon(1e-12));
  CHECK(z->grad[1] == doctest::Approx(p[1]).epsilon(1e-12));
}

TEST_CASE("mixture_nll agrees with cross entropy of mean probabilities") {
  Rng rng(9);
  for (int k = 0; k < 20; ++k) {
    const Tensor z = tensor_init(Shape{4, 2}, Init::uniform(3.0), rng);
    const int label = k % 2;
    const double got = ad::mixture_nll(ad::constant(z), label)->value.item();
    const auto probs = ad::mean_axis(ad::row_softmax(ad::constant(z)));
    CHECK(got == doctest::Approx(ad::cross_entropy(probs, label)->value.item()).epsilon(1e-12));

    const Tensor r = tensor_init(Shape{2}, Init::uniform(3.0), rng);
    const double one = ad::mixture_nll(ad::constant(r), label)->value.item();
    CHECK(one == doctest::Approx(ad::cross_entropy(ad::softmax(ad::constant(r)), label)->value.item()).epsilon(1e-12));
  }
  // Stays finite and informative where a clamped probability would not.
  auto far = ad::parameter(Tensor(Shape{2}, {0.0, 60.0}));
  const auto l = ad::mixture_nll(far, 0);
  CHECK(l->value.item() == doctest::Approx(60.0).epsilon(1e-12));
  ad::backward(l);
  CHECK(far->grad[0] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("backward basics") {
  auto x = ad::parameter(Tensor(Shape{1}, {3.0}));
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK(x->grad[0] == 6.0);
  // Accumulates until zeroed.
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK(x->grad[0] == 12.0);
  ad::zero_grad(x);
  CHECK(x->grad[0] == 0.0);

  auto frozen = ad::parameter(Tensor(Shape{1}, {2.0}), false);
  ad::backward(ad::sum(ad::mul(x, frozen)));
  CHECK(frozen->grad[0] == 0.0);
  CHECK(x->grad[0] == 2.0);

  CHECK_THROWS_AS(ad::backward(ad::parameter(Tensor(Shape{2}, {1, 2}))), ValidationError);
  CHECK_THROWS_AS(ad::set_requires_grad(ad::sum(x), true), ValidationError);
}

TEST_CASE("shared subexpressions accumulate once per path") {
  auto x = ad::parameter(Tensor(Shape{2}, {1.0, 2.0}));
  auto y = ad::tanh(x);
  ad::backward(ad::sum(ad::add(y, y)));
  for (Index i = 0; i < 2; ++i) {
    const double t = std::tanh(x->value[i]);
    CHECK(x->grad[i] == doctest::Approx(2.0 * (1.0 - t * t)).epsilon(1e-13));
  }
}

TEST_CASE("grad_check on closed forms") {
  auto x = ad::parameter(Tensor(Shape{1}, {3.0}));
  std::vector<ad::Var> ps{x};
  CHECK(ad::grad_check([&] { return ad::sum(ad::scale(x, 4.0)); }, ps) <= 1e-9);
  CHECK(ad::grad_check([&] { return ad::sum(ad::mul(x, x)); }, ps) <= 1e-8);
  CHECK_THROWS_AS(ad::grad_check([&] { return ad::sum(x); }, ps, 0.5), ValidationError);
  CHECK_THROWS_AS(ad::grad_check([&] { return ad::sum(ad::scale(x, NAN)); }, ps), EvaluationError);
}

TEST_CASE("grad_check: every differentiable op on random inputs") {
  Rng rng(2024);
  const std::vector<Index> offsets{0, 2, 5, 6};
  const std::vector<Index> rows{3, 0, 3, 1};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_param({3, 4}, rng);
    auto b = random_param({4, 2}, rng);
    auto c = random_param({3, 4}, rng);
    auto r = random_param({4}, rng);
    auto v = random_param({6}, rng);
    auto m6 = random_param({6, 3}, rng);
    auto pos = ad::parameter(tensor_init({3, 4}, Init::uniform(0.5), rng));
    pos->value.flat().array() += 1.0;
    const int label = trial % 2;
    std::vector<ad::Var> ps{a, b, c, r, v, m6, pos};

    auto f = [&] {
      std::vector<ad::Var> terms;
      terms.push_back(ad::sum(ad::matmul(a, b)));
      terms.push_back(ad::sum(ad::mul(ad::sub(a, c), ad::add(a, c))));
      terms.push_back(ad::sum(ad::sigmoid(ad::add_row(a, r))));
      terms.push_back(ad::sum(ad::mul(ad::tanh(c), c)));
      terms.push_back(ad::sum(ad::mul(ad::relu(ad::scale(a, 2.0)), c)));
      terms.push_back(ad::sum(ad::log(pos)));
      terms.push_back(ad::sum(ad::exp(ad::scale(c, 0.3))));
      terms.push_back(ad::sum(ad::mul(ad::mean_axis(a), r)));
      terms.push_back(ad::sum(ad::mul(ad::softmax(v), v)));
      terms.push_back(ad::sum(ad::mul(ad::row_softmax(a), c)));
      terms.push_back(ad::cross_entropy(ad::softmax(ad::reshape(ad::matmul(ad::reshape(r, {1, 4}), b), {2})), label));
      terms.push_back(ad::mixture_nll(ad::matmul(a, b), label));
      std::vector<ad::Var> parts{r, ad::neg(v)};
      terms.push_back(ad::sum(ad::mul(ad::concat(parts), ad::concat(parts))));
      std::vector<ad::Var> rws{r, ad::tanh(r)};
      terms.push_back(ad::sum(ad::mul(ad::stack_rows(rws), ad::stack_rows(rws))));
      terms.push_back(ad::sum(ad::tanh(ad::gather_rows(ad::matmul(ad::reshape(r, {4, 1}), ad::reshape(r, {1, 4})), rows))));
      auto w = ad::segment_softmax(v, offsets);
      terms.push_back(ad::sum(ad::mul(w, v)));
      terms.push_back(ad::sum(ad::tanh(ad::segment_weighted_sum(w, m6, offsets))));
      terms.push_back(ad::sum(ad::mul(ad::segment_mean(m6, offsets), ad::segment_mean(m6, offsets))));
      return ad::sum_n(terms);
    };
    worst = std::max(worst, ad::grad_check(f, ps));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("grad_check on a random three-layer MLP") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = ad::constant(tensor_init({5, 4}, Init::uniform(1.0), rng));
    auto w1 = ad::parameter(tensor_init({4, 8}, Init::xavier(), rng));
    auto b1 = ad::parameter(tensor_init({8}, Init::uniform(0.1), rng));
    auto w2 = ad::parameter(tensor_init({8, 8}, Init::xavier(), rng));
    auto w3 = ad::parameter(tensor_init({8, 2}, Init::xavier(), rng));
    std::vector<ad::Var> ps{w1, b1, w2, w3};
    auto f = [&] {
      auto h = ad::tanh(ad::add_row(ad::matmul(x, w1), b1));
      h = ad::sigmoid(ad::matmul(h, w2));
      return ad::mixture_nll(ad::matmul(h, w3), trial % 2);
    };
    CHECK(ad::grad_check(f, ps) <= 1e-4);
  }
}

TEST_CASE("segment ops validate offsets") {
  auto v = ad::constant(Tensor(Shape{4}, {1, 2, 3, 4}));
  std::vector<Index> bad_end{0, 2, 3};
  std::vector<Index> empty_seg{0, 2, 2, 4};
  CHECK_THROWS_AS(ad::segment_softmax(v, bad_end), ShapeError);
  CHECK_THROWS_AS(ad::segment_softmax(v, empty_seg), ShapeError);

  std::vector<Index> ok{0, 1, 4};
  const auto w = ad::segment_softmax(v, ok)->value;
  CHECK(w[0] == 1.0);
  CHECK(w[1] + w[2] + w[3] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gather_rows bounds") {
  auto t = ad::constant(Tensor(Shape{3, 2}, {1, 2, 3, 4, 5, 6}));
  std::vector<Index> rows{2, 0};
  CHECK(ad::gather_rows(t, rows)->value == Tensor(Shape{2, 2}, {5, 6, 1, 2}));
  std::vector<Index> oob{3};
  CHECK_THROWS_AS(ad::gather_rows(t, oob), ValidationError);
}

TEST_CASE("determinism of identical op sequences") {
  auto run = [] {
    Rng rng(5);
    auto a = ad::parameter(tensor_init({4, 4}, Init::xavier(), rng));
    auto l = ad::sum(ad::tanh(ad::matmul(a, a)));
    ad::backward(l);
    return a->grad;
  };
  CHECK(run() == run());
}
