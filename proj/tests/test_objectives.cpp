#include <doctest.h>

#include <cmath>
#include <random>

#include "dar/error.hpp"
#include "dar/objectives.hpp"
#include "gradcheck.hpp"

using namespace dar;
using M = BatchMatrix<double>;

namespace {

M row(std::initializer_list<double> v) {
  M m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

M uniform(int n, int q) { return M::Constant(n, q, 1.0 / q); }

M random_logits(std::mt19937_64& rng, int n, int q) {
  std::normal_distribution<double> nd(0.0, 1.5);
  M z(n, q);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
  return z;
}

M random_onehots(std::mt19937_64& rng, int n, int q) {
  M y = M::Zero(n, q);
  for (int i = 0; i < n; ++i) y(i, std::uniform_int_distribution<int>(0, q - 1)(rng)) = 1.0;
  return y;
}

M random_candidates(std::mt19937_64& rng, int n, int q) {
  M y = M::Zero(n, q);
  for (int i = 0; i < n; ++i) {
    const int a = std::uniform_int_distribution<int>(0, q - 2)(rng);
    y(i, a) = 1.0;
    y(i, a + 1) = 1.0;
  }
  return y;
}

M from_vec(const std::vector<double>& v, int n, int q) {
  M m(n, q);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

std::vector<double> to_vec(const M& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace

TEST_CASE("prediction losses: closed forms") {
  const M y = row({0, 0, 1, 0, 0});
  CHECK(loss_prd(uniform(1, 5), y) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(loss_prd(y, y) == 0.0);
  CHECK(loss_prd(row({0.1, 0.1, 0.7, 0.05, 0.05}), y) == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
  CHECK(loss_lr(uniform(1, 5), y) == doctest::Approx(1.6094379124341003).epsilon(1e-12));
  CHECK(loss_lr(row({0.2, 0.2, 0.2, 0.2, 0.2}), y) == doctest::Approx(1.60944).epsilon(1e-5));
  CHECK(loss_lr(row({0.0, 0.0, 1.0, 0.0, 0.0}), y) <= -std::log(1.0 - 1e-7));
  // The clamp keeps a zero probability finite.
  CHECK(loss_prd(row({1, 0, 0, 0, 0}), y) == doctest::Approx(-std::log(1e-7)));
}

TEST_CASE("counterfactual loss: closed forms") {
  const M cand = row({0, 1, 1, 0, 0});
  CHECK(loss_cf(M(M::Constant(1, 5, 0.5)), cand) == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(loss_cf(M(M::Constant(1, 5, 0.3)), M(M::Ones(1, 5))) == 0.0);
  CHECK(loss_cf(row({1, 0.2, 0.9, 1, 1}), cand) == 0.0);
}

TEST_CASE("loss shape errors") {
  CHECK_THROWS_AS(loss_prd(uniform(2, 5), uniform(3, 5)), DataError);
  CHECK_THROWS_AS(loss_cf(uniform(1, 4), uniform(1, 5)), DataError);
  CHECK_THROWS_AS(loss_prd(M(0, 5), M(0, 5)), DataError);
}

TEST_CASE("combined loss weighting") {
  std::mt19937_64 rng(2);
  const M y = random_onehots(rng, 6, 5);
  const M p = softmax_rows(random_logits(rng, 6, 5));
  const M s = sigmoid_all(random_logits(rng, 6, 5));
  const M l = softmax_rows(random_logits(rng, 6, 5));
  const double a = loss_prd(p, y), b = loss_cf(s, y), c = loss_lr(l, y);
  CHECK(loss_dar(p, s, l, y, LossConfig{0.0, 0.0, 1e-7}).total == a);
  CHECK(loss_dar(p, s, l, y, LossConfig{0.5, 0.5, 1e-7}).total == doctest::Approx(a + 0.5 * b + 0.5 * c).epsilon(1e-14));
  M wrong = M::Zero(6, 5);
  for (int i = 0; i < 6; ++i) {
    for (int k = 0; k < 5; ++k) wrong(i, k) = 1.0 - y(i, k);
  }
  CHECK(loss_dar(y, wrong, y, y, LossConfig{}).total == doctest::Approx(0.0));
  CHECK_THROWS_AS(LossConfig({-0.1, 0.5, 1e-7}).validate(), ConfigError);
}

TEST_CASE("poly schedule") {
  const ScheduleConfig c{1e-4, 100, 0.9};
  CHECK(poly_lr(0, c) == 1e-4);
  CHECK(poly_lr(100, c) == 0.0);
  CHECK(poly_lr(50, ScheduleConfig{1e-4, 100, 1.0}) == doctest::Approx(5e-5));
  CHECK(poly_lr(30, c) == doctest::Approx(1e-4 * std::pow(0.7, 0.9)));
  CHECK_THROWS_AS(poly_lr(101, c), DataError);
  CHECK_THROWS_AS(poly_lr(-1, c), DataError);
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(17);
  const int n = 4, q = 5;
  const double eps = 1e-7;
  for (int trial = 0; trial < 10; ++trial) {
    const M z = random_logits(rng, n, q);
    const M oh = random_onehots(rng, n, q);
    const M cand = random_candidates(rng, n, q);

    auto check_at = [&](const M& at, const M& analytic, const std::function<double(const std::vector<double>&)>& f) {
      const auto point = to_vec(at);
      for (std::size_t i = 0; i < point.size(); ++i) {
        INFO("trial " << trial << " entry " << i);
        REQUIRE(test::rel_error(analytic.data()[i], test::central_diff(f, point, i, 1e-3)) <= 1e-4);
      }
    };
    auto check = [&](const M& analytic, const std::function<double(const std::vector<double>&)>& f) {
      check_at(z, analytic, f);
    };
    check(cross_entropy_grad_logits(softmax_rows(z), oh, eps),
          [&](const std::vector<double>& v) { return loss_prd(softmax_rows(from_vec(v, n, q)), oh, eps); });
    check(cross_entropy_grad_logits(softmax_rows(z), oh, eps),
          [&](const std::vector<double>& v) { return loss_lr(softmax_rows(from_vec(v, n, q)), oh, eps); });
    check(loss_cf_grad_logits(sigmoid_all(z), cand, eps),
          [&](const std::vector<double>& v) { return loss_cf(sigmoid_all(from_vec(v, n, q)), cand, eps); });

    const LossConfig cfg{0.5, 0.5, eps};
    const M zc = random_logits(rng, n, q), zl = random_logits(rng, n, q);
    const auto g = loss_dar_grad_logits(softmax_rows(z), sigmoid_all(zc), softmax_rows(zl), oh, cfg);
    check(g.prd, [&](const std::vector<double>& v) {
      return loss_dar(softmax_rows(from_vec(v, n, q)), sigmoid_all(zc), softmax_rows(zl), oh, cfg).total;
    });
    check_at(zc, g.cf, [&](const std::vector<double>& v) {
      return loss_dar(softmax_rows(z), sigmoid_all(from_vec(v, n, q)), softmax_rows(zl), oh, cfg).total;
    });
    check_at(zl, g.lr, [&](const std::vector<double>& v) {
      return loss_dar(softmax_rows(z), sigmoid_all(zc), softmax_rows(from_vec(v, n, q)), oh, cfg).total;
    });
  }
}

TEST_CASE("label matrices check the label kind") {
  const std::vector<LabelVector> labels{LabelVector::onehot(1, 3), LabelVector::onehot(3, 3)};
  const M m = label_matrix(labels, LabelKind::onehot);
  CHECK(m.rows() == 2);
  CHECK(m(1, 2) == 1.0);
  CHECK_THROWS_AS(label_matrix(labels, LabelKind::candidate), DataError);
}
