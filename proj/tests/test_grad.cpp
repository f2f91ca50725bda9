#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pal/grad.hpp"
#include "pal/gradcheck.hpp"
#include "test_helpers.hpp"

using namespace pal;

namespace {

struct Instance {
  std::vector<TokenSequence> batch_v, batch_l;
  AnchorSet anchors_v, anchors_l;
};

Instance random_instance(std::mt19937_64& rng, std::size_t batch, std::size_t anchors,
                         std::size_t dim_v, std::size_t dim_l, std::size_t max_tokens = 4) {
  std::uniform_int_distribution<std::size_t> tok(1, max_tokens);
  Instance inst;
  for (std::size_t i = 0; i < batch; ++i) {
    inst.batch_v.push_back(pal_test::random_sequence(rng, tok(rng), dim_v));
    inst.batch_l.push_back(pal_test::random_sequence(rng, tok(rng), dim_l));
  }
  inst.anchors_v = pal_test::random_anchors(rng, anchors, dim_v, ModalityTag::vision);
  inst.anchors_l = pal_test::random_anchors(rng, anchors, dim_l, ModalityTag::language);
  return inst;
}

double max_rel_error(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double err = std::abs(a.data()[i] - b.data()[i]) /
                       std::max({1.0, std::abs(a.data()[i]), std::abs(b.data()[i])});
    worst = std::max(worst, err);
  }
  return worst;
}

double max_abs(const Matrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) worst = std::max(worst, std::abs(m.data()[i]));
  return worst;
}

}  // namespace

TEST_CASE("single-pair batch has zero loss and zero gradients") {
  std::mt19937_64 rng(1);
  const Instance inst = random_instance(rng, 1, 4, 6, 5);
  const GradientSet grads = backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                           inst.anchors_l, 0.03, 0.07);
  CHECK(grads.loss_value == 0.0);
  CHECK(max_abs(grads.d_anchors_v) == 0.0);
  CHECK(max_abs(grads.d_anchors_l) == 0.0);

  const GradientSet oracle = finite_difference_oracle(inst.batch_v, inst.batch_l,
                                                      inst.anchors_v, inst.anchors_l, 0.03,
                                                      0.07, 1e-5);
  CHECK(max_abs(oracle.d_anchors_v) < 1e-9);
  CHECK(max_abs(oracle.d_anchors_l) < 1e-9);
}

TEST_CASE("orthonormal-match batch at unit temperature hits the closed form") {
  // Two pairs whose representations satisfy h_v,i . h_l,j = delta_ij.
  Matrix h_v(2, 3), h_l(2, 3);
  h_v(0, 0) = 1.0;
  h_v(1, 1) = 1.0;
  h_l(0, 0) = 1.0;
  h_l(1, 1) = 1.0;
  const double loss = contrastive_loss(h_v, h_l, 1.0);
  CHECK(loss == Catch::Approx(std::log1p(std::exp(-1.0))).margin(1e-9));
}

TEST_CASE("loss is exactly symmetric under swapping the modalities") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    const Instance inst = random_instance(rng, 3, 5, 7, 6);
    const double forward_order =
        batch_loss(inst.batch_v, inst.batch_l, inst.anchors_v, inst.anchors_l, 0.05, 0.07);
    const double swapped =
        batch_loss(inst.batch_l, inst.batch_v, inst.anchors_l, inst.anchors_v, 0.05, 0.07);
    CHECK(forward_order == swapped);  // bit-exact
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  std::mt19937_64 rng(42);
  double worst = 0.0;
  for (int rep = 0; rep < 12; ++rep) {
    const Instance inst = random_instance(rng, 3, 5, 7, 6);
    const double tau_p = rep % 2 == 0 ? 0.03 : 0.2;
    const GradientSet analytic = backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                                inst.anchors_l, tau_p, 0.07);
    const GradientSet numeric = finite_difference_oracle(
        inst.batch_v, inst.batch_l, inst.anchors_v, inst.anchors_l, tau_p, 0.07, 1e-5);
    CHECK(analytic.loss_value == numeric.loss_value);
    worst = std::max(worst, max_rel_error(analytic.d_anchors_v, numeric.d_anchors_v));
    worst = std::max(worst, max_rel_error(analytic.d_anchors_l, numeric.d_anchors_l));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("mean-pool and global variants also pass the oracle") {
  std::mt19937_64 rng(43);
  for (PoolingVariant variant : {PoolingVariant::mean_pool, PoolingVariant::global_only}) {
    const Instance inst = random_instance(rng, 3, 4, 6, 5);
    const GradientSet analytic = backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                                inst.anchors_l, 0.05, 0.07, variant);
    const GradientSet numeric =
        finite_difference_oracle(inst.batch_v, inst.batch_l, inst.anchors_v, inst.anchors_l,
                                 0.05, 0.07, 1e-5, variant);
    CHECK(max_rel_error(analytic.d_anchors_v, numeric.d_anchors_v) < 1e-6);
    CHECK(max_rel_error(analytic.d_anchors_l, numeric.d_anchors_l) < 1e-6);
  }
}

TEST_CASE("halving the step shrinks the discrepancy roughly fourfold") {
  std::mt19937_64 rng(44);
  // Find an instance with a measurable truncation error at the larger step.
  for (int attempt = 0; attempt < 5; ++attempt) {
    const Instance inst = random_instance(rng, 3, 4, 6, 5);
    const GradientSet analytic = backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                                inst.anchors_l, 0.03, 0.07);
    auto discrepancy = [&](double step) {
      const GradientSet numeric = finite_difference_oracle(
          inst.batch_v, inst.batch_l, inst.anchors_v, inst.anchors_l, 0.03, 0.07, step);
      return std::max(max_rel_error(analytic.d_anchors_v, numeric.d_anchors_v),
                      max_rel_error(analytic.d_anchors_l, numeric.d_anchors_l));
    };
    const double coarse = discrepancy(1e-4);
    if (coarse < 1e-11) continue;  // too smooth to resolve the ratio
    const double fine = discrepancy(5e-5);
    CHECK(coarse / fine == Catch::Approx(4.0).epsilon(0.75));
    return;
  }
  FAIL("no instance with resolvable truncation error");
}

TEST_CASE("gradient at each anchor is orthogonal to the anchor") {
  std::mt19937_64 rng(45);
  for (int rep = 0; rep < 8; ++rep) {
    const Instance inst = random_instance(rng, 3, 5, 7, 6);
    const GradientSet grads = backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                             inst.anchors_l, 0.03, 0.07);
    auto check_tangency = [](const Matrix& d_anchors, const AnchorSet& anchors) {
      for (std::size_t k = 0; k < anchors.count(); ++k) {
        const double along = dot(d_anchors.row(k), anchors.anchors.row(k));
        const double scale = l2_norm(d_anchors.row(k)) * l2_norm(anchors.anchors.row(k));
        if (scale > 0.0) CHECK(std::abs(along) / scale < 1e-8);
      }
    };
    check_tangency(grads.d_anchors_v, inst.anchors_v);
    check_tangency(grads.d_anchors_l, inst.anchors_l);
  }
}

TEST_CASE("backward rejects malformed batches") {
  std::mt19937_64 rng(46);
  Instance inst = random_instance(rng, 2, 3, 5, 4);
  SECTION("length mismatch") {
    inst.batch_l.pop_back();
    CHECK_THROWS_AS(backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                   inst.anchors_l, 0.03, 0.07),
                    UsageError);
  }
  SECTION("bad temperatures") {
    CHECK_THROWS_AS(backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                   inst.anchors_l, 0.0, 0.07),
                    UsageError);
    CHECK_THROWS_AS(backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                   inst.anchors_l, 0.03, -1.0),
                    UsageError);
  }
  SECTION("non-finite input surfaces as a numeric error with a stage") {
    inst.batch_v[0].tokens(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_MATCHES(backward_batch(inst.batch_v, inst.batch_l, inst.anchors_v,
                                        inst.anchors_l, 0.03, 0.07),
                         NumericError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("stage")));
  }
}

TEST_CASE("gradcheck harness passes and detects an injected fault") {
  const GradCheckReport good = run_gradcheck(20, 7);
  CHECK(good.passed);
  CHECK(good.max_rel_error < 1e-6);

  const GradCheckReport broken = run_gradcheck(20, 7, 1e-5, 1e-6, true);
  CHECK_FALSE(broken.passed);
  CHECK(broken.worst_detail.find("d_anchors_v") != std::string::npos);

  CHECK_THROWS_AS(run_gradcheck(0, 7), UsageError);
}
