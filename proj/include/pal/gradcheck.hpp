#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pal/grad.hpp"
#include "pal/relrep.hpp"
#include "pal/rng.hpp"

namespace pal {

struct GradCheckReport {
  std::size_t instances = 0;
  double tolerance = 0.0;
  double step = 0.0;
  double max_rel_error = 0.0;
  std::size_t worst_instance = 0;
  std::string worst_detail;
  bool passed = false;
};

namespace detail {

// Relative error as used by the gradient check: |a-b| / max(1, |a|, |b|).
inline double grad_rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline TokenSequence random_sequence(std::mt19937_64& rng, std::size_t tokens,
                                     std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.5, 2.0);
  TokenSequence seq;
  seq.tokens = Matrix(tokens, dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    double norm = 0.0;
    while (norm < 1e-6) {
      for (std::size_t d = 0; d < dim; ++d) seq.tokens(t, d) = gauss(rng);
      norm = l2_norm(seq.tokens.row(t));
    }
    const double target = scale(rng);
    for (std::size_t d = 0; d < dim; ++d) seq.tokens(t, d) *= target / norm;
  }
  return seq;
}

inline AnchorSet random_anchors(std::mt19937_64& rng, std::size_t count, std::size_t dim,
                                ModalityTag tag) {
  AnchorSet set;
  set.modality = tag;
  TokenSequence rows = random_sequence(rng, count, dim);
  set.anchors = std::move(rows.tokens);
  return set;
}

}  // namespace detail

// Compares analytic gradients against central finite differences on random
// small instances. `break_gradient` deliberately corrupts one term of the
// analytic result so the harness can prove it detects a broken Jacobian.
inline GradCheckReport run_gradcheck(std::size_t instances, std::uint64_t seed,
                                     double step = 1e-5, double tolerance = 1e-6,
                                     bool break_gradient = false) {
  if (instances == 0) throw UsageError("gradcheck needs at least one instance");
  GradCheckReport report;
  report.instances = instances;
  report.tolerance = tolerance;
  report.step = step;

  auto rng = make_rng(seed, streams::kGradCheck);
  const double tau_p_choices[] = {0.03, 0.07, 0.2, 1.0};
  const double tau_choices[] = {0.07, 0.5, 1.0};

  for (std::size_t n = 0; n < instances; ++n) {
    std::uniform_int_distribution<std::size_t> batch_dist(2, 4);
    std::uniform_int_distribution<std::size_t> anchor_dist(2, 8);
    std::uniform_int_distribution<std::size_t> token_dist(1, 6);
    std::uniform_int_distribution<std::size_t> dim_dist(2, 10);
    const std::size_t batch = n % 7 == 6 ? 1 : batch_dist(rng);  // exercise B=1 too
    const std::size_t anchors = anchor_dist(rng);
    const std::size_t dim_v = dim_dist(rng);
    const std::size_t dim_l = dim_dist(rng);
    const double tau_p = tau_p_choices[n % 4];
    const double tau = tau_choices[n % 3];

    std::vector<TokenSequence> batch_v, batch_l;
    for (std::size_t i = 0; i < batch; ++i) {
      batch_v.push_back(detail::random_sequence(rng, token_dist(rng), dim_v));
      batch_l.push_back(detail::random_sequence(rng, token_dist(rng), dim_l));
    }
    const AnchorSet anchors_v =
        detail::random_anchors(rng, anchors, dim_v, ModalityTag::vision);
    const AnchorSet anchors_l =
        detail::random_anchors(rng, anchors, dim_l, ModalityTag::language);

    GradientSet analytic =
        backward_batch(batch_v, batch_l, anchors_v, anchors_l, tau_p, tau);
    if (break_gradient) analytic.d_anchors_v(0, 0) += 1e-3;
    const GradientSet numeric = finite_difference_oracle(batch_v, batch_l, anchors_v,
                                                         anchors_l, tau_p, tau, step);

    double worst = 0.0;
    std::size_t worst_k = 0, worst_d = 0;
    bool worst_is_vision = true;
    auto scan = [&](const Matrix& a, const Matrix& b, bool is_vision) {
      for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t d = 0; d < a.cols(); ++d) {
          const double err = detail::grad_rel_error(a(k, d), b(k, d));
          if (err > worst) {
            worst = err;
            worst_k = k;
            worst_d = d;
            worst_is_vision = is_vision;
          }
        }
    };
    scan(analytic.d_anchors_v, numeric.d_anchors_v, true);
    scan(analytic.d_anchors_l, numeric.d_anchors_l, false);

    if (worst > report.max_rel_error) {
      report.max_rel_error = worst;
      report.worst_instance = n;
      std::ostringstream detail;
      detail << "instance " << n << ": B=" << batch << " K=" << anchors
             << " D_v=" << dim_v << " D_l=" << dim_l << " tau_p=" << tau_p
             << " tau=" << tau << ", worst entry "
             << (worst_is_vision ? "d_anchors_v" : "d_anchors_l") << "(" << worst_k << ","
             << worst_d << ") rel_err=" << worst;
      report.worst_detail = detail.str();
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace pal
