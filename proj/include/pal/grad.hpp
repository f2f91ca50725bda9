#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pal/error.hpp"
#include "pal/matrix.hpp"
#include "pal/parallel.hpp"
#include "pal/relrep.hpp"

namespace pal {

// Loss and analytic gradients of the symmetric contrastive objective with
// respect to both anchor matrices. The chain is fixed and short, so the
// Jacobians are hand-derived per stage instead of going through a tape:
//
//   loss -> h   softmax cross-entropy over in-batch similarity logits
//   h -> p      (g - (h.g) h) / |p|
//   p -> R      fused product rule through the attention softmax:
//               dp_k/dR[t,k] = alpha[t,k] * (1 + (R[t,k] - p_k)/tau_p)
//   R -> A      d cos(z,a)/da = z/(|z||a|) - cos(z,a) * a/|a|^2
//
// Tokens are frozen inputs; nothing propagates into them.

struct GradientSet {
  Matrix d_anchors_v;  // K x D_v
  Matrix d_anchors_l;  // K x D_l
  double loss_value = 0.0;
};

namespace detail {

inline double logsumexp(std::span<const double> logits) {
  double max = -std::numeric_limits<double>::infinity();
  for (double v : logits) max = std::max(max, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - max);
  return max + std::log(sum);
}

struct LossGrad {
  double loss = 0.0;
  Matrix d_h_v;  // B x K
  Matrix d_h_l;  // B x K
};

// Similarity logits S[i][j] = h_v,i . h_l,j / tau. Row softmax covers the
// v->l direction, column softmax the l->v direction.
inline Matrix similarity_logits(const Matrix& h_v, const Matrix& h_l, double tau) {
  const std::size_t batch = h_v.rows();
  Matrix logits(batch, batch);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < batch; ++j)
      logits(i, j) = dot(h_v.row(i), h_l.row(j)) / tau;
  return logits;
}

inline double loss_from_logits(const Matrix& logits) {
  const std::size_t batch = logits.rows();
  std::vector<double> row(batch), col(batch);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      row[j] = logits(i, j);
      col[j] = logits(j, i);
    }
    const double ce_v = logsumexp(row) - logits(i, i);
    const double ce_l = logsumexp(col) - logits(i, i);
    total += ce_v + ce_l;
  }
  return total / (2.0 * static_cast<double>(batch));
}

inline LossGrad loss_and_grad_h(const Matrix& h_v, const Matrix& h_l, double tau) {
  const std::size_t batch = h_v.rows();
  const std::size_t width = h_v.cols();
  const Matrix logits = similarity_logits(h_v, h_l, tau);

  std::vector<double> row_lse(batch), col_lse(batch), buf(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) buf[j] = logits(i, j);
    row_lse[i] = logsumexp(buf);
  }
  for (std::size_t j = 0; j < batch; ++j) {
    for (std::size_t i = 0; i < batch; ++i) buf[i] = logits(i, j);
    col_lse[j] = logsumexp(buf);
  }

  LossGrad out;
  out.loss = loss_from_logits(logits);

  // d loss / d logits, merging both directions.
  const double scale = 1.0 / (2.0 * static_cast<double>(batch));
  Matrix d_logits(batch, batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      const double p_row = std::exp(logits(i, j) - row_lse[i]);
      const double p_col = std::exp(logits(i, j) - col_lse[j]);
      const double target = i == j ? 2.0 : 0.0;
      d_logits(i, j) = scale * (p_row + p_col - target);
    }
  }

  out.d_h_v = Matrix(batch, width);
  out.d_h_l = Matrix(batch, width);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < batch; ++j) {
      const double g = d_logits(i, j) / tau;
      for (std::size_t k = 0; k < width; ++k) {
        out.d_h_v(i, k) += g * h_l(j, k);
        out.d_h_l(j, k) += g * h_v(i, k);
      }
    }
  return out;
}

inline void check_finite(const Matrix& m, const std::string& stage) {
  if (!m.all_finite())
    throw NumericError("non-finite intermediate (stage: " + stage + ")");
}

inline void check_finite(std::span<const double> v, const std::string& stage) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError("non-finite intermediate (stage: " + stage + ")");
}

// Accumulates one sample's contribution to its modality's anchor gradient.
// d_rel is dL/dR for the (possibly collapsed) sequence actually fed forward.
inline void accumulate_anchor_grad(const TokenSequence& seq, const AnchorSet& anchors,
                                   const RelRepMatrix& rel, const Matrix& d_rel,
                                   Matrix& d_anchors) {
  const std::size_t count = seq.token_count();
  const std::size_t dim = seq.dim();
  std::vector<double> tok_norms(count);
  for (std::size_t t = 0; t < count; ++t)
    tok_norms[t] = std::max(l2_norm(seq.tokens.row(t)), kNormFloor);

  std::vector<double> weighted_tokens(dim);
  for (std::size_t k = 0; k < anchors.count(); ++k) {
    const double anchor_norm = std::max(l2_norm(anchors.anchors.row(k)), kNormFloor);
    double sim_term = 0.0;
    weighted_tokens.assign(dim, 0.0);
    for (std::size_t t = 0; t < count; ++t) {
      const double g = d_rel(t, k);
      if (g == 0.0) continue;
      sim_term += g * rel.similarity(t, k);
      const double inv = g / tok_norms[t];
      for (std::size_t d = 0; d < dim; ++d)
        weighted_tokens[d] += inv * seq.tokens(t, d);
    }
    const double inv_norm = 1.0 / anchor_norm;
    const double inv_norm2 = sim_term / (anchor_norm * anchor_norm);
    for (std::size_t d = 0; d < dim; ++d)
      d_anchors(k, d) += weighted_tokens[d] * inv_norm - inv_norm2 * anchors.anchors(k, d);
  }
}

// dL/dR from dL/dp through the pooling stage.
inline Matrix rel_grad_from_pooled(const RelRepMatrix& rel, const PooledRep& rep,
                                   std::span<const double> d_pooled,
                                   PoolingVariant variant) {
  const std::size_t count = rel.similarity.rows();
  const std::size_t width = rel.similarity.cols();
  Matrix d_rel(count, width);
  for (std::size_t k = 0; k < width; ++k) {
    for (std::size_t t = 0; t < count; ++t) {
      if (!rel.mask.empty() && !rel.mask[t]) continue;
      const double alpha = rel.attention(t, k);
      if (variant == PoolingVariant::mean_pool) {
        d_rel(t, k) = d_pooled[k] * alpha;
      } else {
        d_rel(t, k) =
            d_pooled[k] * alpha *
            (1.0 + (rel.similarity(t, k) - rep.pooled[k]) / rel.tau_p);
      }
    }
  }
  return d_rel;
}

}  // namespace detail

// Symmetric contrastive loss over row-aligned batches of unit vectors.
inline double contrastive_loss(const Matrix& h_v, const Matrix& h_l, double tau) {
  if (h_v.rows() != h_l.rows() || h_v.cols() != h_l.cols())
    throw UsageError("contrastive_loss: representation shapes disagree");
  if (h_v.rows() == 0) throw UsageError("contrastive_loss: empty batch");
  if (!(tau > 0.0)) throw UsageError("contrastive temperature must be positive");
  return detail::loss_from_logits(detail::similarity_logits(h_v, h_l, tau));
}

namespace detail {

struct SampleForward {
  ForwardResult fwd;
  TokenSequence collapsed;      // set for the global_only variant
  bool use_collapsed = false;

  // The sequence the chain actually differentiated through.
  const TokenSequence& input(const TokenSequence& original) const {
    return use_collapsed ? collapsed : original;
  }
};

inline SampleForward forward_for_grad(const TokenSequence& seq, const AnchorSet& anchors,
                                      double tau_p, PoolingVariant variant) {
  SampleForward sf;
  if (variant == PoolingVariant::global_only) {
    sf.collapsed = collapse_to_mean(seq);
    sf.use_collapsed = true;
  }
  const TokenSequence& input = sf.input(seq);
  sf.fwd.rel = relative_representation(input, anchors);
  if (variant == PoolingVariant::mean_pool)
    rel_fill_uniform(sf.fwd.rel, tau_p);
  else
    cap_attention(sf.fwd.rel, tau_p);
  sf.fwd.rep = cap_aggregate(sf.fwd.rel);
  normalize(sf.fwd.rep);
  check_finite(sf.fwd.rep.normalized, "pooling");
  return sf;
}

}  // namespace detail

inline GradientSet backward_batch(std::span<const TokenSequence> batch_v,
                                  std::span<const TokenSequence> batch_l,
                                  const AnchorSet& anchors_v, const AnchorSet& anchors_l,
                                  double tau_p, double tau,
                                  PoolingVariant variant = PoolingVariant::cap) {
  if (batch_v.size() != batch_l.size())
    throw UsageError("backward_batch: modality batches differ in length");
  if (batch_v.empty()) throw UsageError("backward_batch: empty batch");
  if (!(tau_p > 0.0)) throw UsageError("pooling temperature must be positive");
  if (!(tau > 0.0)) throw UsageError("contrastive temperature must be positive");
  const std::size_t batch = batch_v.size();
  const std::size_t width = anchors_v.count();
  if (anchors_l.count() != width)
    throw UsageError("anchor sets disagree on anchor count");

  // Forward passes for both modalities, batch items in parallel.
  std::vector<detail::SampleForward> fwd_v(batch), fwd_l(batch);
  parallel_for(2 * batch, [&](std::size_t slot) {
    const std::size_t i = slot / 2;
    if (slot % 2 == 0)
      fwd_v[i] = detail::forward_for_grad(batch_v[i], anchors_v, tau_p, variant);
    else
      fwd_l[i] = detail::forward_for_grad(batch_l[i], anchors_l, tau_p, variant);
  });

  Matrix h_v(batch, width), h_l(batch, width);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t k = 0; k < width; ++k) {
      h_v(i, k) = fwd_v[i].fwd.rep.normalized[k];
      h_l(i, k) = fwd_l[i].fwd.rep.normalized[k];
    }

  const detail::LossGrad lg = detail::loss_and_grad_h(h_v, h_l, tau);
  if (!std::isfinite(lg.loss))
    throw NumericError("non-finite intermediate (stage: loss)");
  detail::check_finite(lg.d_h_v, "loss gradient");
  detail::check_finite(lg.d_h_l, "loss gradient");

  // Per-sample chains, fixed-size chunks so results never depend on the
  // thread count; chunk buffers are merged in index order.
  constexpr std::size_t kChunk = 8;
  const std::size_t chunks = (batch + kChunk - 1) / kChunk;
  std::vector<Matrix> chunk_v(chunks), chunk_l(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    Matrix acc_v(width, anchors_v.dim());
    Matrix acc_l(width, anchors_l.dim());
    std::vector<double> d_pooled(width);
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(batch, begin + kChunk);
    for (std::size_t i = begin; i < end; ++i) {
      for (int m = 0; m < 2; ++m) {
        const detail::SampleForward& sf = m == 0 ? fwd_v[i] : fwd_l[i];
        const TokenSequence& original = m == 0 ? batch_v[i] : batch_l[i];
        const AnchorSet& anchors = m == 0 ? anchors_v : anchors_l;
        const Matrix& d_h = m == 0 ? lg.d_h_v : lg.d_h_l;
        Matrix& acc = m == 0 ? acc_v : acc_l;

        const PooledRep& rep = sf.fwd.rep;
        // h -> p through the normalization Jacobian (I - h h^T)/|p|.
        const double h_dot_g = dot({rep.normalized.data(), width}, d_h.row(i));
        for (std::size_t k = 0; k < width; ++k)
          d_pooled[k] = (d_h(i, k) - h_dot_g * rep.normalized[k]) / rep.norm;

        const Matrix d_rel =
            detail::rel_grad_from_pooled(sf.fwd.rel, rep, d_pooled, variant);
        detail::accumulate_anchor_grad(sf.input(original), anchors, sf.fwd.rel, d_rel, acc);
      }
    }
    chunk_v[c] = std::move(acc_v);
    chunk_l[c] = std::move(acc_l);
  });

  GradientSet grads;
  grads.loss_value = lg.loss;
  grads.d_anchors_v = Matrix(width, anchors_v.dim());
  grads.d_anchors_l = Matrix(width, anchors_l.dim());
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t i = 0; i < grads.d_anchors_v.size(); ++i)
      grads.d_anchors_v.data()[i] += chunk_v[c].data()[i];
    for (std::size_t i = 0; i < grads.d_anchors_l.size(); ++i)
      grads.d_anchors_l.data()[i] += chunk_l[c].data()[i];
  }
  detail::check_finite(grads.d_anchors_v, "gradient");
  detail::check_finite(grads.d_anchors_l, "gradient");
  return grads;
}

// Full-batch loss for a given pair of anchor sets; shared by the oracle.
inline double batch_loss(std::span<const TokenSequence> batch_v,
                         std::span<const TokenSequence> batch_l,
                         const AnchorSet& anchors_v, const AnchorSet& anchors_l,
                         double tau_p, double tau,
                         PoolingVariant variant = PoolingVariant::cap) {
  const std::size_t batch = batch_v.size();
  const std::size_t width = anchors_v.count();
  Matrix h_v(batch, width), h_l(batch, width);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto fv = detail::forward_for_grad(batch_v[i], anchors_v, tau_p, variant);
    const auto fl = detail::forward_for_grad(batch_l[i], anchors_l, tau_p, variant);
    for (std::size_t k = 0; k < width; ++k) {
      h_v(i, k) = fv.fwd.rep.normalized[k];
      h_l(i, k) = fl.fwd.rep.normalized[k];
    }
  }
  return contrastive_loss(h_v, h_l, tau);
}

// Central finite differences over every anchor entry. Independent of the
// analytic path: it only reuses the forward pipeline, evaluating the full
// loss 2*K*(D_v + D_l) times.
inline GradientSet finite_difference_oracle(std::span<const TokenSequence> batch_v,
                                            std::span<const TokenSequence> batch_l,
                                            const AnchorSet& anchors_v,
                                            const AnchorSet& anchors_l, double tau_p,
                                            double tau, double step,
                                            PoolingVariant variant = PoolingVariant::cap) {
  if (!(step > 0.0)) throw UsageError("finite-difference step must be positive");
  if (batch_v.size() != batch_l.size())
    throw UsageError("finite_difference_oracle: modality batches differ in length");

  GradientSet grads;
  grads.loss_value = batch_loss(batch_v, batch_l, anchors_v, anchors_l, tau_p, tau, variant);

  auto differentiate = [&](const AnchorSet& target, bool is_vision) {
    Matrix result(target.count(), target.dim());
    AnchorSet perturbed = target;
    for (std::size_t k = 0; k < target.count(); ++k) {
      for (std::size_t d = 0; d < target.dim(); ++d) {
        const double original = perturbed.anchors(k, d);
        perturbed.anchors(k, d) = original + step;
        const double plus =
            is_vision ? batch_loss(batch_v, batch_l, perturbed, anchors_l, tau_p, tau, variant)
                      : batch_loss(batch_v, batch_l, anchors_v, perturbed, tau_p, tau, variant);
        perturbed.anchors(k, d) = original - step;
        const double minus =
            is_vision ? batch_loss(batch_v, batch_l, perturbed, anchors_l, tau_p, tau, variant)
                      : batch_loss(batch_v, batch_l, anchors_v, perturbed, tau_p, tau, variant);
        perturbed.anchors(k, d) = original;
        result(k, d) = (plus - minus) / (2.0 * step);
      }
    }
    return result;
  };

  grads.d_anchors_v = differentiate(anchors_v, true);
  grads.d_anchors_l = differentiate(anchors_l, false);
  return grads;
}

}  // namespace pal
