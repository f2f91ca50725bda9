#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pal/binary_io.hpp"
#include "pal/embedding_io.hpp"
#include "pal/error.hpp"
#include "pal/matrix.hpp"
#include "pal/parallel.hpp"

namespace pal {

// Norm floor used inside the cosine kernel. Genuine zero tokens are rejected
// before the hot loop; the floor keeps the kernel total.
inline constexpr double kNormFloor = 1e-12;

// Pipeline variants. `cap` is the full pipeline; `mean_pool` replaces the
// attention softmax with uniform weights; `global_only` collapses each
// sequence to its mean token before anything else runs.
enum class PoolingVariant { cap, mean_pool, global_only };

inline std::string to_string(PoolingVariant v) {
  switch (v) {
    case PoolingVariant::cap: return "cap";
    case PoolingVariant::mean_pool: return "mean_pool";
    case PoolingVariant::global_only: return "global_only";
  }
  return "cap";
}

inline PoolingVariant pooling_variant_from_string(const std::string& s) {
  if (s == "cap") return PoolingVariant::cap;
  if (s == "mean_pool") return PoolingVariant::mean_pool;
  if (s == "global_only") return PoolingVariant::global_only;
  throw UsageError("unknown pipeline variant: " + s);
}

// The only trainable parameters: one K x D anchor matrix per modality.
struct AnchorSet {
  Matrix anchors;  // K x D
  ModalityTag modality = ModalityTag::vision;

  std::size_t count() const { return anchors.rows(); }
  std::size_t dim() const { return anchors.cols(); }

  // A zero-norm anchor row is a hard error: the cosine column it defines is
  // meaningless and scale-invariance arguments no longer apply.
  void validate() const {
    if (count() < 1) throw UsageError("anchor set is empty");
    for (std::size_t k = 0; k < count(); ++k)
      if (l2_norm(anchors.row(k)) <= 0.0)
        throw NumericError("anchor " + std::to_string(k) + " has zero norm");
  }

  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;
};

// Token-to-anchor similarities (T x K) and the attention weights derived from
// them. Rows with mask == 0 are padding: their similarity entries are zero
// and they receive zero attention.
struct RelRepMatrix {
  Matrix similarity;  // cosine values in [-1, 1] at unmasked rows
  Matrix attention;   // per-column distribution over unmasked rows
  double tau_p = 0.0;
  std::vector<std::uint8_t> mask;  // 1 = real token
};

struct PooledRep {
  std::vector<double> pooled;      // convex combination per anchor column
  std::vector<double> normalized;  // unit-norm form
  double norm = 0.0;               // length of `pooled`, set by normalize()
};

namespace kernel {

// All kernels take an explicit row stride so the per-sample path (stride = D
// over a T x D matrix) and the batched path (stride = D over a padded slab)
// execute the identical arithmetic sequence for every real token.

inline void token_norms(const double* tokens, std::size_t count, std::size_t dim,
                        std::size_t stride, const std::uint8_t* mask,
                        std::vector<double>& out) {
  out.assign(count, 0.0);
  for (std::size_t t = 0; t < count; ++t) {
    if (mask && !mask[t]) continue;
    out[t] = l2_norm({tokens + t * stride, dim});
  }
}

inline void cosine_rows(const double* tokens, std::size_t count, std::size_t dim,
                        std::size_t stride, const std::uint8_t* mask,
                        const std::vector<double>& tok_norms, const Matrix& anchors,
                        const std::vector<double>& anchor_norms, Matrix& out) {
  const std::size_t num_anchors = anchors.rows();
  for (std::size_t t = 0; t < count; ++t) {
    if (mask && !mask[t]) continue;
    const double* z = tokens + t * stride;
    const double nz = std::max(tok_norms[t], kNormFloor);
    for (std::size_t k = 0; k < num_anchors; ++k) {
      const double na = std::max(anchor_norms[k], kNormFloor);
      out(t, k) = dot({z, dim}, anchors.row(k)) / (nz * na);
    }
  }
}

// Anchor-wise softmax over the token dimension, max-subtracted; masked rows
// are excluded from the reduction entirely so padding is exactly neutral.
inline void attention_softmax(const Matrix& similarity, double tau_p,
                              const std::uint8_t* mask, Matrix& attention) {
  const std::size_t count = similarity.rows();
  const std::size_t num_anchors = similarity.cols();
  std::vector<double> addends;
  addends.reserve(count);
  for (std::size_t k = 0; k < num_anchors; ++k) {
    double column_max = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < count; ++t)
      if ((!mask || mask[t]) && similarity(t, k) > column_max) column_max = similarity(t, k);
    addends.clear();
    for (std::size_t t = 0; t < count; ++t) {
      if (mask && !mask[t]) continue;
      addends.push_back(std::exp((similarity(t, k) - column_max) / tau_p));
    }
    const double denom = canonical_sum(addends);
    for (std::size_t t = 0; t < count; ++t) {
      if (mask && !mask[t]) {
        attention(t, k) = 0.0;
        continue;
      }
      attention(t, k) = std::exp((similarity(t, k) - column_max) / tau_p) / denom;
    }
  }
}

inline void attention_uniform(const Matrix& similarity, const std::uint8_t* mask,
                              Matrix& attention) {
  const std::size_t count = similarity.rows();
  std::size_t real = 0;
  for (std::size_t t = 0; t < count; ++t)
    if (!mask || mask[t]) ++real;
  const double w = 1.0 / static_cast<double>(real);
  for (std::size_t k = 0; k < similarity.cols(); ++k)
    for (std::size_t t = 0; t < count; ++t)
      attention(t, k) = (!mask || mask[t]) ? w : 0.0;
}

inline void aggregate_columns(const Matrix& similarity, const Matrix& attention,
                              const std::uint8_t* mask, std::vector<double>& pooled) {
  const std::size_t count = similarity.rows();
  const std::size_t num_anchors = similarity.cols();
  pooled.assign(num_anchors, 0.0);
  std::vector<double> addends;
  addends.reserve(count);
  for (std::size_t k = 0; k < num_anchors; ++k) {
    addends.clear();
    for (std::size_t t = 0; t < count; ++t) {
      if (mask && !mask[t]) continue;
      addends.push_back(attention(t, k) * similarity(t, k));
    }
    pooled[k] = canonical_sum(addends);
  }
}

inline double pooled_norm(std::span<const double> pooled) {
  std::vector<double> squares(pooled.size());
  for (std::size_t k = 0; k < pooled.size(); ++k) squares[k] = pooled[k] * pooled[k];
  return std::sqrt(canonical_sum(squares));
}

// Mean token over unmasked rows, one canonical reduction per dimension.
inline void mean_token(const double* tokens, std::size_t count, std::size_t dim,
                       std::size_t stride, const std::uint8_t* mask,
                       std::vector<double>& out) {
  out.assign(dim, 0.0);
  std::size_t real = 0;
  for (std::size_t t = 0; t < count; ++t)
    if (!mask || mask[t]) ++real;
  std::vector<double> addends;
  addends.reserve(real);
  for (std::size_t d = 0; d < dim; ++d) {
    addends.clear();
    for (std::size_t t = 0; t < count; ++t) {
      if (mask && !mask[t]) continue;
      addends.push_back(tokens[t * stride + d]);
    }
    out[d] = canonical_sum(addends) / static_cast<double>(real);
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Per-sample operations.
// ---------------------------------------------------------------------------

inline RelRepMatrix relative_representation(const TokenSequence& seq,
                                            const AnchorSet& anchors) {
  if (seq.dim() != anchors.dim())
    throw UsageError("token dimension " + std::to_string(seq.dim()) +
                     " does not match anchor dimension " + std::to_string(anchors.dim()));
  anchors.validate();
  const std::size_t count = seq.token_count();
  std::vector<double> tok_norms;
  kernel::token_norms(seq.tokens.data(), count, seq.dim(), seq.dim(), nullptr, tok_norms);
  for (std::size_t t = 0; t < count; ++t)
    if (tok_norms[t] < kNormFloor)
      throw DataError("token " + std::to_string(t) + " of sample " +
                      std::to_string(seq.sample_id) + " has near-zero norm");
  std::vector<double> anchor_norms(anchors.count());
  for (std::size_t k = 0; k < anchors.count(); ++k)
    anchor_norms[k] = l2_norm(anchors.anchors.row(k));

  RelRepMatrix rel;
  rel.similarity = Matrix(count, anchors.count());
  rel.attention = Matrix(count, anchors.count());
  rel.mask.assign(count, 1);
  kernel::cosine_rows(seq.tokens.data(), count, seq.dim(), seq.dim(), nullptr, tok_norms,
                      anchors.anchors, anchor_norms, rel.similarity);
  return rel;
}

inline void cap_attention(RelRepMatrix& rel, double tau_p,
                          std::span<const std::uint8_t> mask) {
  if (!(tau_p > 0.0)) throw UsageError("pooling temperature must be positive");
  if (mask.size() != rel.similarity.rows())
    throw UsageError("mask length does not match token count");
  std::size_t real = 0;
  for (auto m : mask)
    if (m) ++real;
  if (real == 0) throw UsageError("attention over an all-masked sequence");
  rel.mask.assign(mask.begin(), mask.end());
  rel.tau_p = tau_p;
  kernel::attention_softmax(rel.similarity, tau_p, rel.mask.data(), rel.attention);
}

inline void cap_attention(RelRepMatrix& rel, double tau_p) {
  std::vector<std::uint8_t> all(rel.similarity.rows(), 1);
  cap_attention(rel, tau_p, all);
}

inline PooledRep cap_aggregate(const RelRepMatrix& rel) {
  PooledRep rep;
  kernel::aggregate_columns(rel.similarity, rel.attention,
                            rel.mask.empty() ? nullptr : rel.mask.data(), rep.pooled);
  return rep;
}

inline void normalize(PooledRep& rep) {
  const double norm = kernel::pooled_norm(rep.pooled);
  if (norm < kNormFloor)
    throw NumericError("pooled representation has near-zero norm; "
                       "anchors or input are degenerate");
  rep.norm = norm;
  rep.normalized.resize(rep.pooled.size());
  for (std::size_t k = 0; k < rep.pooled.size(); ++k)
    rep.normalized[k] = rep.pooled[k] / norm;
}

struct ForwardResult {
  RelRepMatrix rel;
  PooledRep rep;
};

inline void rel_fill_uniform(RelRepMatrix& rel, double tau_p) {
  rel.tau_p = tau_p;
  if (rel.mask.empty()) rel.mask.assign(rel.similarity.rows(), 1);
  kernel::attention_uniform(rel.similarity, rel.mask.data(), rel.attention);
}

// Collapses a sequence to its token mean; the global-only ablation runs the
// standard pipeline on the result.
inline TokenSequence collapse_to_mean(const TokenSequence& seq) {
  TokenSequence out;
  out.sample_id = seq.sample_id;
  out.tokens = Matrix(1, seq.dim());
  std::vector<double> mean;
  kernel::mean_token(seq.tokens.data(), seq.token_count(), seq.dim(), seq.dim(), nullptr,
                     mean);
  for (std::size_t d = 0; d < seq.dim(); ++d) out.tokens(0, d) = mean[d];
  return out;
}

inline ForwardResult forward(const TokenSequence& seq, const AnchorSet& anchors,
                             double tau_p, PoolingVariant variant = PoolingVariant::cap) {
  const TokenSequence* input = &seq;
  TokenSequence collapsed;
  if (variant == PoolingVariant::global_only) {
    collapsed = collapse_to_mean(seq);
    input = &collapsed;
  }
  ForwardResult result;
  result.rel = relative_representation(*input, anchors);
  if (variant == PoolingVariant::mean_pool) {
    if (!(tau_p > 0.0)) throw UsageError("pooling temperature must be positive");
    rel_fill_uniform(result.rel, tau_p);
  } else {
    cap_attention(result.rel, tau_p);
  }
  result.rep = cap_aggregate(result.rel);
  normalize(result.rep);
  return result;
}

// ---------------------------------------------------------------------------
// Batched path: (B, T_max, D) padded slab with per-sample masks. The
// per-sample path above is the reference; for every real token this path
// executes the same arithmetic, so outputs agree bit-for-bit.
// ---------------------------------------------------------------------------

struct TokenBatch {
  std::size_t size = 0;
  std::size_t max_tokens = 0;
  std::size_t dim = 0;
  std::vector<double> tokens;      // size * max_tokens * dim, zero padded
  std::vector<std::uint8_t> mask;  // size * max_tokens, 1 = real token
  std::vector<std::uint32_t> sample_ids;

  static TokenBatch pack(std::span<const TokenSequence> seqs) {
    TokenBatch batch;
    batch.size = seqs.size();
    for (const auto& s : seqs) batch.max_tokens = std::max(batch.max_tokens, s.token_count());
    batch.dim = seqs.empty() ? 0 : seqs[0].dim();
    batch.tokens.assign(batch.size * batch.max_tokens * batch.dim, 0.0);
    batch.mask.assign(batch.size * batch.max_tokens, 0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (seqs[i].dim() != batch.dim)
        throw UsageError("batch sequences disagree on embedding dimension");
      batch.sample_ids.push_back(seqs[i].sample_id);
      for (std::size_t t = 0; t < seqs[i].token_count(); ++t) {
        batch.mask[i * batch.max_tokens + t] = 1;
        for (std::size_t d = 0; d < batch.dim; ++d)
          batch.tokens[(i * batch.max_tokens + t) * batch.dim + d] = seqs[i].tokens(t, d);
      }
    }
    return batch;
  }
};

inline std::vector<ForwardResult> forward_batch(const TokenBatch& batch,
                                                const AnchorSet& anchors, double tau_p,
                                                PoolingVariant variant = PoolingVariant::cap) {
  if (batch.dim != anchors.dim())
    throw UsageError("batch dimension does not match anchor dimension");
  if (!(tau_p > 0.0)) throw UsageError("pooling temperature must be positive");
  anchors.validate();
  std::vector<double> anchor_norms(anchors.count());
  for (std::size_t k = 0; k < anchors.count(); ++k)
    anchor_norms[k] = l2_norm(anchors.anchors.row(k));

  std::vector<ForwardResult> results(batch.size);
  parallel_for(batch.size, [&](std::size_t i) {
    const double* tokens = batch.tokens.data() + i * batch.max_tokens * batch.dim;
    const std::uint8_t* mask = batch.mask.data() + i * batch.max_tokens;
    std::size_t count = batch.max_tokens;
    std::vector<double> collapsed;
    const std::uint8_t* eff_mask = mask;
    std::size_t eff_count = count;
    const double* eff_tokens = tokens;
    if (variant == PoolingVariant::global_only) {
      kernel::mean_token(tokens, count, batch.dim, batch.dim, mask, collapsed);
      eff_tokens = collapsed.data();
      eff_count = 1;
      eff_mask = nullptr;
    }

    std::vector<double> tok_norms;
    kernel::token_norms(eff_tokens, eff_count, batch.dim, batch.dim, eff_mask, tok_norms);
    for (std::size_t t = 0; t < eff_count; ++t) {
      if (eff_mask && !eff_mask[t]) continue;
      if (tok_norms[t] < kNormFloor)
        throw DataError("token " + std::to_string(t) + " of sample " +
                        std::to_string(batch.sample_ids[i]) + " has near-zero norm");
    }

    ForwardResult& out = results[i];
    out.rel.similarity = Matrix(eff_count, anchors.count());
    out.rel.attention = Matrix(eff_count, anchors.count());
    out.rel.tau_p = tau_p;
    if (eff_mask)
      out.rel.mask.assign(eff_mask, eff_mask + eff_count);
    else
      out.rel.mask.assign(eff_count, 1);
    kernel::cosine_rows(eff_tokens, eff_count, batch.dim, batch.dim, eff_mask, tok_norms,
                        anchors.anchors, anchor_norms, out.rel.similarity);
    if (variant == PoolingVariant::mean_pool)
      kernel::attention_uniform(out.rel.similarity, eff_mask, out.rel.attention);
    else
      kernel::attention_softmax(out.rel.similarity, tau_p, eff_mask, out.rel.attention);
    kernel::aggregate_columns(out.rel.similarity, out.rel.attention, eff_mask,
                              out.rep.pooled);
    normalize(out.rep);
  });
  return results;
}

// ---------------------------------------------------------------------------
// Anchor checkpoint: magic 'PALA', version u32, modality tag u8, K u32,
// D u32, K*D float64 little-endian, then pooling temperature and contrastive
// temperature as float64 (so a checkpoint reloads self-contained).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kAnchorVersion = 1;

struct AnchorCheckpoint {
  AnchorSet anchors;
  double tau_p = 0.0;
  double tau = 0.0;
};

inline void write_anchor_block(std::ostream& os, const AnchorSet& set, double tau_p,
                               double tau) {
  os.write("PALA", 4);
  io::write_u32(os, kAnchorVersion);
  io::write_u8(os, static_cast<std::uint8_t>(set.modality));
  io::write_u32(os, static_cast<std::uint32_t>(set.count()));
  io::write_u32(os, static_cast<std::uint32_t>(set.dim()));
  for (std::size_t i = 0; i < set.anchors.size(); ++i)
    io::write_f64(os, set.anchors.data()[i]);
  io::write_f64(os, tau_p);
  io::write_f64(os, tau);
}

inline AnchorCheckpoint read_anchor_block(std::istream& is, const std::string& what) {
  io::expect_magic(is, "PALA", what);
  std::uint32_t version = 0, count = 0, dim = 0;
  std::uint8_t tag = 0;
  if (!io::read_u32(is, version) || !io::read_u8(is, tag) || !io::read_u32(is, count) ||
      !io::read_u32(is, dim))
    throw CorruptionError(what + ": truncated anchor header");
  if (version != kAnchorVersion)
    throw FormatError(what + ": unsupported anchor version " + std::to_string(version));
  AnchorCheckpoint cp;
  cp.anchors.modality = static_cast<ModalityTag>(tag);
  cp.anchors.anchors = Matrix(count, dim);
  for (std::size_t i = 0; i < cp.anchors.anchors.size(); ++i)
    if (!io::read_f64(is, cp.anchors.anchors.data()[i]))
      throw CorruptionError(what + ": truncated anchor payload");
  if (!io::read_f64(is, cp.tau_p) || !io::read_f64(is, cp.tau))
    throw CorruptionError(what + ": truncated temperature block");
  return cp;
}

inline void save_anchor_set(const AnchorSet& set, double tau_p, double tau,
                            const std::filesystem::path& path) {
  auto os = io::open_output(path);
  write_anchor_block(os, set, tau_p, tau);
  if (!os) throw IoError("write failed: " + path.string());
}

inline AnchorCheckpoint load_anchor_set(const std::filesystem::path& path) {
  auto is = io::open_input(path);
  return read_anchor_block(is, path.string());
}

}  // namespace pal
