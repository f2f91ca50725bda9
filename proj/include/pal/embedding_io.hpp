#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pal/binary_io.hpp"
#include "pal/error.hpp"
#include "pal/matrix.hpp"
#include "pal/rng.hpp"

namespace pal {

enum class ModalityTag : std::uint8_t { vision = 0, language = 1 };

struct GridShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// One sample's frozen token embeddings (T x D) plus optional patch-grid
// shape. Immutable after construction; safe to share across threads.
struct TokenSequence {
  Matrix tokens;                  // T x D
  std::optional<GridShape> grid;  // rows * cols == T when present
  std::uint32_t sample_id = 0;

  std::size_t token_count() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline void validate_sequence(const TokenSequence& seq, std::size_t index) {
  if (seq.token_count() < 1)
    throw DataError("sample " + std::to_string(index + 1) + " has zero tokens");
  if (!seq.tokens.all_finite())
    throw DataError("sample " + std::to_string(index + 1) + " contains a non-finite value");
  if (seq.grid) {
    const std::uint64_t cells =
        static_cast<std::uint64_t>(seq.grid->rows) * seq.grid->cols;
    if (cells != seq.token_count())
      throw DataError("sample " + std::to_string(index + 1) +
                      " grid does not cover its tokens");
  }
}

using PairList = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

// A matched two-modality dataset. modality_a plays the vision role,
// modality_b the language role; dimensions may differ between the two.
// concept labels (one int per token, -1 = background/noise) are present for
// synthetic corpora and empty otherwise.
struct PairedDataset {
  std::vector<TokenSequence> modality_a;
  std::vector<TokenSequence> modality_b;
  PairList pairs;
  std::vector<std::vector<std::int32_t>> labels_a;
  std::vector<std::vector<std::int32_t>> labels_b;

  void validate() const {
    for (std::size_t i = 1; i < modality_a.size(); ++i)
      if (modality_a[i].dim() != modality_a[0].dim())
        throw UsageError("modality_a sequences disagree on embedding dimension");
    for (std::size_t i = 1; i < modality_b.size(); ++i)
      if (modality_b[i].dim() != modality_b[0].dim())
        throw UsageError("modality_b sequences disagree on embedding dimension");
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& [ia, ib] : pairs) {
      if (ia >= modality_a.size() || ib >= modality_b.size())
        throw UsageError("pair index out of range");
      if (!seen.insert({ia, ib}).second) throw UsageError("duplicate pair entry");
    }
    if (!labels_a.empty() && labels_a.size() != modality_a.size())
      throw UsageError("labels_a count does not match modality_a");
    if (!labels_b.empty() && labels_b.size() != modality_b.size())
      throw UsageError("labels_b count does not match modality_b");
  }
};

// ---------------------------------------------------------------------------
// Embedding file format (canonical):
//   magic 'PALT', version u32=1, modality tag u8, D u32, sample count u32;
//   per sample: sample_id u32, T u32, grid_rows u32, grid_cols u32
//   (both 0 when absent), then T*D float32 little-endian row-major.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCorpusVersion = 1;

struct Corpus {
  ModalityTag modality = ModalityTag::vision;
  std::vector<TokenSequence> sequences;
};

inline void write_corpus(const std::vector<TokenSequence>& seqs, ModalityTag tag,
                         const std::filesystem::path& path) {
  for (std::size_t i = 1; i < seqs.size(); ++i)
    if (seqs[i].dim() != seqs[0].dim())
      throw UsageError("write_corpus: sequences disagree on embedding dimension");
  auto os = io::open_output(path);
  os.write("PALT", 4);
  io::write_u32(os, kCorpusVersion);
  io::write_u8(os, static_cast<std::uint8_t>(tag));
  io::write_u32(os, seqs.empty() ? 0u : static_cast<std::uint32_t>(seqs[0].dim()));
  io::write_u32(os, static_cast<std::uint32_t>(seqs.size()));
  for (const auto& seq : seqs) {
    io::write_u32(os, seq.sample_id);
    io::write_u32(os, static_cast<std::uint32_t>(seq.token_count()));
    io::write_u32(os, seq.grid ? seq.grid->rows : 0u);
    io::write_u32(os, seq.grid ? seq.grid->cols : 0u);
    for (std::size_t t = 0; t < seq.token_count(); ++t)
      for (std::size_t d = 0; d < seq.dim(); ++d)
        io::write_f32(os, static_cast<float>(seq.tokens(t, d)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  auto is = io::open_input(path);
  io::expect_magic(is, "PALT", path.string());
  std::uint32_t version = 0, dim = 0, count = 0;
  std::uint8_t tag = 0;
  if (!io::read_u32(is, version) || !io::read_u8(is, tag) || !io::read_u32(is, dim) ||
      !io::read_u32(is, count))
    throw CorruptionError(path.string() + ": truncated header");
  if (version != kCorpusVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  if (tag > 1) throw FormatError(path.string() + ": unknown modality tag");

  Corpus corpus;
  corpus.modality = static_cast<ModalityTag>(tag);
  corpus.sequences.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = path.string() + ": sample " + std::to_string(i + 1);
    std::uint32_t sample_id = 0, tokens = 0, grid_rows = 0, grid_cols = 0;
    if (!io::read_u32(is, sample_id) || !io::read_u32(is, tokens) ||
        !io::read_u32(is, grid_rows) || !io::read_u32(is, grid_cols))
      throw CorruptionError(where + ": truncated sample header");
    if (tokens == 0) throw DataError(where + ": zero tokens");
    TokenSequence seq;
    seq.sample_id = sample_id;
    seq.tokens = Matrix(tokens, dim);
    for (std::uint32_t t = 0; t < tokens; ++t) {
      for (std::uint32_t d = 0; d < dim; ++d) {
        float v = 0.0f;
        if (!io::read_f32(is, v)) throw CorruptionError(where + ": truncated payload");
        if (!std::isfinite(v))
          throw DataError(where + ": non-finite value at token " + std::to_string(t));
        seq.tokens(t, d) = static_cast<double>(v);
      }
    }
    if (grid_rows != 0 || grid_cols != 0) {
      if (static_cast<std::uint64_t>(grid_rows) * grid_cols != tokens)
        throw DataError(where + ": grid does not cover its tokens");
      seq.grid = GridShape{grid_rows, grid_cols};
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic label sidecar: magic 'PALL', version u32=1, sample count u32;
// per sample: sample_id u32, T u32, then T concept ids as i32 little-endian
// (-1 marks a background/noise token).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kLabelVersion = 1;

struct LabelSidecar {
  std::vector<std::uint32_t> sample_ids;
  std::vector<std::vector<std::int32_t>> labels;
};

inline void write_labels(const LabelSidecar& sidecar, const std::filesystem::path& path) {
  if (sidecar.sample_ids.size() != sidecar.labels.size())
    throw UsageError("write_labels: id/label count mismatch");
  auto os = io::open_output(path);
  os.write("PALL", 4);
  io::write_u32(os, kLabelVersion);
  io::write_u32(os, static_cast<std::uint32_t>(sidecar.labels.size()));
  for (std::size_t i = 0; i < sidecar.labels.size(); ++i) {
    io::write_u32(os, sidecar.sample_ids[i]);
    io::write_u32(os, static_cast<std::uint32_t>(sidecar.labels[i].size()));
    for (std::int32_t v : sidecar.labels[i]) io::write_i32(os, v);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline LabelSidecar read_labels(const std::filesystem::path& path) {
  auto is = io::open_input(path);
  io::expect_magic(is, "PALL", path.string());
  std::uint32_t version = 0, count = 0;
  if (!io::read_u32(is, version) || !io::read_u32(is, count))
    throw CorruptionError(path.string() + ": truncated header");
  if (version != kLabelVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  LabelSidecar sidecar;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = path.string() + ": sample " + std::to_string(i + 1);
    std::uint32_t sample_id = 0, tokens = 0;
    if (!io::read_u32(is, sample_id) || !io::read_u32(is, tokens))
      throw CorruptionError(where + ": truncated sample header");
    std::vector<std::int32_t> row(tokens);
    for (std::uint32_t t = 0; t < tokens; ++t)
      if (!io::read_i32(is, row[t])) throw CorruptionError(where + ": truncated payload");
    sidecar.sample_ids.push_back(sample_id);
    sidecar.labels.push_back(std::move(row));
  }
  return sidecar;
}

// ---------------------------------------------------------------------------
// Pair manifest: text file, one "index_a<TAB>index_b" per line.
// ---------------------------------------------------------------------------

inline void write_pairs(const PairList& pairs, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  for (const auto& [a, b] : pairs) os << a << '\t' << b << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline PairList read_pairs(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  PairList pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::uint32_t a = 0, b = 0;
    char tab = 0;
    if (!(ss >> a) || !ss.get(tab) || tab != '\t' || !(ss >> b))
      throw FormatError(path.string() + ": malformed pair at line " + std::to_string(line_no));
    pairs.emplace_back(a, b);
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation.
// ---------------------------------------------------------------------------

// Two-modality corpus with known ground truth. Each matched pair shares a
// concept subset and, token by token, the same jittered latent vector; the
// two modalities observe that latent through their own fixed linear maps.
// Tokens drawn as background (fraction background_fraction, labeled -1) are
// modality-private noise with no cross-modal counterpart.
struct SyntheticSpec {
  std::uint32_t num_concepts = 8;  // C
  std::uint32_t latent_dim = 8;    // d
  std::uint32_t dim_v = 32;
  std::uint32_t dim_l = 24;
  std::uint32_t tokens_min = 4;
  std::uint32_t tokens_max = 8;
  std::uint32_t concepts_min = 1;
  std::uint32_t concepts_max = 3;
  double noise_sigma = 0.05;
  double background_fraction = 0.0;
  std::uint32_t num_train = 2000;
  std::uint32_t num_test = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_concepts < 2) throw UsageError("synthetic spec: need at least 2 concepts");
    if (latent_dim < 1 || latent_dim > std::min(dim_v, dim_l))
      throw UsageError("synthetic spec: latent_dim must be in [1, min(dim_v, dim_l)]");
    if (tokens_min < 1 || tokens_min > tokens_max)
      throw UsageError("synthetic spec: bad tokens_per_sample range");
    if (concepts_min < 1 || concepts_min > concepts_max || concepts_max > num_concepts)
      throw UsageError("synthetic spec: bad concepts_per_sample range");
    if (!(noise_sigma >= 0.0)) throw UsageError("synthetic spec: noise_sigma must be >= 0");
    if (!(background_fraction >= 0.0 && background_fraction < 1.0))
      throw UsageError("synthetic spec: background_fraction must be in [0, 1)");
  }
};

struct SyntheticCorpus {
  PairedDataset train;
  PairedDataset test;
  // One noise-free single-token language sequence per concept; used as class
  // prompts for classification and dense labeling.
  std::vector<TokenSequence> concept_prompts;
};

namespace detail {

// Gram-Schmidt orthonormalization of the columns of a dim x latent map drawn
// from N(0,1). Orthonormal columns preserve latent-space geometry exactly.
inline Matrix random_orthonormal_map(std::size_t dim, std::size_t latent,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix map(dim, latent);
  for (std::size_t j = 0; j < latent; ++j) {
    for (;;) {
      for (std::size_t i = 0; i < dim; ++i) map(i, j) = gauss(rng);
      for (std::size_t prev = 0; prev < j; ++prev) {
        double proj = 0.0;
        for (std::size_t i = 0; i < dim; ++i) proj += map(i, j) * map(i, prev);
        for (std::size_t i = 0; i < dim; ++i) map(i, j) -= proj * map(i, prev);
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < dim; ++i) norm += map(i, j) * map(i, j);
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (std::size_t i = 0; i < dim; ++i) map(i, j) /= norm;
        break;
      }
    }
  }
  return map;
}

inline std::vector<double> apply_map(const Matrix& map, std::span<const double> latent) {
  std::vector<double> out(map.rows(), 0.0);
  for (std::size_t i = 0; i < map.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < map.cols(); ++j) s += map(i, j) * latent[j];
    out[i] = s;
  }
  return out;
}

// Widest grid with rows <= cols covering exactly T cells.
inline GridShape grid_for(std::uint32_t tokens) {
  std::uint32_t best = 1;
  for (std::uint32_t r = 1; static_cast<std::uint64_t>(r) * r <= tokens; ++r)
    if (tokens % r == 0) best = r;
  return GridShape{best, tokens / best};
}

// Round to float32 so the in-memory corpus is identical to its disk image.
inline void quantize_to_storage(Matrix& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  auto rng = make_rng(spec.seed, streams::kSynthetic);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Concept latents: C unit-norm directions in R^d.
  Matrix concepts(spec.num_concepts, spec.latent_dim);
  for (std::uint32_t c = 0; c < spec.num_concepts; ++c) {
    double norm = 0.0;
    while (norm < 1e-8) {
      for (std::uint32_t j = 0; j < spec.latent_dim; ++j) concepts(c, j) = gauss(rng);
      norm = l2_norm(concepts.row(c));
    }
    for (std::uint32_t j = 0; j < spec.latent_dim; ++j) concepts(c, j) /= norm;
  }

  const Matrix map_v = detail::random_orthonormal_map(spec.dim_v, spec.latent_dim, rng);
  const Matrix map_l = detail::random_orthonormal_map(spec.dim_l, spec.latent_dim, rng);

  auto make_split = [&](std::uint32_t count) {
    PairedDataset split;
    std::vector<std::uint32_t> subset_buf(spec.num_concepts);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::uint32_t> tok_dist(spec.tokens_min, spec.tokens_max);
      const std::uint32_t tokens = tok_dist(rng);
      std::uniform_int_distribution<std::uint32_t> size_dist(spec.concepts_min,
                                                             spec.concepts_max);
      const std::uint32_t subset_size = size_dist(rng);
      // Concept subset without replacement (partial Fisher-Yates).
      for (std::uint32_t c = 0; c < spec.num_concepts; ++c) subset_buf[c] = c;
      for (std::uint32_t s = 0; s < subset_size; ++s) {
        std::uniform_int_distribution<std::uint32_t> pick(s, spec.num_concepts - 1);
        std::swap(subset_buf[s], subset_buf[pick(rng)]);
      }

      TokenSequence seq_v, seq_l;
      seq_v.sample_id = i;
      seq_l.sample_id = i;
      seq_v.tokens = Matrix(tokens, spec.dim_v);
      seq_l.tokens = Matrix(tokens, spec.dim_l);
      std::vector<std::int32_t> labels(tokens);
      std::vector<double> latent(spec.latent_dim);
      for (std::uint32_t t = 0; t < tokens; ++t) {
        const bool background = t > 0 && unit(rng) < spec.background_fraction;
        if (background) {
          labels[t] = -1;
          // Modality-private noise token. Norms vary well beyond the concept
          // tokens' ~1, the way frozen encoders emit high-norm artifact
          // tokens; cosine-based pooling should shrug these off while
          // token-mean pooling cannot.
          std::uniform_real_distribution<double> scale(0.5, 3.0);
          for (int m = 0; m < 2; ++m) {
            Matrix& dst = m == 0 ? seq_v.tokens : seq_l.tokens;
            double norm = 0.0;
            while (norm < 1e-8) {
              for (std::size_t d = 0; d < dst.cols(); ++d) dst(t, d) = gauss(rng);
              norm = l2_norm(dst.row(t));
            }
            const double target = scale(rng);
            for (std::size_t d = 0; d < dst.cols(); ++d) dst(t, d) *= target / norm;
          }
          continue;
        }
        std::uniform_int_distribution<std::uint32_t> pick(0, subset_size - 1);
        const std::uint32_t concept_id = subset_buf[pick(rng)];
        labels[t] = static_cast<std::int32_t>(concept_id);
        // Shared jittered latent: both modalities see the same draw.
        for (std::uint32_t j = 0; j < spec.latent_dim; ++j)
          latent[j] = concepts(concept_id, j) + spec.noise_sigma * gauss(rng);
        const auto tok_v = detail::apply_map(map_v, latent);
        const auto tok_l = detail::apply_map(map_l, latent);
        for (std::size_t d = 0; d < tok_v.size(); ++d) seq_v.tokens(t, d) = tok_v[d];
        for (std::size_t d = 0; d < tok_l.size(); ++d) seq_l.tokens(t, d) = tok_l[d];
      }
      detail::quantize_to_storage(seq_v.tokens);
      detail::quantize_to_storage(seq_l.tokens);
      seq_v.grid = detail::grid_for(tokens);

      split.modality_a.push_back(std::move(seq_v));
      split.modality_b.push_back(std::move(seq_l));
      split.labels_a.push_back(labels);
      split.labels_b.push_back(std::move(labels));
      split.pairs.emplace_back(i, i);
    }
    return split;
  };

  SyntheticCorpus corpus;
  corpus.train = make_split(spec.num_train);
  corpus.test = make_split(spec.num_test);
  for (std::uint32_t c = 0; c < spec.num_concepts; ++c) {
    TokenSequence prompt;
    prompt.sample_id = c;
    prompt.tokens = Matrix(1, spec.dim_l);
    const auto tok = detail::apply_map(map_l, concepts.row(c));
    for (std::size_t d = 0; d < tok.size(); ++d) prompt.tokens(0, d) = tok[d];
    detail::quantize_to_storage(prompt.tokens);
    corpus.concept_prompts.push_back(std::move(prompt));
  }
  return corpus;
}

}  // namespace pal
