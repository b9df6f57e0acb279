#pragma once

// Synthetic representation families with known linear transfer structure and
// synthetic TR-rate responses, used as ground truth in tests.
//
// Representation i sees the latent window z[offset_i, offset_i + k_i) of a
// shared standard-normal latent z ∈ R^K through a fixed orthonormal-column
// mixing matrix A_i (d_i x k_i):  x_i = A_i z_window + sigma_i * noise.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/encoding.hpp"
#include "repspace/feature_store.hpp"
#include "repspace/io.hpp"

namespace repspace {

struct SyntheticRep {
  std::string id;
  std::size_t visible = 1;      // k_i
  std::size_t output_dim = 1;   // d_i
  double noise_sd = 0.0;        // sigma_i
  std::size_t latent_offset = 0;
  std::string mixing_key;       // reps with equal keys and shapes share A; defaults to id
  std::string model_group;
  std::optional<std::size_t> layer_index;
};

struct NestedFamilySpec {
  std::uint64_t seed = 0;
  std::size_t latent_dim = 1;  // K
  std::size_t token_count = 1; // T
  std::vector<SyntheticRep> reps;
};

inline void validate(const NestedFamilySpec& spec) {
  require(spec.latent_dim >= 1, "synthetic family: K must be >= 1");
  require(spec.token_count >= 1, "synthetic family: T must be >= 1");
  require(!spec.reps.empty(), "synthetic family: no representations");
  for (const auto& r : spec.reps) {
    require(r.visible >= 1, "synthetic rep '" + r.id + "': k must be >= 1");
    require(r.latent_offset + r.visible <= spec.latent_dim,
            "synthetic rep '" + r.id + "': visible latents exceed K");
    require(r.output_dim >= r.visible, "synthetic rep '" + r.id + "': d must be >= k");
    require(r.noise_sd >= 0.0, "synthetic rep '" + r.id + "': noise_sd must be >= 0");
  }
}

/// Orthonormal-column d x k matrix drawn from a seeded Gaussian via QR.
inline Matrix random_orthonormal(std::size_t d, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
  // Fix column signs so the factor is unique for a given draw.
  const Eigen::MatrixXd rmat = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < q.cols(); ++c)
    if (rmat(c, c) < 0) q.col(c) = -q.col(c);
  return q;
}

inline const SyntheticRep& find_rep(const NestedFamilySpec& spec, const std::string& id) {
  for (const auto& r : spec.reps)
    if (r.id == id) return r;
  throw ValidationError("synthetic family: unknown representation id '" + id + "'");
}

inline Matrix mixing_matrix(const NestedFamilySpec& spec, const SyntheticRep& r) {
  const std::string key = r.mixing_key.empty() ? r.id : r.mixing_key;
  return random_orthonormal(r.output_dim, r.visible,
                            derive_seed(spec.seed, {"mixing", key, std::to_string(r.output_dim),
                                                    std::to_string(r.visible)}));
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = nd(rng);
  return m;
}

inline Matrix shared_latents(const NestedFamilySpec& spec) {
  return gaussian_matrix(static_cast<Eigen::Index>(spec.token_count), static_cast<Eigen::Index>(spec.latent_dim),
                         derive_seed(spec.seed, {"latents"}));
}

inline std::vector<FeatureBundle> gen_nested_reps(const NestedFamilySpec& spec) {
  validate(spec);
  const Matrix z = shared_latents(spec);
  std::vector<FeatureBundle> out;
  for (const auto& r : spec.reps) {
    const Matrix a = mixing_matrix(spec, r);
    FeatureBundle b;
    b.spec.id = r.id;
    b.spec.dim = r.output_dim;
    b.spec.model_group = r.model_group.empty() ? r.id : r.model_group;
    b.spec.layer_index = r.layer_index;
    b.values = z.middleCols(static_cast<Eigen::Index>(r.latent_offset), static_cast<Eigen::Index>(r.visible)) *
               a.transpose();
    if (r.noise_sd > 0.0)
      b.values += r.noise_sd * gaussian_matrix(b.values.rows(), b.values.cols(), derive_seed(spec.seed, {"noise", r.id}));
    // Storage is single precision; keep the in-memory copy identical to disk.
    b.values = b.values.cast<float>().cast<double>();
    out.push_back(std::move(b));
  }
  return out;
}

/// Population least-squares residual (mean over target dims) of predicting
/// representation j from representation i, computed from the mixing matrices
/// and noise levels alone.
inline double oracle_transfer_mse(const NestedFamilySpec& spec, const std::string& source, const std::string& target) {
  validate(spec);
  const auto& ri = find_rep(spec, source);
  const auto& rj = find_rep(spec, target);
  if (ri.id == rj.id) return 0.0;
  const Matrix ai = mixing_matrix(spec, ri), aj = mixing_matrix(spec, rj);
  // Cross-covariance of the two latent windows.
  Matrix c = Matrix::Zero(static_cast<Eigen::Index>(rj.visible), static_cast<Eigen::Index>(ri.visible));
  for (std::size_t a = 0; a < rj.visible; ++a)
    for (std::size_t b = 0; b < ri.visible; ++b)
      if (rj.latent_offset + a == ri.latent_offset + b) c(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = 1.0;
  const auto di = static_cast<Eigen::Index>(ri.output_dim), dj = static_cast<Eigen::Index>(rj.output_dim);
  const Matrix sxx = ai * ai.transpose() + ri.noise_sd * ri.noise_sd * Matrix::Identity(di, di);
  const Matrix syy = aj * aj.transpose() + rj.noise_sd * rj.noise_sd * Matrix::Identity(dj, dj);
  const Matrix syx = aj * c * ai.transpose();
  const Matrix resid = syy - syx * pinv(sxx, 1e-10) * syx.transpose();
  return std::max(0.0, resid.trace() / static_cast<double>(dj));
}

/// Corpus of equal-length train stories plus one test story.
inline TokenCorpus synthetic_corpus(std::size_t train_tokens, std::size_t train_stories, std::size_t test_tokens) {
  require(train_stories >= 1, "synthetic_corpus: need at least one train story");
  std::vector<Story> stories;
  std::size_t left = train_tokens;
  for (std::size_t k = 0; k < train_stories; ++k) {
    const std::size_t n = k + 1 == train_stories ? left : train_tokens / train_stories;
    left -= n;
    stories.push_back({"train" + std::to_string(k), Role::Train, n, {}, {}});
  }
  stories.push_back({"test", Role::Test, test_tokens, {}, {}});
  return TokenCorpus(std::move(stories));
}

// ---------------------------------------------------------------------------
// Responses

struct SyntheticResponseSpec {
  std::uint64_t seed = 0;
  std::string source_rep;
  Matrix true_weights;        // (d * delays) x V; drawn standard normal when empty
  std::size_t channels = 1;   // V
  double noise_sd = 0.0;
  double tr_seconds = 2.0;
  std::vector<int> delays{1, 2, 3, 4};
  double words_per_second = 2.5;
  std::size_t padding_trs = 4;   // zero TRs assumed before each story
  bool normalize_signal = false; // scale each channel's signal to unit variance
};

struct SyntheticResponses {
  ResponseDataset data;
  Matrix true_weights;  // effective weights after any normalization
  Matrix design;        // delayed TR-rate design used to generate the signal
};

inline SyntheticResponses gen_synthetic_responses(const SyntheticResponseSpec& spec, const FeatureBundle& source,
                                                  const TokenCorpus& corpus) {
  require(spec.channels >= 1, "synthetic responses: V must be >= 1");
  require(spec.tr_seconds > 0.0, "synthetic responses: TR must be positive");
  validate_delays(spec.delays);
  require(source.token_count() == corpus.total_tokens(), "synthetic responses: source not aligned to corpus");
  for (int d : spec.delays)
    if (static_cast<std::size_t>(d) > spec.padding_trs)
      throw ValidationError("synthetic responses: delay " + std::to_string(d) + " TRs reaches before the " +
                            std::to_string(spec.padding_trs) + "-TR padding");

  const TrTimeline tl = tr_timeline(corpus, spec.tr_seconds, spec.words_per_second);
  const Matrix xtr = downsample_corpus(source.values, corpus, spec.tr_seconds, spec.words_per_second);
  SyntheticResponses out;
  out.design = delay_expand_stories(xtr, tl.story_trs, spec.delays).X;
  const auto p = out.design.cols();
  const auto V = static_cast<Eigen::Index>(spec.channels);
  if (spec.true_weights.size() == 0) {
    out.true_weights = gaussian_matrix(p, V, derive_seed(spec.seed, {"weights", spec.source_rep}));
  } else {
    require(spec.true_weights.rows() == p && spec.true_weights.cols() == V,
            "synthetic responses: true_weights shape must be (d*delays) x V");
    out.true_weights = spec.true_weights;
  }
  Matrix signal = out.design * out.true_weights;
  if (spec.normalize_signal) {
    for (Eigen::Index v = 0; v < V; ++v) {
      const double sd = std::sqrt((signal.col(v).array() - signal.col(v).mean()).square().mean());
      if (sd > 0.0) {
        signal.col(v) /= sd;
        out.true_weights.col(v) /= sd;
      }
    }
  }
  out.data.responses = signal;
  if (spec.noise_sd > 0.0)
    out.data.responses += spec.noise_sd * gaussian_matrix(signal.rows(), V, derive_seed(spec.seed, {"response-noise", spec.source_rep}));
  out.data.responses = out.data.responses.cast<float>().cast<double>();
  out.data.tr_seconds = spec.tr_seconds;
  out.data.train_trs = tl.train_trs;
  out.data.test_trs = tl.test_trs;
  out.data.story_trs = tl.story_trs;
  for (Eigen::Index v = 0; v < V; ++v) out.data.channel_ids.push_back("ch" + std::to_string(v));
  return out;
}

}  // namespace repspace
