#pragma once

// Bottlenecked linear encoders from the universal input space, and the n²
// latent-to-target decoders, trained by minibatch SGD with early stopping.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/feature_store.hpp"
#include "repspace/io.hpp"

namespace repspace {

enum class MapKind { Encoder, Decoder };

inline const char* kind_name(MapKind k) { return k == MapKind::Encoder ? "encoder" : "decoder"; }

struct LinearMap {
  Matrix weights;  // d_in x d_out
  Vector bias;     // d_out
  MapKind kind = MapKind::Decoder;

  Eigen::Index d_in() const { return weights.rows(); }
  Eigen::Index d_out() const { return weights.cols(); }

  Matrix apply(const Matrix& x) const {
    require(x.cols() == weights.rows(), std::string(kind_name(kind)) + ": input width " + std::to_string(x.cols()) +
                                            " does not match map input " + std::to_string(weights.rows()));
    Matrix out = x * weights;
    out.rowwise() += bias.transpose();
    return out;
  }
};

struct TrainConfig {
  std::size_t latent_dim = 20;
  std::size_t batch_size = 1024;
  double lr_encoder = 1e-4;
  double lr_decoder = 2e-5;
  std::size_t max_batches = 1000;
  std::size_t patience = 1;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  // Prediction directions of the trained encoder whose singular value falls
  // below this fraction of the largest are dropped from the latent space.
  double rank_tolerance = 0.05;

  void validate() const {
    require(latent_dim >= 1, "TrainConfig: latent_dim must be >= 1");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(lr_encoder > 0 && lr_decoder > 0, "TrainConfig: learning rates must be positive");
    require(max_batches >= 1, "TrainConfig: max_batches must be >= 1");
    require(patience >= 1, "TrainConfig: patience must be >= 1");
    require(validation_fraction > 0 && validation_fraction < 1, "TrainConfig: validation_fraction must lie in (0, 1)");
    require(rank_tolerance >= 0 && rank_tolerance < 1, "TrainConfig: rank_tolerance must lie in [0, 1)");
  }

  std::string fingerprint() const {
    std::string s;
    s += "latent_dim=" + std::to_string(latent_dim);
    s += ";batch_size=" + std::to_string(batch_size);
    s += ";lr_encoder=" + Header::format_double(lr_encoder);
    s += ";lr_decoder=" + Header::format_double(lr_decoder);
    s += ";max_batches=" + std::to_string(max_batches);
    s += ";patience=" + std::to_string(patience);
    s += ";seed=" + std::to_string(seed);
    s += ";validation_fraction=" + Header::format_double(validation_fraction);
    s += ";rank_tolerance=" + Header::format_double(rank_tolerance);
    return s;
  }
  std::string hash() const { return sha256_hex(fingerprint()).substr(0, 16); }
};

struct LatentDataset {
  std::string rep_id;
  Matrix values;  // T x latent_dim
};

// ---------------------------------------------------------------------------
// Losses

struct LossGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d pred
};

/// -(1/d) Σ_c corr(pred_c, target_c); zero-variance columns contribute 0.
inline LossGrad neg_corr_loss_grad(const Matrix& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "neg_corr_loss: shape mismatch");
  require(pred.rows() >= 2, "neg_corr_loss: batch must have at least 2 rows");
  const auto d = static_cast<double>(pred.cols());
  LossGrad out{0.0, Matrix::Zero(pred.rows(), pred.cols())};
  for (Eigen::Index c = 0; c < pred.cols(); ++c) {
    const Vector p = pred.col(c).array() - pred.col(c).mean();
    const Vector t = target.col(c).array() - target.col(c).mean();
    const double pp = p.squaredNorm(), tt = t.squaredNorm();
    if (pp <= 0.0 || tt <= 0.0) continue;
    const double np = std::sqrt(pp), nt = std::sqrt(tt);
    const double r = p.dot(t) / (np * nt);
    out.loss -= r / d;
    out.grad.col(c) = -(t / (np * nt) - r * p / pp) / d;
  }
  return out;
}

inline double neg_corr_loss(const Matrix& pred, const Matrix& target) { return neg_corr_loss_grad(pred, target).loss; }

/// Mean over rows and columns of the squared error.
inline LossGrad mse_loss_grad(const Matrix& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse: shape mismatch");
  const Matrix diff = pred - target;
  const double n = static_cast<double>(diff.size());
  return {diff.squaredNorm() / n, 2.0 * diff / n};
}

/// Entry j = mean over target dims of the squared error at row j.
inline Vector decoder_sample_mse(const LinearMap& decoder, const Matrix& latent_rows, const Matrix& target_rows) {
  require(latent_rows.rows() == target_rows.rows(), "decoder_sample_mse: row counts differ");
  require(decoder.d_out() == target_rows.cols(), "decoder_sample_mse: decoder output width differs from target");
  const Matrix diff = decoder.apply(latent_rows) - target_rows;
  return diff.rowwise().squaredNorm() / static_cast<double>(target_rows.cols());
}

// ---------------------------------------------------------------------------
// Training helpers

struct FitValidation {
  RowIndex fit;
  RowIndex validation;
};

/// Holds out the tail of the train rows for early stopping. Whole trailing
/// stories are used when that lands near the requested fraction.
inline FitValidation validation_split(const TokenCorpus& corpus, const RowIndex& train_rows, double fraction) {
  require(train_rows.size() >= 4, "validation_split: need at least 4 train rows");
  const auto want = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train_rows.size()))));
  std::vector<StoryRange> train_ranges;
  for (std::size_t k = 0; k < corpus.stories().size(); ++k)
    if (corpus.stories()[k].role == Role::Train) train_ranges.push_back(corpus.ranges()[k]);
  std::size_t tail = 0;
  std::size_t stories = 0;
  for (auto it = train_ranges.rbegin(); it != train_ranges.rend() && tail < want; ++it) {
    tail += it->end - it->begin;
    ++stories;
  }
  std::size_t cut = train_rows.size() - want;
  if (stories < train_ranges.size() && tail <= 2 * want && tail < train_rows.size())
    cut = train_rows.size() - tail;
  FitValidation fv;
  fv.fit.assign(train_rows.begin(), train_rows.begin() + static_cast<std::ptrdiff_t>(cut));
  fv.validation.assign(train_rows.begin() + static_cast<std::ptrdiff_t>(cut), train_rows.end());
  return fv;
}

inline Matrix uniform_init(Eigen::Index d_in, Eigen::Index d_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix w(d_in, d_out);
  for (Eigen::Index r = 0; r < d_in; ++r)
    for (Eigen::Index c = 0; c < d_out; ++c) w(r, c) = u(rng);
  return w;
}

/// Seeded shuffled-epoch minibatch sampler.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::mt19937_64& rng) : perm_(n), batch_(std::min(batch, n)), rng_(rng) {
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    std::shuffle(perm_.begin(), perm_.end(), rng_);
  }
  RowIndex next() {
    if (pos_ + batch_ > perm_.size()) {
      std::shuffle(perm_.begin(), perm_.end(), rng_);
      pos_ = 0;
    }
    RowIndex out(perm_.begin() + static_cast<std::ptrdiff_t>(pos_), perm_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> perm_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64& rng_;
};

struct TrainLog {
  std::size_t batches = 0;
  double best_validation = 0.0;
  bool stopped_early = false;
};

/// Early-stopping monitor: stops once the validation loss has failed to
/// improve for `patience` consecutive evaluations.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  bool improved(double loss) {
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

inline void check_finite_loss(double loss, std::size_t batch, const std::string& what) {
  if (!std::isfinite(loss))
    throw NumericError(what + ": loss became non-finite at batch " + std::to_string(batch) +
                       " (learning rate too large?)");
}

// ---------------------------------------------------------------------------
// Encoders

struct EncoderTraining {
  LinearMap encoder;
  LinearMap throwaway_decoder;
  TrainLog log;
  std::size_t retained_rank = 0;
};

/// Re-expresses the trained composition u -> W_e W_d as standardized scores
/// along its principal prediction directions, keeping only directions above
/// the rank tolerance. Latent columns beyond the retained rank are zero.
inline void prune_to_prediction_subspace(EncoderTraining& out, const Matrix& u_fit, std::size_t latent_dim,
                                         double tolerance) {
  const Matrix m = out.encoder.weights * out.throwaway_decoder.weights;  // d_U x d_t
  const Vector offset = out.throwaway_decoder.weights.transpose() * out.encoder.bias + out.throwaway_decoder.bias;
  const Eigen::RowVectorXd u_mean = u_fit.colwise().mean();
  const Matrix centered = u_fit.rowwise() - u_mean;
  const Matrix pred = centered * m;
  const Eigen::MatrixXd cov = (pred.transpose() * pred) / static_cast<double>(pred.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Vector lambda = es.eigenvalues().reverse();
  const Eigen::MatrixXd dirs = es.eigenvectors().rowwise().reverse();
  const double top = lambda.size() ? std::max(lambda(0), 0.0) : 0.0;
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < lambda.size() && rank < latent_dim; ++k)
    if (top > 0.0 && lambda(k) > 0.0 && std::sqrt(lambda(k)) >= tolerance * std::sqrt(top)) ++rank;

  const auto L = static_cast<Eigen::Index>(latent_dim);
  const auto r = static_cast<Eigen::Index>(rank);
  Matrix enc = Matrix::Zero(m.rows(), L);
  Matrix dec = Matrix::Zero(L, m.cols());
  for (Eigen::Index k = 0; k < r; ++k) {
    const double s = std::sqrt(lambda(k));
    enc.col(k) = m * dirs.col(k) / s;
    dec.row(k) = s * dirs.col(k).transpose();
  }
  out.encoder.weights = enc;
  out.encoder.bias = -(u_mean * enc).transpose();
  out.throwaway_decoder.weights = dec;
  out.throwaway_decoder.bias = (u_mean * m).transpose() + offset;
  out.retained_rank = rank;
}

/// Trains U -> latent -> target on the negative correlation loss, then keeps
/// the encoder half.
inline EncoderTraining train_encoder(const AlignedDataset& ds, const std::string& target_id, const TrainConfig& cfg,
                                     const Split* split_rows = nullptr) {
  cfg.validate();
  const Split sp = split_rows ? *split_rows : split(ds);
  const FitValidation fv = validation_split(ds.corpus(), sp.train, cfg.validation_fraction);
  const Matrix& u = ds.universal().values;
  const Matrix& t = ds.bundle(target_id).values;
  const Matrix u_fit = take_rows(u, fv.fit), t_fit = take_rows(t, fv.fit);
  const Matrix u_val = take_rows(u, fv.validation), t_val = take_rows(t, fv.validation);

  std::mt19937_64 rng(derive_seed(cfg.seed, {"encoder", target_id}));
  const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
  EncoderTraining out;
  out.encoder = {uniform_init(u.cols(), L, rng), Vector::Zero(L), MapKind::Encoder};
  out.throwaway_decoder = {uniform_init(L, t.cols(), rng), Vector::Zero(t.cols()), MapKind::Decoder};

  auto forward = [&](const Matrix& x) { return out.throwaway_decoder.apply(out.encoder.apply(x)); };
  EarlyStopping stop(cfg.patience);
  EncoderTraining best = out;
  stop.improved(neg_corr_loss(forward(u_val), t_val));
  BatchSampler sampler(fv.fit.size(), cfg.batch_size, rng);
  std::size_t b = 0;
  for (; b < cfg.max_batches; ++b) {
    const RowIndex idx = sampler.next();
    const Matrix xb = take_rows(u_fit, idx), yb = take_rows(t_fit, idx);
    const Matrix hb = out.encoder.apply(xb);
    const Matrix pb = out.throwaway_decoder.apply(hb);
    const LossGrad lg = neg_corr_loss_grad(pb, yb);
    check_finite_loss(lg.loss, b, "train_encoder(" + target_id + ")");
    const Matrix g_dec = hb.transpose() * lg.grad;
    const Matrix g_hidden = lg.grad * out.throwaway_decoder.weights.transpose();
    const Matrix g_enc = xb.transpose() * g_hidden;
    out.throwaway_decoder.weights -= cfg.lr_encoder * g_dec;
    out.encoder.weights -= cfg.lr_encoder * g_enc;
    // Biases do not affect a correlation loss.
    const double v = neg_corr_loss(forward(u_val), t_val);
    check_finite_loss(v, b, "train_encoder(" + target_id + ") validation");
    if (stop.improved(v)) {
      best.encoder = out.encoder;
      best.throwaway_decoder = out.throwaway_decoder;
    } else if (stop.should_stop()) {
      ++b;
      out.log.stopped_early = true;
      break;
    }
  }
  out.log.batches = b;
  out.log.best_validation = stop.best();
  out.encoder = best.encoder;
  out.throwaway_decoder = best.throwaway_decoder;
  prune_to_prediction_subspace(out, u_fit, cfg.latent_dim, cfg.rank_tolerance);
  if (!out.encoder.weights.allFinite() || !out.throwaway_decoder.weights.allFinite())
    throw NumericError("train_encoder(" + target_id + "): non-finite weights");
  return out;
}

inline LatentDataset encode(const LinearMap& encoder, const std::string& rep_id, const Matrix& universal) {
  require(encoder.kind == MapKind::Encoder, "encode: map is not an encoder");
  return {rep_id, encoder.apply(universal)};
}

// ---------------------------------------------------------------------------
// Decoders

struct DecoderTraining {
  LinearMap decoder;
  TrainLog log;
};

/// SGD on mean squared error from one latent space to one target. Constant
/// target columns are fitted exactly by the bias with zero weights.
inline DecoderTraining train_decoder(const LatentDataset& latent, const FeatureBundle& target, const TokenCorpus& corpus,
                                     const RowIndex& train_rows, const TrainConfig& cfg) {
  cfg.validate();
  require(latent.values.rows() == target.values.rows(), "train_decoder: latent and target rows differ");
  const FitValidation fv = validation_split(corpus, train_rows, cfg.validation_fraction);
  const Matrix l_fit = take_rows(latent.values, fv.fit), t_fit = take_rows(target.values, fv.fit);
  const Matrix l_val = take_rows(latent.values, fv.validation), t_val = take_rows(target.values, fv.validation);

  std::mt19937_64 rng(derive_seed(cfg.seed, {"decoder", latent.rep_id, target.spec.id}));
  DecoderTraining out;
  out.decoder = {uniform_init(latent.values.cols(), target.values.cols(), rng), t_fit.colwise().mean().transpose(),
                 MapKind::Decoder};
  std::vector<bool> constant(static_cast<std::size_t>(t_fit.cols()));
  for (Eigen::Index c = 0; c < t_fit.cols(); ++c) {
    constant[static_cast<std::size_t>(c)] = t_fit.col(c).maxCoeff() == t_fit.col(c).minCoeff();
    if (constant[static_cast<std::size_t>(c)]) {
      out.decoder.weights.col(c).setZero();
      out.decoder.bias(c) = t_fit(0, c);
    }
  }
  auto freeze = [&](Matrix& gw, Vector& gb) {
    for (Eigen::Index c = 0; c < gw.cols(); ++c)
      if (constant[static_cast<std::size_t>(c)]) {
        gw.col(c).setZero();
        gb(c) = 0.0;
      }
  };

  EarlyStopping stop(cfg.patience);
  LinearMap best = out.decoder;
  stop.improved(mse_loss_grad(out.decoder.apply(l_val), t_val).loss);
  BatchSampler sampler(fv.fit.size(), cfg.batch_size, rng);
  std::size_t b = 0;
  for (; b < cfg.max_batches; ++b) {
    const RowIndex idx = sampler.next();
    const Matrix xb = take_rows(l_fit, idx), yb = take_rows(t_fit, idx);
    const LossGrad lg = mse_loss_grad(out.decoder.apply(xb), yb);
    check_finite_loss(lg.loss, b, "train_decoder(" + latent.rep_id + "->" + target.spec.id + ")");
    Matrix gw = xb.transpose() * lg.grad;
    Vector gb = lg.grad.colwise().sum().transpose();
    freeze(gw, gb);
    out.decoder.weights -= cfg.lr_decoder * gw;
    out.decoder.bias -= cfg.lr_decoder * gb;
    const double v = mse_loss_grad(out.decoder.apply(l_val), t_val).loss;
    check_finite_loss(v, b, "train_decoder(" + latent.rep_id + "->" + target.spec.id + ") validation");
    if (stop.improved(v)) {
      best = out.decoder;
    } else if (stop.should_stop()) {
      ++b;
      out.log.stopped_early = true;
      break;
    }
  }
  out.log.batches = b;
  out.log.best_validation = stop.best();
  out.decoder = best;
  if (!out.decoder.weights.allFinite() || !out.decoder.bias.allFinite())
    throw NumericError("train_decoder: non-finite weights");
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline void write_linear_map(const LinearMap& map, const fs::path& path, Header provenance = {}) {
  Matrix m(map.weights.rows() + 1, map.weights.cols());
  m.topRows(map.weights.rows()) = map.weights;
  m.row(map.weights.rows()) = map.bias.transpose();
  provenance.set("kind", kind_name(map.kind));
  provenance.set("d_in", static_cast<long long>(map.d_in()));
  provenance.set("d_out", static_cast<long long>(map.d_out()));
  provenance.set("layout", "weights-then-bias");
  write_matrix_file(path, m, provenance, DType::F64);
}

inline LinearMap read_linear_map(const fs::path& path, Header* header_out = nullptr) {
  auto f = read_matrix_file(path);
  const auto kind = f.header.get("kind");
  require(kind == "encoder" || kind == "decoder", path.string() + ": not a linear map");
  const auto d_in = f.header.get_int("d_in"), d_out = f.header.get_int("d_out");
  if (f.data.rows() != d_in + 1 || f.data.cols() != d_out) throw IoError(path.string() + ": map shape mismatch");
  LinearMap map;
  map.kind = kind == "encoder" ? MapKind::Encoder : MapKind::Decoder;
  map.weights = f.data.topRows(d_in);
  map.bias = f.data.row(d_in).transpose();
  if (header_out) *header_out = f.header;
  return map;
}

// ---------------------------------------------------------------------------
// In-memory driver and hyperparameter search

struct TransferGrid {
  std::vector<std::string> ids;
  std::vector<LinearMap> encoders;
  std::vector<LatentDataset> latents;
  // decoders[s][t]: source latent s -> target t
  std::vector<std::vector<LinearMap>> decoders;
  // test_mse[t][s]: per-test-row MSE of decoder s -> t
  std::vector<std::vector<Vector>> test_mse;
};

/// Trains every encoder, then every decoder, sequentially. The pipeline
/// runs the same jobs through its worker pool.
inline TransferGrid train_transfer_grid(const AlignedDataset& ds, const TrainConfig& cfg) {
  const Split sp = split(ds);
  TransferGrid g;
  g.ids = ds.ids();
  const std::size_t n = g.ids.size();
  for (const auto& id : g.ids) {
    auto et = train_encoder(ds, id, cfg, &sp);
    g.latents.push_back(encode(et.encoder, id, ds.universal().values));
    g.encoders.push_back(std::move(et.encoder));
  }
  g.decoders.assign(n, {});
  g.test_mse.assign(n, std::vector<Vector>(n));
  for (std::size_t s = 0; s < n; ++s) {
    const Matrix l_test = take_rows(g.latents[s].values, sp.test);
    for (std::size_t t = 0; t < n; ++t) {
      auto dt = train_decoder(g.latents[s], ds.bundles()[t], ds.corpus(), sp.train, cfg);
      g.test_mse[t][s] = decoder_sample_mse(dt.decoder, l_test, take_rows(ds.bundles()[t].values, sp.test));
      g.decoders[s].push_back(std::move(dt.decoder));
    }
  }
  return g;
}

struct SearchGrid {
  std::vector<std::size_t> latent_dims{10, 20, 50};
  std::vector<double> learning_rates{1e-6, 2e-5, 1e-4, 2e-4};
  std::vector<std::size_t> batch_sizes{256, 512, 1024};
  std::size_t max_sweeps = 3;
};

/// Mean validation MSE of the self decoders, the objective used by the search.
inline double self_transfer_objective(const AlignedDataset& ds, const TrainConfig& cfg) {
  const Split sp = split(ds);
  const FitValidation fv = validation_split(ds.corpus(), sp.train, cfg.validation_fraction);
  double total = 0.0;
  for (const auto& id : ds.ids()) {
    try {
      auto et = train_encoder(ds, id, cfg, &sp);
      auto lat = encode(et.encoder, id, ds.universal().values);
      auto dt = train_decoder(lat, ds.bundle(id), ds.corpus(), sp.train, cfg);
      total += decoder_sample_mse(dt.decoder, take_rows(lat.values, fv.validation),
                                  take_rows(ds.bundle(id).values, fv.validation)).mean();
    } catch (const NumericError&) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return total / static_cast<double>(ds.size());
}

/// Coordinate descent over latent size, encoder and decoder learning rates,
/// and batch size, starting from `start`.
inline TrainConfig coordinate_descent_search(const AlignedDataset& ds, TrainConfig start, const SearchGrid& grid,
                                             const std::function<void(const TrainConfig&, double)>& on_eval = {}) {
  auto eval = [&](const TrainConfig& c) {
    const double v = self_transfer_objective(ds, c);
    if (on_eval) on_eval(c, v);
    return v;
  };
  double best = eval(start);
  for (std::size_t sweep = 0; sweep < grid.max_sweeps; ++sweep) {
    bool changed = false;
    auto try_values = [&](auto values, auto setter) {
      for (const auto& v : values) {
        TrainConfig c = start;
        setter(c, v);
        if (c.fingerprint() == start.fingerprint()) continue;
        const double score = eval(c);
        if (score < best) {
          best = score;
          start = c;
          changed = true;
        }
      }
    };
    try_values(grid.latent_dims, [](TrainConfig& c, std::size_t v) { c.latent_dim = v; });
    try_values(grid.learning_rates, [](TrainConfig& c, double v) { c.lr_encoder = v; });
    try_values(grid.learning_rates, [](TrainConfig& c, double v) { c.lr_decoder = v; });
    try_values(grid.batch_sizes, [](TrainConfig& c, std::size_t v) { c.batch_size = v; });
    if (!changed) break;
  }
  return start;
}

}  // namespace repspace
