#pragma once

// Channelwise encoding models: word-rate to TR-rate resampling, FIR delay
// expansion, ridge regression with Monte Carlo cross-validated penalties,
// and correlation scoring on held-out data.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/feature_store.hpp"
#include "repspace/io.hpp"

namespace repspace {

struct ResponseDataset {
  Matrix responses;  // M x V, TR-rate
  double tr_seconds = 2.0;
  RowIndex train_trs;
  RowIndex test_trs;
  std::vector<StoryRange> story_trs;  // TR range of each corpus story
  std::vector<std::string> channel_ids;
  std::vector<std::string> channel_labels;  // optional metadata, e.g. anatomical label
};

struct DelayedDesign {
  Matrix X;                 // M x (d * delays.size()), blocks ordered by delay then feature
  std::vector<int> delays;  // TR units
};

struct EncodingResult {
  std::string rep_id;
  std::vector<double> alphas;  // per channel
  Matrix weights;              // p x V on the z-scored design
  Vector rho;                  // per channel test correlation
  std::vector<bool> undefined;
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int k = 0; k < 10; ++k) g.push_back(std::pow(10.0, 5.0 * k / 9.0));
  return g;
}

// ---------------------------------------------------------------------------
// Resampling and delays

/// Averages feature rows into TR bins [m*TR, (m+1)*TR). Empty bins repeat the
/// previous bin (zeros before the first word). Words at or past M*TR are dropped.
inline Matrix downsample(const Matrix& values, const std::vector<double>& word_times, double tr_seconds,
                         std::size_t num_trs) {
  if (word_times.size() != static_cast<std::size_t>(values.rows()))
    throw ValidationError("downsample: word_times has " + std::to_string(word_times.size()) +
                          " entries for " + std::to_string(values.rows()) + " feature rows");
  require(tr_seconds > 0.0, "downsample: tr_seconds must be positive");
  require(num_trs >= 1, "downsample: need at least one TR");
  for (std::size_t k = 1; k < word_times.size(); ++k)
    require(word_times[k] >= word_times[k - 1], "downsample: word_times must be nondecreasing");

  const auto M = static_cast<Eigen::Index>(num_trs);
  Matrix out = Matrix::Zero(M, values.cols());
  std::vector<std::size_t> counts(num_trs, 0);
  for (std::size_t j = 0; j < word_times.size(); ++j) {
    const double t = word_times[j];
    if (t < 0.0) continue;
    const auto bin = static_cast<std::size_t>(std::floor(t / tr_seconds));
    if (bin >= num_trs) continue;
    out.row(static_cast<Eigen::Index>(bin)) += values.row(static_cast<Eigen::Index>(j));
    ++counts[bin];
  }
  for (Eigen::Index m = 0; m < M; ++m) {
    const auto c = counts[static_cast<std::size_t>(m)];
    if (c > 0)
      out.row(m) /= static_cast<double>(c);
    else if (m > 0)
      out.row(m) = out.row(m - 1);
  }
  return out;
}

/// TR count covering every word of a story.
inline std::size_t trs_for_story(const std::vector<double>& word_times, double tr_seconds) {
  if (word_times.empty()) return 1;
  return static_cast<std::size_t>(std::floor(word_times.back() / tr_seconds)) + 1;
}

/// Story-local word onsets: the story's own times when present, otherwise a
/// uniform rate.
inline std::vector<double> story_word_times(const Story& s, double words_per_second) {
  if (!s.word_times.empty()) return s.word_times;
  require(words_per_second > 0.0, "words_per_second must be positive");
  std::vector<double> t(s.token_count);
  for (std::size_t j = 0; j < s.token_count; ++j) t[j] = static_cast<double>(j) / words_per_second;
  return t;
}

struct TrTimeline {
  std::vector<StoryRange> story_trs;
  RowIndex train_trs;
  RowIndex test_trs;
  std::size_t total_trs = 0;
};

inline TrTimeline tr_timeline(const TokenCorpus& corpus, double tr_seconds, double words_per_second) {
  TrTimeline tl;
  for (const auto& s : corpus.stories()) {
    const std::size_t m = trs_for_story(story_word_times(s, words_per_second), tr_seconds);
    tl.story_trs.push_back({tl.total_trs, tl.total_trs + m});
    auto& dst = s.role == Role::Train ? tl.train_trs : tl.test_trs;
    for (std::size_t i = tl.total_trs; i < tl.total_trs + m; ++i) dst.push_back(i);
    tl.total_trs += m;
  }
  return tl;
}

/// Downsamples every story independently and stacks the TR-rate rows.
inline Matrix downsample_corpus(const Matrix& values, const TokenCorpus& corpus, double tr_seconds,
                                double words_per_second) {
  require(static_cast<std::size_t>(values.rows()) == corpus.total_tokens(),
          "downsample_corpus: feature rows do not match corpus tokens");
  const auto tl = tr_timeline(corpus, tr_seconds, words_per_second);
  Matrix out(static_cast<Eigen::Index>(tl.total_trs), values.cols());
  for (std::size_t k = 0; k < corpus.stories().size(); ++k) {
    const auto& s = corpus.stories()[k];
    const auto& wr = corpus.ranges()[k];
    const auto& tr = tl.story_trs[k];
    const Matrix block = values.middleRows(static_cast<Eigen::Index>(wr.begin),
                                           static_cast<Eigen::Index>(wr.end - wr.begin));
    out.middleRows(static_cast<Eigen::Index>(tr.begin), static_cast<Eigen::Index>(tr.end - tr.begin)) =
        downsample(block, story_word_times(s, words_per_second), tr_seconds, tr.end - tr.begin);
  }
  return out;
}

inline void validate_delays(const std::vector<int>& delays) {
  require(!delays.empty(), "delays must be nonempty");
  for (std::size_t a = 0; a < delays.size(); ++a) {
    require(delays[a] >= 1, "delays must be positive");
    for (std::size_t b = a + 1; b < delays.size(); ++b) require(delays[a] != delays[b], "delays must be distinct");
  }
}

/// Block for delay δ at row m holds X row m-δ (zero before the start).
inline DelayedDesign delay_expand(const Matrix& x_tr, const std::vector<int>& delays) {
  validate_delays(delays);
  const Eigen::Index M = x_tr.rows();
  const Eigen::Index d = x_tr.cols();
  DelayedDesign out{Matrix::Zero(M, d * static_cast<Eigen::Index>(delays.size())), delays};
  for (std::size_t b = 0; b < delays.size(); ++b) {
    const Eigen::Index shift = delays[b];
    if (shift >= M) continue;
    out.X.block(shift, static_cast<Eigen::Index>(b) * d, M - shift, d) = x_tr.topRows(M - shift);
  }
  return out;
}

/// Delay expansion that restarts at every story boundary.
inline DelayedDesign delay_expand_stories(const Matrix& x_tr, const std::vector<StoryRange>& story_trs,
                                          const std::vector<int>& delays) {
  validate_delays(delays);
  DelayedDesign out{Matrix::Zero(x_tr.rows(), x_tr.cols() * static_cast<Eigen::Index>(delays.size())), delays};
  for (const auto& r : story_trs) {
    const auto len = static_cast<Eigen::Index>(r.end - r.begin);
    out.X.middleRows(static_cast<Eigen::Index>(r.begin), len) =
        delay_expand(x_tr.middleRows(static_cast<Eigen::Index>(r.begin), len), delays).X;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ridge

/// Thin SVD of a design, reused across penalties and targets.
class RidgeSolver {
 public:
  explicit RidgeSolver(const Matrix& X) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(X), Eigen::ComputeThinU | Eigen::ComputeThinV);
    s_ = svd.singularValues();
    u_ = svd.matrixU();
    v_ = svd.matrixV();
    const double tol = s_.size() ? std::numeric_limits<double>::epsilon() *
                                       static_cast<double>(std::max(X.rows(), X.cols())) * s_(0)
                                 : 0.0;
    rank_ = 0;
    for (Eigen::Index i = 0; i < s_.size(); ++i) rank_ += s_(i) > tol ? 1 : 0;
    full_column_rank_ = rank_ == X.cols();
  }

  bool full_column_rank() const { return full_column_rank_; }

  /// Shrinkage factors s/(s²+α); singular directions below the rank cutoff
  /// are dropped, which gives the minimum-norm solution at α = 0.
  Vector factors(double alpha) const {
    Vector f(s_.size());
    for (Eigen::Index i = 0; i < s_.size(); ++i)
      f(i) = i < rank_ ? s_(i) / (s_(i) * s_(i) + alpha) : 0.0;
    return f;
  }

  Matrix solve(const Matrix& Y, double alpha) const {
    require(alpha >= 0.0, "ridge: alpha must be nonnegative");
    require(Y.rows() == u_.rows(), "ridge: target rows do not match design");
    return v_ * factors(alpha).asDiagonal() * (u_.transpose() * Y);
  }

  const Eigen::MatrixXd& u() const { return u_; }
  const Eigen::MatrixXd& v() const { return v_; }

 private:
  Vector s_;
  Eigen::MatrixXd u_, v_;
  Eigen::Index rank_ = 0;
  bool full_column_rank_ = true;
};

struct RidgeFit {
  Vector weights;
  bool min_norm = false;  // alpha = 0 on a rank-deficient design
};

/// argmin ||Xw - y||² + alpha ||w||² (no intercept).
inline RidgeFit ridge_fit(const Matrix& X, const Vector& y, double alpha) {
  require(X.rows() >= 1, "ridge_fit: need at least one row");
  require(y.size() == X.rows(), "ridge_fit: y length differs from X rows");
  require(alpha >= 0.0, "ridge_fit: alpha must be nonnegative");
  RidgeSolver solver(X);
  RidgeFit out;
  out.weights = solver.solve(Matrix(y), alpha).col(0);
  out.min_norm = alpha == 0.0 && !solver.full_column_rank();
  return out;
}

struct CvOptions {
  std::vector<double> alphas = default_alpha_grid();
  int folds = 50;
  double holdout = 0.2;
  std::uint64_t seed = 0;
};

struct CvResult {
  std::vector<double> alphas;  // chosen per channel
  Matrix mean_scores;          // grid x V mean held-out correlation
  std::size_t degenerate = 0;  // (fold, channel) pairs with a constant held-out target
};

/// Monte Carlo cross-validation: each fold holds out a seeded random fraction
/// of the rows, fits on the rest (centered), and scores every grid penalty by
/// held-out correlation. Channels pick the penalty with the best fold mean.
inline CvResult mc_cv_alpha(const Matrix& X, const Matrix& Y, const CvOptions& opt) {
  require(!opt.alphas.empty(), "mc_cv_alpha: alpha grid is empty");
  require(opt.holdout > 0.0 && opt.holdout < 1.0, "mc_cv_alpha: holdout must lie in (0, 1)");
  require(opt.folds >= 1, "mc_cv_alpha: folds must be >= 1");
  require(X.rows() == Y.rows(), "mc_cv_alpha: X and Y row counts differ");
  const auto N = static_cast<std::size_t>(X.rows());
  const auto n_hold = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(opt.holdout * static_cast<double>(N))));
  require(N > n_hold + 1, "mc_cv_alpha: too few rows for the requested holdout");
  const Eigen::Index V = Y.cols();
  const auto G = static_cast<Eigen::Index>(opt.alphas.size());

  CvResult out;
  out.mean_scores = Matrix::Zero(G, V);
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> perm(N);
  for (int f = 0; f < opt.folds; ++f) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    RowIndex hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
    RowIndex fit(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
    std::sort(hold.begin(), hold.end());
    std::sort(fit.begin(), fit.end());

    Matrix Xf = take_rows(X, fit), Yf = take_rows(Y, fit);
    Matrix Xh = take_rows(X, hold), Yh = take_rows(Y, hold);
    const Eigen::RowVectorXd xm = Xf.colwise().mean(), ym = Yf.colwise().mean();
    Xf.rowwise() -= xm;
    Yf.rowwise() -= ym;
    Xh.rowwise() -= xm;

    RidgeSolver solver(Xf);
    const Eigen::MatrixXd utY = solver.u().transpose() * Yf;
    const Eigen::MatrixXd xv = Xh * solver.v();

    std::vector<bool> constant(static_cast<std::size_t>(V));
    for (Eigen::Index v = 0; v < V; ++v) {
      const double lo = Yh.col(v).minCoeff(), hi = Yh.col(v).maxCoeff();
      constant[static_cast<std::size_t>(v)] = !(hi > lo);
      if (constant[static_cast<std::size_t>(v)]) ++out.degenerate;
    }
    for (Eigen::Index g = 0; g < G; ++g) {
      const Eigen::MatrixXd pred = xv * solver.factors(opt.alphas[static_cast<std::size_t>(g)]).asDiagonal() * utY;
      for (Eigen::Index v = 0; v < V; ++v) {
        if (constant[static_cast<std::size_t>(v)]) continue;
        out.mean_scores(g, v) += pearson(pred.col(v), Yh.col(v));
      }
    }
  }
  out.mean_scores /= static_cast<double>(opt.folds);
  out.alphas.resize(static_cast<std::size_t>(V));
  for (Eigen::Index v = 0; v < V; ++v) {
    Eigen::Index best = 0;
    for (Eigen::Index g = 1; g < G; ++g)
      if (out.mean_scores(g, v) > out.mean_scores(best, v)) best = g;
    out.alphas[static_cast<std::size_t>(v)] = opt.alphas[static_cast<std::size_t>(best)];
  }
  return out;
}

struct Scores {
  Vector rho;
  std::vector<bool> undefined;
};

/// Per-channel Pearson correlation between X_test * W and Y_test.
inline Scores encoding_performance(const Matrix& weights, const Matrix& X_test, const Matrix& Y_test) {
  require(X_test.cols() == weights.rows(), "encoding_performance: design width differs from weight rows");
  require(Y_test.cols() == weights.cols(), "encoding_performance: channel count mismatch");
  require(X_test.rows() == Y_test.rows(), "encoding_performance: test row counts differ");
  const Matrix pred = X_test * weights;
  Scores s;
  s.rho.resize(Y_test.cols());
  s.undefined.resize(static_cast<std::size_t>(Y_test.cols()));
  for (Eigen::Index v = 0; v < Y_test.cols(); ++v) {
    bool undef = false;
    s.rho(v) = pearson(pred.col(v), Y_test.col(v), &undef);
    s.undefined[static_cast<std::size_t>(v)] = undef;
  }
  return s;
}

/// Column statistics from training rows; zero-variance columns get unit scale.
struct Standardizer {
  Eigen::RowVectorXd mean, scale;

  explicit Standardizer(const Matrix& train) {
    mean = train.colwise().mean();
    scale.resize(train.cols());
    for (Eigen::Index c = 0; c < train.cols(); ++c) {
      const double var = (train.col(c).array() - mean(c)).square().mean();
      scale(c) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
  }
  Matrix apply(const Matrix& x) const {
    Matrix out = x.rowwise() - mean;
    return out.array().rowwise() / scale.array();
  }
};

/// Fits one encoding model per channel: z-scores the design with training
/// statistics, selects each channel's penalty by Monte Carlo CV, refits on
/// all training rows and scores on the test rows.
inline EncodingResult fit_encoding_model(const std::string& rep_id, const Matrix& X_train, const Matrix& Y_train,
                                         const Matrix& X_test, const Matrix& Y_test, const CvOptions& cv) {
  require(X_train.rows() == Y_train.rows(), "fit_encoding_model: train rows differ");
  require(X_test.rows() == Y_test.rows(), "fit_encoding_model: test rows differ");
  const Standardizer z(X_train);
  const Matrix Xtr = z.apply(X_train), Xte = z.apply(X_test);
  const Eigen::RowVectorXd ym = Y_train.colwise().mean();
  const Matrix Ytr = Y_train.rowwise() - ym;

  const CvResult sel = mc_cv_alpha(Xtr, Ytr, cv);
  EncodingResult res;
  res.rep_id = rep_id;
  res.alphas = sel.alphas;
  res.weights = Matrix::Zero(Xtr.cols(), Ytr.cols());

  RidgeSolver solver(Xtr);
  std::vector<double> unique = sel.alphas;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  for (double a : unique) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index v = 0; v < Ytr.cols(); ++v)
      if (sel.alphas[static_cast<std::size_t>(v)] == a) cols.push_back(v);
    Matrix Ysub(Ytr.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) Ysub.col(static_cast<Eigen::Index>(k)) = Ytr.col(cols[k]);
    const Matrix W = solver.solve(Ysub, a);
    for (std::size_t k = 0; k < cols.size(); ++k) res.weights.col(cols[k]) = W.col(static_cast<Eigen::Index>(k));
  }
  const Scores s = encoding_performance(res.weights, Xte, Y_test);
  res.rho = s.rho;
  res.undefined = s.undefined;
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string format_ranges(const RowIndex& rows) {
  std::string out;
  std::size_t k = 0;
  while (k < rows.size()) {
    std::size_t e = k;
    while (e + 1 < rows.size() && rows[e + 1] == rows[e] + 1) ++e;
    if (!out.empty()) out += ',';
    out += std::to_string(rows[k]) + "-" + std::to_string(rows[e] + 1);
    k = e + 1;
  }
  return out;
}

inline RowIndex parse_ranges(const std::string& text) {
  RowIndex out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const auto item = text.substr(pos, comma - pos);
    const auto dash = item.find('-');
    if (dash == std::string::npos) throw IoError("malformed row range '" + item + "'");
    const auto b = std::stoull(item.substr(0, dash)), e = std::stoull(item.substr(dash + 1));
    for (auto i = b; i < e; ++i) out.push_back(i);
    pos = comma + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& items, char sep = ',') {
  std::string out;
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (k) out += sep;
    out += items[k];
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    auto e = text.find(sep, pos);
    out.push_back(text.substr(pos, e == std::string::npos ? std::string::npos : e - pos));
    if (e == std::string::npos) break;
    pos = e + 1;
  }
  return out;
}

/// Response file: f32le, time-major (row = TR).
inline void write_responses(const ResponseDataset& r, const fs::path& path, Header extra = {}) {
  require(r.responses.allFinite(), "responses contain non-finite values");
  Header h = std::move(extra);
  h.set("kind", "responses");
  h.set("tr_seconds", r.tr_seconds);
  h.set("train_trs", format_ranges(r.train_trs));
  h.set("test_trs", format_ranges(r.test_trs));
  std::vector<std::string> story;
  for (const auto& s : r.story_trs) story.push_back(std::to_string(s.begin) + "-" + std::to_string(s.end));
  h.set("story_trs", join(story));
  h.set("channel_ids", join(r.channel_ids));
  if (!r.channel_labels.empty()) h.set("channel_labels", join(r.channel_labels));
  h.set("layout", "time-major");
  write_matrix_file(path, r.responses, h, DType::F32);
}

inline ResponseDataset read_responses(const fs::path& path) {
  auto f = read_matrix_file(path);
  if (f.header.get_or("kind", "") != "responses") throw IoError(path.string() + ": not a response file");
  ResponseDataset r;
  r.responses = std::move(f.data);
  r.tr_seconds = f.header.get_double("tr_seconds");
  r.train_trs = parse_ranges(f.header.get("train_trs"));
  r.test_trs = parse_ranges(f.header.get("test_trs"));
  for (const auto& s : split_list(f.header.get_or("story_trs", ""))) {
    const auto dash = s.find('-');
    r.story_trs.push_back({std::stoull(s.substr(0, dash)), std::stoull(s.substr(dash + 1))});
  }
  r.channel_ids = split_list(f.header.get_or("channel_ids", ""));
  r.channel_labels = split_list(f.header.get_or("channel_labels", ""));
  require(static_cast<Eigen::Index>(r.channel_ids.size()) == r.responses.cols(),
          path.string() + ": channel id count differs from response columns");
  return r;
}

inline void write_encoding_result(const EncodingResult& e, const fs::path& path, Header extra = {}) {
  // Row 0: rho, row 1: alpha, row 2: undefined flag, rows 3..: weights.
  Matrix m(3 + e.weights.rows(), e.rho.size());
  m.row(0) = e.rho.transpose();
  for (Eigen::Index v = 0; v < e.rho.size(); ++v) {
    m(1, v) = e.alphas[static_cast<std::size_t>(v)];
    m(2, v) = e.undefined[static_cast<std::size_t>(v)] ? 1.0 : 0.0;
  }
  m.bottomRows(e.weights.rows()) = e.weights;
  extra.set("kind", "encoding-result");
  extra.set("rep_id", e.rep_id);
  extra.set("layout", "rho,alpha,undefined,weights");
  write_matrix_file(path, m, extra, DType::F64);
}

inline EncodingResult read_encoding_result(const fs::path& path) {
  auto f = read_matrix_file(path);
  if (f.header.get_or("kind", "") != "encoding-result") throw IoError(path.string() + ": not an encoding result");
  EncodingResult e;
  e.rep_id = f.header.get("rep_id");
  e.rho = f.data.row(0).transpose();
  for (Eigen::Index v = 0; v < f.data.cols(); ++v) {
    e.alphas.push_back(f.data(1, v));
    e.undefined.push_back(f.data(2, v) != 0.0);
  }
  e.weights = f.data.bottomRows(f.data.rows() - 3);
  return e;
}

}  // namespace repspace
