#pragma once

// Token-aligned feature bundles, the corpus they are aligned to, and the
// train/test split at story boundaries.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repspace/common.hpp"
#include "repspace/io.hpp"

namespace repspace {

struct RepresentationSpec {
  std::string id;
  std::size_t dim = 0;
  std::string model_group;
  std::optional<std::size_t> layer_index;
  // Unset means "1 / number of representations in model_group", resolved by align().
  std::optional<double> mds_weight;
};

struct FeatureBundle {
  RepresentationSpec spec;
  Matrix values;  // token_count x dim, working precision

  std::size_t token_count() const { return static_cast<std::size_t>(values.rows()); }
};

enum class Role { Train, Test };

inline const char* role_name(Role r) { return r == Role::Train ? "train" : "test"; }

inline Role parse_role(const std::string& s) {
  if (s == "train") return Role::Train;
  if (s == "test") return Role::Test;
  throw ValidationError("unknown story role '" + s + "' (expected train|test)");
}

struct Story {
  std::string id;
  Role role = Role::Train;
  std::size_t token_count = 0;
  std::vector<std::string> tokens;  // optional; empty when only counts are known
  std::vector<double> word_times;   // optional story-local onset times in seconds
};

struct StoryRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

class TokenCorpus {
 public:
  TokenCorpus() = default;
  explicit TokenCorpus(std::vector<Story> stories) : stories_(std::move(stories)) {
    std::set<std::string> seen;
    for (auto& s : stories_) {
      require(!s.id.empty(), "story id must be nonempty");
      require(seen.insert(s.id).second, "duplicate story id '" + s.id + "'");
      if (!s.tokens.empty()) {
        require(s.token_count == 0 || s.token_count == s.tokens.size(),
                "story '" + s.id + "': token_count disagrees with token list");
        s.token_count = s.tokens.size();
      }
      require(s.token_count > 0, "story '" + s.id + "' has no tokens");
      require(s.word_times.empty() || s.word_times.size() == s.token_count,
              "story '" + s.id + "': word_times length differs from token count");
      ranges_.push_back({total_, total_ + s.token_count});
      total_ += s.token_count;
    }
  }

  const std::vector<Story>& stories() const { return stories_; }
  const std::vector<StoryRange>& ranges() const { return ranges_; }
  std::size_t total_tokens() const { return total_; }

 private:
  std::vector<Story> stories_;
  std::vector<StoryRange> ranges_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Bundle I/O

inline void validate_bundle(const FeatureBundle& b) {
  require(!b.spec.id.empty(), "bundle id must be nonempty");
  require(b.spec.dim >= 1, "bundle '" + b.spec.id + "': dim must be >= 1");
  require(b.values.rows() >= 1, "bundle '" + b.spec.id + "': token_count must be >= 1");
  require(static_cast<std::size_t>(b.values.cols()) == b.spec.dim,
          "bundle '" + b.spec.id + "': values have " + std::to_string(b.values.cols()) +
              " columns but dim=" + std::to_string(b.spec.dim));
  require(!b.spec.mds_weight || *b.spec.mds_weight > 0.0,
          "bundle '" + b.spec.id + "': mds_weight must be positive");
  require(b.values.allFinite(), "bundle '" + b.spec.id + "': values contain non-finite entries");
}

inline Header bundle_header(const FeatureBundle& b) {
  Header h;
  h.set("id", b.spec.id);
  h.set("dim", b.spec.dim);
  h.set("token_count", b.token_count());
  h.set("model_group", b.spec.model_group);
  h.set("layer_index", b.spec.layer_index ? std::to_string(*b.spec.layer_index) : std::string("none"));
  h.set("mds_weight", b.spec.mds_weight ? Header::format_double(*b.spec.mds_weight) : std::string("auto"));
  h.set("dtype", "f32le");
  h.set("layout", "row-major");
  return h;
}

inline void write_bundle(const FeatureBundle& bundle, const fs::path& path) {
  validate_bundle(bundle);
  // Values that overflow single precision would not survive the round trip.
  const Matrix narrowed = bundle.values.cast<float>().cast<double>();
  require(narrowed.allFinite(), "bundle '" + bundle.spec.id + "': values overflow 32-bit storage");
  atomic_write(path, encode_container(bundle_header(bundle), encode_payload(bundle.values, DType::F32)));
}

inline FeatureBundle decode_bundle(std::string_view bytes, const std::string& origin) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "FBN", 3) == 0 && bytes[3] != '1')
    throw IoError(origin + ": unsupported container version '" + std::string(1, bytes[3]) + "'");
  auto raw = decode_container(bytes, origin);
  const Header& h = raw.header;
  if (h.get("dtype") != "f32le") throw IoError(origin + ": bundle dtype must be f32le");
  if (h.get("layout") != "row-major") throw IoError(origin + ": bundle layout must be row-major");
  const long long dim = h.get_int("dim");
  const long long tokens = h.get_int("token_count");
  if (dim <= 0) throw ValidationError(origin + ": dim must be >= 1");
  if (tokens <= 0) throw ValidationError(origin + ": token_count must be >= 1");
  FeatureBundle b;
  b.spec.id = h.get("id");
  b.spec.dim = static_cast<std::size_t>(dim);
  b.spec.model_group = h.get_or("model_group", "");
  const auto layer = h.get_or("layer_index", "none");
  if (layer != "none") {
    const long long li = h.get_int("layer_index");
    if (li < 0) throw ValidationError(origin + ": layer_index must be nonnegative");
    b.spec.layer_index = static_cast<std::size_t>(li);
  }
  const auto w = h.get_or("mds_weight", "auto");
  if (w != "auto") b.spec.mds_weight = h.get_double("mds_weight");
  b.values = decode_payload(raw.payload, tokens, dim, DType::F32, origin);
  validate_bundle(b);
  return b;
}

inline FeatureBundle read_bundle(const fs::path& path) {
  return decode_bundle(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Alignment

class AlignedDataset {
 public:
  AlignedDataset(TokenCorpus corpus, std::vector<FeatureBundle> bundles, std::string universal_id)
      : corpus_(std::move(corpus)), bundles_(std::move(bundles)), universal_id_(std::move(universal_id)) {}

  const TokenCorpus& corpus() const { return corpus_; }
  const std::vector<FeatureBundle>& bundles() const { return bundles_; }
  const std::string& universal_id() const { return universal_id_; }
  std::size_t size() const { return bundles_.size(); }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t k = 0; k < bundles_.size(); ++k)
      if (bundles_[k].spec.id == id) return k;
    throw ValidationError("unknown representation id '" + id + "'");
  }
  const FeatureBundle& bundle(const std::string& id) const { return bundles_[index_of(id)]; }
  const FeatureBundle& universal() const { return bundle(universal_id_); }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& b : bundles_) out.push_back(b.spec.id);
    return out;
  }
  std::vector<double> mds_weights() const {
    std::vector<double> out;
    for (const auto& b : bundles_) out.push_back(*b.spec.mds_weight);
    return out;
  }

 private:
  TokenCorpus corpus_;
  std::vector<FeatureBundle> bundles_;
  std::string universal_id_;
};

/// Validates token counts against the corpus and fixes the canonical
/// representation order (input order). Unset MDS weights become
/// 1 / (representations sharing the model group).
inline AlignedDataset align(const TokenCorpus& corpus, std::vector<FeatureBundle> bundles,
                            const std::string& universal_id) {
  require(!bundles.empty(), "align: no bundles");
  std::set<std::string> ids;
  std::set<std::pair<std::string, std::size_t>> layers;
  std::map<std::string, std::size_t> group_size;
  bool have_universal = false;
  for (const auto& b : bundles) {
    validate_bundle(b);
    require(ids.insert(b.spec.id).second, "align: duplicate bundle id '" + b.spec.id + "'");
    if (b.token_count() != corpus.total_tokens())
      throw ValidationError("align: bundle '" + b.spec.id + "' has " + std::to_string(b.token_count()) +
                            " tokens but the corpus has " + std::to_string(corpus.total_tokens()));
    if (b.spec.layer_index)
      require(layers.insert({b.spec.model_group, *b.spec.layer_index}).second,
              "align: duplicate (model_group, layer_index) for '" + b.spec.id + "'");
    ++group_size[b.spec.model_group.empty() ? b.spec.id : b.spec.model_group];
    have_universal |= b.spec.id == universal_id;
  }
  if (!have_universal) throw ValidationError("align: universal id '" + universal_id + "' is not among the bundles");
  for (auto& b : bundles) {
    if (!b.spec.mds_weight)
      b.spec.mds_weight = 1.0 / static_cast<double>(group_size[b.spec.model_group.empty() ? b.spec.id : b.spec.model_group]);
  }
  return AlignedDataset(corpus, std::move(bundles), universal_id);
}

struct Split {
  RowIndex train;
  RowIndex test;
};

/// Row indices of train and test stories, in corpus order.
inline Split split(const TokenCorpus& corpus) {
  Split s;
  for (std::size_t k = 0; k < corpus.stories().size(); ++k) {
    const auto& r = corpus.ranges()[k];
    auto& dst = corpus.stories()[k].role == Role::Train ? s.train : s.test;
    for (std::size_t i = r.begin; i < r.end; ++i) dst.push_back(i);
  }
  if (s.train.empty()) throw ValidationError("split: corpus has no train stories");
  if (s.test.empty()) throw ValidationError("split: corpus has no test stories");
  return s;
}

inline Split split(const AlignedDataset& ds) { return split(ds.corpus()); }

// ---------------------------------------------------------------------------
// Corpus manifest (JSON): {"stories": [{"id", "role", "tokens"|"token_count", "word_times"?}]}

inline nlohmann::json corpus_to_json(const TokenCorpus& corpus) {
  nlohmann::json stories = nlohmann::json::array();
  for (const auto& s : corpus.stories()) {
    nlohmann::json j{{"id", s.id}, {"role", role_name(s.role)}};
    if (!s.tokens.empty())
      j["tokens"] = s.tokens;
    else
      j["token_count"] = s.token_count;
    if (!s.word_times.empty()) j["word_times"] = s.word_times;
    stories.push_back(std::move(j));
  }
  return nlohmann::json{{"stories", stories}};
}

inline TokenCorpus corpus_from_json(const nlohmann::json& j) {
  require(j.contains("stories") && j["stories"].is_array(), "corpus manifest: missing 'stories' array");
  std::vector<Story> stories;
  for (const auto& sj : j["stories"]) {
    Story s;
    s.id = sj.at("id").get<std::string>();
    s.role = parse_role(sj.at("role").get<std::string>());
    if (sj.contains("tokens")) s.tokens = sj["tokens"].get<std::vector<std::string>>();
    if (sj.contains("token_count")) s.token_count = sj["token_count"].get<std::size_t>();
    if (sj.contains("word_times")) s.word_times = sj["word_times"].get<std::vector<double>>();
    stories.push_back(std::move(s));
  }
  return TokenCorpus(std::move(stories));
}

}  // namespace repspace
