#pragma once

// Multi-modal account datasets: metadata table, pooled text embeddings, a
// multi-relation graph, labels and splits. Includes the on-disk directory
// format, train-split normalization, a synthetic generator and the
// camouflage-edge perturbation.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rmnp/errors.hpp"
#include "rmnp/modality.hpp"
#include "rmnp/numerics.hpp"

namespace rmnp::data {

// Metadata column order. The first eight are counts/lengths, the rest form the
// boolean-derived block (ratio first).
inline constexpr std::array<std::string_view, 13> kMetadataColumns = {
    "followers_count",   "listed_count",     "statuses_count",        "friends_count", "favourites_count",
    "screen_name_length", "name_length",     "description_length",    "followers_friends_ratio",
    "default_profile",   "verified",         "default_profile_image", "geo_enabled"};
inline constexpr Eigen::Index kNumMetadata = 13;
inline constexpr Eigen::Index kNumNumeric = 8;
inline constexpr Eigen::Index kRatioColumn = 8;
inline constexpr Eigen::Index kFollowersColumn = 0;
inline constexpr Eigen::Index kFriendsColumn = 3;

inline constexpr int kUnlabeled = -1;
inline constexpr int kHuman = 0;
inline constexpr int kBot = 1;

/// followers / friends with a zero-friends account mapped to 0.
inline double followers_friends_ratio(double followers, double friends) {
  return friends == 0.0 ? 0.0 : followers / friends;
}

struct AccountTable {
  Matrix features;          // n x 13 in kMetadataColumns order
  bool normalized = false;  // z-scored numeric block may be negative

  [[nodiscard]] Eigen::Index size() const { return features.rows(); }

  void validate() const {
    if (features.cols() != kNumMetadata) {
      throw ContractError("AccountTable: expected 13 metadata columns");
    }
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      for (Eigen::Index c = 0; c < kNumMetadata; ++c) {
        const double v = features(i, c);
        if (!std::isfinite(v)) {
          throw ContractError("AccountTable: non-finite feature");
        }
        if (c > kRatioColumn && v != 0.0 && v != 1.0) {
          throw ContractError("AccountTable: boolean feature outside {0,1}");
        }
        if (!normalized && c <= kRatioColumn && v < 0.0) {
          throw ContractError("AccountTable: negative count or ratio");
        }
      }
    }
  }
};

struct TextEmbeddingTable {
  Matrix pooled;                                // n x d_text
  std::optional<std::vector<Matrix>> per_tweet;  // n_i x d_text per account

  [[nodiscard]] Eigen::Index dim() const { return pooled.cols(); }
};

/// Mean of each account's per-tweet rows. Accounts with no tweets get zeros.
inline TextEmbeddingTable pool_tweet_embeddings(std::vector<Matrix> per_tweet, Eigen::Index d_text) {
  TextEmbeddingTable t;
  t.pooled = Matrix::Zero(static_cast<Eigen::Index>(per_tweet.size()), d_text);
  for (std::size_t i = 0; i < per_tweet.size(); ++i) {
    const Matrix& rows = per_tweet[i];
    if (rows.rows() == 0) {
      continue;
    }
    if (rows.cols() != d_text) {
      throw ContractError("pool_tweet_embeddings: tweet embedding width differs from d_text");
    }
    t.pooled.row(static_cast<Eigen::Index>(i)) = rows.colwise().mean();
  }
  t.per_tweet = std::move(per_tweet);
  return t;
}

struct Edge {
  Eigen::Index src = 0;
  Eigen::Index dst = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct HeteroGraph {
  Eigen::Index num_nodes = 0;
  std::vector<std::string> relation_names;
  std::vector<std::vector<Edge>> relations;

  [[nodiscard]] std::size_t num_relations() const { return relations.size(); }

  [[nodiscard]] std::size_t num_edges() const {
    std::size_t total = 0;
    for (const auto& r : relations) {
      total += r.size();
    }
    return total;
  }

  void validate() const {
    if (relations.empty() || relation_names.size() != relations.size()) {
      throw ContractError("HeteroGraph: needs at least one named relation");
    }
    for (const auto& rel : relations) {
      for (const Edge& e : rel) {
        if (e.src < 0 || e.dst < 0 || e.src >= num_nodes || e.dst >= num_nodes) {
          throw ContractError("HeteroGraph: node index out of range");
        }
      }
    }
  }

  /// Drop repeated (src, dst) pairs within each relation, keeping first occurrences.
  void deduplicate() {
    for (auto& rel : relations) {
      std::set<Edge> seen;
      std::vector<Edge> kept;
      kept.reserve(rel.size());
      for (const Edge& e : rel) {
        if (seen.insert(e).second) {
          kept.push_back(e);
        }
      }
      rel = std::move(kept);
    }
  }
};

enum class Split : std::uint8_t { None = 0, Train, Val, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
    case Split::None:
      break;
  }
  return "none";
}

struct Dataset {
  AccountTable accounts;
  TextEmbeddingTable text;
  HeteroGraph graph;
  std::vector<int> labels;  // kUnlabeled, kHuman or kBot
  std::vector<Split> split;

  [[nodiscard]] Eigen::Index size() const { return accounts.size(); }

  [[nodiscard]] std::vector<Eigen::Index> indices(Split s) const {
    std::vector<Eigen::Index> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == s) {
        out.push_back(static_cast<Eigen::Index>(i));
      }
    }
    return out;
  }

  void validate() const {
    accounts.validate();
    graph.validate();
    const Eigen::Index n = size();
    if (text.pooled.rows() != n || graph.num_nodes != n || static_cast<Eigen::Index>(labels.size()) != n ||
        static_cast<Eigen::Index>(split.size()) != n) {
      throw ContractError("Dataset: tables disagree on the account count");
    }
    if (!text.pooled.allFinite()) {
      throw ContractError("Dataset: non-finite text embedding");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      if (y != kUnlabeled && y != kHuman && y != kBot) {
        throw ContractError("Dataset: label must be 0 or 1");
      }
      if (split[static_cast<std::size_t>(i)] != Split::None && y == kUnlabeled) {
        throw ContractError("Dataset: split-tagged account without a label");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// directory format

inline constexpr std::string_view kEmbeddingMagic = "RMNPEMB1";
inline constexpr std::size_t kEmbeddingHeaderBytes = 16;

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view tok = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!tok.empty() && (tok.back() == '\r' || tok.back() == ' ')) {
      tok.remove_suffix(1);
    }
    while (!tok.empty() && tok.front() == ' ') {
      tok.remove_prefix(1);
    }
    out.push_back(tok);
    if (comma == std::string_view::npos) {
      break;
    }
    start = comma + 1;
  }
  return out;
}

class CsvReader {
 public:
  explicit CsvReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) {
      throw LoadError(where() + "cannot open file");
    }
  }

  bool next(std::vector<std::string_view>& fields) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (line_.empty() || line_ == "\r") {
        continue;
      }
      fields = split_csv(line_);
      return true;
    }
    return false;
  }

  [[nodiscard]] std::string where() const {
    return path_.filename().string() + (line_no_ > 0 ? ":" + std::to_string(line_no_) : std::string()) + ": ";
  }

  [[noreturn]] void fail(const std::string& msg) const { throw LoadError(where() + msg); }

  double real(std::string_view tok) const {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
      fail("malformed number '" + std::string(tok) + "'");
    }
    if (!std::isfinite(v)) {
      fail("non-finite feature");
    }
    return v;
  }

  Eigen::Index integer(std::string_view tok) const {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
      fail("malformed integer '" + std::string(tok) + "'");
    }
    return static_cast<Eigen::Index>(v);
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::string line_;
  std::size_t line_no_ = 0;
};

inline void expect_header(CsvReader& r, std::vector<std::string_view> expected) {
  std::vector<std::string_view> f;
  if (!r.next(f)) {
    r.fail("missing header row");
  }
  if (f.size() != expected.size() || !std::equal(f.begin(), f.end(), expected.begin())) {
    r.fail("unexpected header row");
  }
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) {
    throw LoadError(path.filename().string() + ": cannot open for writing");
  }
  return out;
}

}  // namespace detail

/// Shortest decimal form that round-trips to the same double.
using detail::format_double;

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw LoadError(dir.string() + ": cannot create directory: " + ec.message());
  }
  {
    auto out = detail::open_out(dir / "metadata.csv");
    for (Eigen::Index c = 0; c < kNumMetadata; ++c) {
      out << (c ? "," : "") << kMetadataColumns[static_cast<std::size_t>(c)];
    }
    out << '\n';
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      for (Eigen::Index c = 0; c < kNumMetadata; ++c) {
        out << (c ? "," : "") << detail::format_double(ds.accounts.features(i, c));
      }
      out << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "embeddings.bin", true);
    const Eigen::Index d = ds.text.dim();
    if (d > 999999) {
      throw ContractError("save_dataset: d_text does not fit the 6-digit header");
    }
    std::array<char, 24> digits{};
    std::snprintf(digits.data(), digits.size(), "%06lld", static_cast<long long>(d));
    std::string header = std::string(kEmbeddingMagic) + " " + digits.data() + "\n";
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      for (Eigen::Index c = 0; c < d; ++c) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(ds.text.pooled(i, c)));
        const std::array<char, 4> le = {static_cast<char>(bits & 0xFFu), static_cast<char>((bits >> 8) & 0xFFu),
                                        static_cast<char>((bits >> 16) & 0xFFu), static_cast<char>((bits >> 24) & 0xFFu)};
        out.write(le.data(), 4);
      }
    }
  }
  {
    auto out = detail::open_out(dir / "edges.csv");
    out << "relation_name,src,dst\n";
    for (std::size_t r = 0; r < ds.graph.relations.size(); ++r) {
      for (const Edge& e : ds.graph.relations[r]) {
        out << ds.graph.relation_names[r] << ',' << e.src << ',' << e.dst << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir / "labels.csv");
    out << "account,label\n";
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
      if (ds.labels[i] != kUnlabeled) {
        out << i << ',' << ds.labels[i] << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir / "splits.csv");
    out << "account,split\n";
    for (std::size_t i = 0; i < ds.split.size(); ++i) {
      if (ds.split[i] != Split::None) {
        out << i << ',' << to_string(ds.split[i]) << '\n';
      }
    }
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  for (const char* name : {"metadata.csv", "embeddings.bin", "edges.csv", "labels.csv", "splits.csv"}) {
    if (!std::filesystem::exists(dir / name)) {
      throw LoadError(std::string(name) + ": missing file in " + dir.string());
    }
  }

  // metadata
  {
    detail::CsvReader r(dir / "metadata.csv");
    detail::expect_header(r, std::vector<std::string_view>(kMetadataColumns.begin(), kMetadataColumns.end()));
    std::vector<double> values;
    std::vector<std::string_view> f;
    while (r.next(f)) {
      if (static_cast<Eigen::Index>(f.size()) != kNumMetadata) {
        r.fail("expected 13 fields");
      }
      for (Eigen::Index c = 0; c < kNumMetadata; ++c) {
        const double v = r.real(f[static_cast<std::size_t>(c)]);
        if (c > kRatioColumn && v != 0.0 && v != 1.0) {
          r.fail("boolean feature outside {0,1}");
        }
        if (c <= kRatioColumn && v < 0.0) {
          r.fail("negative count or ratio");
        }
        values.push_back(v);
      }
    }
    const auto n = static_cast<Eigen::Index>(values.size()) / kNumMetadata;
    ds.accounts.features = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), n, kNumMetadata);
  }
  const Eigen::Index n = ds.accounts.size();

  // embeddings
  {
    const auto path = dir / "embeddings.bin";
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw LoadError("embeddings.bin: cannot open file");
    }
    std::string header(kEmbeddingHeaderBytes, '\0');
    in.read(header.data(), static_cast<std::streamsize>(kEmbeddingHeaderBytes));
    if (in.gcount() != static_cast<std::streamsize>(kEmbeddingHeaderBytes) ||
        header.compare(0, kEmbeddingMagic.size(), kEmbeddingMagic) != 0 || header[8] != ' ') {
      throw LoadError("embeddings.bin: bad header");
    }
    long long d = 0;
    auto [ptr, ec] = std::from_chars(header.data() + 9, header.data() + 15, d);
    if (ec != std::errc() || ptr != header.data() + 15 || d <= 0) {
      throw LoadError("embeddings.bin: bad d_text in header");
    }
    const auto file_size = std::filesystem::file_size(path);
    const auto expected = kEmbeddingHeaderBytes + static_cast<std::uintmax_t>(n) * static_cast<std::uintmax_t>(d) * 4u;
    if (file_size != expected) {
      throw LoadError("embeddings.bin: embedding size mismatch (expected " + std::to_string(n) + " x " +
                      std::to_string(d) + " floats)");
    }
    ds.text.pooled.resize(n, d);
    std::array<unsigned char, 4> le{};
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < d; ++c) {
        in.read(reinterpret_cast<char*>(le.data()), 4);
        const std::uint32_t bits = static_cast<std::uint32_t>(le[0]) | (static_cast<std::uint32_t>(le[1]) << 8) |
                                   (static_cast<std::uint32_t>(le[2]) << 16) | (static_cast<std::uint32_t>(le[3]) << 24);
        const float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) {
          throw LoadError("embeddings.bin: non-finite feature at account " + std::to_string(i));
        }
        ds.text.pooled(i, c) = static_cast<double>(v);
      }
    }
  }

  // edges
  {
    detail::CsvReader r(dir / "edges.csv");
    detail::expect_header(r, {"relation_name", "src", "dst"});
    ds.graph.num_nodes = n;
    std::unordered_map<std::string, std::size_t> rel_index;
    std::vector<std::string_view> f;
    while (r.next(f)) {
      if (f.size() != 3) {
        r.fail("expected 3 fields");
      }
      const Eigen::Index src = r.integer(f[1]);
      const Eigen::Index dst = r.integer(f[2]);
      if (src < 0 || dst < 0 || src >= n || dst >= n) {
        r.fail("node index out of range");
      }
      std::string name(f[0]);
      if (name.empty()) {
        r.fail("empty relation name");
      }
      auto [it, inserted] = rel_index.try_emplace(name, ds.graph.relations.size());
      if (inserted) {
        ds.graph.relation_names.push_back(name);
        ds.graph.relations.emplace_back();
      }
      ds.graph.relations[it->second].push_back(Edge{src, dst});
    }
    if (ds.graph.relations.empty()) {
      r.fail("no edges; at least one relation is required");
    }
    ds.graph.deduplicate();
  }

  ds.labels.assign(static_cast<std::size_t>(n), kUnlabeled);
  {
    detail::CsvReader r(dir / "labels.csv");
    detail::expect_header(r, {"account", "label"});
    std::vector<std::string_view> f;
    while (r.next(f)) {
      if (f.size() != 2) {
        r.fail("expected 2 fields");
      }
      const Eigen::Index i = r.integer(f[0]);
      const Eigen::Index y = r.integer(f[1]);
      if (i < 0 || i >= n) {
        r.fail("account index out of range");
      }
      if (y != kHuman && y != kBot) {
        r.fail("label must be 0 or 1");
      }
      ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(y);
    }
  }

  ds.split.assign(static_cast<std::size_t>(n), Split::None);
  {
    detail::CsvReader r(dir / "splits.csv");
    detail::expect_header(r, {"account", "split"});
    std::vector<std::string_view> f;
    while (r.next(f)) {
      if (f.size() != 2) {
        r.fail("expected 2 fields");
      }
      const Eigen::Index i = r.integer(f[0]);
      if (i < 0 || i >= n) {
        r.fail("account index out of range");
      }
      Split s = Split::None;
      if (f[1] == "train") {
        s = Split::Train;
      } else if (f[1] == "val") {
        s = Split::Val;
      } else if (f[1] == "test") {
        s = Split::Test;
      } else {
        r.fail("split must be train, val or test");
      }
      if (ds.labels[static_cast<std::size_t>(i)] == kUnlabeled) {
        r.fail("split-tagged account has no label");
      }
      ds.split[static_cast<std::size_t>(i)] = s;
    }
  }

  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// normalization

struct NormStats {
  Vector mean;  // one entry per numeric column
  Vector std;
};

inline constexpr double kStdFloor = 1e-6;

/// Apply previously fitted statistics (e.g. to a shifted evaluation set).
inline Dataset apply_norm(Dataset ds, const NormStats& stats) {
  if (stats.mean.size() != kNumNumeric || stats.std.size() != kNumNumeric) {
    throw ContractError("apply_norm: statistics must cover the 8 numeric columns");
  }
  for (Eigen::Index c = 0; c < kNumNumeric; ++c) {
    ds.accounts.features.col(c) = (ds.accounts.features.col(c).array() - stats.mean[c]) / stats.std[c];
  }
  ds.accounts.normalized = true;
  return ds;
}

/// z-score the numeric columns with train-split statistics; booleans and the
/// ratio pass through.
inline std::pair<Dataset, NormStats> normalize_features(Dataset ds) {
  const auto train = ds.indices(Split::Train);
  if (train.empty()) {
    throw ContractError("normalize_features: empty train split");
  }
  NormStats stats{Vector::Zero(kNumNumeric), Vector::Zero(kNumNumeric)};
  for (Eigen::Index c = 0; c < kNumNumeric; ++c) {
    double m = 0.0;
    for (Eigen::Index i : train) {
      m += ds.accounts.features(i, c);
    }
    m /= static_cast<double>(train.size());
    double v = 0.0;
    for (Eigen::Index i : train) {
      const double d = ds.accounts.features(i, c) - m;
      v += d * d;
    }
    v /= static_cast<double>(train.size());
    stats.mean[c] = m;
    stats.std[c] = std::max(std::sqrt(v), kStdFloor);
  }
  ds = apply_norm(std::move(ds), stats);
  return {std::move(ds), std::move(stats)};
}

// ---------------------------------------------------------------------------
// splitting

struct SplitRatios {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

/// Stratified random assignment; within each class the train and val counts
/// are the rounded ratio shares and test takes the remainder.
inline Dataset split_dataset(Dataset ds, const SplitRatios& ratios, Rng& rng) {
  if (!(ratios.train > 0.0 && ratios.val > 0.0 && ratios.test > 0.0) ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ContractError("split_dataset: ratios must be positive and sum to 1");
  }
  ds.split.assign(ds.labels.size(), Split::None);
  for (int cls : {kHuman, kBot}) {
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
      if (ds.labels[i] == cls) {
        members.push_back(static_cast<Eigen::Index>(i));
      }
    }
    if (members.size() < 3) {
      throw ContractError("split_dataset: class " + std::to_string(cls) + " has fewer than 3 members");
    }
    rng.shuffle(members);
    const auto n = static_cast<double>(members.size());
    auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
    auto n_val = static_cast<std::size_t>(std::llround(ratios.val * n));
    // every split keeps at least one member of each class
    n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 2);
    n_val = std::clamp<std::size_t>(n_val, 1, members.size() - n_train - 1);
    for (std::size_t k = 0; k < members.size(); ++k) {
      const Split s = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
      ds.split[static_cast<std::size_t>(members[k])] = s;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic generation

struct SynthConfig {
  Eigen::Index n_accounts = 1000;
  double bot_fraction = 0.3;
  Eigen::Index d_text = 32;
  // metadata, text, graph. The graph entry is accepted for symmetry; graph
  // signal is controlled by edge_homophily.
  std::array<double, 3> class_separation = {4.0, 4.0, 4.0};
  double edge_homophily = 0.9;
  double avg_degree = 8.0;  // per relation
  double camouflage_fraction = 0.0;
  Modality camouflaged_modality = Modality::Text;
  // Translation of every class mean, in within-class standard deviations,
  // along a direction orthogonal to the class axis (dataset-shift sets).
  double shift = 0.0;
  std::uint64_t seed = 7;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (n_accounts < 10) {
      throw ContractError("SynthConfig: n_accounts must be >= 10");
    }
    if (!prob(bot_fraction) || !prob(edge_homophily) || !prob(camouflage_fraction)) {
      throw ContractError("SynthConfig: probabilities must lie in [0, 1]");
    }
    if (d_text < 1 || !(avg_degree >= 0.0)) {
      throw ContractError("SynthConfig: d_text must be >= 1 and avg_degree >= 0");
    }
    if (!std::isfinite(shift) || (shift != 0.0 && d_text < 2)) {
      throw ContractError("SynthConfig: shift must be finite and needs d_text >= 2");
    }
    for (double s : class_separation) {
      if (!std::isfinite(s) || s < 0.0) {
        throw ContractError("SynthConfig: class separation must be finite and nonnegative");
      }
    }
  }
};

struct SynthResult {
  Dataset dataset;
  std::vector<Eigen::Index> camouflaged;  // bot accounts whose camouflaged modality looks human
};

inline constexpr double kSynthCountBase = 10.0;
inline constexpr double kSynthBoolRate = 0.3;

/// Component c of the unit shift direction in a d-wide block: alternating
/// signs over the first 2*floor(d/2) entries, so it sums to zero and is
/// orthogonal to the all-ones class axis. A shift along the class axis would
/// just move one class onto the other's training region.
inline double synth_shift_component(Eigen::Index c, Eigen::Index d) {
  const Eigen::Index used = 2 * (d / 2);
  if (c >= used) {
    return 0.0;
  }
  return (c % 2 == 0 ? 1.0 : -1.0) / std::sqrt(static_cast<double>(used));
}

inline SynthResult generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng label_rng = root.fork();
  Rng feature_rng = root.fork();
  Rng edge_rng = root.fork();
  Rng split_rng = root.fork();
  Rng camo_rng = root.fork();

  const Eigen::Index n = cfg.n_accounts;
  const auto n_bots = static_cast<Eigen::Index>(std::llround(cfg.bot_fraction * static_cast<double>(n)));

  SynthResult out;
  Dataset& ds = out.dataset;
  ds.labels.assign(static_cast<std::size_t>(n), kHuman);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    order[static_cast<std::size_t>(i)] = i;
  }
  label_rng.shuffle(order);
  std::vector<Eigen::Index> bots(order.begin(), order.begin() + n_bots);
  std::sort(bots.begin(), bots.end());
  for (Eigen::Index b : bots) {
    ds.labels[static_cast<std::size_t>(b)] = kBot;
  }

  // camouflaged bots: a uniformly chosen subset of bots
  std::vector<char> camo(static_cast<std::size_t>(n), 0);
  {
    std::vector<Eigen::Index> pool = bots;
    camo_rng.shuffle(pool);
    const auto n_camo = static_cast<std::size_t>(std::llround(cfg.camouflage_fraction * static_cast<double>(pool.size())));
    pool.resize(n_camo);
    std::sort(pool.begin(), pool.end());
    for (Eigen::Index i : pool) {
      camo[static_cast<std::size_t>(i)] = 1;
    }
    out.camouflaged = std::move(pool);
  }
  auto apparent_sign = [&](Eigen::Index i, Modality m) {
    const bool bot = ds.labels[static_cast<std::size_t>(i)] == kBot;
    if (bot && camo[static_cast<std::size_t>(i)] && cfg.camouflaged_modality == m) {
      return -1.0;
    }
    return bot ? 1.0 : -1.0;
  };

  // metadata: counts along the all-ones class axis of the numeric block
  ds.accounts.features = Matrix::Zero(n, kNumMetadata);
  const double meta_axis = 1.0 / std::sqrt(static_cast<double>(kNumNumeric));
  const double text_axis = 1.0 / std::sqrt(static_cast<double>(cfg.d_text));
  ds.text.pooled.resize(n, cfg.d_text);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double meta_offset = apparent_sign(i, Modality::Metadata) * cfg.class_separation[0] / 2.0 * meta_axis;
    for (Eigen::Index c = 0; c < kNumNumeric; ++c) {
      const double moved = cfg.shift * synth_shift_component(c, kNumNumeric);
      ds.accounts.features(i, c) = std::max(0.0, kSynthCountBase + meta_offset + moved + feature_rng.normal());
    }
    ds.accounts.features(i, kRatioColumn) = followers_friends_ratio(ds.accounts.features(i, kFollowersColumn),
                                                                    ds.accounts.features(i, kFriendsColumn));
    for (Eigen::Index c = kRatioColumn + 1; c < kNumMetadata; ++c) {
      ds.accounts.features(i, c) = feature_rng.uniform() < kSynthBoolRate ? 1.0 : 0.0;
    }
    const double text_offset = apparent_sign(i, Modality::Text) * cfg.class_separation[1] / 2.0 * text_axis;
    for (Eigen::Index c = 0; c < cfg.d_text; ++c) {
      const double moved = cfg.shift * synth_shift_component(c, cfg.d_text);
      // stored at float precision so the binary format round-trips exactly
      ds.text.pooled(i, c) = static_cast<double>(static_cast<float>(text_offset + moved + feature_rng.normal()));
    }
  }

  // two-block stochastic graph: "following" and "follower" relations
  ds.graph.num_nodes = n;
  ds.graph.relation_names = {"following", "follower"};
  ds.graph.relations.resize(2);
  std::vector<Eigen::Index> human_side;
  std::vector<Eigen::Index> bot_side;
  for (Eigen::Index i = 0; i < n; ++i) {
    (apparent_sign(i, Modality::Graph) > 0 ? bot_side : human_side).push_back(i);
  }
  const auto per_relation = static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.avg_degree / 2.0));
  for (auto& rel : ds.graph.relations) {
    std::set<Edge> seen;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 50 * per_relation + 100;
    while (rel.size() < per_relation && attempts++ < max_attempts) {
      const auto src = static_cast<Eigen::Index>(edge_rng.uniform_index(static_cast<std::uint64_t>(n)));
      const bool src_bot = apparent_sign(src, Modality::Graph) > 0;
      const bool same = edge_rng.uniform() < cfg.edge_homophily;
      const auto& pool = (src_bot == same) ? bot_side : human_side;
      if (pool.empty()) {
        continue;
      }
      const Eigen::Index dst = pool[edge_rng.uniform_index(pool.size())];
      if (dst == src) {
        continue;
      }
      const Edge e{src, dst};
      if (seen.insert(e).second) {
        rel.push_back(e);
      }
    }
  }

  ds.split.assign(static_cast<std::size_t>(n), Split::None);
  ds = split_dataset(std::move(ds), SplitRatios{}, split_rng);
  ds.validate();
  return out;
}

// ---------------------------------------------------------------------------
// camouflage edges

/// Add floor(proportion * |E_r|) fresh human -> bot edges to every relation.
inline HeteroGraph inject_camouflage_edges(HeteroGraph g, const std::vector<int>& labels, double proportion, Rng& rng) {
  if (!(proportion >= 0.0 && proportion <= 1.0)) {
    throw ContractError("inject_camouflage_edges: proportion must lie in [0, 1]");
  }
  if (static_cast<Eigen::Index>(labels.size()) != g.num_nodes) {
    throw ContractError("inject_camouflage_edges: labels must cover every node");
  }
  std::vector<Eigen::Index> humans;
  std::vector<Eigen::Index> bots;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kHuman) {
      humans.push_back(static_cast<Eigen::Index>(i));
    } else if (labels[i] == kBot) {
      bots.push_back(static_cast<Eigen::Index>(i));
    }
  }
  if (humans.empty() || bots.empty()) {
    throw ContractError("inject_camouflage_edges: need both human and bot nodes");
  }
  for (auto& rel : g.relations) {
    const auto to_add = static_cast<std::size_t>(std::floor(proportion * static_cast<double>(rel.size())));
    if (to_add == 0) {
      continue;
    }
    std::set<Edge> seen(rel.begin(), rel.end());
    std::size_t free_pairs = humans.size() * bots.size();
    for (const Edge& e : rel) {
      if (labels[static_cast<std::size_t>(e.src)] == kHuman && labels[static_cast<std::size_t>(e.dst)] == kBot) {
        --free_pairs;
      }
    }
    if (to_add > free_pairs) {
      throw ContractError("inject_camouflage_edges: not enough distinct human-bot pairs left");
    }
    std::size_t added = 0;
    while (added < to_add) {
      const Edge e{humans[rng.uniform_index(humans.size())], bots[rng.uniform_index(bots.size())]};
      if (seen.insert(e).second) {
        rel.push_back(e);
        ++added;
      }
    }
  }
  return g;
}

}  // namespace rmnp::data
