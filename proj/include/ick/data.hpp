#ifndef ICK_DATA_HPP
#define ICK_DATA_HPP

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/inputs.hpp"
#include "ick/kernels.hpp"
#include "ick/linalg.hpp"
#include "ick/rng.hpp"

namespace ick {

struct SourceInfo {
  std::string name;
  std::vector<std::string> columns;
};

/// Multi-source inputs, targets, optional class labels and column names.
struct Dataset {
  Inputs x;
  Vector y;
  std::vector<int> labels;  ///< empty unless the data is labelled
  std::vector<SourceInfo> sources;

  Eigen::Index size() const noexcept { return y.size(); }

  void validate() const {
    if (x.num_sources() < 1) throw SchemaError("dataset has no input sources");
    if (x.size() != y.size()) throw ShapeMismatch("dataset: inputs and targets differ in length");
    if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != y.size()) {
      throw ShapeMismatch("dataset: labels and targets differ in length");
    }
    if (!y.allFinite()) throw SchemaError("dataset: non-finite target");
    for (const Matrix& s : x.sources()) {
      if (!s.allFinite()) throw SchemaError("dataset: non-finite input");
    }
    if (!sources.empty() && sources.size() != x.num_sources()) {
      throw SchemaError("dataset: source descriptors do not match the inputs");
    }
  }

  template <typename Indices>
  Dataset subset(const Indices& idx) const {
    Dataset d;
    d.x = x.rows(idx);
    d.y.resize(static_cast<Eigen::Index>(idx.size()));
    Eigen::Index r = 0;
    for (auto i : idx) {
      d.y(r++) = y(static_cast<Eigen::Index>(i));
      if (!labels.empty()) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    d.sources = sources;
    return d;
  }
};

/// Default descriptors "x<m>" with columns "x<m>_<d>".
inline std::vector<SourceInfo> default_source_info(const Inputs& x) {
  std::vector<SourceInfo> out;
  for (std::size_t m = 0; m < x.num_sources(); ++m) {
    SourceInfo s{"x" + std::to_string(m), {}};
    for (Eigen::Index d = 0; d < x.sources()[m].cols(); ++d) s.columns.push_back(s.name + "_" + std::to_string(d));
    out.push_back(std::move(s));
  }
  return out;
}

// Generators -----------------------------------------------------------------------

inline constexpr Eigen::Index kMaxPriorSample = 10000;

/// One draw of y ~ N(0, K(X, X) + noise I).
inline Vector sample_gp_prior(const KernelSpec& spec, const KernelParams& params, const Inputs& x, double noise,
                              Rng& rng) {
  if (x.size() > kMaxPriorSample) {
    throw ConfigError("sample_gp_prior: " + std::to_string(x.size()) + " points exceeds the dense limit of " +
                      std::to_string(kMaxPriorSample));
  }
  if (!(noise >= 0.0)) throw ConfigError("sample_gp_prior: noise variance must be non-negative");
  Matrix k = kernel_matrix(spec, params, x, x);
  k.diagonal().array() += noise;
  return mvn_sample(Vector::Zero(x.size()), k, 1, rng).col(0);
}

struct SourceRange {
  double lo = 0.0;
  double hi = 1.0;
  int dims = 1;
};

inline Inputs uniform_inputs(const std::vector<SourceRange>& ranges, Eigen::Index n, Rng& rng) {
  std::vector<Matrix> s;
  for (const SourceRange& r : ranges) s.emplace_back(n, r.dims);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < ranges.size(); ++m) {
      for (int d = 0; d < ranges[m].dims; ++d) s[m](i, d) = rng.uniform(ranges[m].lo, ranges[m].hi);
    }
  }
  return Inputs(std::move(s));
}

/// Inputs drawn uniformly per source, targets from the GP prior.
inline Dataset gen_gp_dataset(const KernelSpec& spec, const KernelParams& params,
                              const std::vector<SourceRange>& ranges, Eigen::Index n, double noise, Rng& rng) {
  Dataset d;
  d.x = uniform_inputs(ranges, n, rng);
  d.y = sample_gp_prior(spec, params, d.x, noise, rng);
  d.sources = default_source_info(d.x);
  d.validate();
  return d;
}

/// Generating kernels of the two-source synthetic sets: linear on x0 in [0, 1]
/// times (or plus) a two-component spectral mixture on x1 in [0, 2].
inline KernelWithParams synthetic_kernel(bool additive) {
  const KernelSpec lin = KernelSpec::linear(0);
  const KernelSpec sm = KernelSpec::spectral_mixture(2, 1);
  KernelWithParams k;
  k.spec = additive ? KernelSpec::sum({lin, sm}) : KernelSpec::product({lin, sm});
  k.params = concat_params({linear_params(1.0), spectral_mixture_params(Eigen::Vector2d(1.0, 0.5),
                                                                        Eigen::Vector2d(0.05, 0.1),
                                                                        Eigen::Vector2d(0.5, 2.0))});
  return k;
}

inline std::vector<SourceRange> synthetic_ranges() { return {{0.0, 1.0, 1}, {0.0, 2.0, 1}}; }

inline constexpr double kSyntheticNoise = 0.01;

/// y = x2 tanh(2 x0 cos^2(pi x1 / 50)) + eps with x0 ~ U[-1, 1], x1 ~ U[0, 100], x2 ~ U[-1, 1].
inline Dataset gen_synth_tanh(Eigen::Index n, double sigma, Rng& rng) {
  if (n < 1) throw ConfigError("gen_synth_tanh: n must be >= 1");
  Dataset d;
  d.x = uniform_inputs({{-1.0, 1.0, 1}, {0.0, 100.0, 1}, {-1.0, 1.0, 1}}, n, rng);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x1 = d.x.sources()[0](i, 0), x2 = d.x.sources()[1](i, 0), x3 = d.x.sources()[2](i, 0);
    const double c = std::cos(std::numbers::pi * x2 / 50.0);
    const double eps = sigma > 0.0 ? sigma * rng.normal() : 0.0;
    d.y(i) = x3 * std::tanh(2.0 * x1 * c * c) + eps;
  }
  d.sources = default_source_info(d.x);
  d.validate();
  return d;
}

/// Two-class toy: x0 ~ U[-1, 1], x1 ~ U[0, 4 pi]; label 1 iff sin(x1) + 0.5 x0 > 0.
inline Dataset gen_periodic_classes(Eigen::Index n, Rng& rng) {
  Dataset d;
  d.x = uniform_inputs({{-1.0, 1.0, 1}, {0.0, 4.0 * std::numbers::pi, 1}}, n, rng);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = std::sin(d.x.sources()[1](i, 0)) + 0.5 * d.x.sources()[0](i, 0);
    d.labels.push_back(s > 0.0 ? 1 : 0);
    d.y(i) = d.labels.back();
  }
  d.sources = default_source_info(d.x);
  d.validate();
  return d;
}

// Files ----------------------------------------------------------------------------------

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
  return ss.str();
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << text;
    out.flush();
    if (!out) throw IoError("write failed on '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

/// Column mapping: {"sources": [["f1", "f2"], ["t"]], "target": "y", "label": "c"}.
struct CsvSchema {
  std::vector<std::vector<std::string>> sources;
  std::string target;
  std::optional<std::string> label;
};

inline CsvSchema csv_schema_from_json(const nlohmann::json& j) {
  CsvSchema s;
  try {
    s.sources = j.at("sources").get<std::vector<std::vector<std::string>>>();
    s.target = j.at("target").get<std::string>();
    if (j.contains("label")) s.label = j.at("label").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data.schema: ") + e.what());
  }
  if (s.sources.empty()) throw ConfigError("data.schema.sources must list at least one source");
  for (const auto& cols : s.sources) {
    if (cols.empty()) throw ConfigError("data.schema.sources entries must name at least one column");
  }
  return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& text, std::size_t row, const std::string& column) {
  if (text.empty()) throw ParseError(row, column, "empty field");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || errno == ERANGE) {
    throw ParseError(row, column, "'" + text + "' is not a number");
  }
  if (!std::isfinite(v)) throw ParseError(row, column, "non-finite value '" + text + "'");
  return v;
}

}  // namespace detail

/// Loads a headered, comma-separated file (no quoting). Data rows are numbered from 1.
inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path.string() + "' has no header row");
  const std::vector<std::string> header = detail::split_fields(line);
  auto column_index = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == name) return c;
    }
    throw SchemaError("column '" + name + "' not found in '" + path.string() + "'");
  };
  std::vector<std::vector<std::size_t>> src_cols;
  for (const auto& cols : schema.sources) {
    std::vector<std::size_t>& idx = src_cols.emplace_back();
    for (const std::string& c : cols) idx.push_back(column_index(c));
  }
  const std::size_t target_col = column_index(schema.target);
  const std::optional<std::size_t> label_col =
      schema.label ? std::optional<std::size_t>(column_index(*schema.label)) : std::nullopt;

  std::vector<std::vector<double>> values(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const std::vector<std::string> fields = detail::split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError(row, "", "expected " + std::to_string(header.size()) + " fields, found " +
                                    std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      values[c].push_back(detail::parse_number(fields[c], row, header[c]));
    }
  }
  if (row == 0) throw SchemaError("'" + path.string() + "' has no data rows");

  const auto n = static_cast<Eigen::Index>(row);
  std::vector<Matrix> sources;
  Dataset d;
  for (std::size_t m = 0; m < src_cols.size(); ++m) {
    Matrix s(n, static_cast<Eigen::Index>(src_cols[m].size()));
    for (std::size_t k = 0; k < src_cols[m].size(); ++k) {
      s.col(static_cast<Eigen::Index>(k)) = Eigen::Map<const Vector>(values[src_cols[m][k]].data(), n);
    }
    sources.push_back(std::move(s));
    d.sources.push_back({"x" + std::to_string(m), schema.sources[m]});
  }
  d.x = Inputs(std::move(sources));
  d.y = Eigen::Map<const Vector>(values[target_col].data(), n);
  if (label_col) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = values[*label_col][static_cast<std::size_t>(i)];
      if (v != std::round(v) || v < 0) {
        throw ParseError(static_cast<std::size_t>(i + 1), *schema.label, "labels must be non-negative integers");
      }
      d.labels.push_back(static_cast<int>(v));
    }
  }
  d.validate();
  return d;
}

/// Header: every source column, then "y", then "label" when present.
inline std::string dataset_to_csv(const Dataset& d) {
  const std::vector<SourceInfo> info = d.sources.empty() ? default_source_info(d.x) : d.sources;
  std::ostringstream out;
  out.precision(17);
  bool first = true;
  for (const SourceInfo& s : info) {
    for (const std::string& c : s.columns) {
      out << (first ? "" : ",") << c;
      first = false;
    }
  }
  out << ",y" << (d.labels.empty() ? "" : ",label") << "\n";
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    first = true;
    for (const Matrix& s : d.x.sources()) {
      for (Eigen::Index c = 0; c < s.cols(); ++c) {
        out << (first ? "" : ",") << s(i, c);
        first = false;
      }
    }
    out << "," << d.y(i);
    if (!d.labels.empty()) out << "," << d.labels[static_cast<std::size_t>(i)];
    out << "\n";
  }
  return out.str();
}

inline CsvSchema schema_for(const Dataset& d) {
  CsvSchema s;
  for (const SourceInfo& info : d.sources.empty() ? default_source_info(d.x) : d.sources) s.sources.push_back(info.columns);
  s.target = "y";
  if (!d.labels.empty()) s.label = "label";
  return s;
}

inline void write_csv(const std::filesystem::path& path, const Dataset& d) { write_text_atomic(path, dataset_to_csv(d)); }

// Splits -----------------------------------------------------------------------------

struct SplitSpec {
  enum class Kind { random, threshold };
  Kind kind = Kind::random;
  double ratio = 0.5;  ///< training fraction for random splits
  std::uint64_t seed = 0;
  std::size_t source = 0;
  Eigen::Index coordinate = 0;
  double train_max = 0.0;  ///< threshold: v < train_max goes to train
  double val_max = 0.0;    ///< train_max <= v < val_max goes to validation, the rest to test
};

struct SplitResult {
  Dataset train, val, test;
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  std::vector<std::string> warnings;  ///< "EmptyPartition: <name>" for empty parts
};

inline SplitSpec split_spec_from_json(const nlohmann::json& j) {
  SplitSpec s;
  const std::string kind = j.value("kind", std::string("random"));
  if (kind == "random") {
    s.kind = SplitSpec::Kind::random;
    s.ratio = j.value("ratio", 0.5);
    s.seed = j.value("seed", std::uint64_t{0});
    if (!(s.ratio > 0.0 && s.ratio < 1.0)) throw ConfigError("split.ratio must lie in (0, 1)");
  } else if (kind == "threshold") {
    s.kind = SplitSpec::Kind::threshold;
    if (!j.contains("train_max") || !j.contains("val_max")) {
      throw ConfigError("split.train_max and split.val_max are required for threshold splits");
    }
    s.source = j.value("source", std::size_t{0});
    s.coordinate = j.value("coordinate", Eigen::Index{0});
    s.train_max = j.at("train_max").get<double>();
    s.val_max = j.at("val_max").get<double>();
    if (!(s.train_max <= s.val_max)) throw ConfigError("split.train_max must not exceed split.val_max");
  } else {
    throw ConfigError("split.kind must be 'random' or 'threshold'");
  }
  return s;
}

inline SplitResult split(const Dataset& d, const SplitSpec& spec) {
  SplitResult r;
  const Eigen::Index n = d.size();
  if (spec.kind == SplitSpec::Kind::random) {
    if (!(spec.ratio > 0.0 && spec.ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
    Rng rng(spec.seed);
    const std::vector<std::size_t> order = rng.permutation(static_cast<std::size_t>(n));
    const auto cut = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(n)));
    r.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    r.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  } else {
    if (!(spec.train_max <= spec.val_max)) throw ConfigError("split thresholds must be ordered");
    const Matrix& src = d.x.source(spec.source);
    if (spec.coordinate < 0 || spec.coordinate >= src.cols()) {
      throw ConfigError("split coordinate " + std::to_string(spec.coordinate) + " is outside source " +
                        std::to_string(spec.source));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = src(i, spec.coordinate);
      auto& bucket = v < spec.train_max ? r.train_idx : (v < spec.val_max ? r.val_idx : r.test_idx);
      bucket.push_back(static_cast<std::size_t>(i));
    }
  }
  r.train = d.subset(r.train_idx);
  r.val = d.subset(r.val_idx);
  r.test = d.subset(r.test_idx);
  if (r.train_idx.empty()) r.warnings.push_back("EmptyPartition: train");
  if (r.val_idx.empty()) r.warnings.push_back("EmptyPartition: val");
  if (r.test_idx.empty()) r.warnings.push_back("EmptyPartition: test");
  return r;
}

}  // namespace ick

#endif  // ICK_DATA_HPP
