#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "randprune/error.hpp"
#include "randprune/rng.hpp"

namespace randprune {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct DataError : Error {
  using Error::Error;
};

/// Samples as rows of `inputs`, one integer class label per row.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_count() const { return static_cast<std::size_t>(inputs.cols()); }

  void validate() const {
    if (labels.empty()) throw DataError("dataset has no samples");
    if (static_cast<std::size_t>(inputs.rows()) != labels.size())
      throw DataError("dataset row count does not match label count");
    for (auto y : labels)
      if (y < 0 || y >= class_count) throw DataError("label outside [0, class_count)");
    if (!inputs.allFinite()) throw DataError("dataset contains non-finite inputs");
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
    out.labels.reserve(rows.size());
    out.class_count = class_count;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(static_cast<Eigen::Index>(rows[r]));
      out.labels.push_back(labels[rows[r]]);
    }
    return out;
  }
};

enum class SyntheticKind { moons, blobs, spirals };

namespace detail {

inline void shuffle_rows(Dataset& d, Rng& rng) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  d = d.subset(order);
}

}  // namespace detail

/// Two-dimensional toy classification sets. moons and spirals are balanced
/// two-class problems; blobs has `classes` isotropic Gaussian clusters whose
/// centres sit on a circle of radius 5 and whose spread is `noise`.
inline Dataset generate_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed,
                                  int classes = 2) {
  if (n < 2) throw DataError("synthetic dataset needs n >= 2");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw DataError("noise must be finite and >= 0");
  if (kind == SyntheticKind::blobs && classes < 2) throw DataError("blobs needs at least 2 classes");
  const int k = kind == SyntheticKind::blobs ? classes : 2;

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset d;
  d.class_count = k;
  d.inputs.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);

  // Per-class counts differ by at most one.
  std::vector<std::size_t> per_class(static_cast<std::size_t>(k), n / static_cast<std::size_t>(k));
  for (std::size_t c = 0; c < n % static_cast<std::size_t>(k); ++c) ++per_class[c];

  const double pi = std::numbers::pi;
  std::size_t row = 0;
  for (int c = 0; c < k; ++c) {
    const std::size_t m = per_class[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < m; ++i, ++row) {
      const double frac = m > 1 ? static_cast<double>(i) / static_cast<double>(m - 1) : 0.0;
      double x = 0.0, y = 0.0;
      switch (kind) {
        case SyntheticKind::moons: {
          const double t = pi * frac;
          if (c == 0) {
            x = std::cos(t);
            y = std::sin(t);
          } else {
            x = 1.0 - std::cos(t);
            y = 0.5 - std::sin(t);
          }
          break;
        }
        case SyntheticKind::blobs: {
          const double angle = 2.0 * pi * c / k;
          x = 5.0 * std::cos(angle);
          y = 5.0 * std::sin(angle);
          break;
        }
        case SyntheticKind::spirals: {
          const double r = 0.2 + 0.8 * frac;
          const double angle = 3.5 * pi * r + c * pi;
          x = r * std::cos(angle);
          y = r * std::sin(angle);
          break;
        }
      }
      d.inputs(static_cast<Eigen::Index>(row), 0) = x + noise * gauss(rng);
      d.inputs(static_cast<Eigen::Index>(row), 1) = y + noise * gauss(rng);
      d.labels[row] = c;
    }
  }
  detail::shuffle_rows(d, rng);
  return d;
}

/// Column selector for load_csv: a header name or a zero-based index.
using LabelColumn = std::variant<std::string, std::size_t>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Reads a comma-separated file whose first line is a header. Every non-label
/// column is a real-valued feature; the label column holds non-negative integers.
inline Dataset load_csv(const std::string& path, const LabelColumn& label_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file '" + path + "'");

  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty())
    throw DataError("CSV file '" + path + "' is empty");
  const std::string header_line = line;
  const auto header = detail::split_commas(header_line);

  std::size_t label_idx = 0;
  if (const auto* name = std::get_if<std::string>(&label_column)) {
    const auto it = std::find(header.begin(), header.end(), std::string_view(*name));
    if (it == header.end()) throw DataError("label column '" + *name + "' not found in header");
    label_idx = static_cast<std::size_t>(it - header.begin());
  } else {
    label_idx = std::get<std::size_t>(label_column);
    if (label_idx >= header.size())
      throw DataError("label column index " + std::to_string(label_idx) + " out of range");
  }

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size())
      throw DataError("row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " cells, found " + std::to_string(cells.size()));
    std::vector<double> features;
    features.reserve(cells.size() - 1);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = cells[c];
      const auto where = [&] {
        return "row " + std::to_string(line_no) + ", column '" + std::string(header[c]) + "'";
      };
      if (c == label_idx) {
        long long v = 0;
        const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || v < 0 || v > 1'000'000)
          throw DataError(where() + ": label '" + std::string(cell) + "' is not a non-negative integer");
        labels.push_back(static_cast<int>(v));
      } else {
        double v = 0.0;
        const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
          throw DataError(where() + ": '" + std::string(cell) + "' is not a real number");
        features.push_back(v);
      }
    }
    rows.push_back(std::move(features));
  }
  if (rows.empty()) throw DataError("CSV file '" + path + "' has no data rows");

  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size() - 1));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      d.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  d.labels = std::move(labels);
  d.class_count = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

struct Split {
  Dataset train;
  Dataset val;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

/// Per class, ⌊val_fraction·n_c⌉ samples (clamped to [1, n_c−1]) go to validation.
/// Both index lists come back in ascending order.
inline Split stratified_split(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw DataError("val_fraction must lie in (0, 1)");
  data.validate();

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  Rng rng(seed);
  std::vector<std::uint8_t> is_val(data.size(), 0);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2)
      throw DataError("class " + std::to_string(c) + " has fewer than 2 samples; cannot split");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto want = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    const auto n_val = std::clamp<std::size_t>(want, 1, idx.size() - 1);
    for (std::size_t j = 0; j < n_val; ++j) is_val[idx[j]] = 1;
  }

  Split s;
  for (std::size_t i = 0; i < data.size(); ++i) (is_val[i] ? s.val_indices : s.train_indices).push_back(i);
  s.train = data.subset(s.train_indices);
  s.val = data.subset(s.val_indices);
  return s;
}

/// Per-feature affine map to zero mean and unit variance, fitted on one dataset.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Dataset& d) {
    Standardizer s;
    const auto n = static_cast<double>(d.inputs.rows());
    s.mean = d.inputs.colwise().mean();
    s.scale.resize(d.inputs.cols());
    for (Eigen::Index c = 0; c < d.inputs.cols(); ++c) {
      const double var = (d.inputs.col(c).array() - s.mean(c)).square().sum() / n;
      s.scale(c) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  void apply(Dataset& d) const {
    if (d.inputs.cols() != mean.size()) throw ShapeError("standardizer feature count mismatch");
    d.inputs = ((d.inputs.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  }
};

/// Stratified split followed by standardization fitted on the training part.
inline Split prepare_data(const Dataset& data, double val_fraction, std::uint64_t seed) {
  auto s = stratified_split(data, val_fraction, seed);
  const auto z = Standardizer::fit(s.train);
  z.apply(s.train);
  z.apply(s.val);
  return s;
}

}  // namespace randprune
