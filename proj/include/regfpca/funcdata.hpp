#pragma once

// Observed functional data: irregularly sampled curves on a normalized
// chronological domain, plus CSV ingestion and export in long format.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "regfpca/error.hpp"

namespace regfpca {

enum class IncompletenessMode { Complete, Leading, Trailing, Full };

inline std::string_view to_string(IncompletenessMode m) {
  switch (m) {
    case IncompletenessMode::Complete: return "complete";
    case IncompletenessMode::Leading: return "leading";
    case IncompletenessMode::Trailing: return "trailing";
    case IncompletenessMode::Full: return "full";
  }
  return "complete";
}

inline IncompletenessMode parse_mode(std::string_view s) {
  if (s == "complete") return IncompletenessMode::Complete;
  if (s == "leading") return IncompletenessMode::Leading;
  if (s == "trailing") return IncompletenessMode::Trailing;
  if (s == "full") return IncompletenessMode::Full;
  throw Error(Errc::InvalidConfig, "unknown incompleteness mode '" + std::string(s) + "'");
}

/// One subject's samples. Times live on the normalized domain [0,1].
struct Curve {
  std::string id;
  std::vector<double> times;
  std::vector<double> values;

  std::size_t size() const { return times.size(); }
  double t_min() const { return times.front(); }
  double t_max() const { return times.back(); }
};

struct FunctionalDataset {
  std::vector<Curve> curves;
  IncompletenessMode mode = IncompletenessMode::Complete;
  /// Original (min, max) of the time axis; raw = t * (max - min) + min.
  std::pair<double, double> raw_domain{0.0, 1.0};

  std::size_t size() const { return curves.size(); }
  bool empty() const { return curves.empty(); }

  std::size_t total_points() const {
    std::size_t n = 0;
    for (const auto& c : curves) n += c.size();
    return n;
  }

  double to_raw(double t) const {
    return t * (raw_domain.second - raw_domain.first) + raw_domain.first;
  }
  double from_raw(double raw) const {
    return (raw - raw_domain.first) / (raw_domain.second - raw_domain.first);
  }
};

/// Checks the structural curve invariants: n >= 2, equal lengths, strictly
/// increasing times inside [0,1], finite values.
inline void validate_curve(const Curve& c) {
  if (c.times.size() != c.values.size())
    throw Error(Errc::InvalidInput, "curve '" + c.id + "': times/values length mismatch");
  if (c.times.size() < 2) throw Error(Errc::CurveTooShort, "curve '" + c.id + "' has fewer than 2 samples");
  for (std::size_t j = 0; j < c.times.size(); ++j) {
    if (!std::isfinite(c.times[j]) || !std::isfinite(c.values[j]))
      throw Error(Errc::NonFiniteInput, "curve '" + c.id + "' has a non-finite sample");
    if (c.times[j] < -1e-12 || c.times[j] > 1.0 + 1e-12)
      throw Error(Errc::OutOfDomain, "curve '" + c.id + "' has a time outside [0,1]");
    if (j > 0 && !(c.times[j] > c.times[j - 1]))
      throw Error(Errc::InvalidInput, "curve '" + c.id + "': times not strictly increasing");
  }
}

inline void validate_dataset(const FunctionalDataset& ds) {
  if (ds.empty()) throw Error(Errc::EmptyDataset, "dataset has no curves");
  std::set<std::string> ids;
  std::set<double> distinct;
  for (const auto& c : ds.curves) {
    validate_curve(c);
    if (!ids.insert(c.id).second) throw Error(Errc::InvalidInput, "duplicate curve id '" + c.id + "'");
    distinct.insert(c.times.begin(), c.times.end());
  }
  if (distinct.size() < 2) throw Error(Errc::InvalidInput, "fewer than 2 distinct observed times");
}

struct CsvOptions {
  IncompletenessMode mode = IncompletenessMode::Complete;
  /// Fixed raw domain for normalization; pooled min/max of the data when unset.
  std::optional<std::pair<double, double>> domain;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '"')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '"')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end || s.empty() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Formats with 17 significant digits (round-trip safe).
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Reads a long-format `id,t,y` CSV. Rows are grouped by id (first-appearance
/// order), sorted by t within each curve, and times are affinely mapped to
/// [0,1] using the pooled min/max (or `opts.domain`).
inline FunctionalDataset read_csv_stream(std::istream& in, const CsvOptions& opts = {}) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::MissingColumn, "empty file: header `id,t,y` required");
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(Errc::MissingColumn, "column '" + name + "' not found in header");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = column("id");
  const std::size_t t_col = column("t");
  const std::size_t y_col = column("y");
  const std::size_t needed = std::max({id_col, t_col, y_col}) + 1;

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<double, double>>> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < needed)
      throw Error(Errc::NonNumericCell, "row " + std::to_string(row) + ": too few columns");
    const auto t = detail::parse_double(cells[t_col]);
    const auto y = detail::parse_double(cells[y_col]);
    if (!t || !y) throw Error(Errc::NonNumericCell, "row " + std::to_string(row) + ": non-numeric t or y");
    auto [it, inserted] = rows.try_emplace(cells[id_col]);
    if (inserted) order.push_back(cells[id_col]);
    it->second.emplace_back(*t, *y);
  }
  if (order.empty()) throw Error(Errc::EmptyDataset, "no data rows");

  double lo = 0.0, hi = 0.0;
  if (opts.domain) {
    std::tie(lo, hi) = *opts.domain;
  } else {
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (const auto& [id, pts] : rows)
      for (const auto& [t, y] : pts) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
      }
  }
  if (!(hi > lo)) throw Error(Errc::InvalidInput, "time domain is degenerate (need >= 2 distinct times)");

  FunctionalDataset ds;
  ds.mode = opts.mode;
  ds.raw_domain = {lo, hi};
  for (const auto& id : order) {
    auto pts = rows.at(id);
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    Curve c;
    c.id = id;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j > 0 && pts[j].first == pts[j - 1].first)
        throw Error(Errc::DuplicateTimeWithinCurve, "curve '" + id + "' repeats t=" + format_double(pts[j].first));
      const double t = pts[j].first;
      if (t < lo || t > hi) throw Error(Errc::OutOfDomain, "curve '" + id + "' time outside the fixed domain");
      // Endpoints map exactly onto 0 and 1.
      c.times.push_back(t == lo ? 0.0 : t == hi ? 1.0 : (t - lo) / (hi - lo));
      c.values.push_back(pts[j].second);
    }
    if (c.size() < 2) throw Error(Errc::CurveTooShort, "curve '" + id + "' has fewer than 2 samples");
    ds.curves.push_back(std::move(c));
  }
  return ds;
}

inline FunctionalDataset load_csv(const std::string& path, const CsvOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path + "'");
  return read_csv_stream(in, opts);
}

inline void write_curves_stream(const FunctionalDataset& ds, std::ostream& out) {
  if (ds.empty()) throw Error(Errc::InvalidInput, "refusing to write an empty dataset");
  out << "id,t,y\n";
  for (const auto& c : ds.curves)
    for (std::size_t j = 0; j < c.size(); ++j)
      out << c.id << ',' << format_double(ds.to_raw(c.times[j])) << ',' << format_double(c.values[j]) << '\n';
}

/// Writes the dataset as long-format CSV with de-normalized times.
inline void write_curves(const FunctionalDataset& ds, const std::string& path) {
  if (ds.empty()) throw Error(Errc::InvalidInput, "refusing to write an empty dataset");
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write '" + path + "'");
  write_curves_stream(ds, out);
  if (!out) throw Error(Errc::IoError, "write failed for '" + path + "'");
}

}  // namespace regfpca
