#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cfpanel/errors.hpp"
#include "cfpanel/panel.hpp"

namespace cfpanel {

/// Column mapping for the long-format panel CSV.
struct PanelSchema {
  std::string unit = "unit";
  std::string time = "time";
  std::string outcome = "y";
  std::string x1_prefix = "x1_";
  std::string x2_prefix = "x2_";
  std::string z_prefix = "z_";
  std::string l_prefix = "l_";
  std::string zl_prefix = "zl_";
};

namespace csv_detail {

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
      field.remove_suffix(1);
    out.push_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

inline bool parse_int(std::string_view s, long long& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

/// Columns whose header is prefix + positive integer, ordered by that integer.
inline std::vector<std::size_t> prefixed(const std::vector<std::string_view>& header, const std::string& prefix) {
  std::vector<std::pair<long long, std::size_t>> found;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c].size() <= prefix.size() || header[c].substr(0, prefix.size()) != prefix) continue;
    long long k = 0;
    if (parse_int(header[c].substr(prefix.size()), k)) found.emplace_back(k, c);
  }
  std::sort(found.begin(), found.end());
  std::vector<std::size_t> cols;
  for (std::size_t k = 0; k < found.size(); ++k) {
    if (found[k].first != static_cast<long long>(k + 1))
      throw DataError("columns with prefix '" + prefix + "' must be numbered 1.." + std::to_string(found.size()));
    cols.push_back(found[k].second);
  }
  return cols;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

} // namespace csv_detail

/// Parse a long-format panel (one row per unit-period) from a stream.
inline PanelData read_panel(std::istream& in, const PanelSchema& schema = {}) {
  using namespace csv_detail;
  std::string header_line;
  if (!std::getline(in, header_line)) throw DataError("empty panel file");
  if (header_line.size() >= 3 && static_cast<unsigned char>(header_line[0]) == 0xEF) header_line.erase(0, 3);
  const auto header = split(header_line);
  auto find = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_unit = find(schema.unit);
  const std::size_t c_time = find(schema.time);
  const std::size_t c_y = find(schema.outcome);
  const auto c_x1 = prefixed(header, schema.x1_prefix);
  const auto c_x2 = prefixed(header, schema.x2_prefix);
  const auto c_z = prefixed(header, schema.z_prefix);
  const auto c_l = prefixed(header, schema.l_prefix);
  const auto c_zl = prefixed(header, schema.zl_prefix);

  struct Row {
    long long time;
    std::vector<double> values;
  };
  std::vector<std::size_t> value_cols{c_y};
  for (const auto* group : {&c_x1, &c_x2, &c_z, &c_l, &c_zl})
    value_cols.insert(value_cols.end(), group->begin(), group->end());

  std::map<std::string, std::vector<Row>> by_unit;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split(line);
    if (fields.size() != header.size())
      throw DataError("row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    Row row;
    if (!parse_int(fields[c_time], row.time))
      throw DataError("row " + std::to_string(line_no) + ": non-integer time '" + std::string(fields[c_time]) + "'");
    row.values.reserve(value_cols.size());
    for (std::size_t c : value_cols) {
      double v = 0.0;
      if (!parse_double(fields[c], v) || !std::isfinite(v))
        throw DataError("row " + std::to_string(line_no) + ": non-numeric value '" + std::string(fields[c]) +
                        "' in column '" + std::string(header[c]) + "'");
      row.values.push_back(v);
    }
    by_unit[std::string(fields[c_unit])].push_back(std::move(row));
  }
  if (by_unit.empty()) throw DataError("panel file has no data rows");

  std::vector<std::string> ids;
  bool numeric_ids = true;
  for (const auto& [id, rows] : by_unit) {
    ids.push_back(id);
    long long tmp = 0;
    numeric_ids = numeric_ids && parse_int(id, tmp);
  }
  if (numeric_ids)
    std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
      return std::stoll(a) < std::stoll(b);
    });

  std::vector<long long> periods;
  for (const auto& [id, rows] : by_unit)
    for (const auto& r : rows) periods.push_back(r.time);
  std::sort(periods.begin(), periods.end());
  periods.erase(std::unique(periods.begin(), periods.end()), periods.end());

  PanelData p;
  p.n = static_cast<Index>(ids.size());
  p.T = static_cast<Index>(periods.size());
  p.d1 = static_cast<Index>(c_x1.size());
  p.d2 = static_cast<Index>(c_x2.size());
  p.dz = static_cast<Index>(c_z.size());
  p.dl = static_cast<Index>(c_l.size());
  p.dzl = static_cast<Index>(c_zl.size());
  p.unit_ids = ids;
  p.periods = periods;
  p.y.resize(p.n, p.T);
  p.x1.resize(p.n, p.T * p.d1);
  p.x2.resize(p.n, p.T * p.d2);
  p.z.resize(p.n, p.T * p.dz);
  p.l.resize(p.n, p.T * p.dl);
  p.zl.resize(p.n, p.T * p.dzl);

  for (Index i = 0; i < p.n; ++i) {
    auto& rows = by_unit[ids[static_cast<std::size_t>(i)]];
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.time < b.time; });
    for (std::size_t k = 1; k < rows.size(); ++k)
      if (rows[k].time == rows[k - 1].time)
        throw DataError("unbalanced panel: unit '" + ids[static_cast<std::size_t>(i)] + "' has duplicate period " +
                        std::to_string(rows[k].time));
    if (rows.size() != periods.size()) {
      std::string missing;
      for (long long t : periods)
        if (std::none_of(rows.begin(), rows.end(), [t](const Row& r) { return r.time == t; })) {
          missing = std::to_string(t);
          break;
        }
      throw DataError("unbalanced panel: unit '" + ids[static_cast<std::size_t>(i)] + "' is missing period " + missing);
    }
    for (Index t = 0; t < p.T; ++t) {
      const auto& v = rows[static_cast<std::size_t>(t)].values;
      std::size_t k = 0;
      p.y(i, t) = v[k++];
      for (Index j = 0; j < p.d1; ++j) p.x1(i, t * p.d1 + j) = v[k++];
      for (Index j = 0; j < p.d2; ++j) p.x2(i, t * p.d2 + j) = v[k++];
      for (Index j = 0; j < p.dz; ++j) p.z(i, t * p.dz + j) = v[k++];
      for (Index j = 0; j < p.dl; ++j) p.l(i, t * p.dl + j) = v[k++];
      for (Index j = 0; j < p.dzl; ++j) p.zl(i, t * p.dzl + j) = v[k++];
    }
  }
  // Without zl_ columns the homogeneous block instruments itself.
  if (p.dzl == 0 && p.dl > 0) {
    p.zl = p.l;
    p.dzl = p.dl;
  }
  p.validate();
  return p;
}

inline PanelData load_panel(const std::string& path, const PanelSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open panel file '" + path + "'");
  return read_panel(in, schema);
}

/// Write a panel in the long format read by read_panel. Values use the shortest
/// representation that round-trips exactly.
inline void write_panel(std::ostream& out, const PanelData& p) {
  using csv_detail::format_double;
  out << "unit,time,y";
  auto head = [&](const char* prefix, Index d) {
    for (Index j = 1; j <= d; ++j) out << ',' << prefix << j;
  };
  head("x1_", p.d1);
  head("x2_", p.d2);
  head("z_", p.dz);
  head("l_", p.dl);
  head("zl_", p.dzl);
  out << '\n';
  for (Index i = 0; i < p.n; ++i) {
    const std::string id = p.unit_ids.empty() ? std::to_string(i + 1) : p.unit_ids[static_cast<std::size_t>(i)];
    for (Index t = 0; t < p.T; ++t) {
      out << id << ',' << (p.periods.empty() ? t + 1 : p.periods[static_cast<std::size_t>(t)]) << ','
          << format_double(p.y(i, t));
      auto row = [&](const MatrixXd& m, Index d) {
        for (Index j = 0; j < d; ++j) out << ',' << format_double(m(i, t * d + j));
      };
      row(p.x1, p.d1);
      row(p.x2, p.d2);
      row(p.z, p.dz);
      row(p.l, p.dl);
      row(p.zl, p.dzl);
      out << '\n';
    }
  }
}

inline void save_panel(const std::string& path, const PanelData& p) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write panel file '" + path + "'");
  write_panel(out, p);
}

} // namespace cfpanel
