#include "avmoe/metrics/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace avmoe::metrics {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman: lengths differ");
  if (x.size() < 2) throw PreconditionError("spearman: need at least two points");
  for (double v : x)
    if (!std::isfinite(v)) throw PreconditionError("spearman: non-finite input");
  for (double v : y)
    if (!std::isfinite(v)) throw PreconditionError("spearman: non-finite input");
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw PreconditionError("spearman: undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double coeff_of_variation(const std::vector<double>& counts) {
  if (counts.empty()) throw PreconditionError("coeff_of_variation: empty input");
  const double n = double(counts.size());
  const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / n;
  if (!(mean > 0.0)) throw PreconditionError("coeff_of_variation: mean must be positive");
  double ss = 0;
  for (double c : counts) ss += (c - mean) * (c - mean);
  return std::sqrt(ss / n) / mean;
}

std::vector<double> normalize_histogram(const std::vector<double>& counts) {
  double total = 0;
  for (double c : counts) {
    if (c < 0.0) throw PreconditionError("normalize_histogram: negative count");
    total += c;
  }
  if (!(total > 0.0)) throw PreconditionError("normalize_histogram: counts sum to zero");
  std::vector<double> out(counts);
  for (double& c : out) c /= total;
  return out;
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw PreconditionError("csv: empty header");
}

void CsvTable::add_row(const std::vector<Cell>& cells) {
  if (cells.size() != header_.size())
    throw DimensionError("csv: row " + std::to_string(rows_.size()) + " has " + std::to_string(cells.size()) +
                         " cells, header has " + std::to_string(header_.size()));
  std::vector<std::string> row;
  for (const Cell& c : cells) {
    if (const double* d = std::get_if<double>(&c))
      row.push_back(format_number(*d));
    else if (const long long* i = std::get_if<long long>(&c))
      row.push_back(std::to_string(*i));
    else
      row.push_back(std::get<std::string>(c));
    if (row.back().find_first_of(",\n") != std::string::npos)
      throw PreconditionError("csv: cell '" + row.back() + "' needs quoting");
  }
  rows_.push_back(std::move(row));
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header_.begin(), header_.end(), name);
  if (it == header_.end()) throw IndexError("csv: no column '" + name + "'");
  return static_cast<std::size_t>(it - header_.begin());
}

const std::string& CsvTable::cell(std::size_t row, std::size_t col) const {
  if (row >= rows_.size() || col >= header_.size())
    throw IndexError("csv: cell (" + std::to_string(row) + ", " + std::to_string(col) + ") out of range");
  return rows_[row][col];
}

double CsvTable::number(std::size_t row, std::size_t col) const {
  const std::string& s = cell(row, col);
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("csv: row " + std::to_string(row) + ", column " + header_[col] + ": '" + s +
                     "' is not a number");
  return v;
}

std::vector<double> CsvTable::numbers(const std::string& name) const {
  const std::size_t c = column(name);
  std::vector<double> out;
  for (std::size_t r = 0; r < rows_.size(); ++r) out.push_back(number(r, c));
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

void append_row(std::string& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  out += '\n';
}

}  // namespace

std::string CsvTable::to_string() const {
  std::string out;
  append_row(out, header_);
  for (const auto& r : rows_) append_row(out, r);
  return out;
}

CsvTable CsvTable::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw ParseError("csv: missing header");
  CsvTable t(split(line));
  std::size_t row = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells = split(line);
    if (cells.size() != t.header_.size())
      throw ParseError("csv: row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(t.header_.size()));
    t.rows_.push_back(std::move(cells));
    ++row;
  }
  return t;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_table(const CsvTable& table, const std::filesystem::path& path) {
  write_text_atomic(path, table.to_string());
}

CsvTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return CsvTable::parse(ss.str());
}

}  // namespace avmoe::metrics
