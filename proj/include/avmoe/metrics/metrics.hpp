#pragma once

#include "avmoe/core/types.hpp"

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace avmoe::metrics {

/// 1-based ranks, tied values sharing their average rank.
std::vector<double> average_ranks(const std::vector<double>& x);

/// Pearson correlation of the average-rank vectors.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Population standard deviation over mean.
double coeff_of_variation(const std::vector<double>& counts);

/// Scales nonnegative entries to sum to 1.
std::vector<double> normalize_histogram(const std::vector<double>& counts);

/// Shortest text that parses back to the same double (at most 17 digits).
std::string format_number(double v);

using Cell = std::variant<double, long long, std::string>;

/// Comma separated, newline terminated, no quoting. Cells are kept as text.
class CsvTable {
 public:
  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> header);

  void add_row(const std::vector<Cell>& cells);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  std::size_t column(const std::string& name) const;
  const std::string& cell(std::size_t row, std::size_t col) const;
  double number(std::size_t row, std::size_t col) const;
  std::vector<double> numbers(const std::string& column_name) const;

  std::string to_string() const;
  static CsvTable parse(const std::string& text);

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Writes through a temporary file and a rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
void write_table(const CsvTable& table, const std::filesystem::path& path);
CsvTable read_table(const std::filesystem::path& path);

}  // namespace avmoe::metrics
