#include "mixline/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "mixline/errors.hpp"

namespace mixline::harness {

namespace {

std::string format_with(const char* fmt, double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace

std::string format_g17(double v) { return format_with("%.17g", v); }
std::string format_g6(double v) { return format_with("%.6g", v); }

std::string online_csv_row(const rl::TrainIterationRow& row) {
  std::ostringstream ss;
  ss << row.iteration << ',' << row.env_steps << ',' << format_g17(row.mean_return) << ','
     << format_g17(row.success_rate) << ',' << format_g17(row.kl) << ','
     << format_g17(row.beta) << ',' << row.phase;
  return ss.str();
}

std::string offline_csv_row(std::uint64_t iteration, const rl::OfflineRow& row) {
  std::ostringstream ss;
  ss << iteration << ',' << row.grad_step << ',' << format_g17(row.mean_return) << ','
     << format_g17(row.success_rate) << ",nan,nan,offline,"
     << format_g17(row.mean_dataset_q) << ',' << format_g17(row.mean_mc_return);
  return ss.str();
}

std::string offline_diagnostics_row(const rl::OfflineRow& row) {
  std::ostringstream ss;
  ss << row.grad_step << ',' << format_g17(row.bellman_loss) << ',' << format_g17(row.cql_reg)
     << ',' << format_g17(row.policy_loss) << ',' << format_g17(row.alpha_ent);
  return ss.str();
}

CsvWriter::CsvWriter(const std::string& path, const std::string& header) : path_(path) {
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw ConfigError("cannot write metrics file: " + path);
  out_ << header << '\n';
  out_.flush();
}

void CsvWriter::line(const std::string& row) {
  out_ << row << '\n';
  out_.flush();
  if (!out_) throw ConfigError("write failed on metrics file: " + path_);
}

int CsvTable::col(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return static_cast<int>(i);
  }
  return -1;
}

bool CsvTable::numeric_column(int c) const {
  if (c < 0 || static_cast<std::size_t>(c) >= columns.size()) return false;
  for (const auto& row : rows) {
    const std::string& cell = row[static_cast<std::size_t>(c)];
    if (cell.empty()) return false;
    char* end = nullptr;
    std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size()) return false;
  }
  return true;
}

double CsvTable::num(std::size_t row, int c) const {
  const std::string& cell = rows.at(row).at(static_cast<std::size_t>(c));
  char* end = nullptr;
  double v = std::strtod(cell.c_str(), &end);
  if (cell.empty() || end != cell.c_str() + cell.size())
    throw FormatError("non-numeric CSV cell '" + cell + "' in column " + columns[c]);
  return v;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read CSV: " + path);
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == EOF) break;  // trailing newline
    std::vector<std::string> cells;
    std::string cell;
    for (char ch : line) {
      if (ch == ',') {
        cells.push_back(cell);
        cell.clear();
      } else {
        cell += ch;
      }
    }
    cells.push_back(cell);
    if (first) {
      table.columns = std::move(cells);
      first = false;
    } else {
      if (cells.size() != table.columns.size())
        throw FormatError("ragged CSV row in " + path);
      table.rows.push_back(std::move(cells));
    }
  }
  if (first) throw FormatError("empty CSV: " + path);
  return table;
}

}  // namespace mixline::harness
