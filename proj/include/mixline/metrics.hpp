#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mixline/cql.hpp"
#include "mixline/ppo.hpp"

namespace mixline::harness {

// Online training rows. Offline rows share the schema and append the two
// conservatism columns; there env_steps carries the gradient step and the
// kl/beta cells are nan with phase "offline".
inline constexpr char kOnlineCsvHeader[] =
    "iteration,env_steps,mean_return,success_rate,kl,beta,phase";
inline constexpr char kOfflineCsvHeader[] =
    "iteration,env_steps,mean_return,success_rate,kl,beta,phase,mean_dataset_q,mean_mc_return";
inline constexpr char kOfflineDiagnosticsHeader[] =
    "grad_step,bellman_loss,cql_reg,policy_loss,alpha_ent";

// %.17g (round-trips doubles exactly); any NaN prints "nan".
std::string format_g17(double v);
// %.6g, for plot coordinates.
std::string format_g6(double v);

std::string online_csv_row(const rl::TrainIterationRow& row);
std::string offline_csv_row(std::uint64_t iteration, const rl::OfflineRow& row);
std::string offline_diagnostics_row(const rl::OfflineRow& row);

// Opens the file, writes the header, then appends one line per call with a
// flush (rows survive a crash mid-run). Unwritable path is a ConfigError.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header);
  void line(const std::string& row);

 private:
  std::ofstream out_;
  std::string path_;
};

// In-memory CSV: header row plus string cells. Numeric access parses on
// demand so the phase column can stay text.
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const;  // -1 when absent
  bool numeric_column(int c) const;        // every cell parses as a double ("nan" counts)
  double num(std::size_t row, int c) const;
};

// Throws FormatError on a missing file, an empty file, or ragged rows.
CsvTable read_csv(const std::string& path);

}  // namespace mixline::harness
