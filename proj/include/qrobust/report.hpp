#pragma once

#include <string>
#include <vector>

#include "qrobust/model_json.hpp"

namespace qrobust {

inline constexpr const char* kToolkitVersion = "0.1.0";

struct AttackReportRow {
  AttackConfig config;
  int64_t samples = 0;
  double clean_accuracy = 0.0;
  double accuracy = 0.0;  // top-1 under attack, percent
  double mean_norm = 0.0;
  double mean_queries = 0.0;
  int64_t errors = 0;
  int64_t no_ops = 0;
  double within_threshold_pct = -1.0;  // boundary success-threshold fraction
};

// Self-describing evaluation report: every number is reproducible from the
// embedded config plus the data files.
struct EvalReport {
  Json config_echo;
  double clean_accuracy = 0.0;
  int64_t clean_samples = 0;
  std::vector<AttackReportRow> attacks;
  double mean_jr = 0.0;
  int64_t jr_probe_samples = 0;
  FootprintReport footprint;
  std::vector<double> fold_accuracies;  // kfold runs only

  Json to_json() const;
  std::string attacks_csv() const;
};

std::string footprint_csv(const FootprintReport& rep);
std::string footprint_scheme_csv(const std::vector<std::pair<std::string, FootprintReport>>& rows);

// Whitespace-delimited series for gnuplot: one "x y" pair per line.
std::string dat_series(const std::string& header,
                       const std::vector<std::pair<double, double>>& points);

void write_text_file(const std::string& path, const std::string& content);

// Pretty JSON with a trailing newline (stable key order via ordered_json).
void write_json_file(const std::string& path, const Json& j);

std::string format_g(double v);

}  // namespace qrobust
