#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmlab/decode.hpp"
#include "lmlab/error.hpp"

// Metric reports and their serializations: one JSON report per (run, seed),
// a flat text table per run, and the cross-run comparison with mean +/-
// population std over seeds and a best-per-column marker.

namespace lmlab {

struct Provenance {
  std::string split;
  std::string decoding;  // setting label, or "teacher-forced"/"n/a"
  std::string seed;      // "3" for one seed, "1,2,3" for aggregates
};

struct SettingReport {
  std::string label;
  DecodeParams params;
  // metric name -> value (e.g. seq_rep_4, rep, wrep, eps_ppl, jsd, sp,
  // dimen, uniq_seq)
  std::map<std::string, double> metrics;
};

struct SeedReport {
  std::string split = "valid";
  std::uint64_t seed = 0;
  int model_step = -1;              // checkpoint the metrics came from
  std::string config_hash;
  std::map<std::string, double> global;  // ppl, uniq, ...
  std::vector<SettingReport> settings;

  // Flattened view: global metrics keep their name, per-setting metrics
  // become "metric[label]".
  std::map<std::string, double> flat() const;
};

struct AggregateCell {
  double mean = 0.0;
  double stddev = 0.0;  // population std over seeds
  std::size_t count = 0;
};

struct AggregateReport {
  std::string name;  // usually the run directory name
  std::map<std::string, AggregateCell> cells;
  std::vector<std::uint64_t> seeds;
};

nlohmann::json to_json(const SeedReport& r);
SeedReport seed_report_from_json(const nlohmann::json& j);

void save_seed_report(const SeedReport& r, const std::string& path);
SeedReport load_seed_report(const std::string& path);

AggregateReport aggregate_reports(const std::string& name,
                                  const std::vector<SeedReport>& reports);

// Lower-is-better for ppl/rep/seq_rep/jsd-style metrics, higher for
// uniq/dimen/sp/reward. Used by the comparison table's best markers.
bool higher_is_better(const std::string& metric);

// Flat per-run table: rows = decode settings, columns = metrics.
std::string format_run_table(const SeedReport& report);

// Comparison table: rows = runs, columns = the union of flattened metrics,
// cells = mean +/- std, best per column marked with '*'. Metrics missing
// from a run render as '-' and are listed in `warnings`.
std::string format_compare_table(const std::vector<AggregateReport>& runs,
                                 std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// DecodeParams <-> JSON (used by configs and reports).

nlohmann::json decode_params_to_json(const DecodeParams& p);
DecodeParams decode_params_from_json(const nlohmann::json& j);

// FNV-1a over a canonical (sorted-key, no-whitespace) JSON dump: stable
// under key reordering and formatting.
std::string config_hash(const nlohmann::json& j);

}  // namespace lmlab
