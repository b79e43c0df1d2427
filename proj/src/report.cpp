#include "lmlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace lmlab {

std::map<std::string, double> SeedReport::flat() const {
  std::map<std::string, double> out = global;
  for (const SettingReport& s : settings)
    for (const auto& [name, v] : s.metrics) out[name + "[" + s.label + "]"] = v;
  return out;
}

nlohmann::json decode_params_to_json(const DecodeParams& p) {
  nlohmann::json j{{"strategy", to_string(p.strategy)},
                   {"max_new_tokens", p.max_new_tokens}};
  switch (p.strategy) {
    case Strategy::kTopK: j["k"] = p.k; break;
    case Strategy::kTopP: j["p"] = p.p; break;
    case Strategy::kBeam: j["beam_width"] = p.beam_width; break;
    default: break;
  }
  if (p.temperature != 1.0) j["temperature"] = p.temperature;
  if (p.block_ngram) j["block_ngram"] = *p.block_ngram;
  if (p.penalty_discount) j["penalty_discount"] = *p.penalty_discount;
  return j;
}

DecodeParams decode_params_from_json(const nlohmann::json& j) {
  DecodeParams p;
  p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  p.k = j.value("k", 1);
  p.p = j.value("p", 1.0);
  p.temperature = j.value("temperature", 1.0);
  p.beam_width = j.value("beam_width", 1);
  if (j.contains("block_ngram")) p.block_ngram = j["block_ngram"].get<int>();
  if (j.contains("penalty_discount"))
    p.penalty_discount = j["penalty_discount"].get<double>();
  p.max_new_tokens = j.value("max_new_tokens", 100);
  p.validate();
  return p;
}

nlohmann::json to_json(const SeedReport& r) {
  nlohmann::json settings = nlohmann::json::array();
  for (const SettingReport& s : r.settings)
    settings.push_back(nlohmann::json{{"label", s.label},
                                      {"params", decode_params_to_json(s.params)},
                                      {"metrics", s.metrics}});
  return nlohmann::json{{"split", r.split},
                        {"seed", r.seed},
                        {"model_step", r.model_step},
                        {"config_hash", r.config_hash},
                        {"global", r.global},
                        {"settings", std::move(settings)}};
}

SeedReport seed_report_from_json(const nlohmann::json& j) {
  SeedReport r;
  r.split = j.value("split", "valid");
  r.seed = j.value("seed", std::uint64_t{0});
  r.model_step = j.value("model_step", -1);
  r.config_hash = j.value("config_hash", "");
  r.global = j.at("global").get<std::map<std::string, double>>();
  for (const auto& s : j.at("settings")) {
    SettingReport sr;
    sr.label = s.at("label").get<std::string>();
    sr.params = decode_params_from_json(s.at("params"));
    sr.metrics = s.at("metrics").get<std::map<std::string, double>>();
    r.settings.push_back(std::move(sr));
  }
  return r;
}

void save_seed_report(const SeedReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot write report: " + path);
  f << to_json(r).dump(2) << '\n';
}

SeedReport load_seed_report(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("report not found: " + path);
  return seed_report_from_json(nlohmann::json::parse(f));
}

AggregateReport aggregate_reports(const std::string& name,
                                  const std::vector<SeedReport>& reports) {
  if (reports.empty())
    throw ContractError("aggregate_reports needs at least one report");
  AggregateReport agg;
  agg.name = name;
  std::map<std::string, std::vector<double>> values;
  for (const SeedReport& r : reports) {
    agg.seeds.push_back(r.seed);
    for (const auto& [k, v] : r.flat()) values[k].push_back(v);
  }
  for (const auto& [k, vs] : values) {
    AggregateCell cell;
    cell.count = vs.size();
    for (double v : vs) cell.mean += v;
    cell.mean /= static_cast<double>(vs.size());
    double sq = 0.0;
    for (double v : vs) sq += (v - cell.mean) * (v - cell.mean);
    cell.stddev = std::sqrt(sq / static_cast<double>(vs.size()));
    agg.cells[k] = cell;
  }
  return agg;
}

bool higher_is_better(const std::string& metric) {
  static const std::vector<std::string> up = {"uniq", "uniq_seq", "dimen",
                                             "sp", "reward"};
  for (const auto& u : up)
    if (metric.rfind(u, 0) == 0) return true;
  return false;  // ppl, eps_ppl, rep, wrep, seq_rep_*, jsd
}

namespace {

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  if (std::isinf(v)) {
    os << (v > 0 ? "inf" : "-inf");
  } else if (std::abs(v) >= 1000.0) {
    os << std::fixed << std::setprecision(1) << v;
  } else {
    os << std::fixed << std::setprecision(prec) << v;
  }
  return os.str();
}

std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace

std::string format_run_table(const SeedReport& report) {
  // Column set: union of per-setting metric names, stable order.
  std::vector<std::string> cols;
  for (const SettingReport& s : report.settings)
    for (const auto& [k, v] : s.metrics)
      if (std::find(cols.begin(), cols.end(), k) == cols.end())
        cols.push_back(k);
  std::sort(cols.begin(), cols.end());

  std::ostringstream os;
  os << "split=" << report.split << " seed=" << report.seed
     << " step=" << report.model_step << '\n';
  for (const auto& [k, v] : report.global) os << k << "=" << fmt(v) << "  ";
  os << "\n\n";
  std::size_t label_w = 12;
  for (const SettingReport& s : report.settings)
    label_w = std::max(label_w, s.label.size() + 2);
  os << pad("method", label_w);
  for (const auto& c : cols) os << pad(c, 12);
  os << '\n';
  for (const SettingReport& s : report.settings) {
    os << pad(s.label, label_w);
    for (const auto& c : cols) {
      auto it = s.metrics.find(c);
      os << pad(it == s.metrics.end() ? "-" : fmt(it->second), 12);
    }
    os << '\n';
  }
  return os.str();
}

std::string format_compare_table(const std::vector<AggregateReport>& runs,
                                 std::vector<std::string>* warnings) {
  if (runs.size() < 2)
    throw ContractError("compare needs at least two runs");
  std::vector<std::string> cols;
  for (const AggregateReport& r : runs)
    for (const auto& [k, cell] : r.cells)
      if (std::find(cols.begin(), cols.end(), k) == cols.end())
        cols.push_back(k);
  std::sort(cols.begin(), cols.end());

  // Best value per column among runs that have it.
  std::map<std::string, double> best;
  for (const std::string& c : cols) {
    bool first = true;
    for (const AggregateReport& r : runs) {
      auto it = r.cells.find(c);
      if (it == r.cells.end()) {
        if (warnings)
          warnings->push_back("run '" + r.name + "' lacks metric '" + c + "'");
        continue;
      }
      if (first || (higher_is_better(c) ? it->second.mean > best[c]
                                        : it->second.mean < best[c])) {
        best[c] = it->second.mean;
        first = false;
      }
    }
  }

  std::size_t name_w = 8;
  for (const AggregateReport& r : runs)
    name_w = std::max(name_w, r.name.size() + 2);
  std::ostringstream os;
  os << "# cells are mean +/- population std over seeds; '*' marks the best "
        "column value\n";
  os << pad("run", name_w);
  const std::size_t cw = 22;
  for (const auto& c : cols) os << pad(c, cw);
  os << '\n';
  for (const AggregateReport& r : runs) {
    os << pad(r.name, name_w);
    for (const auto& c : cols) {
      auto it = r.cells.find(c);
      if (it == r.cells.end()) {
        os << pad("-", cw);
        continue;
      }
      std::string cell = fmt(it->second.mean) + "±" + fmt(it->second.stddev, 4);
      if (it->second.mean == best[c]) cell += "*";
      os << pad(cell, cw);
    }
    os << '\n';
  }
  return os.str();
}

std::string config_hash(const nlohmann::json& j) {
  const std::string dump = j.dump();  // nlohmann sorts object keys
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << h;
  return os.str();
}

}  // namespace lmlab
