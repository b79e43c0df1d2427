#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmlab/checkpoint.hpp"
#include "lmlab/corpus.hpp"
#include "lmlab/error.hpp"
#include "lmlab/metrics.hpp"
#include "lmlab/model.hpp"
#include "lmlab/objectives.hpp"
#include "lmlab/rng.hpp"

// Training: stochastic alternation between MLE, sequence-level unlikelihood
// and policy-gradient updates, Adam with linear warmup/decay, periodic
// validation, and checkpoint selection by least validation perplexity.

namespace lmlab {

enum class RegimeTag { kMle, kUt, kPg, kPgUt, kIut };

inline RegimeTag regime_from_string(const std::string& s) {
  if (s == "mle") return RegimeTag::kMle;
  if (s == "ut") return RegimeTag::kUt;
  if (s == "pg") return RegimeTag::kPg;
  if (s == "pg-ut" || s == "pg_ut") return RegimeTag::kPgUt;
  if (s == "iut" || s == "i-ut") return RegimeTag::kIut;
  throw ConfigError("unknown regime '" + s + "' (want mle|ut|pg|pg-ut|iut)");
}

inline std::string to_string(RegimeTag tag) {
  switch (tag) {
    case RegimeTag::kMle: return "mle";
    case RegimeTag::kUt: return "ut";
    case RegimeTag::kPg: return "pg";
    case RegimeTag::kPgUt: return "pg-ut";
    case RegimeTag::kIut: return "iut";
  }
  return "?";
}

struct Regime {
  RegimeTag tag = RegimeTag::kMle;
  double update_rate = 0.5;     // r: probability of a regularization step
  double pg_coefficient = 3.0;  // c: scales the policy-gradient loss only
  int repeat_n = 4;
  int T = 100;                  // continuation length
  int prefix_len = 50;
  int prefixes_per_update = 6;  // m
  RolloutMode rollout_mode = RolloutMode::kGreedy;

  void validate() const {
    if (update_rate <= 0.0 || update_rate >= 1.0) {
      if (tag != RegimeTag::kMle)
        throw ConfigError("update rate must lie in (0, 1)");
    }
    if (pg_coefficient <= 0.0)
      throw ConfigError("pg coefficient must be positive");
    if (repeat_n < 1 || T < repeat_n)
      throw ConfigError("need repeat_n >= 1 and T >= repeat_n");
    if (prefix_len < 1 || prefixes_per_update < 2)
      throw ConfigError("need prefix_len >= 1 and at least 2 prefixes");
  }
};

enum class UpdateKind { kMle, kUl, kPg, kPgPlusUl };

inline std::string to_string(UpdateKind k) {
  switch (k) {
    case UpdateKind::kMle: return "mle";
    case UpdateKind::kUl: return "ul";
    case UpdateKind::kPg: return "pg";
    case UpdateKind::kPgPlusUl: return "pg+ul";
  }
  return "?";
}

// One draw of the update alternation. The i-UT regime spends a fair coin
// between PG and UL whenever the regularization branch fires.
inline UpdateKind pick_update(const Regime& regime, Rng& rng) {
  switch (regime.tag) {
    case RegimeTag::kMle:
      return UpdateKind::kMle;
    case RegimeTag::kUt:
      return rng.uniform() < regime.update_rate ? UpdateKind::kUl
                                                : UpdateKind::kMle;
    case RegimeTag::kPg:
      return rng.uniform() < regime.update_rate ? UpdateKind::kPg
                                                : UpdateKind::kMle;
    case RegimeTag::kPgUt:
      return rng.uniform() < regime.update_rate ? UpdateKind::kPgPlusUl
                                                : UpdateKind::kMle;
    case RegimeTag::kIut: {
      if (rng.uniform() >= regime.update_rate) return UpdateKind::kMle;
      return rng.uniform() < 0.5 ? UpdateKind::kPg : UpdateKind::kUl;
    }
  }
  throw ConfigError("unknown regime tag");
}

struct LrSchedule {
  double base_lr = 6.25e-5;
  int warmup_steps = 500;
  int total_steps = 5000;

  void validate() const {
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
      throw ConfigError("warmup_steps must lie in [0, total_steps)");
  }
};

// Piecewise-linear: 0 -> base_lr over the warmup, base_lr -> 0 afterwards.
inline double lr_at(int step, const LrSchedule& s) {
  if (step < 0 || step > s.total_steps)
    throw ContractError("lr step " + std::to_string(step) +
                        " outside [0, total_steps]");
  if (s.warmup_steps > 0 && step <= s.warmup_steps)
    return s.base_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  return s.base_lr *
         static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

// ---------------------------------------------------------------------------
// Adam with bias correction. Moments are kept in double; parameters stay in
// the model scalar.

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step_count = 0;
};

// Global-norm gradient clip; returns the pre-clip norm.
template <typename S>
double clip_gradients(std::vector<std::pair<std::string, Tensor<S>>>& params,
                      double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (S g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (S& g : p.mutable_grad()) g = static_cast<S>(g * s);
    }
  }
  return norm;
}

template <typename S>
void adam_step(std::vector<std::pair<std::string, Tensor<S>>>& params,
               AdamState& state, double lr, const AdamParams& ap = {}) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.numel(), 0.0);
      state.v[i].assign(params[i].second.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ContractError("adam state does not match the parameter list");

  // Validate first so a non-finite gradient aborts before touching anything.
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (S g : p.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient in parameter " + name);
  }

  ++state.step_count;
  const double bc1 = 1.0 - std::pow(ap.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(ap.beta2, state.step_count);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = params[i].second;
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
      m[j] = ap.beta1 * m[j] + (1.0 - ap.beta1) * g;
      v[j] = ap.beta2 * v[j] + (1.0 - ap.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.data()[j] = static_cast<S>(static_cast<double>(p.data()[j]) -
                                   lr * mhat / (std::sqrt(vhat) + ap.eps));
    }
  }
}

// ---------------------------------------------------------------------------

struct EvalPoint {
  int step = 0;                // global step (pretrain + regime phases)
  std::string phase;           // "pretrain" | "regime"
  double valid_ppl = 0.0;
  std::map<std::string, int> update_counts;
  std::string checkpoint_dir;  // empty when persistence is off
};

struct TrainHistory {
  std::vector<double> losses;
  std::vector<UpdateKind> kinds;
  std::vector<double> rollout_rewards;  // mean reward per PG/UL step, else NaN
  std::vector<EvalPoint> evals;
  int selected_step = -1;
  double selected_ppl = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Index of the checkpoint with minimal validation perplexity; ties break
// toward the later step.
inline std::size_t select_checkpoint(std::span<const double> ppls) {
  if (ppls.empty()) throw ContractError("select_checkpoint needs evals");
  std::size_t best = 0;
  for (std::size_t i = 1; i < ppls.size(); ++i)
    if (ppls[i] <= ppls[best]) best = i;
  return best;
}

struct TrainConfig {
  Regime regime;
  LrSchedule schedule;          // the regime (fine-tuning) phase
  int pretrain_steps = 2000;    // plain MLE phase that precedes the regime
  int pretrain_warmup = 500;
  int mle_seq_len = 300;
  double grad_clip = 1.0;
  int eval_every = 250;
  int eval_sequences = 32;
  std::uint64_t seed = 1;
  std::string run_dir;          // empty disables persistence
  bool quiet = true;
};

// Mean validation NLL over the first `max_sequences` windows, as perplexity.
template <typename S>
double validation_perplexity(const LanguageModel<S>& model,
                             std::span<const int> valid, int seq_len,
                             int max_sequences) {
  auto seqs = make_mle_sequences(valid, static_cast<std::size_t>(seq_len));
  if (max_sequences > 0 &&
      seqs.size() > static_cast<std::size_t>(max_sequences))
    seqs.resize(static_cast<std::size_t>(max_sequences));
  TapeSuspend<S> pause;
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    Tensor<S> lsm = log_softmax(model.forward({s}));
    const std::size_t V = lsm.shape()[2];
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      nll -= static_cast<double>(
          lsm.data()[t * V + static_cast<std::size_t>(s[t + 1])]);
      ++count;
    }
  }
  return perplexity_from_mean_nll(nll / static_cast<double>(count));
}

namespace detail {

inline void append_log_line(const std::string& run_dir,
                            const nlohmann::json& line) {
  if (run_dir.empty()) return;
  std::ofstream f(std::filesystem::path(run_dir) / "log.jsonl",
                  std::ios::app | std::ios::binary);
  f << line.dump() << '\n';
}

}  // namespace detail

// Runs the MLE pretrain phase followed by the regime phase. The model is
// updated in place; checkpoints and a JSONL run log land in cfg.run_dir when
// set. Fully deterministic in (corpus, config, seed).
template <typename S>
TrainHistory train(LanguageModel<S>& model, const Split& data,
                   const TrainConfig& cfg) {
  cfg.regime.validate();
  cfg.schedule.validate();
  if (cfg.pretrain_steps > 0) {
    LrSchedule pre{cfg.schedule.base_lr, cfg.pretrain_warmup,
                   cfg.pretrain_steps};
    pre.validate();
  }
  if (cfg.eval_every < 1) throw ConfigError("eval_every must be >= 1");

  auto train_seqs =
      make_mle_sequences(data.train, static_cast<std::size_t>(cfg.mle_seq_len));
  if (data.valid.size() < static_cast<std::size_t>(cfg.mle_seq_len))
    throw ConfigError("validation split is shorter than one sequence");
  const int seq_per_batch =
      cfg.regime.prefix_len * cfg.regime.prefixes_per_update;
  if (cfg.mle_seq_len != seq_per_batch &&
      cfg.regime.tag != RegimeTag::kMle)
    throw ConfigError(
        "mle_seq_len must equal prefix_len * prefixes_per_update so one "
        "training sequence yields one prefix batch");

  if (!cfg.run_dir.empty())
    std::filesystem::create_directories(cfg.run_dir);

  auto params = model.parameters();
  AdamState adam;
  Rng pick_rng = Rng::stream(cfg.seed, 0x416Cull);
  TrainHistory hist;
  std::map<std::string, int> counts{
      {"mle", 0}, {"ul", 0}, {"pg", 0}, {"pg+ul", 0}};
  std::size_t cursor = 0;
  const int total_global = cfg.pretrain_steps + cfg.schedule.total_steps;

  auto next_sequence = [&]() -> const std::vector<int>& {
    const auto& s = train_seqs[cursor % train_seqs.size()];
    ++cursor;
    return s;
  };

  auto run_eval = [&](int gstep, const std::string& phase) {
    const double ppl = validation_perplexity(model, data.valid,
                                             cfg.mle_seq_len,
                                             cfg.eval_sequences);
    EvalPoint ev{gstep, phase, ppl, counts, ""};
    if (!cfg.run_dir.empty()) {
      ev.checkpoint_dir = (std::filesystem::path(cfg.run_dir) /
                           ("step-" + std::to_string(gstep)))
                              .string();
      save_checkpoint(model, ev.checkpoint_dir);
    }
    hist.evals.push_back(ev);
    detail::append_log_line(
        cfg.run_dir,
        nlohmann::json{{"step", gstep},
                       {"phase", phase},
                       {"split", "valid"},
                       {"ppl", ppl},
                       {"counts", counts}});
  };

  int gstep = 0;
  auto one_step = [&](UpdateKind kind, const LrSchedule& sched,
                      int phase_step) -> bool {
    ++gstep;
    for (auto& [name, p] : params) p.zero_grad();
    double mean_reward = std::numeric_limits<double>::quiet_NaN();
    double loss_value = 0.0;
    try {
      Tape<S> tape;
      Tensor<S> loss;
      const std::uint64_t step_seed = splitmix64(cfg.seed ^ (0x5eedull + gstep));
      switch (kind) {
        case UpdateKind::kMle:
          loss = mle_loss(model, {next_sequence()});
          break;
        case UpdateKind::kUl: {
          PrefixBatch batch = make_prefixes(
              next_sequence(), static_cast<std::size_t>(cfg.regime.prefix_len),
              static_cast<std::size_t>(cfg.regime.prefixes_per_update));
          RolloutBatch ro;
          loss = seq_ul_update_loss(model, batch, cfg.regime.T,
                                    cfg.regime.repeat_n,
                                    cfg.regime.rollout_mode, step_seed, &ro);
          double acc = 0.0;
          for (const auto& c : ro.continuations)
            acc += reward(c, cfg.regime.repeat_n);
          mean_reward = acc / static_cast<double>(ro.continuations.size());
          break;
        }
        case UpdateKind::kPg: {
          PrefixBatch batch = make_prefixes(
              next_sequence(), static_cast<std::size_t>(cfg.regime.prefix_len),
              static_cast<std::size_t>(cfg.regime.prefixes_per_update));
          Advantages adv;
          loss = pg_update_loss(model, batch, cfg.regime.T,
                                cfg.regime.repeat_n, cfg.regime.pg_coefficient,
                                cfg.regime.rollout_mode, step_seed, nullptr,
                                &adv);
          mean_reward = adv.baseline / static_cast<double>(adv.rewards.size());
          break;
        }
        case UpdateKind::kPgPlusUl: {
          PrefixBatch batch = make_prefixes(
              next_sequence(), static_cast<std::size_t>(cfg.regime.prefix_len),
              static_cast<std::size_t>(cfg.regime.prefixes_per_update));
          Advantages adv;
          loss = combined_pg_ut_loss(model, batch, cfg.regime.T,
                                     cfg.regime.repeat_n,
                                     cfg.regime.pg_coefficient,
                                     cfg.regime.rollout_mode, step_seed,
                                     nullptr, &adv);
          mean_reward = adv.baseline / static_cast<double>(adv.rewards.size());
          break;
        }
      }
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw NumericError("non-finite loss at step " + std::to_string(gstep));
      tape.backward(loss);
      clip_gradients(params, cfg.grad_clip);
      adam_step(params, adam, lr_at(phase_step, sched));
    } catch (const NumericError& e) {
      hist.aborted = true;
      hist.abort_reason = e.what();
      detail::append_log_line(cfg.run_dir,
                              nlohmann::json{{"step", gstep},
                                             {"abort", hist.abort_reason}});
      return false;
    }
    hist.losses.push_back(loss_value);
    hist.kinds.push_back(kind);
    hist.rollout_rewards.push_back(mean_reward);
    ++counts[to_string(kind)];
    return true;
  };

  // Phase 1: plain MLE pretraining.
  if (cfg.pretrain_steps > 0) {
    LrSchedule pre{cfg.schedule.base_lr, cfg.pretrain_warmup,
                   cfg.pretrain_steps};
    for (int step = 1; step <= cfg.pretrain_steps && !hist.aborted; ++step) {
      if (!one_step(UpdateKind::kMle, pre, step)) break;
      if (gstep % cfg.eval_every == 0) run_eval(gstep, "pretrain");
    }
  }

  // Phase 2: the regime.
  for (int step = 1; step <= cfg.schedule.total_steps && !hist.aborted;
       ++step) {
    const UpdateKind kind = pick_update(cfg.regime, pick_rng);
    if (!one_step(kind, cfg.schedule, step)) break;
    if (gstep % cfg.eval_every == 0 || gstep == total_global)
      run_eval(gstep, "regime");
  }

  // Checkpoint selection runs over the regime-phase evals only; the
  // pretrain phase exists to give the regime a competent starting model,
  // not to compete with it.
  std::vector<double> ppls;
  std::vector<int> steps;
  for (const auto& ev : hist.evals) {
    if (ev.phase != "regime") continue;
    ppls.push_back(ev.valid_ppl);
    steps.push_back(ev.step);
  }
  if (ppls.empty() && !hist.evals.empty()) {
    for (const auto& ev : hist.evals) {
      ppls.push_back(ev.valid_ppl);
      steps.push_back(ev.step);
    }
  }
  if (!ppls.empty()) {
    const std::size_t best = select_checkpoint(ppls);
    hist.selected_step = steps[best];
    hist.selected_ppl = ppls[best];
    if (!cfg.run_dir.empty()) {
      std::ofstream f(std::filesystem::path(cfg.run_dir) / "best.json",
                      std::ios::binary);
      f << nlohmann::json{{"step", hist.selected_step},
                          {"valid_ppl", hist.selected_ppl},
                          {"aborted", hist.aborted}}
               .dump(2)
        << '\n';
    }
  }
  if (!cfg.run_dir.empty()) {
    nlohmann::json jl = nlohmann::json::array();
    for (double v : hist.losses) jl.push_back(v);
    std::ofstream f(std::filesystem::path(cfg.run_dir) / "history.json",
                    std::ios::binary);
    f << nlohmann::json{{"losses", jl}, {"selected_step", hist.selected_step}}
             .dump()
      << '\n';
  }
  return hist;
}

}  // namespace lmlab
