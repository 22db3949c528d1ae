#pragma once

// The two-stage Lightning OPD procedure (SFT, then offline OPD on a
// precomputed dataset) and a standard online OPD trainer for comparison.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "lopd/dataset.hpp"
#include "lopd/objectives.hpp"
#include "lopd/oracle.hpp"
#include "lopd/policy.hpp"
#include "lopd/rng.hpp"

namespace lopd {

// --- Stage 1: SFT -------------------------------------------------------------

inline SftDataset generate_sft_data(const TabularPolicy& teacher, const PromptSet& prompts, int n_per_prompt,
                                    SeededRng& rng)
{
   require_compatible(teacher, prompts);
   if(n_per_prompt < 1) {
      throw std::invalid_argument("generate_sft_data: n_per_prompt must be at least 1");
   }
   SftDataset data;
   data.teacher = teacher.label();
   data.records.reserve(static_cast< std::size_t >(prompts.size()) * static_cast< std::size_t >(n_per_prompt));
   for(int p = 0; p < prompts.size(); ++p) {
      for(int i = 0; i < n_per_prompt; ++i) {
         data.records.push_back({p, sample_trajectory(teacher, p, rng).tokens});
      }
   }
   return data;
}

/// Maximum-likelihood gradient ascent over the full dataset.
struct SftGradient {
   double lr = 0.1;
   int steps = 200;
};

/// Laplace-smoothed empirical conditionals over the base policy's contexts.
struct SftClosedForm {
   double alpha = 1.0;
};

using SftConfig = std::variant< SftGradient, SftClosedForm >;

inline double mean_log_likelihood(const TabularPolicy& policy, const SftDataset& data)
{
   if(data.records.empty()) {
      throw std::invalid_argument("mean_log_likelihood: empty dataset");
   }
   StableSum acc;
   for(const auto& r : data.records) {
      acc.add(seq_logprob(policy, Trajectory{r.prompt_id, r.tokens, std::nullopt}));
   }
   return acc.value() / static_cast< double >(data.records.size());
}

/// Fit pi_ref to teacher data. Gradient mode leaves unseen contexts at their
/// base logits; closed-form mode smooths them to uniform. If given, the trace
/// receives the mean log-likelihood before each gradient step and after the last.
inline TabularPolicy sft_fit(const TabularPolicy& base, const SftDataset& data, const SftConfig& config,
                             std::vector< double >* log_likelihood_trace = nullptr)
{
   if(data.records.empty()) {
      throw std::invalid_argument("sft_fit: empty dataset");
   }
   for(const auto& r : data.records) {
      validate(base, Trajectory{r.prompt_id, r.tokens, std::nullopt});
   }
   const std::size_t v = static_cast< std::size_t >(base.vocab_size());
   if(const auto* cf = std::get_if< SftClosedForm >(&config)) {
      if(!(cf->alpha > 0.0)) {
         throw std::invalid_argument("sft_fit: closed-form alpha must be positive to keep full support");
      }
      std::vector< double > counts(base.shape().num_params(), 0.0);
      for(const auto& r : data.records) {
         for(int t = 0; t < base.horizon(); ++t) {
            counts[base.group(r.prompt_id, t, r.tokens) * v + static_cast< std::size_t >(r.tokens[t])] += 1.0;
         }
      }
      for(double& c : counts) {
         c = std::log(c + cf->alpha);
      }
      return TabularPolicy(base.shape(), std::move(counts), "ref");
   }
   const auto& gd = std::get< SftGradient >(config);
   if(!(gd.lr > 0.0) || gd.steps < 0) {
      throw std::invalid_argument("sft_fit: gradient mode needs lr > 0 and steps >= 0");
   }
   TabularPolicy policy(base.shape(), {base.logits().begin(), base.logits().end()}, "ref");
   const double inv_n = 1.0 / static_cast< double >(data.records.size());
   for(int step = 0; step < gd.steps; ++step) {
      if(log_likelihood_trace) {
         log_likelihood_trace->push_back(mean_log_likelihood(policy, data));
      }
      GradientVector g(policy.shape());
      for(const auto& r : data.records) {
         for(int t = 0; t < policy.horizon(); ++t) {
            accumulate_token_score(policy, policy.group(r.prompt_id, t, r.tokens), r.tokens[t], inv_n, g.values);
         }
      }
      policy.ascend(g, gd.lr);
   }
   if(log_likelihood_trace) {
      log_likelihood_trace->push_back(mean_log_likelihood(policy, data));
   }
   return policy;
}

// --- Stage 2, phase 1: precompute -----------------------------------------

/// |prompts| * n_per_prompt rollouts from pi_ref, prompts drawn from the prompt
/// weights, with the teacher queried once per trajectory.
inline OfflineDataset precompute_dataset(const TabularPolicy& ref, const TabularPolicy& teacher,
                                         const PromptSet& prompts, int n_per_prompt, SeededRng& rng)
{
   require_compatible(ref, teacher);
   require_compatible(ref, prompts);
   if(n_per_prompt < 1) {
      throw std::invalid_argument("precompute_dataset: n_per_prompt must be at least 1");
   }
   OfflineDataset data;
   data.rollout_policy = ref.label();
   data.teacher = teacher.label();
   data.records.reserve(static_cast< std::size_t >(prompts.size()) * static_cast< std::size_t >(n_per_prompt));
   const int n = prompts.size() * n_per_prompt;
   for(int i = 0; i < n; ++i) {
      int p = rng.categorical(prompts.weights());
      Trajectory traj = sample_trajectory(ref, p, rng);
      std::vector< double > lps(static_cast< std::size_t >(ref.horizon()));
      for(int t = 0; t < ref.horizon(); ++t) {
         lps[t] = teacher.log_prob(p, t, traj.tokens, traj.tokens[t]);
      }
      traj.teacher_logprobs = std::move(lps);
      data.records.push_back(std::move(traj));
   }
   return data;
}

/// Largest |stored - recomputed| teacher log-prob over the dataset.
inline double audit_dataset(const OfflineDataset& data, const TabularPolicy& teacher)
{
   double worst = 0.0;
   for(const auto& r : data.records) {
      validate(teacher, r);
      if(!r.teacher_logprobs) {
         throw std::invalid_argument("audit_dataset: record without stored log-probs");
      }
      for(int t = 0; t < teacher.horizon(); ++t) {
         worst = std::max(worst, std::abs((*r.teacher_logprobs)[t] - teacher.log_prob(r.prompt_id, t, r.tokens, r.tokens[t])));
      }
   }
   return worst;
}

// --- Stage 2, phase 2: training ---------------------------------------------

struct TrainConfig {
   double lr = 0.5;
   int steps = 500;
   int batch = 64;  // mini-batch draws (offline) or fresh rollouts (online) per step
   double tau = 10.0;
   std::uint64_t seed = 0;
   bool full_batch = false;          // offline only: sweep the whole dataset every step
   bool record_wall_clock = false;  // wall_ms stays 0 unless set, keeping logs byte-reproducible
};

/// Oracle-side metrics. Never consulted on the update path.
struct TrainMonitor {
   const TabularPolicy* teacher = nullptr;
   const PromptSet* prompts = nullptr;
   OracleOptions oracle;
   std::function< void(int step, const TabularPolicy& theta) > on_step;  // before each update
};

struct TrainLogRow {
   int step = 0;
   double objective = 0.0;
   double grad_norm = 0.0;
   double w_mean = 0.0;
   double w_std = 0.0;
   std::optional< double > kl_to_teacher;
   std::optional< double > chi2_to_ref;
   std::uint64_t teacher_evals = 0;  // cumulative through this step, update path only
   double wall_ms = 0.0;
};

struct TrainLog {
   std::vector< TrainLogRow > rows;
};

inline constexpr const char* kTrainLogHeader =
   "step,objective,grad_norm,w_mean,w_std,kl_to_teacher,chi2_to_ref,teacher_evals,wall_ms";

inline void write_csv(const TrainLog& log, std::ostream& out)
{
   out << kTrainLogHeader << "\n";
   auto opt = [](const std::optional< double >& v) { return v ? format_double(*v) : std::string(); };
   for(const auto& r : log.rows) {
      out << r.step << ',' << format_double(r.objective) << ',' << format_double(r.grad_norm) << ','
          << format_double(r.w_mean) << ',' << format_double(r.w_std) << ',' << opt(r.kl_to_teacher) << ','
          << opt(r.chi2_to_ref) << ',' << r.teacher_evals << ',' << format_double(r.wall_ms) << "\n";
   }
}

struct TrainResult {
   TabularPolicy policy;
   TrainLog log;
   std::uint64_t teacher_evals = 0;
};

class TrainingError : public std::runtime_error {
  public:
   TrainingError(int step, const std::string& what)
       : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + what), m_step(step)
   {
   }
   int step() const noexcept { return m_step; }

  private:
   int m_step;
};

namespace detail {

struct WeightStats {
   double sum = 0.0;
   double sumsq = 0.0;
   std::size_t n = 0;

   void add(const TabularPolicy& theta, const TabularPolicy& ref, const Trajectory& traj)
   {
      for(int t = 0; t < theta.horizon(); ++t) {
         double w = std::exp(theta.log_prob(traj.prompt_id, t, traj.tokens, traj.tokens[t])
                             - ref.log_prob(traj.prompt_id, t, traj.tokens, traj.tokens[t]));
         sum += w;
         sumsq += w * w;
         ++n;
      }
   }
   double mean() const { return sum / static_cast< double >(n); }
   double stddev() const
   {
      double m = mean();
      return std::sqrt(std::max(0.0, sumsq / static_cast< double >(n) - m * m));
   }
};

inline void check_config(const TrainConfig& c)
{
   if(!(c.lr > 0.0)) {
      throw std::invalid_argument("train: lr must be positive");
   }
   if(c.steps < 0 || c.batch < 1) {
      throw std::invalid_argument("train: steps must be >= 0 and batch >= 1");
   }
   if(!(c.tau > 0.0)) {
      throw std::invalid_argument("train: tau must be positive (use infinity to disable clipping)");
   }
}

/// Shared step loop. `estimate` fills the accumulator and weight stats for one step.
template < typename Estimate >
TrainResult run_training(const TabularPolicy& init, const TrainConfig& config, const TrainMonitor& monitor,
                         TeacherEvalCounter& counter, Estimate&& estimate)
{
   check_config(config);
   const TabularPolicy ref = init;
   TrainResult result{TabularPolicy(init.shape(), {init.logits().begin(), init.logits().end()}, init.label()), {}, 0};
   TabularPolicy& theta = result.policy;
   const bool oracle_metrics = monitor.prompts != nullptr
                               && response_space_size(init.vocab_size(), init.horizon()) <= monitor.oracle.cap;
   SeededRng root(config.seed);
   const auto t0 = std::chrono::steady_clock::now();
   for(int step = 0; step < config.steps; ++step) {
      SeededRng rng = root.substream(static_cast< std::uint64_t >(step));
      ScoreAccumulator acc(theta.shape());
      WeightStats ws;
      estimate(theta, ref, rng, acc, ws);
      McGradient g = acc.finish();
      if(!g.mean.all_finite() || !std::isfinite(g.objective)) {
         throw TrainingError(step, "non-finite gradient");
      }
      TrainLogRow row;
      row.step = step;
      row.objective = g.objective;
      row.grad_norm = g.mean.norm();
      row.w_mean = ws.mean();
      row.w_std = ws.stddev();
      if(oracle_metrics) {
         if(monitor.teacher) {
            row.kl_to_teacher = kl(theta, *monitor.teacher, *monitor.prompts, monitor.oracle);
         }
         row.chi2_to_ref = chi_squared(theta, ref, *monitor.prompts, monitor.oracle);
      }
      row.teacher_evals = counter.count;
      if(config.record_wall_clock) {
         row.wall_ms = std::chrono::duration< double, std::milli >(std::chrono::steady_clock::now() - t0).count();
      }
      result.log.rows.push_back(row);
      if(monitor.on_step) {
         monitor.on_step(step, theta);
      }
      theta.ascend(g.mean, config.lr);
   }
   result.teacher_evals = counter.count;
   return result;
}

}  // namespace detail

/// Offline OPD: mini-batches from the precomputed dataset, advantages from the
/// stored teacher log-probs only. The student is initialized from (and importance
/// weights are measured against) `init`, which plays the role of pi_ref.
inline TrainResult train_offline(const TabularPolicy& init, const OfflineDataset& dataset, const TrainConfig& config,
                                 const TrainMonitor& monitor = {})
{
   if(dataset.empty()) {
      throw std::invalid_argument("train_offline: empty dataset");
   }
   for(const auto& r : dataset.records) {
      validate(init, r);
      if(!r.teacher_logprobs) {
         throw std::invalid_argument("train_offline: dataset record without stored teacher log-probs");
      }
   }
   std::optional< double > clip;
   if(std::isfinite(config.tau)) {
      clip = config.tau;
   }
   TeacherEvalCounter counter;
   return detail::run_training(init, config, monitor, counter,
                               [&](const TabularPolicy& theta, const TabularPolicy& ref, SeededRng& rng,
                                   ScoreAccumulator& acc, detail::WeightStats& ws) {
                                  auto use = [&](const Trajectory& traj) {
                                     acc.add(theta, traj, advantages(theta, nullptr, traj, clip, &counter));
                                     ws.add(theta, ref, traj);
                                  };
                                  if(config.full_batch) {
                                     for(const auto& traj : dataset.records) {
                                        use(traj);
                                     }
                                  } else {
                                     for(int i = 0; i < config.batch; ++i) {
                                        use(dataset.records[rng.below(dataset.size())]);
                                     }
                                  }
                               });
}

/// Standard online OPD: fresh rollouts from the current student each step,
/// scored by the live teacher.
inline TrainResult train_online(const TabularPolicy& init, const TabularPolicy& teacher, const PromptSet& prompts,
                                const TrainConfig& config, const TrainMonitor& monitor = {})
{
   require_compatible(init, teacher);
   require_compatible(init, prompts);
   std::optional< double > clip;
   if(std::isfinite(config.tau)) {
      clip = config.tau;
   }
   TeacherEvalCounter counter;
   return detail::run_training(init, config, monitor, counter,
                               [&](const TabularPolicy& theta, const TabularPolicy& ref, SeededRng& rng,
                                   ScoreAccumulator& acc, detail::WeightStats& ws) {
                                  for(int i = 0; i < config.batch; ++i) {
                                     int p = rng.categorical(prompts.weights());
                                     Trajectory traj = sample_trajectory(theta, p, rng);
                                     acc.add(theta, traj, advantages(theta, &teacher, traj, clip, &counter));
                                     ws.add(theta, ref, traj);
                                  }
                               });
}

// --- teacher-consistency ablation ---------------------------------------------

struct AblationConfig {
   int sft_per_prompt = 2000;
   SftConfig sft = SftClosedForm{1.0};
   int opd_per_prompt = 2000;
   TrainConfig train;
   std::uint64_t seed = 0;
   double margin = 1e-3;  // diagonal must beat off-diagonal by more than this
};

struct AblationCell {
   std::string trainer;  // "offline" or "online"
   int sft_teacher = 0;  // 0 = a, 1 = b
   int opd_teacher = 0;
   double final_kl = 0.0;  // KL(pi_theta || OPD teacher)
};

struct AblationGrid {
   std::vector< AblationCell > cells;
   double sigma_delta_ref_a = 0.0;  // sigma_Delta(a, b) under the ref fit on teacher a
   double sigma_delta_ref_b = 0.0;
   bool degenerate = false;  // the two teachers are the same policy

   double sigma_delta() const noexcept { return std::min(sigma_delta_ref_a, sigma_delta_ref_b); }

   double at(const std::string& trainer, int sft, int opd) const
   {
      for(const auto& c : cells) {
         if(c.trainer == trainer && c.sft_teacher == sft && c.opd_teacher == opd) {
            return c.final_kl;
         }
      }
      throw std::out_of_range("AblationGrid: no such cell");
   }
};

/// Runs {SFT teacher} x {OPD teacher} for both trainers from a shared base.
inline AblationGrid consistency_ablation(const TabularPolicy& student_base, const TabularPolicy& teacher_a,
                                         const TabularPolicy& teacher_b, const PromptSet& prompts,
                                         const AblationConfig& config, const OracleOptions& opts = {})
{
   require_compatible(student_base, teacher_a);
   require_compatible(student_base, teacher_b);
   AblationGrid grid;
   grid.degenerate = teacher_a.shape() == teacher_b.shape()
                     && std::equal(teacher_a.logits().begin(), teacher_a.logits().end(), teacher_b.logits().begin());
   const TabularPolicy* teachers[2] = {&teacher_a, &teacher_b};
   SeededRng root(config.seed);
   std::vector< TabularPolicy > refs;
   for(int s = 0; s < 2; ++s) {
      SeededRng rng = root.substream(static_cast< std::uint64_t >(s));
      SftDataset data = generate_sft_data(*teachers[s], prompts, config.sft_per_prompt, rng);
      refs.push_back(sft_fit(student_base, data, config.sft));
   }
   grid.sigma_delta_ref_a = sigma_Delta(teacher_a, teacher_b, refs[0], prompts, opts);
   grid.sigma_delta_ref_b = sigma_Delta(teacher_a, teacher_b, refs[1], prompts, opts);
   for(int s = 0; s < 2; ++s) {
      for(int o = 0; o < 2; ++o) {
         SeededRng rng = root.substream(static_cast< std::uint64_t >(10 + 2 * s + o));
         OfflineDataset data = precompute_dataset(refs[s], *teachers[o], prompts, config.opd_per_prompt, rng);
         TrainConfig tc = config.train;
         tc.seed = config.train.seed + 1000 * static_cast< std::uint64_t >(2 * s + o);
         TrainResult off = train_offline(refs[s], data, tc);
         grid.cells.push_back({"offline", s, o, kl(off.policy, *teachers[o], prompts, opts)});
         TrainResult on = train_online(refs[s], *teachers[o], prompts, tc);
         grid.cells.push_back({"online", s, o, kl(on.policy, *teachers[o], prompts, opts)});
      }
   }
   return grid;
}

/// For every trainer and OPD teacher, the consistent cell beats the mismatched one by > margin.
inline bool diagonal_dominance(const AblationGrid& grid, double margin)
{
   for(const char* trainer : {"offline", "online"}) {
      for(int o = 0; o < 2; ++o) {
         if(!(grid.at(trainer, o, o) + margin < grid.at(trainer, 1 - o, o))) {
            return false;
         }
      }
   }
   return true;
}

}  // namespace lopd
