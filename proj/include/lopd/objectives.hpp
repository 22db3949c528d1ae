#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "lopd/dataset.hpp"
#include "lopd/oracle.hpp"
#include "lopd/policy.hpp"
#include "lopd/rng.hpp"

namespace lopd {

inline constexpr double kNoClip = std::numeric_limits< double >::infinity();

struct AdvantageProfile {
   std::vector< double > per_token;
   double total = 0.0;
   std::optional< std::vector< double > > clipped;
};

/// Counts live teacher evaluations (one per trajectory scored against a teacher policy).
struct TeacherEvalCounter {
   std::uint64_t count = 0;
};

/// A_t = log pi_T(a_t|s_t) - log pi_theta(a_t|s_t).
///
/// Stored teacher log-probs on the trajectory take precedence (offline path);
/// otherwise the teacher is evaluated live and the counter, if any, is bumped.
inline AdvantageProfile advantages(const TabularPolicy& student, const TabularPolicy* teacher, const Trajectory& traj,
                                   std::optional< double > tau = std::nullopt, TeacherEvalCounter* counter = nullptr)
{
   validate(student, traj);
   if(tau && !(*tau > 0.0)) {
      throw std::invalid_argument("advantages: tau must be positive");
   }
   if(!traj.teacher_logprobs) {
      if(teacher == nullptr) {
         throw std::invalid_argument("advantages: no teacher policy and no stored teacher log-probs");
      }
      require_compatible(student, *teacher);
      if(counter) {
         ++counter->count;
      }
   }
   AdvantageProfile out;
   out.per_token.resize(static_cast< std::size_t >(student.horizon()));
   for(int t = 0; t < student.horizon(); ++t) {
      double lt = 0.0;
      if(traj.teacher_logprobs) {
         lt = (*traj.teacher_logprobs)[t];
      } else if(teacher != nullptr) {
         lt = teacher->log_prob(traj.prompt_id, t, traj.tokens, traj.tokens[t]);
      }
      out.per_token[t] = lt - student.log_prob(traj.prompt_id, t, traj.tokens, traj.tokens[t]);
      out.total += out.per_token[t];
   }
   if(tau) {
      out.clipped = out.per_token;
      for(double& a : *out.clipped) {
         a = std::clamp(a, -*tau, *tau);
      }
   }
   return out;
}

namespace detail {

/// sum over sequences of weight(p, pw, x) * f(x), with
/// f(x) = sum_t A_t(x) grad log pi_student(a_t|s_t) and A_t treated as a constant.
template < typename Weight >
GradientVector weighted_score_sum(const TabularPolicy& student, const TabularPolicy& teacher,
                                  const PromptSet& prompts, const OracleOptions& opts, Weight&& weight)
{
   require_compatible(student, teacher);
   require_compatible(student, prompts);
   GradientVector g(student.shape());
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double c = weight(p, pw, x);
      for(int t = 0; t < student.horizon(); ++t) {
         std::size_t grp = student.group(p, t, x);
         double a = teacher.log_prob(p, t, x, x[t]) - student.log_probs(grp)[x[t]];
         accumulate_token_score(student, grp, x[t], c * a, g.values);
      }
   });
   return g;
}

}  // namespace detail

/// J_on = E_{q, x ~ pi_theta}[sum_t A_t].
inline double j_on_exact(const TabularPolicy& student, const TabularPolicy& teacher, const PromptSet& prompts,
                         const OracleOptions& opts = {})
{
   require_compatible(student, teacher);
   StableSum acc;
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double ls = seq_logprob(student, p, x);
      acc.add(pw * std::exp(ls) * (seq_logprob(teacher, p, x) - ls));
   });
   return acc.value();
}

/// J_off = E_{q, x ~ pi_ref}[sum_t A_t].
inline double j_off_exact(const TabularPolicy& student, const TabularPolicy& teacher, const TabularPolicy& ref,
                          const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(student, teacher);
   require_compatible(student, ref);
   StableSum acc;
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      acc.add(pw * std::exp(seq_logprob(ref, p, x)) * (seq_logprob(teacher, p, x) - seq_logprob(student, p, x)));
   });
   return acc.value();
}

/// E_{pi_theta}[f], the standard OPD gradient (stop-gradient on A_t).
inline GradientVector grad_j_on_exact(const TabularPolicy& student, const TabularPolicy& teacher,
                                      const PromptSet& prompts, const OracleOptions& opts = {})
{
   return detail::weighted_score_sum(student, teacher, prompts, opts, [&](int p, double pw, std::span< const int > x) {
      return pw * std::exp(seq_logprob(student, p, x));
   });
}

/// E_{pi_ref}[w f] with w = pi_theta / pi_ref: the importance-weighted route to grad_j_on_exact.
inline GradientVector grad_j_on_importance_weighted(const TabularPolicy& student, const TabularPolicy& teacher,
                                                    const TabularPolicy& ref, const PromptSet& prompts,
                                                    const OracleOptions& opts = {})
{
   require_compatible(student, ref);
   return detail::weighted_score_sum(student, teacher, prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double pr = std::exp(seq_logprob(ref, p, x));
      double w = std::exp(seq_logprob(student, p, x)) / pr;
      return pw * pr * w;
   });
}

/// E_{pi_ref}[f], the offline (Lightning OPD) gradient.
inline GradientVector grad_j_off_exact(const TabularPolicy& student, const TabularPolicy& teacher,
                                       const TabularPolicy& ref, const PromptSet& prompts,
                                       const OracleOptions& opts = {})
{
   require_compatible(student, ref);
   return detail::weighted_score_sum(student, teacher, prompts, opts, [&](int p, double pw, std::span< const int > x) {
      return pw * std::exp(seq_logprob(ref, p, x));
   });
}

/// Cov_{pi_ref}[w, f] = E_ref[w f] - E_ref[w] E_ref[f].
inline GradientVector covariance_term(const TabularPolicy& student, const TabularPolicy& teacher,
                                      const TabularPolicy& ref, const PromptSet& prompts,
                                      const OracleOptions& opts = {})
{
   GradientVector e_wf = grad_j_on_importance_weighted(student, teacher, ref, prompts, opts);
   GradientVector e_f = grad_j_off_exact(student, teacher, ref, prompts, opts);
   StableSum e_w;
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      e_w.add(pw * std::exp(seq_logprob(student, p, x)));
   });
   return e_wf - e_f * e_w.value();
}

/// Full derivative of J_off in theta with the rollout measure fixed. Only the
/// -log pi_theta term depends on theta, so this is -E_ref[sum_t grad log pi_theta].
inline GradientVector j_off_total_derivative(const TabularPolicy& student, const TabularPolicy& ref,
                                             const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(student, ref);
   require_compatible(student, prompts);
   GradientVector g(student.shape());
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double c = -pw * std::exp(seq_logprob(ref, p, x));
      for(int t = 0; t < student.horizon(); ++t) {
         accumulate_token_score(student, student.group(p, t, x), x[t], c, g.values);
      }
   });
   return g;
}

/// Gradient of KL(pi_theta || pi_T) in theta:
/// E_theta[(log pi_theta(x) - log pi_T(x)) * sum_t grad log pi_theta(a_t|s_t)].
/// Unlike the per-token OPD gradient this keeps the credit that earlier tokens
/// receive from later advantages.
inline GradientVector kl_gradient(const TabularPolicy& student, const TabularPolicy& teacher,
                                  const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(student, teacher);
   require_compatible(student, prompts);
   GradientVector g(student.shape());
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double ls = seq_logprob(student, p, x);
      double c = pw * std::exp(ls) * (ls - seq_logprob(teacher, p, x));
      for(int t = 0; t < student.horizon(); ++t) {
         accumulate_token_score(student, student.group(p, t, x), x[t], c, g.values);
      }
   });
   return g;
}

// --- Monte Carlo estimation -----------------------------------------------

/// Fresh rollouts from the student, advantages against a live teacher.
struct OnlineSource {
   const PromptSet* prompts = nullptr;
};

/// Records from a precomputed dataset. With sweep=true each record is used
/// once in order (n_samples ignored); otherwise records are drawn uniformly
/// with replacement.
struct DatasetSource {
   const OfflineDataset* data = nullptr;
   bool sweep = false;
};

using GradientSource = std::variant< OnlineSource, DatasetSource >;

struct McGradient {
   GradientVector mean;
   GradientVector std_error;
   std::size_t samples = 0;
   double objective = 0.0;  // sample mean of the unclipped sum_t A_t
};

/// Accumulates per-trajectory f(x) = sum_t clip(A_t) grad log pi(a_t|s_t).
class ScoreAccumulator {
  public:
   explicit ScoreAccumulator(const PolicyShape& shape)
       : m_sum(shape), m_sumsq(shape), m_scratch(shape.num_params(), 0.0)
   {
   }

   /// Adds one trajectory; returns its unclipped total advantage.
   double add(const TabularPolicy& student, const Trajectory& traj, const AdvantageProfile& adv)
   {
      const auto& coef = adv.clipped ? *adv.clipped : adv.per_token;
      const std::size_t v = static_cast< std::size_t >(student.vocab_size());
      m_touched.clear();
      for(int t = 0; t < student.horizon(); ++t) {
         std::size_t grp = student.group(traj.prompt_id, t, traj.tokens);
         accumulate_token_score(student, grp, traj.tokens[t], coef[t], m_scratch);
         m_touched.push_back(grp);
      }
      std::sort(m_touched.begin(), m_touched.end());
      m_touched.erase(std::unique(m_touched.begin(), m_touched.end()), m_touched.end());
      for(std::size_t grp : m_touched) {
         for(std::size_t i = grp * v; i < (grp + 1) * v; ++i) {
            m_sum.values[i] += m_scratch[i];
            m_sumsq.values[i] += m_scratch[i] * m_scratch[i];
            m_scratch[i] = 0.0;
         }
      }
      ++m_count;
      m_objective += adv.total;
      return adv.total;
   }

   std::size_t count() const noexcept { return m_count; }

   McGradient finish() const
   {
      if(m_count == 0) {
         throw std::invalid_argument("ScoreAccumulator: no samples");
      }
      const double n = static_cast< double >(m_count);
      McGradient out{m_sum * (1.0 / n), GradientVector(m_sum.shape), m_count, m_objective / n};
      for(std::size_t i = 0; i < m_sum.size(); ++i) {
         if(m_count > 1) {
            double mean = out.mean.values[i];
            double var = std::max(0.0, (m_sumsq.values[i] - n * mean * mean) / (n - 1.0));
            out.std_error.values[i] = std::sqrt(var / n);
         }
      }
      return out;
   }

  private:
   GradientVector m_sum;
   GradientVector m_sumsq;
   std::vector< double > m_scratch;
   std::vector< std::size_t > m_touched;
   std::size_t m_count = 0;
   double m_objective = 0.0;
};

/// Sample mean of f(x) over trajectories from the source, with per-entry
/// standard errors. tau = kNoClip disables clipping.
inline McGradient grad_mc(const TabularPolicy& student, const TabularPolicy* teacher, const GradientSource& source,
                          std::size_t n_samples, double tau, SeededRng& rng, TeacherEvalCounter* counter = nullptr)
{
   std::optional< double > clip;
   if(std::isfinite(tau)) {
      clip = tau;
   }
   ScoreAccumulator acc(student.shape());
   if(const auto* online = std::get_if< OnlineSource >(&source)) {
      if(online->prompts == nullptr || teacher == nullptr) {
         throw std::invalid_argument("grad_mc: online source needs a prompt set and a teacher");
      }
      if(n_samples < 1) {
         throw std::invalid_argument("grad_mc: n_samples must be at least 1");
      }
      require_compatible(student, *online->prompts);
      for(std::size_t i = 0; i < n_samples; ++i) {
         int p = rng.categorical(online->prompts->weights());
         Trajectory traj = sample_trajectory(student, p, rng);
         acc.add(student, traj, advantages(student, teacher, traj, clip, counter));
      }
   } else {
      const auto& ds = std::get< DatasetSource >(source);
      if(ds.data == nullptr || ds.data->empty()) {
         throw std::invalid_argument("grad_mc: empty dataset");
      }
      auto use = [&](const Trajectory& traj) {
         if(!traj.teacher_logprobs) {
            throw std::invalid_argument("grad_mc: dataset record without stored teacher log-probs");
         }
         acc.add(student, traj, advantages(student, nullptr, traj, clip, counter));
      };
      if(ds.sweep) {
         for(const auto& traj : ds.data->records) {
            use(traj);
         }
      } else {
         if(n_samples < 1) {
            throw std::invalid_argument("grad_mc: n_samples must be at least 1");
         }
         for(std::size_t i = 0; i < n_samples; ++i) {
            use(ds.data->records[rng.below(ds.data->size())]);
         }
      }
   }
   return acc.finish();
}

}  // namespace lopd
