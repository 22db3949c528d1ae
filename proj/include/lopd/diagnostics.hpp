#pragma once

// Numeric checks of the offline/online gradient relations. Each check returns
// a TheoremReport with the two sides of the inequality (or the residual of an
// identity) and the constants that went into it.
//
// The bounds as stated use |sum_t A_t| G for the norm of sum_t A_t score_t,
// which only holds when the per-token terms share a sign. Bound reports also
// carry "rhs_triangle", the same bound with sum_t |A_t| in its place, which
// holds unconditionally.

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "lopd/objectives.hpp"
#include "lopd/oracle.hpp"
#include "lopd/pipeline.hpp"
#include "lopd/policy.hpp"

namespace lopd {

inline constexpr double kBoundTolerance = 1e-9;
inline constexpr double kIdentityTolerance = 1e-10;

struct TheoremReport {
   std::string name;
   double lhs = 0.0;
   double rhs = 0.0;
   double slack = 0.0;  // rhs - lhs
   double tolerance = kBoundTolerance;
   bool pass = false;  // slack >= -tolerance
   bool in_regime = true;
   std::map< std::string, double > context;
   std::string note;
};

inline TheoremReport make_report(std::string name, double lhs, double rhs, std::map< std::string, double > context = {},
                                 double tolerance = kBoundTolerance)
{
   TheoremReport r;
   r.name = std::move(name);
   r.lhs = lhs;
   r.rhs = rhs;
   r.slack = rhs - lhs;
   r.tolerance = tolerance;
   r.pass = r.slack >= -tolerance;
   r.context = std::move(context);
   return r;
}

/// Identity residuals are reported as lhs = residual, rhs = tolerance, and pass strictly below it.
inline TheoremReport make_identity_report(std::string name, double residual, double tolerance = kIdentityTolerance)
{
   TheoremReport r = make_report(std::move(name), residual, tolerance, {}, 0.0);
   r.pass = residual < tolerance;
   return r;
}

inline double max_abs_diff(const GradientVector& a, const GradientVector& b) { return (a - b).max_abs(); }

/// E_pi[f] = E_ref[w f], entrywise.
inline TheoremReport check_is_identity(const TabularPolicy& student, const TabularPolicy& teacher,
                                       const TabularPolicy& ref, const PromptSet& prompts,
                                       const OracleOptions& opts = {})
{
   double r = max_abs_diff(grad_j_on_exact(student, teacher, prompts, opts),
                           grad_j_on_importance_weighted(student, teacher, ref, prompts, opts));
   return make_identity_report("is_identity", r);
}

/// At theta = ref the online and offline gradients coincide.
inline TheoremReport check_zero_gap(const TabularPolicy& ref, const TabularPolicy& teacher, const PromptSet& prompts,
                                    const OracleOptions& opts = {})
{
   double r = (grad_j_on_exact(ref, teacher, prompts, opts) - grad_j_off_exact(ref, teacher, ref, prompts, opts)).norm();
   auto rep = make_identity_report("zero_gap_at_ref", r);
   rep.context["chi2"] = chi_squared(ref, ref, prompts, opts);
   return rep;
}

/// ||grad J_on - grad J_off|| <= G * sigma_A * sqrt(chi2(pi_theta || pi_ref)).
inline TheoremReport check_thm1(const TabularPolicy& student, const TabularPolicy& teacher, const TabularPolicy& ref,
                                const PromptSet& prompts, const OracleOptions& opts = {})
{
   double lhs = (grad_j_on_exact(student, teacher, prompts, opts)
                 - grad_j_off_exact(student, teacher, ref, prompts, opts))
                   .norm();
   double g = score_bound_G(student);
   double sa = sigma_A(student, teacher, ref, prompts, opts);
   double chi2 = chi_squared(student, ref, prompts, opts);
   double rhs = g * sa * std::sqrt(std::max(chi2, 0.0));
   double sa_abs = abs_token_ratio_l2(teacher, student, ref, prompts, opts);
   return make_report("gradient_gap_bound", lhs, rhs,
                      {{"G", g},
                       {"sigma_A", sa},
                       {"chi2", chi2},
                       {"rhs_triangle", g * sa_abs * std::sqrt(std::max(chi2, 0.0))}});
}

/// grad J_off = grad J_on - Cov_ref[w, f], entrywise residual.
inline TheoremReport check_covariance_identity(const TabularPolicy& student, const TabularPolicy& teacher,
                                               const TabularPolicy& ref, const PromptSet& prompts,
                                               const OracleOptions& opts = {})
{
   GradientVector off = grad_j_off_exact(student, teacher, ref, prompts, opts);
   GradientVector on = grad_j_on_exact(student, teacher, prompts, opts);
   GradientVector cov = covariance_term(student, teacher, ref, prompts, opts);
   auto rep = make_identity_report("covariance_identity", max_abs_diff(off, on - cov));
   rep.context["cov_norm"] = cov.norm();
   return rep;
}

/// E_measure[f_Delta] with f_Delta = -sum_t Delta_t grad log pi_theta(a_t|s_t),
/// Delta_t = log pi_sft(a_t|s_t) - log pi_opd(a_t|s_t).
inline GradientVector mismatch_score_expectation(const TabularPolicy& student, const TabularPolicy& teacher_sft,
                                                 const TabularPolicy& teacher_opd, const TabularPolicy& measure,
                                                 const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(student, teacher_sft);
   require_compatible(student, teacher_opd);
   require_compatible(student, measure);
   GradientVector g(student.shape());
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double c = pw * std::exp(seq_logprob(measure, p, x));
      for(int t = 0; t < student.horizon(); ++t) {
         double delta = teacher_sft.log_prob(p, t, x, x[t]) - teacher_opd.log_prob(p, t, x, x[t]);
         accumulate_token_score(student, student.group(p, t, x), x[t], -c * delta, g.values);
      }
   });
   return g;
}

/// Mismatched teachers: ||grad J_on - grad J_off|| <= G (sigma_A sqrt(chi2) + sigma_Delta),
/// advantages under the OPD teacher.
inline TheoremReport check_thm4(const TabularPolicy& student, const TabularPolicy& teacher_sft,
                                const TabularPolicy& teacher_opd, const TabularPolicy& ref, const PromptSet& prompts,
                                const OracleOptions& opts = {})
{
   double lhs = (grad_j_on_exact(student, teacher_opd, prompts, opts)
                 - grad_j_off_exact(student, teacher_opd, ref, prompts, opts))
                   .norm();
   double g = score_bound_G(student);
   double sa = sigma_A(student, teacher_opd, ref, prompts, opts);
   double sd = sigma_Delta(teacher_sft, teacher_opd, ref, prompts, opts);
   double chi2 = chi_squared(student, ref, prompts, opts);
   double rhs = g * (sa * std::sqrt(std::max(chi2, 0.0)) + sd);
   double sa_abs = abs_token_ratio_l2(teacher_opd, student, ref, prompts, opts);
   double sd_abs = abs_token_ratio_l2(teacher_sft, teacher_opd, ref, prompts, opts);
   return make_report("mismatch_gap_bound", lhs, rhs,
                      {{"G", g},
                       {"sigma_A", sa},
                       {"sigma_Delta", sd},
                       {"chi2", chi2},
                       {"rhs_triangle", g * (sa_abs * std::sqrt(std::max(chi2, 0.0)) + sd_abs)}});
}

/// Residual offline bias: ||E_ref[f_Delta]|| <= G sigma_Delta.
inline TheoremReport check_thm4_residual(const TabularPolicy& student, const TabularPolicy& teacher_sft,
                                         const TabularPolicy& teacher_opd, const TabularPolicy& ref,
                                         const PromptSet& prompts, const OracleOptions& opts = {})
{
   double lhs = mismatch_score_expectation(student, teacher_sft, teacher_opd, ref, prompts, opts).norm();
   double g = score_bound_G(student);
   double sd = sigma_Delta(teacher_sft, teacher_opd, ref, prompts, opts);
   double sd_abs = abs_token_ratio_l2(teacher_sft, teacher_opd, ref, prompts, opts);
   return make_report("mismatch_residual_bound", lhs, g * sd,
                      {{"G", g}, {"sigma_Delta", sd}, {"rhs_triangle", g * sd_abs}});
}

/// Largest |w(x) - 1| over the response space, w = pi_theta / pi_ref.
inline double max_weight_deviation(const TabularPolicy& student, const TabularPolicy& ref, const PromptSet& prompts,
                                   const OracleOptions& opts = {})
{
   require_compatible(student, ref);
   double worst = 0.0;
   for_each_sequence(student.shape(), prompts, opts, [&](int p, double, std::span< const int > x) {
      worst = std::max(worst, std::abs(std::exp(seq_logprob(student, p, x) - seq_logprob(ref, p, x)) - 1.0));
   });
   return worst;
}

/// Online bias from a mismatched teacher: ||grad J_on(opd) - grad J_on(sft)|| <= G sigma_Delta.
/// Only asserted near initialization, i.e. w within [1 - delta, 1 + delta].
inline TheoremReport check_thm5(const TabularPolicy& student, const TabularPolicy& teacher_sft,
                                const TabularPolicy& teacher_opd, const TabularPolicy& ref, const PromptSet& prompts,
                                double delta = 0.05, const OracleOptions& opts = {})
{
   double lhs = (grad_j_on_exact(student, teacher_opd, prompts, opts)
                 - grad_j_on_exact(student, teacher_sft, prompts, opts))
                   .norm();
   double g = score_bound_G(student);
   double sd = sigma_Delta(teacher_sft, teacher_opd, ref, prompts, opts);
   double dev = max_weight_deviation(student, ref, prompts, opts);
   double sd_abs = abs_token_ratio_l2(teacher_sft, teacher_opd, student, prompts, opts);
   auto rep = make_report("online_mismatch_bound", lhs, g * sd,
                          {{"G", g},
                           {"sigma_Delta", sd},
                           {"max_weight_deviation", dev},
                           {"delta", delta},
                           {"rhs_triangle", g * sd_abs}});
   rep.in_regime = dev <= delta;
   if(!rep.in_regime) {
      rep.note = "outside stated regime";
   }
   return rep;
}

// --- capacity floor and fixed points ---------------------------------------------

struct EpsApproxConfig {
   int restarts = 20;
   double grad_tol = 1e-8;
   int max_iters = 20000;
   double init_scale = 1.0;
   std::uint64_t seed = 12345;
};

struct EpsApproxResult {
   double value = 0.0;
   TabularPolicy best;
   int converged_restarts = 0;
};

/// min over order-k policies of KL(pi || teacher), by gradient descent on the
/// exact KL gradient with Armijo backtracking from several random starts.
inline EpsApproxResult eps_approx(int order, const TabularPolicy& teacher, const PromptSet& prompts,
                                  const EpsApproxConfig& config = {}, const OracleOptions& opts = {})
{
   if(config.restarts < 1) {
      throw std::invalid_argument("eps_approx: need at least one restart");
   }
   std::optional< EpsApproxResult > best;
   for(int r = 0; r < config.restarts; ++r) {
      TabularPolicy pi = new_policy(Vocab(teacher.vocab_size()), teacher.horizon(), order, prompts,
                                    RandomInit{config.init_scale, config.seed + static_cast< std::uint64_t >(r)});
      double f = kl(pi, teacher, prompts, opts);
      double step = 1.0;
      bool converged = false;
      for(int it = 0; it < config.max_iters; ++it) {
         GradientVector g = kl_gradient(pi, teacher, prompts, opts);
         double gn2 = g.norm();
         if(gn2 < config.grad_tol) {
            converged = true;
            break;
         }
         gn2 *= gn2;
         step = std::min(step * 2.0, 1e3);
         while(true) {
            TabularPolicy trial = pi;
            trial.ascend(g, -step);
            double ft = kl(trial, teacher, prompts, opts);
            if(ft <= f - 1e-4 * step * gn2) {
               pi = std::move(trial);
               f = ft;
               break;
            }
            step *= 0.5;
            if(step < 1e-14) {
               break;
            }
         }
         if(step < 1e-14) {
            break;
         }
      }
      if(!best || f < best->value) {
         int prev = best ? best->converged_restarts : 0;
         best = EpsApproxResult{f, pi, prev};
      }
      if(converged) {
         ++best->converged_restarts;
      }
   }
   return *best;
}

struct FixedPointConfig {
   TrainConfig train{0.5, 3000, 1024, kNoClip, 7, false, false};
   int opd_per_prompt = 100000;
   double tolerance = 1e-3;  // |KL_off - KL_on| allowed, nats
   EpsApproxConfig eps;
   std::uint64_t seed = 0;
};

struct FixedPointResult {
   TheoremReport report;
   TrainResult offline;
   TrainResult online;
   double eps_approx = 0.0;
};

/// Train one student on J_off (ref rollouts) and one on J_on from the same
/// init (the ref policy, whose order is the capacity) and compare their final
/// KL to the teacher with each other and with the capacity floor.
inline FixedPointResult check_thm2_fixed_point(int capacity_k, const TabularPolicy& teacher, const TabularPolicy& ref,
                                               const PromptSet& prompts, const FixedPointConfig& config = {},
                                               const OracleOptions& opts = {})
{
   if(ref.order() != capacity_k) {
      throw std::invalid_argument("check_thm2_fixed_point: ref policy order must equal the student capacity");
   }
   SeededRng rng(config.seed);
   OfflineDataset data = precompute_dataset(ref, teacher, prompts, config.opd_per_prompt, rng);
   TrainResult off = train_offline(ref, data, config.train);
   TrainResult on = train_online(ref, teacher, prompts, config.train);
   double kl_off = kl(off.policy, teacher, prompts, opts);
   double kl_on = kl(on.policy, teacher, prompts, opts);
   EpsApproxResult eps = eps_approx(capacity_k, teacher, prompts, config.eps, opts);
   double ns_off = grad_j_off_exact(off.policy, teacher, ref, prompts, opts).norm();
   double ns_on = grad_j_on_exact(on.policy, teacher, prompts, opts).norm();
   auto rep = make_report("shared_fixed_point", std::abs(kl_off - kl_on), config.tolerance,
                          {{"kl_offline", kl_off},
                           {"kl_online", kl_on},
                           {"eps_approx", eps.value},
                           {"nonstationarity_offline", ns_off},
                           {"nonstationarity_online", ns_on},
                           {"teacher_evals_offline", static_cast< double >(off.teacher_evals)},
                           {"teacher_evals_online", static_cast< double >(on.teacher_evals)}},
                          0.0);
   return {std::move(rep), std::move(off), std::move(on), eps.value};
}

struct ErrorDecomposition {
   double kl_final = 0.0;
   std::optional< double > eps_approx;
   std::optional< double > eps_opt;
   double gap_term = 0.0;
   std::string note;
};

/// Splits the final student's KL into capacity floor, optimization error and
/// the offline-online gap bound at the final parameters.
inline ErrorDecomposition error_decomposition(const TabularPolicy& student_final, const TabularPolicy& teacher,
                                              const TabularPolicy& ref, int capacity_k, const PromptSet& prompts,
                                              const EpsApproxConfig& eps_config = {}, const OracleOptions& opts = {},
                                              std::size_t max_params = 4096)
{
   ErrorDecomposition out;
   out.kl_final = kl(student_final, teacher, prompts, opts);
   out.gap_term = score_bound_G(student_final) * sigma_A(student_final, teacher, ref, prompts, opts)
                  * std::sqrt(std::max(0.0, chi_squared(student_final, ref, prompts, opts)));
   PolicyShape shape(teacher.vocab_size(), teacher.horizon(), capacity_k, prompts.size());
   if(shape.num_params() > max_params) {
      out.note = "parameter space too large for direct minimization; eps_approx omitted";
      return out;
   }
   out.eps_approx = eps_approx(capacity_k, teacher, prompts, eps_config, opts).value;
   out.eps_opt = out.kl_final - *out.eps_approx - out.gap_term;
   if(out.kl_final < *out.eps_approx - kBoundTolerance) {
      throw std::logic_error("error_decomposition: final KL below the capacity floor; eps_approx did not converge");
   }
   return out;
}

}  // namespace lopd
