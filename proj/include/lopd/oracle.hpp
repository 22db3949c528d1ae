#pragma once

// Exact expectations by exhaustive enumeration of the V^T response space.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "lopd/policy.hpp"

namespace lopd {

struct OracleOptions {
   std::uint64_t cap = 10'000'000;  // maximum V^T per prompt
};

class EnumerationCapExceeded : public std::runtime_error {
  public:
   EnumerationCapExceeded(int vocab, int horizon, std::uint64_t cap)
       : std::runtime_error(message(vocab, horizon, cap)), m_vocab(vocab), m_horizon(horizon), m_cap(cap)
   {
   }

   int vocab() const noexcept { return m_vocab; }
   int horizon() const noexcept { return m_horizon; }
   std::uint64_t cap() const noexcept { return m_cap; }

  private:
   static std::string message(int vocab, int horizon, std::uint64_t cap)
   {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6g", std::pow(static_cast< double >(vocab), horizon));
      return "enumeration refused: V^T = " + std::to_string(vocab) + "^" + std::to_string(horizon) + " = " + buf
             + " sequences exceeds cap " + std::to_string(cap);
   }

   int m_vocab;
   int m_horizon;
   std::uint64_t m_cap;
};

/// V^T, saturating at UINT64_MAX.
inline std::uint64_t response_space_size(int vocab, int horizon) noexcept
{
   std::uint64_t n = 1;
   for(int t = 0; t < horizon; ++t) {
      if(n > UINT64_MAX / static_cast< std::uint64_t >(vocab)) {
         return UINT64_MAX;
      }
      n *= static_cast< std::uint64_t >(vocab);
   }
   return n;
}

inline void require_enumerable(int vocab, int horizon, const OracleOptions& opts)
{
   if(response_space_size(vocab, horizon) > opts.cap) {
      throw EnumerationCapExceeded(vocab, horizon, opts.cap);
   }
}

inline void require_compatible(const TabularPolicy& a, const TabularPolicy& b)
{
   if(!a.shape().compatible(b.shape())) {
      throw std::invalid_argument("policies disagree on vocabulary, horizon or prompt count");
   }
}

inline void require_compatible(const TabularPolicy& a, const PromptSet& prompts)
{
   if(a.prompt_count() != prompts.size()) {
      throw std::invalid_argument("policy prompt count does not match prompt set");
   }
}

/// Compensated (Neumaier) running sum; reductions run in fixed index order.
class StableSum {
  public:
   void add(double x) noexcept
   {
      double t = m_sum + x;
      if(std::abs(m_sum) >= std::abs(x)) {
         m_comp += (m_sum - t) + x;
      } else {
         m_comp += (x - t) + m_sum;
      }
      m_sum = t;
   }
   double value() const noexcept { return m_sum + m_comp; }

  private:
   double m_sum = 0.0;
   double m_comp = 0.0;
};

/// Visit every response in lexicographic order: fn(std::span<const int> tokens).
template < typename Fn >
void for_each_response(int vocab, int horizon, Fn&& fn)
{
   std::vector< int > tokens(static_cast< std::size_t >(horizon), 0);
   while(true) {
      fn(std::span< const int >(tokens));
      int t = horizon - 1;
      while(t >= 0 && tokens[t] == vocab - 1) {
         tokens[t] = 0;
         --t;
      }
      if(t < 0) {
         return;
      }
      ++tokens[t];
   }
}

/// Visit (prompt, prompt weight, tokens) over the whole prompt-marginalized space.
template < typename Fn >
void for_each_sequence(const PolicyShape& shape, const PromptSet& prompts, const OracleOptions& opts, Fn&& fn)
{
   require_enumerable(shape.vocab(), shape.horizon(), opts);
   if(shape.prompts() != prompts.size()) {
      throw std::invalid_argument("prompt set does not match policy prompt count");
   }
   for(int p = 0; p < prompts.size(); ++p) {
      const double pw = prompts.weight(p);
      for_each_response(shape.vocab(), shape.horizon(), [&](std::span< const int > x) { fn(p, pw, x); });
   }
}

struct SequenceEntry {
   int prompt_id;
   std::vector< int > tokens;
   double log_prob;       // under the table's measure policy
   double prompt_weight;  // p(q), or 1 for a single-prompt table
};

struct SequenceTable {
   std::string measure;
   std::vector< SequenceEntry > entries;
};

inline SequenceTable enumerate(const TabularPolicy& policy, int prompt_id, const OracleOptions& opts = {})
{
   require_enumerable(policy.vocab_size(), policy.horizon(), opts);
   if(prompt_id < 0 || prompt_id >= policy.prompt_count()) {
      throw std::out_of_range("enumerate: prompt_id out of range");
   }
   SequenceTable table{policy.label(), {}};
   table.entries.reserve(response_space_size(policy.vocab_size(), policy.horizon()));
   for_each_response(policy.vocab_size(), policy.horizon(), [&](std::span< const int > x) {
      table.entries.push_back({prompt_id, {x.begin(), x.end()}, seq_logprob(policy, prompt_id, x), 1.0});
   });
   return table;
}

inline SequenceTable enumerate(const TabularPolicy& policy, const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(policy, prompts);
   SequenceTable table{policy.label(), {}};
   for_each_sequence(policy.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      table.entries.push_back({p, {x.begin(), x.end()}, seq_logprob(policy, p, x), pw});
   });
   return table;
}

/// sum over entries of p(q) * pi(x|q) * f(entry). f returns double or GradientVector.
template < typename F >
auto exact_expectation(const SequenceTable& table, F&& f)
{
   using R = std::decay_t< decltype(f(table.entries.front())) >;
   if constexpr(std::is_arithmetic_v< R >) {
      StableSum acc;
      for(const auto& e : table.entries) {
         acc.add(e.prompt_weight * std::exp(e.log_prob) * static_cast< double >(f(e)));
      }
      return acc.value();
   } else {
      if(table.entries.empty()) {
         throw std::invalid_argument("exact_expectation: empty table");
      }
      R acc = f(table.entries.front());
      acc *= table.entries.front().prompt_weight * std::exp(table.entries.front().log_prob);
      for(std::size_t i = 1; i < table.entries.size(); ++i) {
         const auto& e = table.entries[i];
         acc += f(e) * (e.prompt_weight * std::exp(e.log_prob));
      }
      return acc;
   }
}

/// chi^2(pi_a || pi_b) = E_b[(pi_a/pi_b)^2] - 1, prompt-marginalized.
inline double chi_squared(const TabularPolicy& pi_a, const TabularPolicy& pi_b, const PromptSet& prompts,
                          const OracleOptions& opts = {})
{
   require_compatible(pi_a, pi_b);
   StableSum acc;
   for_each_sequence(pi_a.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double la = seq_logprob(pi_a, p, x);
      double lb = seq_logprob(pi_b, p, x);
      acc.add(pw * std::exp(2.0 * la - lb));
   });
   return acc.value() - 1.0;
}

/// One response's contribution to KL(a || b) in the form
/// pi_a (r - 1) + pi_b with r = log pi_a - log pi_b. Each term is >= 0, and the
/// terms sum to the KL whenever both distributions are normalized; for small r
/// the series avoids cancellation.
inline double kl_term(double log_a, double log_b) noexcept
{
   const double r = log_a - log_b;
   const double pa = std::exp(log_a);
   if(std::abs(r) < 1e-3) {
      return pa * r * r * (0.5 - r * (1.0 / 6.0 - r / 24.0));
   }
   return pa * (r - 1.0) + std::exp(log_b);
}

/// KL(pi_a || pi_b) in nats, prompt-marginalized.
inline double kl(const TabularPolicy& pi_a, const TabularPolicy& pi_b, const PromptSet& prompts,
                 const OracleOptions& opts = {})
{
   require_compatible(pi_a, pi_b);
   StableSum acc;
   for_each_sequence(pi_a.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double la = seq_logprob(pi_a, p, x);
      double lb = seq_logprob(pi_b, p, x);
      acc.add(pw * kl_term(la, lb));
   });
   return acc.value();
}

/// sqrt(E_ref[(sum_t log pi_num - log pi_den)^2]); shared by sigma_A and sigma_Delta.
inline double log_ratio_l2(const TabularPolicy& num, const TabularPolicy& den, const TabularPolicy& ref,
                           const PromptSet& prompts, const OracleOptions& opts)
{
   require_compatible(num, den);
   require_compatible(num, ref);
   StableSum acc;
   for_each_sequence(ref.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double s = seq_logprob(num, p, x) - seq_logprob(den, p, x);
      acc.add(pw * std::exp(seq_logprob(ref, p, x)) * s * s);
   });
   return std::sqrt(std::max(acc.value(), 0.0));
}

/// L2 norm under pi_ref of the cumulative advantage sum_t A_t.
inline double sigma_A(const TabularPolicy& student, const TabularPolicy& teacher, const TabularPolicy& ref,
                      const PromptSet& prompts, const OracleOptions& opts = {})
{
   return log_ratio_l2(teacher, student, ref, prompts, opts);
}

/// L2 norm under pi_ref of the cumulative teacher mismatch sum_t Delta_t.
inline double sigma_Delta(const TabularPolicy& teacher_sft, const TabularPolicy& teacher_opd,
                          const TabularPolicy& ref, const PromptSet& prompts, const OracleOptions& opts = {})
{
   return log_ratio_l2(teacher_sft, teacher_opd, ref, prompts, opts);
}

/// sqrt(E_measure[(sum_t |log pi_num(a_t|s_t) - log pi_den(a_t|s_t)|)^2]). Dominates
/// log_ratio_l2 and gives gap bounds that hold without sign assumptions on the
/// per-token terms.
inline double abs_token_ratio_l2(const TabularPolicy& num, const TabularPolicy& den, const TabularPolicy& measure,
                                 const PromptSet& prompts, const OracleOptions& opts = {})
{
   require_compatible(num, den);
   require_compatible(num, measure);
   StableSum acc;
   for_each_sequence(measure.shape(), prompts, opts, [&](int p, double pw, std::span< const int > x) {
      double s = 0.0;
      for(int t = 0; t < num.horizon(); ++t) {
         s += std::abs(num.log_prob(p, t, x, x[t]) - den.log_prob(p, t, x, x[t]));
      }
      acc.add(pw * std::exp(seq_logprob(measure, p, x)) * s * s);
   });
   return std::sqrt(std::max(acc.value(), 0.0));
}

/// Largest per-token score norm over all contexts and actions of the policy.
inline double score_bound_G(const TabularPolicy& policy)
{
   double best = 0.0;
   for(std::size_t g = 0; g < policy.shape().num_groups(); ++g) {
      auto p = policy.probs(g);
      double sq = 0.0;
      for(double q : p) {
         sq += q * q;
      }
      for(double q : p) {
         // (1 - p_a)^2 + sum_{b != a} p_b^2
         best = std::max(best, std::sqrt(std::max(0.0, 1.0 - 2.0 * q + sq)));
      }
   }
   return best;
}

}  // namespace lopd
