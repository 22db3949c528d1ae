#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "lopd/rng.hpp"

namespace lopd {

struct Vocab {
   int size;

   explicit Vocab(int n) : size(n)
   {
      if(n < 2) {
         throw std::invalid_argument("Vocab: size must be at least 2, got " + std::to_string(n));
      }
   }
};

/// Finite prompt distribution p(q). Prompt contents only serve as identities.
class PromptSet {
  public:
   PromptSet(std::vector< std::vector< int > > prompts, std::vector< double > weights)
       : m_prompts(std::move(prompts)), m_weights(std::move(weights))
   {
      if(m_prompts.empty() || m_prompts.size() != m_weights.size()) {
         throw std::invalid_argument("PromptSet: need one weight per prompt and at least one prompt");
      }
      double total = 0.0;
      for(double w : m_weights) {
         if(!(w > 0.0)) {
            throw std::invalid_argument("PromptSet: weights must be positive");
         }
         total += w;
      }
      if(std::abs(total - 1.0) > 1e-12) {
         throw std::invalid_argument("PromptSet: weights must sum to 1");
      }
      for(std::size_t i = 0; i < m_prompts.size(); ++i) {
         for(std::size_t j = i + 1; j < m_prompts.size(); ++j) {
            if(m_prompts[i] == m_prompts[j]) {
               throw std::invalid_argument("PromptSet: prompts must be distinct");
            }
         }
      }
   }

   /// n distinct single-token prompts with equal weight.
   static PromptSet uniform(int n)
   {
      if(n < 1) {
         throw std::invalid_argument("PromptSet::uniform: need at least one prompt");
      }
      std::vector< std::vector< int > > prompts;
      std::vector< double > weights(static_cast< std::size_t >(n), 1.0 / n);
      for(int i = 0; i < n; ++i) {
         prompts.push_back({i});
      }
      return PromptSet(std::move(prompts), std::move(weights));
   }

   int size() const noexcept { return static_cast< int >(m_prompts.size()); }
   double weight(int i) const { return m_weights.at(static_cast< std::size_t >(i)); }
   std::span< const double > weights() const noexcept { return m_weights; }
   const std::vector< int >& prompt(int i) const { return m_prompts.at(static_cast< std::size_t >(i)); }

  private:
   std::vector< std::vector< int > > m_prompts;
   std::vector< double > m_weights;
};

/// Dimensions of a tabular policy and the layout of its logit table.
///
/// A softmax group is one context: (prompt, position t, the min(t, k) most
/// recent response tokens). Positions before k see a left-padded context, so
/// only V^min(t,k) contexts are reachable at position t and only those are
/// stored. Parameters are laid out group-major, V logits per group.
class PolicyShape {
  public:
   struct GroupKey {
      int prompt;
      int position;
      std::vector< int > context;
   };

   PolicyShape(int vocab, int horizon, int order, int prompts)
       : m_vocab(vocab), m_horizon(horizon), m_order(order), m_prompts(prompts)
   {
      Vocab{vocab};
      if(horizon < 1) {
         throw std::invalid_argument("PolicyShape: horizon must be at least 1");
      }
      if(order < 0 || order > horizon - 1) {
         throw std::invalid_argument("PolicyShape: order " + std::to_string(order) + " outside [0, T-1] for T="
                                     + std::to_string(horizon));
      }
      if(prompts < 1) {
         throw std::invalid_argument("PolicyShape: need at least one prompt");
      }
      m_position_offset.reserve(static_cast< std::size_t >(horizon) + 1);
      std::size_t acc = 0;
      for(int t = 0; t < horizon; ++t) {
         m_position_offset.push_back(acc);
         acc += ipow(static_cast< std::size_t >(vocab), std::min(t, order));
         if(acc > (std::size_t{1} << 40)) {
            throw std::invalid_argument("PolicyShape: table too large");
         }
      }
      m_position_offset.push_back(acc);
      m_groups_per_prompt = acc;
   }

   int vocab() const noexcept { return m_vocab; }
   int horizon() const noexcept { return m_horizon; }
   int order() const noexcept { return m_order; }
   int prompts() const noexcept { return m_prompts; }
   bool full_capacity() const noexcept { return m_order == m_horizon - 1; }

   std::size_t groups_per_prompt() const noexcept { return m_groups_per_prompt; }
   std::size_t num_groups() const noexcept { return m_groups_per_prompt * static_cast< std::size_t >(m_prompts); }
   std::size_t num_params() const noexcept { return num_groups() * static_cast< std::size_t >(m_vocab); }
   std::size_t contexts_at(int t) const { return m_position_offset.at(t + 1) - m_position_offset.at(t); }

   /// Group for position t given the response prefix a_0..a_{t-1} (at least t tokens).
   std::size_t group_index(int prompt, int t, std::span< const int > prefix) const
   {
      int m = std::min(t, m_order);
      std::size_t code = 0;
      for(int i = t - m; i < t; ++i) {
         code = code * static_cast< std::size_t >(m_vocab) + static_cast< std::size_t >(prefix[i]);
      }
      return static_cast< std::size_t >(prompt) * m_groups_per_prompt + m_position_offset[t] + code;
   }

   GroupKey describe(std::size_t group) const
   {
      GroupKey key;
      key.prompt = static_cast< int >(group / m_groups_per_prompt);
      std::size_t local = group % m_groups_per_prompt;
      int t = 0;
      while(m_position_offset[t + 1] <= local) {
         ++t;
      }
      key.position = t;
      std::size_t code = local - m_position_offset[t];
      int m = std::min(t, m_order);
      key.context.assign(static_cast< std::size_t >(m), 0);
      for(int i = m - 1; i >= 0; --i) {
         key.context[i] = static_cast< int >(code % static_cast< std::size_t >(m_vocab));
         code /= static_cast< std::size_t >(m_vocab);
      }
      return key;
   }

   /// Same response space: vocabulary, horizon and prompt count agree (order may differ).
   bool compatible(const PolicyShape& other) const noexcept
   {
      return m_vocab == other.m_vocab && m_horizon == other.m_horizon && m_prompts == other.m_prompts;
   }

   friend bool operator==(const PolicyShape& a, const PolicyShape& b) noexcept
   {
      return a.compatible(b) && a.m_order == b.m_order;
   }

  private:
   static std::size_t ipow(std::size_t base, int e)
   {
      std::size_t r = 1;
      for(int i = 0; i < e; ++i) {
         r *= base;
      }
      return r;
   }

   int m_vocab;
   int m_horizon;
   int m_order;
   int m_prompts;
   std::vector< std::size_t > m_position_offset;
   std::size_t m_groups_per_prompt = 0;
};

/// Flat vector aligned with a policy's logit layout.
struct GradientVector {
   PolicyShape shape;
   std::vector< double > values;

   explicit GradientVector(PolicyShape s) : shape(std::move(s)), values(shape.num_params(), 0.0) {}

   std::size_t size() const noexcept { return values.size(); }
   double& operator[](std::size_t i) { return values[i]; }
   double operator[](std::size_t i) const { return values[i]; }

   double norm() const noexcept
   {
      double s = 0.0;
      for(double v : values) {
         s += v * v;
      }
      return std::sqrt(s);
   }

   double max_abs() const noexcept
   {
      double m = 0.0;
      for(double v : values) {
         m = std::max(m, std::abs(v));
      }
      return m;
   }

   bool all_finite() const noexcept
   {
      return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
   }

   GradientVector& operator+=(const GradientVector& o)
   {
      check(o);
      for(std::size_t i = 0; i < values.size(); ++i) {
         values[i] += o.values[i];
      }
      return *this;
   }

   GradientVector& operator-=(const GradientVector& o)
   {
      check(o);
      for(std::size_t i = 0; i < values.size(); ++i) {
         values[i] -= o.values[i];
      }
      return *this;
   }

   GradientVector& operator*=(double c) noexcept
   {
      for(double& v : values) {
         v *= c;
      }
      return *this;
   }

   friend GradientVector operator+(GradientVector a, const GradientVector& b) { return a += b; }
   friend GradientVector operator-(GradientVector a, const GradientVector& b) { return a -= b; }
   friend GradientVector operator*(GradientVector a, double c) { return a *= c; }

  private:
   void check(const GradientVector& o) const
   {
      if(!(shape == o.shape)) {
         throw std::invalid_argument("GradientVector: layout mismatch");
      }
   }
};

/// A response x = (a_1..a_T) to one prompt, optionally carrying stored
/// per-token teacher log-probabilities.
struct Trajectory {
   int prompt_id = 0;
   std::vector< int > tokens;
   std::optional< std::vector< double > > teacher_logprobs;
};

/// Order-k softmax autoregressive policy over a finite vocabulary.
class TabularPolicy {
  public:
   TabularPolicy(PolicyShape shape, std::vector< double > logits, std::string label = {})
       : m_shape(std::move(shape)), m_logits(std::move(logits)), m_label(std::move(label))
   {
      if(m_logits.size() != m_shape.num_params()) {
         throw std::invalid_argument("TabularPolicy: expected " + std::to_string(m_shape.num_params())
                                     + " logits, got " + std::to_string(m_logits.size()));
      }
      normalize();
   }

   const PolicyShape& shape() const noexcept { return m_shape; }
   int vocab_size() const noexcept { return m_shape.vocab(); }
   int horizon() const noexcept { return m_shape.horizon(); }
   int order() const noexcept { return m_shape.order(); }
   int prompt_count() const noexcept { return m_shape.prompts(); }

   const std::string& label() const noexcept { return m_label; }
   void set_label(std::string label) { m_label = std::move(label); }

   std::span< const double > logits() const noexcept { return m_logits; }

   std::span< const double > probs(std::size_t group) const
   {
      return std::span< const double >(m_probs).subspan(group * stride(), stride());
   }

   std::span< const double > log_probs(std::size_t group) const
   {
      return std::span< const double >(m_log_probs).subspan(group * stride(), stride());
   }

   std::size_t group(int prompt, int t, std::span< const int > prefix) const
   {
      return m_shape.group_index(prompt, t, prefix);
   }

   double log_prob(int prompt, int t, std::span< const int > prefix, int action) const
   {
      return log_probs(group(prompt, t, prefix))[static_cast< std::size_t >(action)];
   }

   void set_logits(std::vector< double > logits)
   {
      if(logits.size() != m_logits.size()) {
         throw std::invalid_argument("TabularPolicy::set_logits: size mismatch");
      }
      m_logits = std::move(logits);
      normalize();
   }

   /// theta <- theta + step * direction
   void ascend(const GradientVector& direction, double step)
   {
      if(!(direction.shape == m_shape)) {
         throw std::invalid_argument("TabularPolicy::ascend: layout mismatch");
      }
      for(std::size_t i = 0; i < m_logits.size(); ++i) {
         m_logits[i] += step * direction.values[i];
      }
      normalize();
   }

  private:
   std::size_t stride() const noexcept { return static_cast< std::size_t >(m_shape.vocab()); }

   void normalize()
   {
      const std::size_t v = stride();
      m_log_probs.resize(m_logits.size());
      m_probs.resize(m_logits.size());
      for(std::size_t g = 0; g < m_shape.num_groups(); ++g) {
         const double* l = m_logits.data() + g * v;
         double mx = -std::numeric_limits< double >::infinity();
         for(std::size_t a = 0; a < v; ++a) {
            if(!std::isfinite(l[a])) {
               throw std::invalid_argument("TabularPolicy: non-finite logit");
            }
            mx = std::max(mx, l[a]);
         }
         double s = 0.0;
         for(std::size_t a = 0; a < v; ++a) {
            s += std::exp(l[a] - mx);
         }
         double lse = mx + std::log(s);
         for(std::size_t a = 0; a < v; ++a) {
            m_log_probs[g * v + a] = l[a] - lse;
            m_probs[g * v + a] = std::exp(l[a] - lse);
         }
      }
   }

   PolicyShape m_shape;
   std::vector< double > m_logits;
   std::vector< double > m_log_probs;
   std::vector< double > m_probs;
   std::string m_label;
};

struct UniformInit {};
struct RandomInit {
   double scale = 1.0;
   std::uint64_t seed = 0;
};
struct CopyInit {
   const TabularPolicy* source = nullptr;
};
using InitSpec = std::variant< UniformInit, RandomInit, CopyInit >;

inline TabularPolicy new_policy(Vocab vocab, int horizon, int order, const PromptSet& prompt_set, const InitSpec& init,
                                std::string label = {})
{
   PolicyShape shape(vocab.size, horizon, order, prompt_set.size());
   std::vector< double > logits(shape.num_params(), 0.0);
   if(const auto* r = std::get_if< RandomInit >(&init)) {
      SeededRng rng(r->seed);
      for(double& l : logits) {
         l = r->scale * rng.normal();
      }
   } else if(const auto* c = std::get_if< CopyInit >(&init)) {
      if(c->source == nullptr) {
         throw std::invalid_argument("new_policy: copy-of requires a source policy");
      }
      if(!(c->source->shape() == shape)) {
         throw std::invalid_argument("new_policy: copy-of source has incompatible shape");
      }
      auto src = c->source->logits();
      logits.assign(src.begin(), src.end());
   }
   return TabularPolicy(std::move(shape), std::move(logits), std::move(label));
}

inline void validate(const TabularPolicy& policy, const Trajectory& traj)
{
   if(traj.prompt_id < 0 || traj.prompt_id >= policy.prompt_count()) {
      throw std::out_of_range("trajectory prompt_id " + std::to_string(traj.prompt_id) + " out of range");
   }
   if(static_cast< int >(traj.tokens.size()) != policy.horizon()) {
      throw std::invalid_argument("trajectory length " + std::to_string(traj.tokens.size())
                                  + " does not match horizon " + std::to_string(policy.horizon()));
   }
   for(int a : traj.tokens) {
      if(a < 0 || a >= policy.vocab_size()) {
         throw std::out_of_range("token id " + std::to_string(a) + " outside vocabulary");
      }
   }
   if(traj.teacher_logprobs) {
      if(static_cast< int >(traj.teacher_logprobs->size()) != policy.horizon()) {
         throw std::invalid_argument("stored teacher log-probs must have one entry per token");
      }
      for(double lp : *traj.teacher_logprobs) {
         if(!(lp <= 1e-12)) {
            throw std::invalid_argument("stored teacher log-prob is positive or NaN");
         }
      }
   }
}

/// Sum of per-token log-probabilities, no validation.
inline double seq_logprob(const TabularPolicy& policy, int prompt, std::span< const int > tokens)
{
   double s = 0.0;
   for(int t = 0; t < policy.horizon(); ++t) {
      s += policy.log_prob(prompt, t, tokens, tokens[t]);
   }
   return s;
}

inline double seq_logprob(const TabularPolicy& policy, const Trajectory& traj)
{
   validate(policy, traj);
   return seq_logprob(policy, traj.prompt_id, traj.tokens);
}

inline Trajectory sample_trajectory(const TabularPolicy& policy, int prompt_id, SeededRng& rng)
{
   if(prompt_id < 0 || prompt_id >= policy.prompt_count()) {
      throw std::out_of_range("sample_trajectory: prompt_id out of range");
   }
   Trajectory traj;
   traj.prompt_id = prompt_id;
   traj.tokens.reserve(static_cast< std::size_t >(policy.horizon()));
   for(int t = 0; t < policy.horizon(); ++t) {
      auto p = policy.probs(policy.group(prompt_id, t, traj.tokens));
      traj.tokens.push_back(rng.categorical(p));
   }
   return traj;
}

/// out += coef * grad log pi(action | group). For softmax the block is
/// indicator(a' = action) - pi(a' | group), zero outside the group.
inline void accumulate_token_score(const TabularPolicy& policy, std::size_t group, int action, double coef,
                                   std::span< double > out)
{
   auto p = policy.probs(group);
   const std::size_t v = p.size();
   double* block = out.data() + group * v;
   for(std::size_t a = 0; a < v; ++a) {
      block[a] -= coef * p[a];
   }
   block[action] += coef;
}

inline GradientVector score_gradient(const TabularPolicy& policy, const Trajectory& traj)
{
   validate(policy, traj);
   GradientVector g(policy.shape());
   for(int t = 0; t < policy.horizon(); ++t) {
      accumulate_token_score(policy, policy.group(traj.prompt_id, t, traj.tokens), traj.tokens[t], 1.0, g.values);
   }
   return g;
}

// --- text serialization -----------------------------------------------------

inline std::string format_double(double x)
{
   char buf[40];
   std::snprintf(buf, sizeof buf, "%.17g", x);
   return buf;
}

inline std::string to_text(const TabularPolicy& policy)
{
   const auto& s = policy.shape();
   std::ostringstream out;
   out << "lopd-policy 1\n";
   out << "label " << (policy.label().empty() ? "-" : policy.label()) << "\n";
   out << "V " << s.vocab() << "\n";
   out << "T " << s.horizon() << "\n";
   out << "k " << s.order() << "\n";
   out << "prompts " << s.prompts() << "\n";
   out << "logits " << s.num_params() << "\n";
   auto logits = policy.logits();
   for(std::size_t g = 0; g < s.num_groups(); ++g) {
      auto key = s.describe(g);
      std::string ctx;
      for(std::size_t i = 0; i < key.context.size(); ++i) {
         ctx += (i ? "," : "") + std::to_string(key.context[i]);
      }
      if(ctx.empty()) {
         ctx = "-";
      }
      for(int a = 0; a < s.vocab(); ++a) {
         out << key.prompt << ' ' << key.position << ' ' << ctx << ' ' << a << ' '
             << format_double(logits[g * static_cast< std::size_t >(s.vocab()) + static_cast< std::size_t >(a)])
             << "\n";
      }
   }
   out << "end\n";
   return out.str();
}

inline TabularPolicy policy_from_text(const std::string& text)
{
   std::istringstream in(text);
   auto fail = [](const std::string& what) -> void { throw std::runtime_error("policy parse error: " + what); };
   auto expect_key = [&](const char* key) {
      std::string k;
      if(!(in >> k) || k != key) {
         fail(std::string("expected '") + key + "'");
      }
   };
   std::string magic;
   int version = 0;
   if(!(in >> magic >> version) || magic != "lopd-policy" || version != 1) {
      fail("bad header");
   }
   std::string label;
   expect_key("label");
   std::getline(in >> std::ws, label);
   if(label == "-") {
      label.clear();
   }
   int v = 0, horizon = 0, order = 0, prompts = 0;
   std::size_t count = 0;
   expect_key("V");
   in >> v;
   expect_key("T");
   in >> horizon;
   expect_key("k");
   in >> order;
   expect_key("prompts");
   in >> prompts;
   expect_key("logits");
   in >> count;
   if(!in) {
      fail("truncated header");
   }
   PolicyShape shape(v, horizon, order, prompts);
   if(count != shape.num_params()) {
      fail("logit count does not match shape");
   }
   std::vector< double > logits(count);
   for(std::size_t i = 0; i < count; ++i) {
      int p = 0, t = 0, a = 0;
      std::string ctx, value;
      if(!(in >> p >> t >> ctx >> a >> value)) {
         fail("truncated logit rows");
      }
      std::vector< int > prefix;
      if(ctx != "-") {
         std::istringstream cs(ctx);
         std::string tok;
         while(std::getline(cs, tok, ',')) {
            prefix.push_back(std::stoi(tok));
         }
      }
      if(p < 0 || p >= prompts || t < 0 || t >= horizon || a < 0 || a >= v
         || static_cast< int >(prefix.size()) != std::min(t, order)) {
         fail("row key out of range");
      }
      // group_index reads the last min(t,k) entries before position t
      std::vector< int > padded(static_cast< std::size_t >(t) - prefix.size(), 0);
      padded.insert(padded.end(), prefix.begin(), prefix.end());
      std::size_t idx = shape.group_index(p, t, padded) * static_cast< std::size_t >(v) + static_cast< std::size_t >(a);
      if(idx != i) {
         fail("rows out of canonical order");
      }
      logits[i] = std::strtod(value.c_str(), nullptr);
   }
   expect_key("end");
   return TabularPolicy(std::move(shape), std::move(logits), std::move(label));
}

inline void save_policy(const TabularPolicy& policy, const std::string& path)
{
   std::ofstream out(path, std::ios::binary);
   if(!out) {
      throw std::runtime_error("cannot write " + path);
   }
   out << to_text(policy);
}

inline TabularPolicy load_policy(const std::string& path)
{
   std::ifstream in(path, std::ios::binary);
   if(!in) {
      throw std::runtime_error("cannot read " + path);
   }
   std::stringstream buf;
   buf << in.rdbuf();
   return policy_from_text(buf.str());
}

}  // namespace lopd
