#pragma once

// Seeded random problem instances for randomized checks.

#include <cstdint>
#include <vector>

#include "lopd/policy.hpp"
#include "lopd/rng.hpp"

namespace lopd {

struct InstanceSpec {
   int min_vocab = 2;
   int max_vocab = 3;
   int min_horizon = 1;
   int max_horizon = 3;
   int max_prompts = 2;
   double logit_scale = 1.0;
};

/// Student, ref and two teachers over a shared response space. Orders are
/// drawn independently per policy; the teachers always have full capacity.
struct Instance {
   PromptSet prompts;
   TabularPolicy student;
   TabularPolicy teacher;      // OPD-stage teacher
   TabularPolicy teacher_alt;  // a second, unrelated teacher (SFT-stage teacher in mismatch checks)
   TabularPolicy ref;
};

inline PromptSet random_prompt_set(int n, SeededRng& rng)
{
   std::vector< double > w(static_cast< std::size_t >(n));
   double total = 0.0;
   for(double& x : w) {
      x = 0.25 + rng.uniform();
      total += x;
   }
   double acc = 0.0;
   for(std::size_t i = 0; i + 1 < w.size(); ++i) {
      w[i] /= total;
      acc += w[i];
   }
   w.back() = 1.0 - acc;
   std::vector< std::vector< int > > prompts;
   for(int i = 0; i < n; ++i) {
      prompts.push_back({i});
   }
   return PromptSet(std::move(prompts), std::move(w));
}

inline Instance random_instance(std::uint64_t seed, const InstanceSpec& spec = {})
{
   SeededRng rng(seed, 0x1257);
   auto pick = [&](int lo, int hi) { return lo + static_cast< int >(rng.below(static_cast< std::uint64_t >(hi - lo + 1))); };
   const int v = pick(spec.min_vocab, spec.max_vocab);
   const int t = pick(spec.min_horizon, spec.max_horizon);
   PromptSet prompts = random_prompt_set(pick(1, spec.max_prompts), rng);
   auto make = [&](int order, const char* label) {
      return new_policy(Vocab(v), t, order, prompts, RandomInit{spec.logit_scale, rng.next_u64()}, label);
   };
   TabularPolicy student = make(pick(0, t - 1), "student");
   TabularPolicy teacher = make(t - 1, "teacher");
   TabularPolicy teacher_alt = make(t - 1, "teacher_alt");
   TabularPolicy ref = make(pick(0, t - 1), "ref");
   return Instance{std::move(prompts), std::move(student), std::move(teacher), std::move(teacher_alt), std::move(ref)};
}

}  // namespace lopd
