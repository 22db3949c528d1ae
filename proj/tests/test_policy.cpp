#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lopd/instances.hpp"
#include "lopd/oracle.hpp"
#include "lopd/policy.hpp"

using namespace lopd;

namespace {

TabularPolicy two_point(double p0)
{
   PolicyShape shape(2, 1, 0, 1);
   return TabularPolicy(shape, {std::log(p0), std::log(1.0 - p0)});
}

}  // namespace

TEST(NewPolicy, UniformIsExactlyOneOverV)
{
   auto prompts = PromptSet::uniform(1);
   auto pi = new_policy(Vocab(2), 2, 1, prompts, UniformInit{});
   for(std::size_t g = 0; g < pi.shape().num_groups(); ++g) {
      for(double p : pi.probs(g)) {
         EXPECT_EQ(p, 0.5);
      }
   }
   auto pi3 = new_policy(Vocab(3), 1, 0, prompts, UniformInit{});
   for(double p : pi3.probs(0)) {
      EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
   }
}

TEST(NewPolicy, SeededRandomIsBitReproducible)
{
   auto prompts = PromptSet::uniform(1);
   auto a = new_policy(Vocab(2), 2, 1, prompts, RandomInit{1.0, 7});
   auto b = new_policy(Vocab(2), 2, 1, prompts, RandomInit{1.0, 7});
   auto c = new_policy(Vocab(2), 2, 1, prompts, RandomInit{1.0, 8});
   ASSERT_EQ(a.logits().size(), 6u);  // 1 + 2 contexts, 2 actions each
   EXPECT_TRUE(std::equal(a.logits().begin(), a.logits().end(), b.logits().begin()));
   EXPECT_FALSE(std::equal(a.logits().begin(), a.logits().end(), c.logits().begin()));
}

TEST(NewPolicy, RejectsBadShapes)
{
   auto prompts = PromptSet::uniform(2);
   EXPECT_THROW(new_policy(Vocab(2), 2, 2, prompts, UniformInit{}), std::invalid_argument);
   EXPECT_THROW(new_policy(Vocab(2), 0, 0, prompts, UniformInit{}), std::invalid_argument);
   EXPECT_THROW(Vocab(1), std::invalid_argument);
   auto other = new_policy(Vocab(2), 3, 0, prompts, UniformInit{});
   EXPECT_THROW(new_policy(Vocab(2), 2, 0, prompts, CopyInit{&other}), std::invalid_argument);
   auto one_prompt = new_policy(Vocab(2), 2, 0, PromptSet::uniform(1), UniformInit{});
   EXPECT_THROW(new_policy(Vocab(2), 2, 0, prompts, CopyInit{&one_prompt}), std::invalid_argument);
}

TEST(PromptSet, Validation)
{
   EXPECT_THROW(PromptSet({{0}, {1}}, {0.5, 0.6}), std::invalid_argument);
   EXPECT_THROW(PromptSet({{0}, {0}}, {0.5, 0.5}), std::invalid_argument);
   EXPECT_THROW(PromptSet({{0}, {1}}, {1.0, 0.0}), std::invalid_argument);
   EXPECT_NO_THROW(PromptSet({{0}, {1, 2}}, {0.25, 0.75}));
}

TEST(Layout, ContextsAreReachableOnly)
{
   PolicyShape s(3, 4, 2, 2);
   EXPECT_EQ(s.contexts_at(0), 1u);
   EXPECT_EQ(s.contexts_at(1), 3u);
   EXPECT_EQ(s.contexts_at(2), 9u);
   EXPECT_EQ(s.contexts_at(3), 9u);
   EXPECT_EQ(s.num_groups(), 2u * 22u);
   std::vector< int > prefix{2, 1, 0};
   auto g = s.group_index(1, 3, prefix);
   auto key = s.describe(g);
   EXPECT_EQ(key.prompt, 1);
   EXPECT_EQ(key.position, 3);
   EXPECT_EQ(key.context, (std::vector< int >{1, 0}));
   // a different older token maps to the same order-2 context
   std::vector< int > prefix2{0, 1, 0};
   EXPECT_EQ(s.group_index(1, 3, prefix2), g);
}

TEST(SeqLogprob, UniformProduct)
{
   auto pi = new_policy(Vocab(2), 3, 1, PromptSet::uniform(1), UniformInit{});
   EXPECT_NEAR(seq_logprob(pi, Trajectory{0, {1, 0, 1}, {}}), 3.0 * std::log(0.5), 1e-15);
   EXPECT_NEAR(seq_logprob(pi, Trajectory{0, {1, 0, 1}, {}}), -2.0794415416798357, 1e-15);
}

TEST(SeqLogprob, HandSoftmax)
{
   auto pi = two_point(0.8);
   EXPECT_NEAR(seq_logprob(pi, Trajectory{0, {0}, {}}), -0.2231435513142097, 1e-15);
}

TEST(SeqLogprob, RejectsOutOfVocabTokens)
{
   auto pi = two_point(0.8);
   EXPECT_THROW(seq_logprob(pi, Trajectory{0, {2}, {}}), std::out_of_range);
   EXPECT_THROW(seq_logprob(pi, Trajectory{1, {0}, {}}), std::out_of_range);
   EXPECT_THROW(seq_logprob(pi, Trajectory{0, {0, 0}, {}}), std::invalid_argument);
}

TEST(SeqLogprob, ExponentiatedMatchesProductAndNormalizes)
{
   for(std::uint64_t seed = 0; seed < 50; ++seed) {
      auto inst = random_instance(seed);
      const auto& pi = inst.student;
      for(int p = 0; p < pi.prompt_count(); ++p) {
         double total = 0.0;
         for_each_response(pi.vocab_size(), pi.horizon(), [&](std::span< const int > x) {
            double prod = 1.0;
            for(int t = 0; t < pi.horizon(); ++t) {
               prod *= pi.probs(pi.group(p, t, x))[x[t]];
            }
            double lp = seq_logprob(pi, p, x);
            EXPECT_NEAR(std::exp(lp), prod, 1e-12 * prod);
            total += std::exp(lp);
         });
         EXPECT_NEAR(total, 1.0, 1e-10);
      }
   }
}

TEST(Conditionals, NormalizedWithFullSupport)
{
   for(std::uint64_t seed = 0; seed < 50; ++seed) {
      auto inst = random_instance(seed, {2, 4, 1, 4, 2, 5.0});
      for(const auto* pi : {&inst.student, &inst.teacher, &inst.ref}) {
         for(std::size_t g = 0; g < pi->shape().num_groups(); ++g) {
            auto p = pi->probs(g);
            EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
            for(double q : p) {
               EXPECT_GT(q, 0.0);
            }
         }
      }
   }
}

TEST(Sampling, NearDeterministicPolicy)
{
   PolicyShape shape(2, 3, 1, 1);
   std::vector< double > logits;
   for(std::size_t g = 0; g < shape.num_groups(); ++g) {
      logits.push_back(0.0);
      logits.push_back(std::log(1e-15));
   }
   TabularPolicy pi(shape, logits);
   SeededRng rng(3);
   int zeros = 0, total = 0;
   for(int i = 0; i < 10000; ++i) {
      for(int a : sample_trajectory(pi, 0, rng).tokens) {
         zeros += (a == 0);
         ++total;
      }
   }
   EXPECT_GE(static_cast< double >(zeros) / total, 0.999);
}

TEST(Sampling, UniformFrequency)
{
   auto pi = new_policy(Vocab(2), 1, 0, PromptSet::uniform(1), UniformInit{});
   SeededRng rng(11);
   int zeros = 0;
   const int n = 100000;
   for(int i = 0; i < n; ++i) {
      zeros += sample_trajectory(pi, 0, rng).tokens[0] == 0;
   }
   // binomial sd = 0.5 / sqrt(n) ~ 0.0016; 0.01 is ~6 sd
   EXPECT_NEAR(static_cast< double >(zeros) / n, 0.5, 0.01);
}

TEST(Sampling, SameSeedSameTrajectories)
{
   auto inst = random_instance(5);
   SeededRng a(99), b(99);
   for(int i = 0; i < 100; ++i) {
      EXPECT_EQ(sample_trajectory(inst.student, 0, a).tokens, sample_trajectory(inst.student, 0, b).tokens);
   }
   EXPECT_EQ(a.counter(), b.counter());
}

TEST(ScoreGradient, UniformBlock)
{
   auto pi = new_policy(Vocab(2), 1, 0, PromptSet::uniform(1), UniformInit{});
   auto g = score_gradient(pi, Trajectory{0, {0}, {}});
   EXPECT_EQ(g.values, (std::vector< double >{0.5, -0.5}));
}

TEST(ScoreGradient, PerTokenNormAtMostSqrt2AndGroupSumsZero)
{
   for(std::uint64_t seed = 0; seed < 100; ++seed) {
      auto inst = random_instance(seed, {2, 4, 1, 3, 2, 4.0});
      const auto& pi = inst.student;
      SeededRng rng(seed);
      auto traj = sample_trajectory(pi, 0, rng);
      for(int t = 0; t < pi.horizon(); ++t) {
         GradientVector g(pi.shape());
         accumulate_token_score(pi, pi.group(0, t, traj.tokens), traj.tokens[t], 1.0, g.values);
         EXPECT_LE(g.norm(), std::sqrt(2.0));
      }
      auto g = score_gradient(pi, traj);
      const std::size_t v = static_cast< std::size_t >(pi.vocab_size());
      for(std::size_t grp = 0; grp < pi.shape().num_groups(); ++grp) {
         double s = 0.0;
         for(std::size_t a = 0; a < v; ++a) {
            s += g.values[grp * v + a];
         }
         EXPECT_NEAR(s, 0.0, 1e-10);
      }
   }
}

TEST(ScoreGradient, MatchesCentralFiniteDifferences)
{
   const double eps = 1e-6;
   for(std::uint64_t seed = 0; seed < 20; ++seed) {
      auto inst = random_instance(seed);
      const auto& pi = inst.student;
      SeededRng rng(seed + 100);
      auto traj = sample_trajectory(pi, pi.prompt_count() - 1, rng);
      auto g = score_gradient(pi, traj);
      std::vector< double > base(pi.logits().begin(), pi.logits().end());
      for(std::size_t i = 0; i < base.size(); ++i) {
         auto plus = base, minus = base;
         plus[i] += eps;
         minus[i] -= eps;
         double fd = (seq_logprob(TabularPolicy(pi.shape(), plus), traj)
                      - seq_logprob(TabularPolicy(pi.shape(), minus), traj))
                     / (2 * eps);
         EXPECT_NEAR(g.values[i], fd, 1e-5) << "seed " << seed << " entry " << i;
      }
   }
}

TEST(Capacity, FullCapacityRepresentsAnyResponseDistribution)
{
   SeededRng rng(21);
   const int v = 3, horizon = 3;
   PolicyShape shape(v, horizon, horizon - 1, 1);
   // random target over all V^T responses
   std::vector< double > target;
   for_each_response(v, horizon, [&](std::span< const int >) { target.push_back(0.05 + rng.uniform()); });
   double z = std::accumulate(target.begin(), target.end(), 0.0);
   for(double& q : target) {
      q /= z;
   }
   auto index_of = [&](std::span< const int > x) {
      std::size_t i = 0;
      for(int a : x) {
         i = i * v + static_cast< std::size_t >(a);
      }
      return i;
   };
   // marginal mass of a prefix
   auto prefix_mass = [&](std::vector< int > prefix) {
      double m = 0.0;
      for_each_response(v, horizon, [&](std::span< const int > x) {
         if(std::equal(prefix.begin(), prefix.end(), x.begin())) {
            m += target[index_of(x)];
         }
      });
      return m;
   };
   std::vector< double > logits(shape.num_params());
   for(std::size_t g = 0; g < shape.num_groups(); ++g) {
      auto key = shape.describe(g);
      double parent = prefix_mass(key.context);
      for(int a = 0; a < v; ++a) {
         auto child = key.context;
         child.push_back(a);
         logits[g * v + a] = std::log(prefix_mass(child) / parent);
      }
   }
   TabularPolicy pi(shape, logits);
   StableSum klsum;
   for_each_response(v, horizon, [&](std::span< const int > x) {
      double lp = seq_logprob(pi, 0, x);
      // non-negative per-response form: pi (r - 1) + q, series for small r
      double r = lp - std::log(target[index_of(x)]);
      double term = std::abs(r) < 1e-3 ? std::exp(lp) * r * r * (0.5 - r / 6.0)
                                       : std::exp(lp) * (r - 1.0) + target[index_of(x)];
      klsum.add(term);
   });
   EXPECT_LT(klsum.value(), 1e-20);
}

TEST(Serialization, TextRoundTripIsBitExact)
{
   for(std::uint64_t seed = 0; seed < 20; ++seed) {
      auto inst = random_instance(seed, {2, 4, 1, 3, 2, 3.0});
      auto text = to_text(inst.student);
      auto back = policy_from_text(text);
      ASSERT_TRUE(back.shape() == inst.student.shape());
      EXPECT_TRUE(std::equal(back.logits().begin(), back.logits().end(), inst.student.logits().begin()));
      EXPECT_EQ(back.label(), "student");
      EXPECT_EQ(to_text(back), text);
   }
}

TEST(Serialization, RejectsMalformedInput)
{
   auto text = to_text(two_point(0.8));
   EXPECT_THROW(policy_from_text("nonsense"), std::runtime_error);
   EXPECT_THROW(policy_from_text(text.substr(0, text.size() / 2)), std::runtime_error);
   auto swapped = text;
   swapped.replace(swapped.find("logits 2"), 8, "logits 3");
   EXPECT_THROW(policy_from_text(swapped), std::runtime_error);
}
