#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lopd/instances.hpp"
#include "lopd/oracle.hpp"
#include "lopd/policy.hpp"

using namespace lopd;

namespace {

TabularPolicy two_point(double p0, const char* label = "")
{
   return TabularPolicy(PolicyShape(2, 1, 0, 1), {std::log(p0), std::log(1.0 - p0)}, label);
}

}  // namespace

TEST(Enumerate, CountAndUniformWeights)
{
   auto pi = new_policy(Vocab(2), 3, 1, PromptSet::uniform(1), UniformInit{});
   auto table = enumerate(pi, 0);
   ASSERT_EQ(table.entries.size(), 8u);
   for(const auto& e : table.entries) {
      EXPECT_NEAR(std::exp(e.log_prob), 0.125, 1e-15);
   }
}

TEST(Enumerate, CoversEverySequenceOnceAndMatchesSeqLogprob)
{
   for(std::uint64_t seed = 0; seed < 30; ++seed) {
      auto inst = random_instance(seed);
      const auto& pi = inst.student;
      for(int p = 0; p < pi.prompt_count(); ++p) {
         auto table = enumerate(pi, p);
         std::set< std::vector< int > > seen;
         StableSum total;
         for(const auto& e : table.entries) {
            EXPECT_TRUE(seen.insert(e.tokens).second);
            EXPECT_EQ(e.log_prob, seq_logprob(pi, p, e.tokens));
            total.add(std::exp(e.log_prob));
         }
         EXPECT_EQ(seen.size(), response_space_size(pi.vocab_size(), pi.horizon()));
         EXPECT_NEAR(total.value(), 1.0, 1e-10);
      }
   }
}

TEST(Enumerate, RefusesAboveCapNamingTheSpaceSize)
{
   PolicyShape shape(10, 10, 0, 1);
   TabularPolicy pi(shape, std::vector< double >(shape.num_params(), 0.0));
   try {
      enumerate(pi, 0);
      FAIL() << "expected refusal";
   } catch(const EnumerationCapExceeded& e) {
      EXPECT_NE(std::string(e.what()).find("10^10"), std::string::npos);
      EXPECT_EQ(e.vocab(), 10);
      EXPECT_EQ(e.horizon(), 10);
   }
   // a raised cap admits a space the default refuses
   auto small = new_policy(Vocab(2), 4, 0, PromptSet::uniform(1), UniformInit{});
   EXPECT_THROW(enumerate(small, 0, OracleOptions{15}), EnumerationCapExceeded);
   EXPECT_NO_THROW(enumerate(small, 0, OracleOptions{16}));
}

TEST(ExactExpectation, Examples)
{
   auto pi = new_policy(Vocab(2), 3, 2, PromptSet::uniform(1), UniformInit{});
   auto table = enumerate(pi, 0);
   EXPECT_NEAR(exact_expectation(table, [](const SequenceEntry&) { return 1.0; }), 1.0, 1e-12);
   EXPECT_NEAR(exact_expectation(table, [](const SequenceEntry& e) { return e.tokens[0] == 0 ? 1.0 : 0.0; }), 0.5,
               1e-15);
   // total advantage with the teacher equal to the student is exactly zero
   EXPECT_EQ(exact_expectation(table,
                               [&](const SequenceEntry& e) {
                                  return seq_logprob(pi, 0, e.tokens) - seq_logprob(pi, 0, e.tokens);
                               }),
             0.0);
}

TEST(ExactExpectation, PromptMarginalized)
{
   PromptSet prompts({{0}, {1}}, {0.25, 0.75});
   PolicyShape shape(2, 1, 0, 2);
   TabularPolicy pi(shape, {std::log(0.9), std::log(0.1), std::log(0.3), std::log(0.7)});
   auto table = enumerate(pi, prompts);
   ASSERT_EQ(table.entries.size(), 4u);
   double e = exact_expectation(table, [](const SequenceEntry& x) { return x.tokens[0] == 0 ? 1.0 : 0.0; });
   EXPECT_NEAR(e, 0.25 * 0.9 + 0.75 * 0.3, 1e-15);
}

TEST(ExactExpectation, LinearInTheFunctional)
{
   for(std::uint64_t seed = 0; seed < 50; ++seed) {
      auto inst = random_instance(seed);
      auto table = enumerate(inst.student, inst.prompts);
      SeededRng rng(seed, 3);
      std::vector< double > fv, gv;
      for(std::size_t i = 0; i < table.entries.size(); ++i) {
         fv.push_back(rng.normal());
         gv.push_back(rng.normal());
      }
      const double alpha = rng.normal();
      const double beta = rng.normal();
      auto idx = [&](const SequenceEntry& e) { return static_cast< std::size_t >(&e - table.entries.data()); };
      double ef = exact_expectation(table, [&](const SequenceEntry& e) { return fv[idx(e)]; });
      double eg = exact_expectation(table, [&](const SequenceEntry& e) { return gv[idx(e)]; });
      double ecomb = exact_expectation(table, [&](const SequenceEntry& e) { return alpha * fv[idx(e)] + beta * gv[idx(e)]; });
      EXPECT_NEAR(ecomb, alpha * ef + beta * eg, 1e-12);
   }
}

TEST(ChiSquared, Examples)
{
   auto a = two_point(0.8);
   auto b = two_point(0.5);
   auto one = PromptSet::uniform(1);
   EXPECT_NEAR(chi_squared(a, a, one), 0.0, 1e-12);
   EXPECT_NEAR(chi_squared(a, b, one), (0.64 + 0.04) / 0.5 - 1.0, 1e-12);
   EXPECT_NEAR(chi_squared(a, b, one), 0.36, 1e-12);
}

TEST(Kl, Examples)
{
   auto a = two_point(0.8);
   auto b = two_point(0.5);
   auto one = PromptSet::uniform(1);
   EXPECT_EQ(kl(a, a, one), 0.0);
   EXPECT_NEAR(kl(a, b, one), 0.8 * std::log(1.6) + 0.2 * std::log(0.4), 1e-12);
   EXPECT_NEAR(kl(a, b, one), 0.19274475702175753, 1e-12);
}

TEST(Divergences, NonNegativeAndZeroOnIdenticalInputs)
{
   for(std::uint64_t seed = 0; seed < 100; ++seed) {
      auto inst = random_instance(seed, {2, 3, 1, 3, 2, 2.0});
      const auto& P = inst.prompts;
      EXPECT_GE(chi_squared(inst.student, inst.ref, P), -1e-12);
      EXPECT_GE(kl(inst.student, inst.ref, P), -1e-12);
      EXPECT_GE(sigma_A(inst.student, inst.teacher, inst.ref, P), 0.0);
      EXPECT_GE(sigma_Delta(inst.teacher, inst.teacher_alt, inst.ref, P), 0.0);
      EXPECT_NEAR(chi_squared(inst.student, inst.student, P), 0.0, 1e-12);
      EXPECT_NEAR(kl(inst.student, inst.student, P), 0.0, 1e-12);
      EXPECT_EQ(sigma_A(inst.teacher, inst.teacher, inst.ref, P), 0.0);
      EXPECT_EQ(sigma_Delta(inst.teacher, inst.teacher, inst.ref, P), 0.0);
   }
}

TEST(Kl, AgreesWithPlainLogRatioSum)
{
   for(std::uint64_t seed = 0; seed < 50; ++seed) {
      auto inst = random_instance(seed);
      double plain = 0.0;
      for(int p = 0; p < inst.prompts.size(); ++p) {
         for_each_response(inst.student.vocab_size(), inst.student.horizon(), [&](std::span< const int > x) {
            double la = seq_logprob(inst.student, p, x);
            plain += inst.prompts.weight(p) * std::exp(la) * (la - seq_logprob(inst.teacher, p, x));
         });
      }
      EXPECT_NEAR(kl(inst.student, inst.teacher, inst.prompts), plain, 1e-12);
   }
}

TEST(SigmaA, TwoPointBruteForce)
{
   // sigma_A^2 = sum_a ref(a) (log teacher(a) - log student(a))^2
   auto student = two_point(0.3);
   auto teacher = two_point(0.8);
   auto ref = two_point(0.6);
   double expect = std::sqrt(0.6 * std::pow(std::log(0.8 / 0.3), 2) + 0.4 * std::pow(std::log(0.2 / 0.7), 2));
   EXPECT_NEAR(sigma_A(student, teacher, ref, PromptSet::uniform(1)), expect, 1e-14);
   // zero for any ref when student = teacher
   EXPECT_EQ(sigma_A(teacher, teacher, ref, PromptSet::uniform(1)), 0.0);
   EXPECT_EQ(sigma_A(teacher, teacher, student, PromptSet::uniform(1)), 0.0);
}

TEST(SigmaDelta, TwoPointBruteForceAndSymmetric)
{
   auto sft = two_point(0.9);
   auto opd = two_point(0.4);
   auto ref = two_point(0.7);
   auto one = PromptSet::uniform(1);
   double expect = std::sqrt(0.7 * std::pow(std::log(0.9 / 0.4), 2) + 0.3 * std::pow(std::log(0.1 / 0.6), 2));
   EXPECT_NEAR(sigma_Delta(sft, opd, ref, one), expect, 1e-14);
   EXPECT_EQ(sigma_Delta(sft, sft, ref, one), 0.0);
   for(std::uint64_t seed = 0; seed < 30; ++seed) {
      auto inst = random_instance(seed);
      EXPECT_NEAR(sigma_Delta(inst.teacher, inst.teacher_alt, inst.ref, inst.prompts),
                  sigma_Delta(inst.teacher_alt, inst.teacher, inst.ref, inst.prompts), 1e-14);
   }
}

TEST(ScoreBoundG, Examples)
{
   auto uniform = new_policy(Vocab(2), 1, 0, PromptSet::uniform(1), UniformInit{});
   EXPECT_NEAR(score_bound_G(uniform), std::sqrt(0.5), 1e-15);
   auto sharp = two_point(1.0 - 1e-9);
   EXPECT_LE(score_bound_G(sharp), std::sqrt(2.0) + 1e-12);
   EXPECT_NEAR(score_bound_G(sharp), std::sqrt(2.0), 1e-8);
}

TEST(ScoreBoundG, MatchesBruteForceAndIgnoresRelabeling)
{
   for(std::uint64_t seed = 0; seed < 50; ++seed) {
      auto inst = random_instance(seed, {2, 4, 1, 3, 2, 3.0});
      const auto& pi = inst.student;
      const std::size_t v = static_cast< std::size_t >(pi.vocab_size());
      double brute = 0.0;
      for(std::size_t g = 0; g < pi.shape().num_groups(); ++g) {
         for(std::size_t a = 0; a < v; ++a) {
            GradientVector s(pi.shape());
            accumulate_token_score(pi, g, static_cast< int >(a), 1.0, s.values);
            brute = std::max(brute, s.norm());
         }
      }
      EXPECT_NEAR(score_bound_G(pi), brute, 1e-14);
      EXPECT_LE(score_bound_G(pi), std::sqrt(2.0) + 1e-12);
      // reverse the action order inside every group
      std::vector< double > flipped(pi.logits().begin(), pi.logits().end());
      for(std::size_t g = 0; g < pi.shape().num_groups(); ++g) {
         std::reverse(flipped.begin() + static_cast< std::ptrdiff_t >(g * v),
                      flipped.begin() + static_cast< std::ptrdiff_t >((g + 1) * v));
      }
      TabularPolicy relabeled(pi.shape(), flipped);
      EXPECT_NEAR(score_bound_G(relabeled), score_bound_G(pi), 1e-14);
   }
}
