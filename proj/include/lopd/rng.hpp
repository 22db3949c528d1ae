#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>

namespace lopd {

/// Counter-based random stream. Every draw is a pure function of
/// (seed, stream, counter), so results do not depend on the standard
/// library's distribution implementations.
class SeededRng {
  public:
   explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
       : m_seed(seed), m_stream(stream)
   {
   }

   std::uint64_t seed() const noexcept { return m_seed; }
   std::uint64_t stream() const noexcept { return m_stream; }
   std::uint64_t counter() const noexcept { return m_counter; }

   /// Independent stream derived from this one; does not advance the parent.
   SeededRng substream(std::uint64_t index) const noexcept
   {
      return SeededRng(mix(m_seed ^ 0x6a09e667f3bcc909ULL), mix(m_stream + 0x9e3779b97f4a7c15ULL * (index + 1)));
   }

   std::uint64_t next_u64() noexcept
   {
      std::uint64_t key = mix(m_seed + 0x9e3779b97f4a7c15ULL * (m_stream + 1));
      return mix(key ^ mix(m_counter++ + 0xbf58476d1ce4e5b9ULL));
   }

   /// Uniform in [0, 1) with 53 bits of resolution.
   double uniform() noexcept { return static_cast< double >(next_u64() >> 11) * 0x1.0p-53; }

   /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
   std::uint64_t below(std::uint64_t n)
   {
      if(n == 0) {
         throw std::invalid_argument("SeededRng::below: empty range");
      }
      std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
      std::uint64_t x = next_u64();
      while(x >= limit) {
         x = next_u64();
      }
      return x % n;
   }

   /// Standard normal via Box-Muller (one value per call, two uniforms).
   double normal() noexcept
   {
      double u1 = uniform();
      double u2 = uniform();
      if(u1 < 0x1.0p-60) {
         u1 = 0x1.0p-60;
      }
      return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
   }

   /// Draw an index from a discrete distribution given by probabilities.
   int categorical(std::span< const double > probs) noexcept
   {
      double u = uniform();
      double acc = 0.0;
      for(std::size_t i = 0; i + 1 < probs.size(); ++i) {
         acc += probs[i];
         if(u < acc) {
            return static_cast< int >(i);
         }
      }
      return static_cast< int >(probs.size()) - 1;
   }

  private:
   static constexpr std::uint64_t mix(std::uint64_t z) noexcept
   {
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      return z ^ (z >> 31);
   }

   std::uint64_t m_seed;
   std::uint64_t m_stream;
   std::uint64_t m_counter = 0;
};

}  // namespace lopd
