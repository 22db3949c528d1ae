#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lopd/policy.hpp"

namespace lopd {

/// Teacher-generated supervised data (prompt, response) for the SFT stage.
struct SftDataset {
   struct Record {
      int prompt_id = 0;
      std::vector< int > tokens;
   };
   std::vector< Record > records;
   std::string teacher;
};

/// Rollouts from the reference policy with stored per-token teacher log-probs.
struct OfflineDataset {
   std::vector< Trajectory > records;
   std::string rollout_policy;
   std::string teacher;

   std::size_t size() const noexcept { return records.size(); }
   bool empty() const noexcept { return records.empty(); }
};

namespace detail {

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

inline std::string json_int_array(const std::vector< int >& v)
{
   std::string out = "[";
   for(std::size_t i = 0; i < v.size(); ++i) {
      out += (i ? "," : "") + std::to_string(v[i]);
   }
   return out + "]";
}

inline std::string json_double_array(const std::vector< double >& v)
{
   std::string out = "[";
   for(std::size_t i = 0; i < v.size(); ++i) {
      out += (i ? "," : "") + format_double(v[i]);
   }
   return out + "]";
}

template < typename Fn >
void for_each_json_line(std::istream& in, Fn&& fn)
{
   std::string line;
   std::size_t lineno = 0;
   while(std::getline(in, line)) {
      ++lineno;
      if(line.find_first_not_of(" \t\r") == std::string::npos) {
         continue;
      }
      try {
         fn(nlohmann::json::parse(line));
      } catch(const nlohmann::json::exception& e) {
         throw std::runtime_error("JSONL line " + std::to_string(lineno) + ": " + e.what());
      }
   }
}

}  // namespace detail

/// One JSON object per line; floats carry 17 significant digits.
inline void write_jsonl(const OfflineDataset& data, std::ostream& out)
{
   for(const auto& r : data.records) {
      if(!r.teacher_logprobs) {
         throw std::invalid_argument("write_jsonl: record without stored teacher log-probs");
      }
      out << "{\"prompt_id\":" << r.prompt_id << ",\"tokens\":" << detail::json_int_array(r.tokens)
          << ",\"teacher_logprobs\":" << detail::json_double_array(*r.teacher_logprobs)
          << ",\"teacher\":" << detail::json_string(data.teacher)
          << ",\"rollout_policy\":" << detail::json_string(data.rollout_policy) << "}\n";
   }
}

inline OfflineDataset read_offline_jsonl(std::istream& in)
{
   OfflineDataset data;
   bool first = true;
   detail::for_each_json_line(in, [&](const nlohmann::json& j) {
      Trajectory t;
      t.prompt_id = j.at("prompt_id").get< int >();
      t.tokens = j.at("tokens").get< std::vector< int > >();
      t.teacher_logprobs = j.at("teacher_logprobs").get< std::vector< double > >();
      auto teacher = j.at("teacher").get< std::string >();
      auto rollout = j.at("rollout_policy").get< std::string >();
      if(first) {
         data.teacher = teacher;
         data.rollout_policy = rollout;
         first = false;
      } else if(teacher != data.teacher || rollout != data.rollout_policy) {
         throw std::runtime_error("offline dataset mixes provenance labels");
      }
      data.records.push_back(std::move(t));
   });
   return data;
}

inline void write_jsonl(const SftDataset& data, std::ostream& out)
{
   for(const auto& r : data.records) {
      out << "{\"prompt_id\":" << r.prompt_id << ",\"tokens\":" << detail::json_int_array(r.tokens)
          << ",\"teacher\":" << detail::json_string(data.teacher) << "}\n";
   }
}

inline SftDataset read_sft_jsonl(std::istream& in)
{
   SftDataset data;
   detail::for_each_json_line(in, [&](const nlohmann::json& j) {
      data.records.push_back({j.at("prompt_id").get< int >(), j.at("tokens").get< std::vector< int > >()});
      data.teacher = j.at("teacher").get< std::string >();
   });
   return data;
}

}  // namespace lopd
