#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "lopd/cli.hpp"

namespace {

std::string defaults_footer()
{
   auto format_double = [](double x) {
      std::ostringstream s;
      s << x;
      return s.str();
   };
   const lopd::cli::ExperimentConfig d;
   std::ostringstream o;
   o << "Config file: '[section]' headers, 'key = value' lines, '#' comments. Keys and defaults:\n"
     << "  [instance] vocab=" << d.vocab << " horizon=" << d.horizon
     << " student_order=horizon-1 teacher_order=horizon-1 prompts=" << d.prompts
     << " prompt_weights=uniform teacher_scale=" << format_double(d.teacher_scale) << " seed=" << d.seed
     << " teacher_file= teacher_b_file=\n"
     << "  [verify]   instances=" << d.instances << " vocab=" << d.verify_vocab.lo << ".." << d.verify_vocab.hi
     << " horizon=" << d.verify_horizon.lo << ".." << d.verify_horizon.hi << " max_prompts=" << d.verify_max_prompts
     << " logit_scale=" << format_double(d.verify_scale) << " trajectory_steps=" << d.trajectory_steps
     << " regime_delta=" << format_double(d.regime_delta) << "\n"
     << "  [sft]      mode=" << d.sft_mode << " alpha=" << format_double(d.sft_alpha) << " lr=" << format_double(d.sft_lr)
     << " steps=" << d.sft_steps << " per_prompt=" << d.sft_per_prompt << "\n"
     << "  [train]    lr=" << format_double(d.train.lr) << " steps=" << d.train.steps << " batch=" << d.train.batch
     << " tau=" << format_double(d.train.tau) << " seed=" << d.train.seed << " full_batch=false wall_clock=false"
     << " opd_per_prompt=" << d.opd_per_prompt << " compare_online=false\n"
     << "  [ablate]   teacher_b=" << d.teacher_b << " (negated|random|same) teacher_b_scale="
     << format_double(d.teacher_b_scale) << " seeds=" << d.ablate_seeds << " margin=" << format_double(d.margin) << "\n"
     << "  [oracle]   cap=" << d.oracle.cap << "\n"
     << "  [output]   dir=" << d.out_dir << "\n"
     << "Exit codes: 0 all checks pass, 1 check or property failure, 2 configuration or feasibility error.";
   return o.str();
}

}  // namespace

int main(int argc, char** argv)
{
   namespace cli = lopd::cli;
   CLI::App app{"Exact-oracle experiments for offline on-policy distillation on tabular policies"};
   app.require_subcommand(1);
   app.footer(defaults_footer());

   std::string config_path;
   std::optional< std::uint64_t > seed;
   std::optional< std::string > out;
   std::optional< std::uint64_t > cap;
   std::optional< double > tau, lr;
   std::optional< int > steps;
   bool json = false, compare_online = false, wall_clock = false;

   app.add_option("--config", config_path, "Config file");
   app.add_option("--seed", seed, "Instance seed (overrides [instance] seed)");
   app.add_option("--out", out, "Output directory (overrides [output] dir)");
   app.add_flag("--json", json, "Print the command's JSON summary to stdout");
   app.add_option("--cap", cap, "Enumeration cap on V^T (default 10000000)")->check(CLI::PositiveNumber);
   app.add_option("--tau", tau, "Advantage clip threshold, inf disables clipping (default 10)");
   app.add_option("--lr", lr, "Training learning rate (default 0.5)");
   app.add_option("--steps", steps, "Training steps (default 500)");
   app.add_flag("--compare-online", compare_online, "pipeline: also run the online trainer");
   app.add_flag("--wall-clock", wall_clock, "Record wall_ms in training logs (breaks byte reproducibility)");

   auto* verify = app.add_subcommand("verify", "Randomized identity and bound checks over seeded instances");
   auto* pipeline = app.add_subcommand("pipeline", "SFT, dataset precompute and offline training end to end");
   auto* ablate = app.add_subcommand("ablate", "Teacher-consistency grid for both trainers");
   auto* dynamics = app.add_subcommand("dynamics", "Per-step weight and KL traces for offline and online runs");
   for(auto* sub : {verify, pipeline, ablate, dynamics}) {
      sub->fallthrough();
   }

   try {
      app.parse(argc, argv);
   } catch(const CLI::ParseError& e) {
      int code = app.exit(e);
      return code == 0 ? cli::kOk : cli::kConfigError;
   }

   cli::ExperimentConfig config;
   try {
      if(!config_path.empty()) {
         cli::load_config_file(config_path, config);
      }
      if(seed) {
         config.seed = *seed;
      }
      if(out) {
         config.out_dir = *out;
      }
      if(cap) {
         config.oracle.cap = *cap;
      }
      if(tau) {
         config.train.tau = *tau;
      }
      if(lr) {
         config.train.lr = *lr;
      }
      if(steps) {
         config.train.steps = *steps;
      }
      config.compare_online = config.compare_online || compare_online;
      config.train.record_wall_clock = config.train.record_wall_clock || wall_clock;
      config.json_stdout = json;

      std::ostream& log = json ? std::cerr : std::cout;
      cli::CommandResult result;
      if(verify->parsed()) {
         result = cli::cmd_verify(config, log);
      } else if(pipeline->parsed()) {
         result = cli::cmd_pipeline(config, log);
      } else if(ablate->parsed()) {
         result = cli::cmd_ablate(config, log);
      } else {
         result = cli::cmd_dynamics(config, log);
      }
      if(json) {
         std::cout << result.summary.dump(1) << "\n";
      }
      return result.exit_code;
   } catch(const cli::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return cli::kConfigError;
   } catch(const lopd::EnumerationCapExceeded& e) {
      std::cerr << "infeasible: " << e.what() << "\n";
      return cli::kConfigError;
   } catch(const std::invalid_argument& e) {
      std::cerr << "invalid input: " << e.what() << "\n";
      return cli::kConfigError;
   } catch(const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return cli::kCheckFailed;
   }
}
