// imf-lab: train, sample, eval, verify and sweep from the command line.
#include <iostream>

#include "CLI11.hpp"
#include "imf/commands.hpp"

namespace {

void guidance_flags(CLI::App* app, imf::GuidanceFlags& g) {
  app->add_option("--omega", g.omega, "guidance scale (omega-conditioned models only)");
  app->add_option("--t-min", g.t_min, "guidance interval start");
  app->add_option("--t-max", g.t_max, "guidance interval end");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imf-lab: one-step flow models on synthetic data"};
  app.require_subcommand(1);
  int status = 0;

  std::string config, out_dir;
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "output directory")->required();
  train->callback([&] { status = imf::cmd_train(config, out_dir, std::cout, std::cerr); });

  imf::SampleArgs sa;
  std::string sample_ckpt, sample_out;
  auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  sample->add_option("--ckpt", sample_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  sample->add_option("--class", sa.class_label, "class label (default: unconditional)");
  guidance_flags(sample, sa.guidance);
  sample->add_option("--nfe", sa.nfe, "network evaluations per sample")->capture_default_str();
  sample->add_option("--m", sa.m, "number of samples")->capture_default_str();
  sample->add_option("--seed", sa.seed, "prior seed")->capture_default_str();
  sample->add_option("--out", sample_out, "output CSV")->required();
  sample->add_flag("--raw", sa.raw, "use raw weights instead of EMA");
  sample->callback([&] {
    sa.ckpt = sample_ckpt;
    sa.out = sample_out;
    status = imf::cmd_sample(sa, std::cout, std::cerr);
  });

  imf::EvalArgs ea;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "sliced Wasserstein against held-out data");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  guidance_flags(eval, ea.guidance);
  eval->add_option("--nfe", ea.nfe, "network evaluations per sample")->capture_default_str();
  eval->add_option("--m", ea.m_per_class, "samples per class")->capture_default_str();
  eval->add_option("--projections", ea.n_proj, "random projections")->capture_default_str();
  eval->add_option("--seed", ea.seed, "evaluation seed")->capture_default_str();
  eval->add_flag("--raw", ea.raw, "use raw weights instead of EMA");
  eval->callback([&] {
    ea.ckpt = eval_ckpt;
    status = imf::cmd_eval(ea, std::cout, std::cerr);
  });

  imf::VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "check the average-velocity identity on analytic fields");
  verify->add_option("--spec", va.spec, "point | gaussian")->capture_default_str();
  verify->add_option("--mu", va.mu, "data mean (one value per dimension)");
  verify->add_option("--sigma-x", va.sigma_x, "data std (0 = point mass)");
  verify->add_option("--t-grid", va.t_grid, "t and r range over {1/N, ..., 1}")->capture_default_str();
  verify->add_option("--z", va.z_values, "z values (broadcast over dimensions)");
  verify->add_option("--steps", va.steps, "RK4 steps")->capture_default_str();
  verify->add_option("--fd-step", va.fd_step, "central-difference step in t")->capture_default_str();
  verify->add_option("--tol", va.tol, "exit 2 above this residual")->capture_default_str();
  verify->add_option("--bias", va.bias, "constant added to v (sanity check)")->capture_default_str();
  verify->callback([&] { status = imf::cmd_verify(va, std::cout, std::cerr); });

  imf::SweepArgs wa;
  std::string sweep_ckpt, sweep_out, sweep_svg, intervals;
  auto* sweep = app.add_subcommand("sweep", "metric over a grid of guidance scales and intervals");
  sweep->add_option("--ckpt", sweep_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("--omegas", wa.omegas, "guidance scales")->required()->delimiter(',');
  sweep->add_option("--intervals", intervals, "lo:hi,lo:hi,...")->default_val("0:1");
  sweep->add_option("--m", wa.m_per_class, "samples per class")->capture_default_str();
  sweep->add_option("--projections", wa.n_proj, "random projections")->capture_default_str();
  sweep->add_option("--seed", wa.seed, "evaluation seed")->capture_default_str();
  sweep->add_option("--out", sweep_out, "output CSV")->required();
  sweep->add_option("--svg", sweep_svg, "optional scatter plot");
  sweep->add_flag("--raw", wa.raw, "use raw weights instead of EMA");
  sweep->callback([&] {
    wa.ckpt = sweep_ckpt;
    wa.out = sweep_out;
    if (!sweep_svg.empty()) wa.svg = sweep_svg;
    try {
      wa.intervals = imf::parse_intervals(intervals);
    } catch (const std::exception& e) {
      std::cerr << "error: --intervals: " << e.what() << "\n";
      status = 1;
      return;
    }
    status = imf::cmd_sweep(wa, std::cout, std::cerr);
  });

  CLI11_PARSE(app, argc, argv);
  return status;
}
