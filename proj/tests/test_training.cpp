#include <cmath>

#include "doctest.h"
#include "imf/oracle.hpp"
#include "imf/trainer.hpp"

using namespace imf;

TEST_CASE("FM on a 1D Gaussian recovers the marginal velocity") {
  RunConfig cfg = parse_run_config(R"({"schema_version": 1, "seed": 6, "steps": 10000, "batch_size": 256,
    "objective": "fm", "log_every": 1000,
    "dataset": {"kind": "gaussian", "dim": 1, "mu": [1.0], "sigma_x": 1.0},
    "net": {"arch": "mlp", "depth": 2, "width": 32, "embed_dim": 16, "embed_max_freq": 8, "embed_freq_span": 100},
    "time_sampler": {"mu": 0.0, "sigma": 2.0},
    "optimizer": {"lr": 0.002, "ema_decay": 0.998, "warmup_frac": 0.05},
    "adaptive_weight": {"p": 0}})");
  TrainResult res = train(cfg);
  REQUIRE(!res.aborted);
  const NetConfig net = cfg.resolved_net();
  const VarMap params = constants(res.state.ema);
  const GaussianSpec spec{{1.0}, 1.0};
  double worst = 0.0;
  for (double t = 0.1; t < 0.91; t += 0.1) {
    // Support: within 1.5 standard deviations of the marginal at t.
    const double m = (1 - t) * 1.0, s = std::sqrt((1 - t) * (1 - t) + t * t);
    Tensor z({31, 1});
    for (std::size_t i = 0; i < 31; ++i) z[i] = m + s * (-1.5 + 0.1 * static_cast<double>(i));
    const CondBatch cond = CondBatch::repeat(ConditionSet{t, t}, 31);
    const Tensor v = forward_v_boundary(net, params, Var(z), cond).value();
    for (std::size_t i = 0; i < 31; ++i) worst = std::max(worst, std::abs(v[i] - marginal_v({z[i]}, t, spec)[0]));
  }
  MESSAGE("max |v_theta - v| on support: " << worst);
  CHECK(worst < 0.05);
}
