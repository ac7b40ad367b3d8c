#pragma once

#include <cstdint>
#include <vector>

#include "nttlab/experiment.hpp"
#include "nttlab/netsim.hpp"
#include "nttlab/rng.hpp"
#include "nttlab/trace.hpp"

namespace testutil {

/// A valid dataset: `runs` runs of `per_run` packets grouped into
/// messages of 1..4 packets, random sizes, delays and gaps.
inline nttlab::trace::TraceDataset random_dataset(std::uint64_t seed, int runs, int per_run, int receivers = 3) {
  nttlab::Rng rng(seed);
  nttlab::trace::TraceDataset ds;
  ds.meta.scenario = "TEST";
  ds.meta.seed = seed;
  std::int64_t msg = 0;
  for (int r = 0; r < runs; ++r) {
    double t = rng.uniform() * 0.01;
    int left = 0;
    std::int64_t msg_size = 0;
    std::int64_t receiver = 0;
    for (int i = 0; i < per_run; ++i) {
      if (left == 0) {
        left = 1 + static_cast<int>(rng.below(4));
        if (i + left > per_run) left = per_run - i;
        msg_size = 0;
        receiver = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(receivers)));
        ++msg;
      }
      nttlab::trace::PacketRecord p;
      p.sim_id = r;
      p.packet_seq = i;
      p.message_id = msg;
      p.sender_id = static_cast<std::int64_t>(rng.below(10));
      p.receiver_id = receiver;
      p.send_time = std::round(t * 1e9) / 1e9;
      p.size = 40 + static_cast<std::int64_t>(rng.below(1461));
      p.delay = std::round((0.001 + 0.2 * rng.uniform()) * 1e9) / 1e9;
      p.message_size = 1500 * left;
      --left;
      p.is_last_in_message = left == 0;
      ds.records.push_back(p);
      t += 1e-4 + 0.002 * rng.uniform();
    }
  }
  // message_size is the whole-message total; fill it back in per message.
  for (std::size_t i = 0; i < ds.records.size();) {
    std::size_t j = i;
    std::int64_t total = 0;
    while (j < ds.records.size() && ds.records[j].sim_id == ds.records[i].sim_id &&
           ds.records[j].message_id == ds.records[i].message_id) {
      total += ds.records[j].size;
      ++j;
    }
    for (std::size_t k = i; k < j; ++k) ds.records[k].message_size = total;
    i = j;
  }
  return ds;
}

/// Small random dumbbell: senders -> S1 -> S2 -> receivers, random rates,
/// queue sizes and optional TCP cross-traffic over the S1 -> S2 link.
inline nttlab::netsim::SimConfig random_sim_config(std::uint64_t seed) {
  using namespace nttlab::netsim;
  nttlab::Rng rng(seed);
  SimConfig c;
  c.scenario = Scenario::PRETRAIN;
  c.seed = seed;
  c.n_runs = 1;
  c.duration = rng.uniform(0.05, 0.3);
  const int senders = 1 + static_cast<int>(rng.below(4));
  const int receivers = 1 + static_cast<int>(rng.below(3));
  const double bottleneck = rng.uniform(0.5e6, 5e6);
  auto& w = c.workload;
  w.n_senders = senders;
  w.per_sender_rate = bottleneck * rng.uniform(0.2, 1.5) / senders;
  w.start_jitter = rng.uniform(0.0, 0.05);
  w.mss = 500 + static_cast<int>(rng.below(1001));
  w.size_dist = rng.uniform() < 0.3 ? SizeDistribution::point_mass(200 + static_cast<std::int64_t>(rng.below(3000)))
                                    : SizeDistribution::default_workload();
  w.pacing_rate = rng.uniform() < 0.5 ? 0.0 : rng.uniform(1e6, 20e6);
  for (int i = 0; i < senders; ++i) {
    w.sender_nodes.push_back(10 + i);
    c.links.push_back({10 + i, 1, rng.uniform(2e6, 50e6), rng.uniform(0.0, 0.002), 1 + static_cast<int>(rng.below(100))});
  }
  c.links.push_back({1, 2, bottleneck, rng.uniform(0.0, 0.01), 1 + static_cast<int>(rng.below(60))});
  for (int k = 0; k < receivers; ++k) {
    w.receiver_nodes.push_back(100 + k);
    c.links.push_back({2, 100 + k, rng.uniform(1e6, 50e6), rng.uniform(0.0, 0.02), 1 + static_cast<int>(rng.below(60))});
  }
  if (rng.uniform() < 0.5) {
    c.cross_traffic.push_back({1 + static_cast<int>(rng.below(3)), bottleneck * rng.uniform(0.1, 0.8), 1, 2,
                               500 + static_cast<int>(rng.below(1001))});
  }
  return c;
}

/// Whole pipeline on the tiny model: DESK traces, a few capped windows,
/// one epoch per stage. Runs in seconds.
inline nttlab::experiment::ExperimentPlan tiny_plan(const std::string& out_dir) {
  nttlab::experiment::ExperimentPlan plan;
  plan.model = nttlab::model::tiny_config(0);
  plan.seeds = {1};
  plan.pretrain.epochs = 1;
  plan.finetune.epochs = 1;
  plan.max_train_windows = 48;
  plan.output_dir = out_dir;
  return plan;
}

}  // namespace testutil
