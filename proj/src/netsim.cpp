#include "nttlab/netsim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <future>
#include <limits>
#include <queue>
#include <sstream>
#include <thread>

#include "nttlab/error.hpp"

namespace nttlab::netsim {

using trace::PacketRecord;
using trace::TraceDataset;

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::PRETRAIN: return "PRETRAIN";
    case Scenario::CASE1: return "CASE1";
    case Scenario::CASE2: return "CASE2";
  }
  return "?";
}

std::string to_string(Scale s) { return s == Scale::PAPER ? "PAPER" : "DESK"; }

Scenario parse_scenario(const std::string& text) {
  if (text == "PRETRAIN") return Scenario::PRETRAIN;
  if (text == "CASE1") return Scenario::CASE1;
  if (text == "CASE2") return Scenario::CASE2;
  throw ConfigError("unknown scenario '" + text + "' (expected PRETRAIN, CASE1 or CASE2)");
}

Scale parse_scale(const std::string& text) {
  if (text == "PAPER") return Scale::PAPER;
  if (text == "DESK") return Scale::DESK;
  throw ConfigError("unknown scale '" + text + "' (expected PAPER or DESK)");
}

// ---- size distribution ----------------------------------------------------

SizeDistribution SizeDistribution::point_mass(std::int64_t bytes) {
  SizeDistribution d;
  d.kind = Kind::POINT_MASS;
  d.point = bytes;
  d.min_size = bytes;
  d.max_size = bytes;
  return d;
}

SizeDistribution SizeDistribution::default_workload() {
  SizeDistribution d;
  d.kind = Kind::TRUNCATED_LOGNORMAL;
  d.mu = std::log(4000.0);
  d.sigma = 2.0;
  d.min_size = 100;
  d.max_size = 2'000'000;
  return d;
}

namespace {
double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
}  // namespace

double SizeDistribution::analytic_mean() const {
  if (kind == Kind::POINT_MASS) return static_cast<double>(point);
  const double a = std::log(static_cast<double>(min_size));
  const double b = std::log(static_cast<double>(max_size));
  const double s2 = sigma * sigma;
  const double mass = std_normal_cdf((b - mu) / sigma) - std_normal_cdf((a - mu) / sigma);
  const double partial =
      std_normal_cdf((b - mu - s2) / sigma) - std_normal_cdf((a - mu - s2) / sigma);
  return std::exp(mu + s2 / 2.0) * partial / mass;
}

std::int64_t sample_message_size(const SizeDistribution& dist, Rng& rng) {
  if (dist.kind == SizeDistribution::Kind::POINT_MASS) return dist.point;
  const double lo = static_cast<double>(dist.min_size);
  const double hi = static_cast<double>(dist.max_size);
  double x;
  do {
    x = std::exp(dist.mu + dist.sigma * rng.normal());
  } while (x < lo || x > hi);
  return std::clamp<std::int64_t>(std::llround(x), dist.min_size, dist.max_size);
}

// ---- TCP --------------------------------------------------------------------

TcpFlowState step_tcp_flow(TcpFlowState s, TcpEvent event) {
  switch (event) {
    case TcpEvent::ACK:
      if (s.phase == TcpPhase::SLOW_START) {
        s.cwnd += 1.0;
        if (s.cwnd >= s.ssthresh) s.phase = TcpPhase::AVOIDANCE;
      } else {
        s.cwnd += 1.0 / s.cwnd;
      }
      break;
    case TcpEvent::LOSS:
      s.ssthresh = std::max(s.cwnd / 2.0, 2.0);
      s.cwnd = s.ssthresh;
      s.phase = TcpPhase::AVOIDANCE;
      break;
    case TcpEvent::TIMEOUT:
      s.ssthresh = std::max(s.cwnd / 2.0, 2.0);
      s.cwnd = 1.0;
      s.phase = TcpPhase::SLOW_START;
      break;
  }
  return s;
}

// ---- JSON -------------------------------------------------------------------

namespace {

nlohmann::json size_dist_json(const SizeDistribution& d) {
  nlohmann::json j;
  if (d.kind == SizeDistribution::Kind::POINT_MASS) {
    j["kind"] = "POINT_MASS";
    j["point"] = d.point;
  } else {
    j["kind"] = "TRUNCATED_LOGNORMAL";
    j["mu"] = d.mu;
    j["sigma"] = d.sigma;
    j["min_size"] = d.min_size;
    j["max_size"] = d.max_size;
  }
  return j;
}

SizeDistribution size_dist_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "POINT_MASS") return SizeDistribution::point_mass(j.at("point").get<std::int64_t>());
  if (kind != "TRUNCATED_LOGNORMAL") throw ConfigError("unknown size distribution '" + kind + "'");
  SizeDistribution d;
  d.kind = SizeDistribution::Kind::TRUNCATED_LOGNORMAL;
  d.mu = j.at("mu").get<double>();
  d.sigma = j.at("sigma").get<double>();
  d.min_size = j.at("min_size").get<std::int64_t>();
  d.max_size = j.at("max_size").get<std::int64_t>();
  return d;
}

}  // namespace

void to_json(nlohmann::json& j, const SimConfig& c) {
  j = nlohmann::json::object();
  j["scenario"] = to_string(c.scenario);
  j["duration"] = c.duration;
  j["n_runs"] = c.n_runs;
  j["seed"] = c.seed;
  j["tcp_max_cwnd"] = c.tcp_max_cwnd;
  auto& links = j["links"] = nlohmann::json::array();
  for (const auto& l : c.links) {
    links.push_back({{"from_node", l.from_node},
                     {"to_node", l.to_node},
                     {"bandwidth", l.bandwidth},
                     {"prop_delay", l.prop_delay},
                     {"queue_capacity", l.queue_capacity}});
  }
  const auto& w = c.workload;
  auto& wj = j["workload"];
  wj["n_senders"] = w.n_senders;
  wj["per_sender_rate"] = w.per_sender_rate;
  wj["size_dist"] = size_dist_json(w.size_dist);
  wj["start_jitter"] = w.start_jitter;
  wj["mss"] = w.mss;
  wj["sender_nodes"] = w.sender_nodes;
  wj["receiver_nodes"] = w.receiver_nodes;
  wj["pacing_rate"] = w.pacing_rate;
  auto& scripted = wj["scripted"] = nlohmann::json::array();
  for (const auto& m : w.scripted) {
    scripted.push_back(
        {{"sender", m.sender}, {"time", m.time}, {"size", m.size}, {"receiver", m.receiver}});
  }
  auto& cross = j["cross_traffic"] = nlohmann::json::array();
  for (const auto& x : c.cross_traffic) {
    cross.push_back({{"n_flows", x.n_flows},
                     {"aggregate_target", x.aggregate_target},
                     {"entry_node", x.entry_node},
                     {"exit_node", x.exit_node},
                     {"mss", x.mss}});
  }
}

void from_json(const nlohmann::json& j, SimConfig& c) {
  try {
    c = SimConfig{};
    c.scenario = parse_scenario(j.at("scenario").get<std::string>());
    c.duration = j.at("duration").get<double>();
    c.n_runs = j.at("n_runs").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.tcp_max_cwnd = j.value("tcp_max_cwnd", 1000.0);
    for (const auto& l : j.at("links")) {
      c.links.push_back({l.at("from_node").get<int>(), l.at("to_node").get<int>(),
                         l.at("bandwidth").get<double>(), l.at("prop_delay").get<double>(),
                         l.at("queue_capacity").get<int>()});
    }
    const auto& wj = j.at("workload");
    auto& w = c.workload;
    w.n_senders = wj.at("n_senders").get<int>();
    w.per_sender_rate = wj.at("per_sender_rate").get<double>();
    w.size_dist = size_dist_from_json(wj.at("size_dist"));
    w.start_jitter = wj.at("start_jitter").get<double>();
    w.mss = wj.at("mss").get<int>();
    w.sender_nodes = wj.at("sender_nodes").get<std::vector<int>>();
    w.receiver_nodes = wj.at("receiver_nodes").get<std::vector<int>>();
    w.pacing_rate = wj.value("pacing_rate", 0.0);
    if (wj.contains("scripted")) {
      for (const auto& m : wj.at("scripted")) {
        w.scripted.push_back({m.at("sender").get<int>(), m.at("time").get<double>(),
                              m.at("size").get<std::int64_t>(), m.at("receiver").get<int>()});
      }
    }
    if (j.contains("cross_traffic")) {
      for (const auto& x : j.at("cross_traffic")) {
        c.cross_traffic.push_back({x.at("n_flows").get<int>(), x.at("aggregate_target").get<double>(),
                                   x.at("entry_node").get<int>(), x.at("exit_node").get<int>(),
                                   x.value("mss", 1500)});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid SimConfig JSON: ") + e.what());
  }
}

std::string config_hash(const SimConfig& c) {
  nlohmann::json j = c;
  std::ostringstream os;
  os << std::hex << fnv1a64(j.dump());
  return os.str();
}

// ---- scenarios --------------------------------------------------------------

namespace {

constexpr int kS1 = 0;
constexpr int kS2 = 1;
constexpr int kReceiverBase = 2;
constexpr int kSenderBase = 10;

// Mean offered load per workload sender: about 78% of the bottleneck before
// cross-traffic, which yields ~1.2M delivered packets at PAPER scale.
constexpr double kPerSenderRate = 0.39e6;
// Line rate at which each sender emits a message's packets. With all senders
// active the offered load is twice the bottleneck at both scales.
constexpr double kSenderLineRate = 1e6;

}  // namespace

SimConfig build_scenario(Scenario kind, Scale scale, std::uint64_t seed) {
  const bool paper = scale == Scale::PAPER;
  const double bw_scale = paper ? 1.0 : 1.0 / 6.0;
  const int n_senders = paper ? 60 : 10;
  const int bottleneck_queue = paper ? 1000 : 200;
  const int receiver_queue = paper ? 500 : 100;
  const double access_bw = 100e6;

  SimConfig c;
  c.scenario = kind;
  c.seed = seed;
  c.duration = paper ? 60.0 : 30.0;
  c.n_runs = paper ? 10 : 6;

  auto& w = c.workload;
  w.n_senders = n_senders;
  w.per_sender_rate = kPerSenderRate;
  w.size_dist = SizeDistribution::default_workload();
  w.start_jitter = 1.0;
  w.mss = 1500;
  w.pacing_rate = kSenderLineRate;
  for (int i = 0; i < n_senders; ++i) {
    w.sender_nodes.push_back(kSenderBase + i);
    c.links.push_back({kSenderBase + i, kS1, access_bw, 0.0005, 10000});
  }
  c.links.push_back({kS1, kS2, 30e6 * bw_scale, 0.005, bottleneck_queue});

  const double cross_target = 20e6 * bw_scale;
  if (kind == Scenario::CASE2) {
    const double prop[3] = {0.002, 0.010, 0.025};
    for (int k = 0; k < 3; ++k) {
      const int node = kReceiverBase + k;
      w.receiver_nodes.push_back(node);
      c.links.push_back({kS2, node, 30e6 * bw_scale, prop[k], receiver_queue});
      c.cross_traffic.push_back({4, cross_target, kS2, node, 1500});
    }
  } else {
    w.receiver_nodes.push_back(kReceiverBase);
    c.links.push_back({kS2, kReceiverBase, access_bw, 0.0005, bottleneck_queue});
    if (kind == Scenario::CASE1) c.cross_traffic.push_back({4, cross_target, kS1, kS2, 1500});
  }
  return c;
}

// ---- routing ----------------------------------------------------------------

namespace {

/// Shortest-hop path as link indices; empty optional-like flag when unreachable.
bool find_path(const std::vector<LinkSpec>& links, int from, int to, std::vector<int>& path) {
  path.clear();
  if (from == to) return false;
  std::vector<int> visited_nodes{from};
  struct Hop {
    int node;
    int via_link;
    int parent;
  };
  std::vector<Hop> hops{{from, -1, -1}};
  for (std::size_t head = 0; head < hops.size(); ++head) {
    const int node = hops[head].node;
    for (std::size_t li = 0; li < links.size(); ++li) {
      if (links[li].from_node != node) continue;
      const int next = links[li].to_node;
      if (std::find(visited_nodes.begin(), visited_nodes.end(), next) != visited_nodes.end()) continue;
      visited_nodes.push_back(next);
      hops.push_back({next, static_cast<int>(li), static_cast<int>(head)});
      if (next == to) {
        for (int h = static_cast<int>(hops.size()) - 1; h > 0; h = hops[h].parent) {
          path.push_back(hops[h].via_link);
        }
        std::reverse(path.begin(), path.end());
        return true;
      }
    }
  }
  return false;
}

}  // namespace

void validate(const SimConfig& c) {
  if (!(c.duration > 0.0)) throw ConfigError("duration must be > 0");
  if (c.n_runs < 1) throw ConfigError("n_runs must be >= 1");
  for (std::size_t i = 0; i < c.links.size(); ++i) {
    const auto& l = c.links[i];
    if (!(l.bandwidth > 0.0)) throw ConfigError("link " + std::to_string(i) + ": bandwidth must be > 0");
    if (!(l.prop_delay >= 0.0)) throw ConfigError("link " + std::to_string(i) + ": prop_delay must be >= 0");
    if (l.queue_capacity < 1) throw ConfigError("link " + std::to_string(i) + ": queue_capacity must be >= 1");
  }
  const auto& w = c.workload;
  if (w.n_senders < 1) throw ConfigError("workload needs n_senders >= 1");
  if (!(w.per_sender_rate > 0.0)) throw ConfigError("per_sender_rate must be > 0");
  if (w.mss <= 0) throw ConfigError("mss must be > 0");
  if (static_cast<int>(w.sender_nodes.size()) != w.n_senders) {
    throw ConfigError("sender_nodes must list one node per sender");
  }
  if (w.receiver_nodes.empty()) throw ConfigError("workload needs at least one receiver node");
  std::vector<int> path;
  for (int s = 0; s < w.n_senders; ++s) {
    for (std::size_t r = 0; r < w.receiver_nodes.size(); ++r) {
      if (!find_path(c.links, w.sender_nodes[s], w.receiver_nodes[r], path)) {
        throw ConfigError("receiver node " + std::to_string(w.receiver_nodes[r]) +
                          " unreachable from sender node " + std::to_string(w.sender_nodes[s]));
      }
    }
  }
  for (const auto& m : w.scripted) {
    if (m.sender < 0 || m.sender >= w.n_senders) throw ConfigError("scripted message sender out of range");
    if (m.receiver < 0 || m.receiver >= static_cast<int>(w.receiver_nodes.size())) {
      throw ConfigError("scripted message receiver out of range");
    }
    if (m.size <= 0) throw ConfigError("scripted message size must be > 0");
  }
  if (w.size_dist.kind == SizeDistribution::Kind::TRUNCATED_LOGNORMAL &&
      !(w.size_dist.min_size >= 1 && w.size_dist.max_size >= w.size_dist.min_size && w.size_dist.sigma > 0)) {
    throw ConfigError("invalid truncated log-normal parameters");
  }
  for (const auto& x : c.cross_traffic) {
    if (x.n_flows < 0) throw ConfigError("cross traffic n_flows must be >= 0");
    if (!(x.aggregate_target >= 0.0)) throw ConfigError("cross traffic aggregate_target must be >= 0");
    if (x.n_flows > 0 && !(x.aggregate_target > 0.0)) {
      throw ConfigError("cross traffic with flows needs aggregate_target > 0");
    }
    if (x.n_flows > 0 && !find_path(c.links, x.entry_node, x.exit_node, path)) {
      throw ConfigError("cross traffic exit node " + std::to_string(x.exit_node) +
                        " unreachable from entry node " + std::to_string(x.entry_node));
    }
  }
}

double uncongested_delay(const SimConfig& c, int sender, int receiver, std::int64_t size) {
  std::vector<int> path;
  if (!find_path(c.links, c.workload.sender_nodes.at(sender), c.workload.receiver_nodes.at(receiver), path)) {
    throw ConfigError("receiver unreachable");
  }
  double d = 0.0;
  for (int li : path) {
    d += static_cast<double>(size) * 8.0 / c.links[li].bandwidth + c.links[li].prop_delay;
  }
  return d;
}

// ---- engine -----------------------------------------------------------------

namespace {

enum class Ev : std::uint8_t {
  MessageArrival,
  Handoff,
  TxDone,
  Arrive,
  TcpSend,
  TcpAck,
  TcpLoss,
  TcpTimeout,
};

struct Event {
  double time;
  std::uint64_t seq;
  Ev type;
  int a;
  std::int64_t b;
};

struct Later {
  bool operator()(const Event& x, const Event& y) const {
    if (x.time != y.time) return x.time > y.time;
    return x.seq > y.seq;
  }
};

struct Packet {
  std::int64_t record = -1;  // workload record index, -1 for cross traffic
  int flow = -1;             // cross-traffic flow index
  int path = 0;
  int hop = 0;
  std::int64_t bytes = 0;
  double sent_at = 0.0;
  std::uint64_t link_order = 0;
  int epoch = 0;
  // Workload bookkeeping until the packet is handed to the network.
  int sender = 0;
  int receiver = 0;
  std::int64_t message = 0;
  std::int64_t message_size = 0;
};

struct LinkState {
  std::deque<int> queue;
  int in_service = -1;
  std::uint64_t arrivals = 0;
  std::uint64_t next_departure = 0;
  double last_departure = -std::numeric_limits<double>::infinity();
};

struct Flow {
  TcpFlowState st;
  int path = 0;
  double pacing_interval = 0.0;
  double next_send = 0.0;
  bool send_scheduled = false;
  double last_reduction = -1.0;
  int epoch = 0;
  std::int64_t timer_gen = 0;
  double base_rtt = 0.0;
  double reverse_delay = 0.0;
  int mss = 1500;
};

class Engine {
 public:
  Engine(const SimConfig& c, int run_index)
      : c_(c), run_(run_index), rng_(derive_seed(c.seed, static_cast<std::uint64_t>(run_index))) {
    links_.resize(c.links.size());
    result_.stats.links.resize(c.links.size());
    const auto& w = c.workload;
    // workload paths indexed sender * n_receivers + receiver
    for (int s = 0; s < w.n_senders; ++s) {
      for (int r : w.receiver_nodes) add_path(w.sender_nodes[s], r);
    }
    sender_next_free_.assign(w.n_senders, 0.0);
    for (const auto& x : c.cross_traffic) {
      if (x.n_flows == 0) continue;
      const int path = add_path(x.entry_node, x.exit_node);
      double prop = 0.0, tx = 0.0;
      for (int li : paths_[path]) {
        prop += c.links[li].prop_delay;
        tx += x.mss * 8.0 / c.links[li].bandwidth;
      }
      for (int f = 0; f < x.n_flows; ++f) {
        Flow flow;
        flow.path = path;
        flow.mss = x.mss;
        flow.pacing_interval = x.mss * 8.0 / (x.aggregate_target / x.n_flows);
        flow.reverse_delay = prop;
        flow.base_rtt = 2.0 * prop + tx;
        flow.st.rtt_estimate = flow.base_rtt;
        flow.st.ssthresh = c.tcp_max_cwnd;
        flows_.push_back(flow);
      }
    }
  }

  RunResult run() {
    const auto& w = c_.workload;
    if (!w.scripted.empty()) {
      for (const auto& m : w.scripted) {
        if (m.time < c_.duration) inject_message(m.sender, m.receiver, m.size, m.time);
      }
    } else {
      for (int s = 0; s < w.n_senders; ++s) {
        const double start = rng_.uniform(0.0, w.start_jitter);
        schedule(start + next_interarrival(), Ev::MessageArrival, s, 0);
      }
    }
    for (std::size_t f = 0; f < flows_.size(); ++f) {
      const double start = rng_.uniform(0.0, w.start_jitter);
      flows_[f].next_send = start;
      flows_[f].send_scheduled = true;
      schedule(start, Ev::TcpSend, static_cast<int>(f), 0);
    }
    while (!events_.empty()) {
      const Event e = events_.top();
      events_.pop();
      now_ = e.time;
      dispatch(e);
    }
    finish();
    return std::move(result_);
  }

 private:
  int add_path(int from, int to) {
    std::vector<int> p;
    if (!find_path(c_.links, from, to, p)) throw ConfigError("unreachable path in simulation");
    paths_.push_back(std::move(p));
    return static_cast<int>(paths_.size()) - 1;
  }

  void schedule(double t, Ev type, int a, std::int64_t b) { events_.push({t, seq_++, type, a, b}); }

  double next_interarrival() {
    const auto& w = c_.workload;
    const double rate = w.per_sender_rate / (8.0 * w.size_dist.analytic_mean());
    return rng_.exponential(rate);
  }

  int alloc_packet() {
    if (!free_.empty()) {
      const int id = free_.back();
      free_.pop_back();
      pool_[id] = Packet{};
      return id;
    }
    pool_.emplace_back();
    return static_cast<int>(pool_.size()) - 1;
  }

  void release(int id) { free_.push_back(id); }

  double tx_time(int link, std::int64_t bytes) const {
    return static_cast<double>(bytes) * 8.0 / c_.links[link].bandwidth;
  }

  void dispatch(const Event& e) {
    switch (e.type) {
      case Ev::MessageArrival: on_message_arrival(e.a); break;
      case Ev::Handoff: on_handoff(static_cast<int>(e.b)); break;
      case Ev::TxDone: on_tx_done(e.a); break;
      case Ev::Arrive: on_arrive(static_cast<int>(e.b)); break;
      case Ev::TcpSend:
        flows_[e.a].send_scheduled = false;
        try_send(e.a);
        break;
      case Ev::TcpAck: on_ack(e.a, static_cast<int>(e.b)); break;
      case Ev::TcpLoss: on_loss(e.a, static_cast<int>(e.b)); break;
      case Ev::TcpTimeout: on_timeout(e.a, e.b); break;
    }
  }

  void on_message_arrival(int sender) {
    const auto& w = c_.workload;
    const std::int64_t size = sample_message_size(w.size_dist, rng_);
    const int receiver =
        w.receiver_nodes.size() > 1 ? static_cast<int>(rng_.below(w.receiver_nodes.size())) : 0;
    inject_message(sender, receiver, size, now_);
    const double next = now_ + next_interarrival();
    if (next < c_.duration) schedule(next, Ev::MessageArrival, sender, 0);
  }

  void inject_message(int sender, int receiver, std::int64_t size, double t) {
    const auto& w = c_.workload;
    const std::int64_t message = result_.messages_generated++;
    const std::int64_t n_packets = (size + w.mss - 1) / w.mss;
    double handoff = std::max(t, sender_next_free_[sender]);
    for (std::int64_t k = 0; k < n_packets; ++k) {
      const std::int64_t bytes = (k + 1 < n_packets) ? w.mss : size - (n_packets - 1) * w.mss;
      const int id = alloc_packet();
      auto& p = pool_[id];
      p.bytes = bytes;
      p.sender = sender;
      p.receiver = receiver;
      p.message = message;
      p.message_size = size;
      p.path = sender * static_cast<int>(w.receiver_nodes.size()) + receiver;
      schedule(handoff, Ev::Handoff, 0, id);
      if (w.pacing_rate > 0.0) handoff += static_cast<double>(bytes) * 8.0 / w.pacing_rate;
    }
    sender_next_free_[sender] = handoff;
  }

  void on_handoff(int id) {
    auto& p = pool_[id];
    PacketRecord r;
    r.sim_id = run_;
    r.packet_seq = next_seq_++;
    r.message_id = p.message;
    r.sender_id = p.sender;
    r.receiver_id = p.receiver;
    r.send_time = now_;
    r.size = p.bytes;
    r.message_size = p.message_size;
    p.record = static_cast<std::int64_t>(records_.size());
    p.sent_at = now_;
    records_.push_back(r);
    delivered_.push_back(0);
    ++result_.stats.workload_sent;
    enqueue(paths_[p.path][0], id);
  }

  void enqueue(int link, int id) {
    auto& ls = links_[link];
    auto& st = result_.stats.links[link];
    if (ls.in_service < 0) {
      pool_[id].link_order = ls.arrivals++;
      ls.in_service = id;
      schedule(now_ + tx_time(link, pool_[id].bytes), Ev::TxDone, link, 0);
      return;
    }
    if (static_cast<int>(ls.queue.size()) >= c_.links[link].queue_capacity) {
      ++st.drops;
      drop(id);
      return;
    }
    pool_[id].link_order = ls.arrivals++;
    ls.queue.push_back(id);
    const int occupancy = static_cast<int>(ls.queue.size());
    if (occupancy > c_.links[link].queue_capacity) {
      throw StateError("queue occupancy exceeded capacity on link " + std::to_string(link));
    }
    st.max_occupancy = std::max(st.max_occupancy, occupancy);
  }

  void on_tx_done(int link) {
    auto& ls = links_[link];
    auto& st = result_.stats.links[link];
    const int id = ls.in_service;
    const auto& p = pool_[id];
    if (p.link_order != ls.next_departure) ++st.fifo_violations;
    ls.next_departure = p.link_order + 1;
    const double tx = tx_time(link, p.bytes);
    if (now_ - ls.last_departure < tx * (1.0 - 1e-9)) ++st.rate_violations;
    ls.last_departure = now_;
    st.busy_time += tx;
    ++st.departures;
    schedule(now_ + c_.links[link].prop_delay, Ev::Arrive, link, id);
    if (ls.queue.empty()) {
      ls.in_service = -1;
    } else {
      ls.in_service = ls.queue.front();
      ls.queue.pop_front();
      schedule(now_ + tx_time(link, pool_[ls.in_service].bytes), Ev::TxDone, link, 0);
    }
  }

  void on_arrive(int id) {
    auto& p = pool_[id];
    ++p.hop;
    if (p.hop < static_cast<int>(paths_[p.path].size())) {
      enqueue(paths_[p.path][p.hop], id);
      return;
    }
    if (p.record >= 0) {
      records_[p.record].delay = now_ - records_[p.record].send_time;
      delivered_[p.record] = 1;
      ++result_.stats.workload_delivered;
      release(id);
    } else {
      ++result_.stats.cross_delivered;
      schedule(now_ + flows_[p.flow].reverse_delay, Ev::TcpAck, p.flow, id);
    }
  }

  void drop(int id) {
    const auto& p = pool_[id];
    if (p.record >= 0) {
      ++result_.stats.workload_dropped;
      release(id);
    } else {
      ++result_.stats.cross_dropped;
      const auto& f = flows_[p.flow];
      // Duplicate-ACK style detection roughly one round trip after the drop.
      schedule(now_ + std::max(f.st.rtt_estimate, f.base_rtt), Ev::TcpLoss, p.flow, id);
    }
  }

  void arm_timer(int f) {
    auto& flow = flows_[f];
    ++flow.timer_gen;
    schedule(now_ + 4.0 * flow.st.rtt_estimate, Ev::TcpTimeout, f, flow.timer_gen);
  }

  void try_send(int f) {
    auto& flow = flows_[f];
    if (now_ >= c_.duration) return;
    if (flow.st.in_flight + 1.0 > std::floor(flow.st.cwnd)) return;
    if (now_ < flow.next_send) {
      if (!flow.send_scheduled) {
        flow.send_scheduled = true;
        schedule(flow.next_send, Ev::TcpSend, f, 0);
      }
      return;
    }
    const int id = alloc_packet();
    auto& p = pool_[id];
    p.flow = f;
    p.path = flow.path;
    p.bytes = flow.mss;
    p.sent_at = now_;
    p.epoch = flow.epoch;
    const bool was_idle = flow.st.in_flight == 0.0;
    flow.st.in_flight += 1.0;
    flow.next_send = now_ + flow.pacing_interval;
    ++result_.stats.cross_sent;
    if (was_idle) arm_timer(f);
    enqueue(paths_[flow.path][0], id);
    if (flow.st.in_flight + 1.0 <= std::floor(flow.st.cwnd) && !flow.send_scheduled) {
      flow.send_scheduled = true;
      schedule(flow.next_send, Ev::TcpSend, f, 0);
    }
  }

  void on_ack(int f, int id) {
    auto& flow = flows_[f];
    const Packet p = pool_[id];
    release(id);
    if (p.epoch != flow.epoch) return;
    flow.st.in_flight -= 1.0;
    const double sample = now_ - p.sent_at;
    flow.st.rtt_estimate += (sample - flow.st.rtt_estimate) / 8.0;
    flow.st = step_tcp_flow(flow.st, TcpEvent::ACK);
    flow.st.cwnd = std::min(flow.st.cwnd, c_.tcp_max_cwnd);
    arm_timer(f);
    try_send(f);
  }

  void on_loss(int f, int id) {
    auto& flow = flows_[f];
    const Packet p = pool_[id];
    release(id);
    if (p.epoch != flow.epoch) return;
    flow.st.in_flight -= 1.0;
    if (p.sent_at > flow.last_reduction) {
      flow.st = step_tcp_flow(flow.st, TcpEvent::LOSS);
      flow.last_reduction = now_;
      ++result_.stats.tcp_losses;
    }
    try_send(f);
  }

  void on_timeout(int f, std::int64_t gen) {
    auto& flow = flows_[f];
    if (gen != flow.timer_gen || flow.st.in_flight <= 0.0) return;
    ++result_.stats.tcp_timeouts;
    flow.st = step_tcp_flow(flow.st, TcpEvent::TIMEOUT);
    flow.st.in_flight = 0.0;
    ++flow.epoch;
    flow.last_reduction = now_;
    try_send(f);
  }

  void finish() {
    // The last delivered packet of each message carries the flag.
    std::vector<std::int64_t> last_of(static_cast<std::size_t>(result_.messages_generated), -1);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (delivered_[i]) last_of[records_[i].message_id] = static_cast<std::int64_t>(i);
    }
    for (auto idx : last_of) {
      if (idx >= 0) records_[idx].is_last_in_message = true;
    }
    result_.records.reserve(result_.stats.workload_delivered);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (delivered_[i]) result_.records.push_back(records_[i]);
    }
  }

  const SimConfig& c_;
  int run_;
  Rng rng_;
  double now_ = 0.0;
  std::uint64_t seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> events_;
  std::vector<std::vector<int>> paths_;
  std::vector<LinkState> links_;
  std::vector<Flow> flows_;
  std::vector<Packet> pool_;
  std::vector<int> free_;
  std::vector<double> sender_next_free_;
  std::vector<PacketRecord> records_;
  std::vector<char> delivered_;
  std::int64_t next_seq_ = 0;
  RunResult result_;
};

}  // namespace

RunResult simulate_run(const SimConfig& config, int run_index) {
  validate(config);
  return Engine(config, run_index).run();
}

TraceDataset run_simulation(const SimConfig& config) {
  validate(config);
  std::vector<RunResult> results(config.n_runs);
  const unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(),
                                                           static_cast<unsigned>(config.n_runs)));
  if (workers <= 1) {
    for (int r = 0; r < config.n_runs; ++r) results[r] = Engine(config, r).run();
  } else {
    std::vector<std::future<void>> jobs;
    std::atomic<int> next{0};
    for (unsigned w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&] {
        for (int r = next++; r < config.n_runs; r = next++) results[r] = Engine(config, r).run();
      }));
    }
    for (auto& j : jobs) j.get();
  }
  TraceDataset ds;
  std::int64_t message_offset = 0;
  for (auto& res : results) {
    for (auto& rec : res.records) {
      rec.message_id += message_offset;
      ds.records.push_back(rec);
    }
    message_offset += res.messages_generated;
  }
  ds.meta.scenario = to_string(config.scenario);
  ds.meta.seed = config.seed;
  ds.meta.generator_version = kGeneratorVersion;
  ds.meta.config_hash = config_hash(config);
  if (ds.records.empty()) throw ValidationError("simulation produced an empty dataset");
  return ds;
}

// ---- statistics -------------------------------------------------------------

double nearest_rank(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

Distribution summarize(std::vector<double> values) {
  Distribution d;
  if (values.empty()) return d;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  d.mean = sum / static_cast<double>(values.size());
  d.p50 = nearest_rank(values, 50);
  d.p90 = nearest_rank(values, 90);
  d.p99 = nearest_rank(values, 99);
  d.p999 = nearest_rank(values, 99.9);
  d.max = values.back();
  return d;
}

TraceStats trace_stats(const TraceDataset& dataset) {
  TraceStats s;
  s.packet_count = dataset.records.size();
  std::vector<double> delays;
  delays.reserve(dataset.records.size());
  for (const auto& r : dataset.records) delays.push_back(r.delay);
  s.delay = summarize(std::move(delays));
  const auto runs = dataset.runs();
  s.run_count = runs.size();
  for (const auto& run : runs) {
    for (std::size_t i = 1; i < run.records.size(); ++i) {
      s.drop_inferred_gaps += run.records[i].packet_seq - run.records[i - 1].packet_seq - 1;
    }
  }
  if (s.packet_count > 0) {
    s.gap_fraction = static_cast<double>(s.drop_inferred_gaps) /
                     static_cast<double>(s.drop_inferred_gaps + static_cast<std::int64_t>(s.packet_count));
  }
  const auto mcts = trace::derive_mct_records(dataset);
  s.message_count = mcts.size();
  std::vector<double> m;
  m.reserve(mcts.size());
  for (const auto& r : mcts) m.push_back(r.mct);
  s.mct = summarize(std::move(m));
  return s;
}

namespace {
nlohmann::json dist_json(const Distribution& d) {
  return {{"mean", d.mean}, {"p50", d.p50}, {"p90", d.p90}, {"p99", d.p99}, {"p999", d.p999}, {"max", d.max}};
}
}  // namespace

nlohmann::json to_json(const TraceStats& s) {
  return {{"packet_count", s.packet_count},   {"run_count", s.run_count},
          {"message_count", s.message_count}, {"delay", dist_json(s.delay)},
          {"mct", dist_json(s.mct)},          {"drop_inferred_gaps", s.drop_inferred_gaps},
          {"gap_fraction", s.gap_fraction}};
}

std::string format_stats_line(const TraceStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "packets=%zu runs=%zu messages=%zu delay_mean=%.6f delay_p50=%.6f delay_p99=%.6f "
                "mct_mean=%.6f mct_p999=%.6f drop_gaps=%lld",
                s.packet_count, s.run_count, s.message_count, s.delay.mean, s.delay.p50, s.delay.p99,
                s.mct.mean, s.mct.p999, static_cast<long long>(s.drop_inferred_gaps));
  return buf;
}

}  // namespace nttlab::netsim
