#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nttlab::trace {

/// One observed workload packet.
struct PacketRecord {
  std::int64_t sim_id = 0;
  std::int64_t packet_seq = 0;
  std::int64_t message_id = 0;
  std::int64_t sender_id = 0;
  std::int64_t receiver_id = 0;
  double send_time = 0.0;  // seconds
  std::int64_t size = 0;   // bytes
  double delay = 0.0;      // seconds, send -> delivery
  std::int64_t message_size = 0;
  bool is_last_in_message = false;

  double delivery_time() const { return send_time + delay; }
  bool operator==(const PacketRecord&) const = default;
};

struct MctRecord {
  std::int64_t sim_id = 0;
  std::int64_t message_id = 0;
  double start_time = 0.0;
  double completion_time = 0.0;
  double mct = 0.0;
  std::int64_t message_size = 0;
};

struct TraceMeta {
  std::string scenario;
  std::uint64_t seed = 0;
  std::string generator_version;
  std::string config_hash;
};

/// Contiguous records of one simulation run.
struct RunView {
  std::int64_t sim_id = 0;
  std::span<const PacketRecord> records;
};

struct TraceDataset {
  std::vector<PacketRecord> records;
  TraceMeta meta;

  std::vector<RunView> runs() const;
  std::vector<std::int64_t> run_ids() const;
  std::size_t size() const { return records.size(); }
};

inline constexpr const char* kTraceHeader =
    "sim_id,packet_seq,message_id,sender_id,receiver_id,send_time,size,delay,message_size,"
    "is_last_in_message";

/// Throws ValidationError naming the first violated invariant.
void validate(const TraceDataset& dataset);

/// Writes the canonical CSV. Returns the number of bytes written.
std::size_t write_trace(const TraceDataset& dataset, std::ostream& out);
TraceDataset read_trace(std::istream& in);

void write_trace_file(const TraceDataset& dataset, const std::string& path);
TraceDataset read_trace_file(const std::string& path);

std::vector<MctRecord> derive_mct_records(const TraceDataset& dataset);

struct Split {
  TraceDataset train;
  TraceDataset test;
};

/// Splits by whole runs. `subsample` keeps the prefix of train runs whose
/// packet share is closest to the requested fraction.
Split make_split(const TraceDataset& dataset, double test_fraction,
                 std::optional<double> subsample, std::uint64_t seed);

/// Keeps only the given runs, preserving order.
TraceDataset select_runs(const TraceDataset& dataset, const std::vector<std::int64_t>& run_ids);

/// Field-wise equality after rounding floats to 9 decimals.
bool equal_at_print_precision(const TraceDataset& a, const TraceDataset& b);

}  // namespace nttlab::trace
