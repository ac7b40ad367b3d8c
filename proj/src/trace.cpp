#include "nttlab/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "nttlab/error.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::trace {

std::vector<RunView> TraceDataset::runs() const {
  std::vector<RunView> out;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= records.size(); ++i) {
    if (i == records.size() || records[i].sim_id != records[begin].sim_id) {
      out.push_back({records[begin].sim_id,
                     std::span<const PacketRecord>(records.data() + begin, i - begin)});
      begin = i;
    }
  }
  return out;
}

std::vector<std::int64_t> TraceDataset::run_ids() const {
  std::vector<std::int64_t> ids;
  for (const auto& run : runs()) ids.push_back(run.sim_id);
  return ids;
}

void validate(const TraceDataset& dataset) {
  if (dataset.records.empty()) throw ValidationError("empty dataset");
  std::unordered_map<std::int64_t, int> last_count;
  std::unordered_map<std::int64_t, std::int64_t> message_run;
  const PacketRecord* prev = nullptr;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& r = dataset.records[i];
    const auto where = " (record " + std::to_string(i) + ")";
    if (!(r.delay > 0.0) || !std::isfinite(r.delay)) throw ValidationError("invariant violated: delay > 0" + where);
    if (r.size <= 0) throw ValidationError("invariant violated: size > 0" + where);
    if (!std::isfinite(r.send_time)) throw ValidationError("invariant violated: finite send_time" + where);
    if (prev != nullptr) {
      if (r.sim_id < prev->sim_id) {
        throw ValidationError("invariant violated: runs in sim_id order" + where);
      }
      if (r.sim_id == prev->sim_id) {
        if (r.packet_seq <= prev->packet_seq) {
          throw ValidationError("invariant violated: packet_seq strictly increasing" + where);
        }
        if (r.send_time < prev->send_time) {
          throw ValidationError("invariant violated: records sorted by send_time" + where);
        }
      }
    }
    auto [it, inserted] = message_run.emplace(r.message_id, r.sim_id);
    if (!inserted && it->second != r.sim_id) {
      throw ValidationError("invariant violated: message " + std::to_string(r.message_id) +
                            " spans runs");
    }
    if (r.is_last_in_message) ++last_count[r.message_id];
    prev = &r;
  }
  for (const auto& [id, run] : message_run) {
    const int n = last_count.count(id) ? last_count.at(id) : 0;
    if (n != 1) {
      throw ValidationError("invariant violated: message " + std::to_string(id) +
                            " has exactly one is_last_in_message record (found " +
                            std::to_string(n) + ")");
    }
  }
}

namespace {

void append_row(std::string& line, const PacketRecord& r) {
  char buf[320];
  const int n = std::snprintf(buf, sizeof buf, "%lld,%lld,%lld,%lld,%lld,%.9f,%lld,%.9f,%lld,%d\n",
                              static_cast<long long>(r.sim_id), static_cast<long long>(r.packet_seq),
                              static_cast<long long>(r.message_id),
                              static_cast<long long>(r.sender_id),
                              static_cast<long long>(r.receiver_id), r.send_time,
                              static_cast<long long>(r.size), r.delay,
                              static_cast<long long>(r.message_size), r.is_last_in_message ? 1 : 0);
  line.append(buf, static_cast<std::size_t>(n));
}

template <typename T>
T parse_field(std::string_view text, std::size_t line_no, const char* name) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ParseError(std::string("cannot parse field '") + name + "' from '" + std::string(text) + "'",
                     line_no);
  }
  return value;
}

}  // namespace

std::size_t write_trace(const TraceDataset& dataset, std::ostream& out) {
  if (dataset.records.empty()) throw ValidationError("empty dataset");
  validate(dataset);
  std::size_t offset = 0;
  std::string chunk = std::string(kTraceHeader) + "\n";
  auto flush = [&] {
    out.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    if (!out) throw IoError("trace write failed at byte offset " + std::to_string(offset));
    offset += chunk.size();
    chunk.clear();
  };
  for (const auto& r : dataset.records) {
    append_row(chunk, r);
    if (chunk.size() > (1u << 16)) flush();
  }
  flush();
  return offset;
}

TraceDataset read_trace(std::istream& in) {
  TraceDataset ds;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ValidationError("empty dataset");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTraceHeader) throw ParseError("unexpected header '" + line + "'", line_no);
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fields.clear();
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 10) {
      throw ParseError("expected 10 fields, found " + std::to_string(fields.size()), line_no);
    }
    PacketRecord r;
    r.sim_id = parse_field<std::int64_t>(fields[0], line_no, "sim_id");
    r.packet_seq = parse_field<std::int64_t>(fields[1], line_no, "packet_seq");
    r.message_id = parse_field<std::int64_t>(fields[2], line_no, "message_id");
    r.sender_id = parse_field<std::int64_t>(fields[3], line_no, "sender_id");
    r.receiver_id = parse_field<std::int64_t>(fields[4], line_no, "receiver_id");
    r.send_time = parse_field<double>(fields[5], line_no, "send_time");
    r.size = parse_field<std::int64_t>(fields[6], line_no, "size");
    r.delay = parse_field<double>(fields[7], line_no, "delay");
    r.message_size = parse_field<std::int64_t>(fields[8], line_no, "message_size");
    const int last = parse_field<int>(fields[9], line_no, "is_last_in_message");
    if (last != 0 && last != 1) throw ParseError("is_last_in_message must be 0 or 1", line_no);
    r.is_last_in_message = last == 1;
    ds.records.push_back(r);
  }
  if (in.bad()) throw IoError("trace read failed after line " + std::to_string(line_no));
  validate(ds);
  return ds;
}

void write_trace_file(const TraceDataset& dataset, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    write_trace(dataset, out);
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TraceDataset read_trace_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_trace(in);
}

std::vector<MctRecord> derive_mct_records(const TraceDataset& dataset) {
  struct Acc {
    MctRecord rec;
    bool has_last = false;
  };
  std::vector<Acc> acc;
  std::unordered_map<std::int64_t, std::size_t> index;
  for (const auto& r : dataset.records) {
    auto [it, inserted] = index.emplace(r.message_id, acc.size());
    if (inserted) {
      Acc a;
      a.rec.sim_id = r.sim_id;
      a.rec.message_id = r.message_id;
      a.rec.start_time = r.send_time;
      a.rec.message_size = r.message_size;
      acc.push_back(a);
    }
    auto& a = acc[it->second];
    a.rec.start_time = std::min(a.rec.start_time, r.send_time);
    if (r.is_last_in_message) {
      a.has_last = true;
      a.rec.completion_time = r.delivery_time();
    }
  }
  std::vector<MctRecord> out;
  out.reserve(acc.size());
  for (auto& a : acc) {
    if (!a.has_last) {
      throw ValidationError("message " + std::to_string(a.rec.message_id) +
                            " has no is_last_in_message record");
    }
    a.rec.mct = a.rec.completion_time - a.rec.start_time;
    out.push_back(a.rec);
  }
  return out;
}

TraceDataset select_runs(const TraceDataset& dataset, const std::vector<std::int64_t>& run_ids) {
  const std::set<std::int64_t> keep(run_ids.begin(), run_ids.end());
  TraceDataset out;
  out.meta = dataset.meta;
  for (const auto& r : dataset.records) {
    if (keep.count(r.sim_id)) out.records.push_back(r);
  }
  return out;
}

Split make_split(const TraceDataset& dataset, double test_fraction, std::optional<double> subsample,
                 std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  if (subsample && !(*subsample > 0.0 && *subsample <= 1.0)) {
    throw ConfigError("subsample must lie in (0, 1]");
  }
  const auto runs = dataset.runs();
  const std::size_t n = runs.size();
  const auto n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n))));
  if (n < 2 || n_test >= n) {
    throw ValidationError("dataset has " + std::to_string(n) +
                          " runs; need more runs to honor test_fraction " +
                          std::to_string(test_fraction));
  }
  Rng rng(derive_seed(seed, "split"));
  const auto perm = rng.permutation(n);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[perm[i]] = true;

  std::vector<std::int64_t> train_ids, test_ids;
  std::vector<std::size_t> train_sizes;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_test[i]) {
      test_ids.push_back(runs[i].sim_id);
    } else {
      train_ids.push_back(runs[i].sim_id);
      train_sizes.push_back(runs[i].records.size());
    }
  }
  if (subsample && *subsample < 1.0) {
    double total = 0.0;
    for (auto s : train_sizes) total += static_cast<double>(s);
    std::size_t best_k = 1;
    double best_err = 2.0;
    double cum = 0.0;
    for (std::size_t k = 1; k <= train_sizes.size(); ++k) {
      cum += static_cast<double>(train_sizes[k - 1]);
      const double err = std::abs(cum / total - *subsample);
      if (err < best_err) {
        best_err = err;
        best_k = k;
      }
    }
    train_ids.resize(best_k);
  }
  Split split{select_runs(dataset, train_ids), select_runs(dataset, test_ids)};
  return split;
}

bool equal_at_print_precision(const TraceDataset& a, const TraceDataset& b) {
  if (a.records.size() != b.records.size()) return false;
  auto r9 = [](double x) { return std::llround(x * 1e9); };
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.sim_id != y.sim_id || x.packet_seq != y.packet_seq || x.message_id != y.message_id ||
        x.sender_id != y.sender_id || x.receiver_id != y.receiver_id || x.size != y.size ||
        x.message_size != y.message_size || x.is_last_in_message != y.is_last_in_message ||
        r9(x.send_time) != r9(y.send_time) || r9(x.delay) != r9(y.delay)) {
      return false;
    }
  }
  return true;
}

}  // namespace nttlab::trace
