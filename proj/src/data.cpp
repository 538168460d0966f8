#include "idreamrec/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/error.hpp"

namespace idr {

const char* to_string(Split s) {
  switch (s) {
    case Split::kUnassigned: return "none";
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "none";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  if (s == "none") return Split::kUnassigned;
  throw Error(ErrorCode::kInvalidInput, "unknown split '" + s + "'");
}

std::vector<SequencePair> SequenceDataset::subset(Split s) const {
  std::vector<SequencePair> out;
  for (const auto& p : pairs)
    if (p.split == s) out.push_back(p);
  return out;
}

std::size_t SequenceDataset::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [s](const auto& p) { return p.split == s; }));
}

InteractionLog k_core_filter(const InteractionLog& log, int k) {
  if (k < 1) throw Error(ErrorCode::kInvalidInput, "k must be >= 1");
  std::vector<Interaction> cur = log.records;
  for (;;) {
    std::unordered_map<std::int64_t, int> users, items;
    for (const auto& r : cur) {
      ++users[r.user];
      ++items[r.item];
    }
    std::vector<Interaction> next;
    next.reserve(cur.size());
    for (const auto& r : cur)
      if (users[r.user] >= k && items[r.item] >= k) next.push_back(r);
    if (next.size() == cur.size()) break;
    cur = std::move(next);
  }
  if (cur.empty() && !log.records.empty()) {
    std::cerr << "warning: " << k << "-core filter removed every interaction\n";
  }
  return InteractionLog{std::move(cur)};
}

SequenceDataset build_sequences(const InteractionLog& log, std::int64_t pad_id, std::size_t seq_len) {
  if (seq_len < 2) throw Error(ErrorCode::kInvalidInput, "sequence length must be >= 2");
  std::map<std::int64_t, std::vector<Interaction>> by_user;
  for (const auto& r : log.records) {
    if (r.item == pad_id) throw Error(ErrorCode::kInvalidInput, "item id collides with the pad sentinel");
    by_user[r.user].push_back(r);
  }
  const std::size_t hist_len = seq_len - 1;
  SequenceDataset ds;
  ds.pad_id = pad_id;
  for (auto& [user, events] : by_user) {
    std::sort(events.begin(), events.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.item < b.item;
    });
    for (std::size_t p = 1; p < events.size(); ++p) {
      SequencePair pair;
      pair.history.assign(hist_len, pad_id);
      const std::size_t take = std::min(p, hist_len);
      for (std::size_t j = 0; j < take; ++j) pair.history[hist_len - take + j] = events[p - take + j].item;
      pair.target = events[p].item;
      pair.timestamp = events[p].timestamp;
      pair.user = user;
      ds.pairs.push_back(std::move(pair));
    }
  }
  return ds;
}

SequenceDataset split_8_1_1(const SequenceDataset& ds) {
  const std::size_t n = ds.pairs.size();
  if (n < 10) throw Error(ErrorCode::kTooFewPairs, "need at least 10 pairs to split, have " + std::to_string(n));
  SequenceDataset out;
  out.pad_id = ds.pad_id;
  out.pairs = ds.pairs;
  // Ties on timestamp fall back to user id, then original (per-user chronological) order.
  std::stable_sort(out.pairs.begin(), out.pairs.end(), [](const SequencePair& a, const SequencePair& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.user < b.user;
  });
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    out.pairs[i].split = i < n_train ? Split::kTrain : (i < n_train + n_valid ? Split::kValid : Split::kTest);
  }
  return out;
}

SynthData synth_generate(const SynthSpec& spec) {
  if (spec.dim < 2) throw Error(ErrorCode::kInvalidInput, "synthetic dim must be >= 2");
  if (spec.clusters < 1 || spec.n_items < spec.clusters) {
    throw Error(ErrorCode::kInvalidInput, "need 1 <= clusters <= n_items");
  }
  if (spec.n_items < 2) throw Error(ErrorCode::kInvalidInput, "need at least 2 items");
  if (spec.noise < 0.0 || spec.noise > 1.0) throw Error(ErrorCode::kInvalidInput, "noise must be in [0,1]");

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthData out;

  Matrix centroids(spec.clusters, spec.dim);
  for (double& v : centroids.data) v = spec.centroid_scale * normal(rng);
  out.embeddings.vectors = Matrix(spec.n_items, spec.dim);
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    const std::size_t c = i % spec.clusters;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      out.embeddings.vectors(i, j) = centroids(c, j) + spec.jitter * normal(rng);
    }
  }

  // Sattolo's algorithm: a uniformly random permutation with a single cycle.
  std::vector<std::int64_t> perm(spec.n_items);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = spec.n_items - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  out.successor = perm;

  std::uniform_int_distribution<std::int64_t> any_item(0, static_cast<std::int64_t>(spec.n_items) - 1);
  std::uniform_int_distribution<std::int64_t> start_time(0, 1'000'000);
  std::uniform_int_distribution<std::int64_t> gap(1, 1000);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t u = 0; u < spec.n_sequences; ++u) {
    std::int64_t item = any_item(rng);
    std::int64_t ts = start_time(rng);
    for (std::size_t k = 0; k < spec.interactions_per_user; ++k) {
      out.log.records.push_back({static_cast<std::int64_t>(u), item, ts});
      ts += gap(rng);
      item = (spec.noise > 0.0 && unit(rng) < spec.noise) ? any_item(rng) : perm[static_cast<std::size_t>(item)];
    }
  }
  out.dataset = split_8_1_1(build_sequences(out.log, static_cast<std::int64_t>(spec.n_items)));
  return out;
}

InteractionLog read_interactions_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  InteractionLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Interaction r;
    std::string u, i, t;
    if (!std::getline(ss, u, '\t') || !std::getline(ss, i, '\t') || !std::getline(ss, t)) {
      throw Error(ErrorCode::kInvalidInput, path + ":" + std::to_string(lineno) + ": expected user\\titem\\ttimestamp");
    }
    try {
      r.user = std::stoll(u);
      r.item = std::stoll(i);
      r.timestamp = std::stoll(t);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidInput, path + ":" + std::to_string(lineno) + ": non-integer field");
    }
    if (r.user < 0 || r.item < 0) {
      throw Error(ErrorCode::kInvalidInput, path + ":" + std::to_string(lineno) + ": negative id");
    }
    log.records.push_back(r);
  }
  return log;
}

void write_interactions_tsv(const InteractionLog& log, const std::string& path) {
  std::ostringstream ss;
  for (const auto& r : log.records) ss << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
  write_file_atomic(path, ss.str());
}

SequenceDataset read_sequences_jsonl(const std::string& path, std::int64_t pad_id) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  SequenceDataset ds;
  ds.pad_id = pad_id;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SequencePair p;
      p.history = j.at("history").get<std::vector<std::int64_t>>();
      p.target = j.at("target").get<std::int64_t>();
      p.split = parse_split(j.value("split", std::string("none")));
      p.timestamp = j.value("timestamp", std::int64_t{0});
      p.user = j.value("user", std::int64_t{0});
      if (p.history.size() != kSequenceLength - 1) {
        throw Error(ErrorCode::kInvalidInput, "history must have " + std::to_string(kSequenceLength - 1) + " ids");
      }
      if (p.target == pad_id || p.target < 0 || p.target > pad_id) {
        throw Error(ErrorCode::kInvalidInput, "target id out of range");
      }
      for (auto id : p.history)
        if (id < 0 || id > pad_id) throw Error(ErrorCode::kInvalidInput, "history id out of range");
      ds.pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kInvalidInput, path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

void write_sequences_jsonl(const SequenceDataset& ds, const std::string& path) {
  std::ostringstream ss;
  for (const auto& p : ds.pairs) {
    nlohmann::ordered_json j;
    j["history"] = p.history;
    j["target"] = p.target;
    j["split"] = to_string(p.split);
    j["timestamp"] = p.timestamp;
    j["user"] = p.user;
    ss << j.dump() << '\n';
  }
  write_file_atomic(path, ss.str());
}

}  // namespace idr
