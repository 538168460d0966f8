#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idreamrec/embedding_space.hpp"

namespace idr {

struct Interaction {
  std::int64_t user = 0;
  std::int64_t item = 0;
  std::int64_t timestamp = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct InteractionLog {
  std::vector<Interaction> records;
};

enum class Split : std::uint8_t { kUnassigned, kTrain, kValid, kTest };

const char* to_string(Split s);
Split parse_split(const std::string& s);

inline constexpr std::size_t kSequenceLength = 10;  // L

struct SequencePair {
  std::vector<std::int64_t> history;  // L-1 ids, left padded with the pad sentinel
  std::int64_t target = 0;
  std::int64_t timestamp = 0;  // of the target interaction
  std::int64_t user = 0;
  Split split = Split::kUnassigned;
  friend bool operator==(const SequencePair&, const SequencePair&) = default;
};

struct SequenceDataset {
  std::vector<SequencePair> pairs;
  std::int64_t pad_id = 0;

  std::vector<SequencePair> subset(Split s) const;
  std::size_t count(Split s) const;
};

/// Iteratively drops users and items with fewer than k interactions until nothing changes.
InteractionLog k_core_filter(const InteractionLog& log, int k);

/// Sliding pairs per user: every interaction after the first becomes a target whose history
/// is the preceding (at most L-1) items. Users are processed in ascending id order.
SequenceDataset build_sequences(const InteractionLog& log, std::int64_t pad_id, std::size_t seq_len = kSequenceLength);

/// Global chronological split by target timestamp: earliest 80% train, next 10% valid, rest test.
SequenceDataset split_8_1_1(const SequenceDataset& ds);

struct SynthSpec {
  std::size_t n_items = 200;
  std::size_t dim = 32;
  std::size_t n_sequences = 250;         // users
  std::size_t interactions_per_user = 11;
  std::size_t clusters = 10;
  double centroid_scale = 3.0;
  double jitter = 1.0;
  double noise = 0.0;  // probability that a step ignores the transition rule
  std::uint64_t seed = 1;
};

struct SynthData {
  EmbeddingMatrix embeddings;  // raw (untransformed)
  InteractionLog log;
  SequenceDataset dataset;  // split 8:1:1
  std::vector<std::int64_t> successor;  // the transition rule
};

/// Items on jittered cluster centroids; a seeded single-cycle permutation drives random walks.
SynthData synth_generate(const SynthSpec& spec);

InteractionLog read_interactions_tsv(const std::string& path);
void write_interactions_tsv(const InteractionLog& log, const std::string& path);
/// Histories are stored padded with `pad_id` (the catalog size).
SequenceDataset read_sequences_jsonl(const std::string& path, std::int64_t pad_id);
void write_sequences_jsonl(const SequenceDataset& ds, const std::string& path);

}  // namespace idr
