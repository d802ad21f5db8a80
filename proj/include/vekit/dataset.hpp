#pragma once

// SNLI-VE construction: SNLI JSON-lines parsing, premise caption -> image
// mapping, image-disjoint partitioning, partition audit, corpus statistics
// and padded batching.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vekit/random.hpp"
#include "vekit/text_encoder.hpp"

namespace vekit {

using json = nlohmann::json;

/// Class order used everywhere (logits, confusion matrices, reports): C, N, E.
enum class Label : std::uint8_t { contradiction = 0, neutral = 1, entailment = 2 };

inline constexpr std::size_t num_classes = 3;
inline constexpr std::array<std::string_view, num_classes> label_names{"contradiction", "neutral", "entailment"};
inline constexpr std::array<std::string_view, num_classes> label_short{"C", "N", "E"};

inline std::string_view to_string(Label l) { return label_names[static_cast<std::size_t>(l)]; }
inline std::size_t index_of(Label l) { return static_cast<std::size_t>(l); }

inline std::optional<Label> parse_label(std::string_view s) {
  for (std::size_t i = 0; i < num_classes; ++i) {
    if (s == label_names[i]) return static_cast<Label>(i);
  }
  return std::nullopt;
}

enum class Partition : std::uint8_t { train = 0, val = 1, test = 2 };

inline constexpr std::array<Partition, 3> all_partitions{Partition::train, Partition::val, Partition::test};
inline constexpr std::array<std::string_view, 3> partition_names{"train", "val", "test"};

inline std::string_view to_string(Partition p) { return partition_names[static_cast<std::size_t>(p)]; }

inline std::optional<Partition> parse_partition(std::string_view s) {
  for (auto p : all_partitions) {
    if (s == to_string(p)) return p;
  }
  return std::nullopt;
}

struct Diagnostic {
  std::size_t line = 0;  // 0 when not tied to an input line
  std::string message;
};

enum class OnError { abort, skip };

struct SnliRecord {
  std::string gold_label;  // "entailment", "neutral", "contradiction" or "-"
  std::string premise;
  std::string hypothesis;
  std::string caption_id;
  std::string pair_id;
  std::size_t line = 0;
};

/// Streams SNLI records in file order. Malformed lines raise ParseError or
/// SchemaError, or are recorded as diagnostics and skipped under OnError::skip.
class SnliReader {
 public:
  SnliReader(std::istream& in, OnError policy) : in_(in), policy_(policy) {}

  std::optional<SnliRecord> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      try {
        return parse_line(line);
      } catch (const Error& e) {
        if (policy_ == OnError::abort) throw;
        diagnostics_.push_back({line_, e.what()});
      }
    }
    return std::nullopt;
  }

  const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }

 private:
  SnliRecord parse_line(const std::string& line) const {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_, "expected a JSON object");
    auto field = [&](const char* name) -> std::string {
      auto it = j.find(name);
      if (it == j.end() || !it->is_string()) {
        throw SchemaError("line " + std::to_string(line_) + ": missing string field '" + name + "'");
      }
      return it->get<std::string>();
    };
    SnliRecord r;
    r.gold_label = field("gold_label");
    r.premise = field("sentence1");
    r.hypothesis = field("sentence2");
    r.caption_id = field("captionID");
    r.pair_id = field("pairID");
    r.line = line_;
    if (r.gold_label != "-" && !parse_label(r.gold_label)) {
      throw SchemaError("line " + std::to_string(line_) + ": unknown gold_label '" + r.gold_label + "'");
    }
    if (r.caption_id.empty()) throw SchemaError("line " + std::to_string(line_) + ": empty captionID");
    return r;
  }

  std::istream& in_;
  OnError policy_;
  std::size_t line_ = 0;
  std::vector<Diagnostic> diagnostics_;
};

struct SnliParse {
  std::vector<SnliRecord> records;
  std::vector<Diagnostic> diagnostics;
};

inline SnliParse parse_snli(std::istream& in, OnError policy = OnError::abort) {
  SnliReader reader(in, policy);
  SnliParse out;
  while (auto r = reader.next()) out.records.push_back(std::move(*r));
  out.diagnostics = reader.diagnostics();
  return out;
}

inline SnliParse parse_snli(const std::string& path, OnError policy = OnError::abort) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open SNLI file " + path);
  return parse_snli(in, policy);
}

struct ImageIdResult {
  std::string image_id;
  bool had_caption_index = true;
};

/// "3416050480.jpg#4" -> "3416050480.jpg". A caption id without '#' is taken
/// whole and flagged.
inline ImageIdResult derive_image_id(std::string_view caption_id) {
  const auto hash = caption_id.find('#');
  if (hash == std::string_view::npos) return {std::string(caption_id), false};
  return {std::string(caption_id.substr(0, hash)), true};
}

/// Assignment of every image id to exactly one partition.
class ImageSplit {
 public:
  void assign(const std::string& image_id, Partition p) {
    auto [it, inserted] = by_image_.emplace(image_id, p);
    if (!inserted && it->second != p) {
      throw ConfigError("split assigns image " + image_id + " to both " + std::string(to_string(it->second)) +
                        " and " + std::string(to_string(p)));
    }
  }

  std::optional<Partition> find(const std::string& image_id) const {
    if (auto it = by_image_.find(image_id); it != by_image_.end()) return it->second;
    return std::nullopt;
  }

  std::size_t size() const { return by_image_.size(); }

  std::size_t count(Partition p) const {
    return static_cast<std::size_t>(
        std::count_if(by_image_.begin(), by_image_.end(), [p](const auto& kv) { return kv.second == p; }));
  }

  json to_json() const {
    json j = {{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
    for (const auto& [id, p] : by_image_) j[std::string(to_string(p))].push_back(id);
    return j;
  }

  static ImageSplit from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("split file must be a JSON object");
    ImageSplit s;
    for (auto p : all_partitions) {
      const auto key = std::string(to_string(p));
      if (!j.contains(key) || !j[key].is_array()) throw SchemaError("split file lacks a '" + key + "' array");
      for (const auto& id : j[key]) {
        if (!id.is_string()) throw SchemaError("split entries must be strings");
        s.assign(id.get<std::string>(), p);
      }
    }
    return s;
  }

  static ImageSplit load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open split file " + path);
    try {
      return from_json(json::parse(in));
    } catch (const json::parse_error& e) {
      throw SchemaError("split file " + path + ": " + e.what());
    }
  }

  /// Seeded disjoint split for fixtures: the first n_train shuffled images go
  /// to train, the next n_val to val, the rest to test.
  static ImageSplit random(std::vector<std::string> images, std::size_t n_train, std::size_t n_val,
                           std::uint64_t seed) {
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    if (n_train + n_val > images.size()) throw ContractError("split sizes exceed the number of images");
    Rng rng(seed);
    rng.shuffle(std::span<std::string>(images));
    ImageSplit s;
    for (std::size_t i = 0; i < images.size(); ++i) {
      s.assign(images[i], i < n_train ? Partition::train : i < n_train + n_val ? Partition::val : Partition::test);
    }
    return s;
  }

 private:
  std::map<std::string, Partition> by_image_;
};

struct VEInstance {
  std::string image_id;
  std::vector<std::string> tokens;
  Label label = Label::neutral;
  std::string pair_id;  // kept for ordering, not serialized
};

struct VEDataset {
  std::array<std::vector<VEInstance>, 3> partitions;

  std::vector<VEInstance>& operator[](Partition p) { return partitions[static_cast<std::size_t>(p)]; }
  const std::vector<VEInstance>& operator[](Partition p) const { return partitions[static_cast<std::size_t>(p)]; }

  std::set<std::string> image_ids(Partition p) const {
    std::set<std::string> ids;
    for (const auto& inst : (*this)[p]) ids.insert(inst.image_id);
    return ids;
  }

  std::size_t size() const { return partitions[0].size() + partitions[1].size() + partitions[2].size(); }
  bool empty() const { return size() == 0; }
};

enum class MissingImagePolicy { drop, abort };

struct BuildOptions {
  MissingImagePolicy on_missing_image = MissingImagePolicy::drop;
};

struct BuildResult {
  VEDataset dataset;
  std::size_t dropped_unlabeled = 0;
  std::size_t dropped_unassigned = 0;
  std::size_t duplicates = 0;
  std::vector<Diagnostic> diagnostics;
};

/// Replaces each text premise with its image, drops pairs without a gold
/// label, and places each instance in its image's partition. Instances are
/// ordered by (image_id, pair_id) so the result is independent of input order.
inline BuildResult build_snli_ve(const std::vector<SnliRecord>& records, const ImageSplit& split,
                                 const BuildOptions& opts = {}) {
  BuildResult out;
  std::unordered_set<std::string> seen_pairs;
  for (const auto& r : records) {
    const auto label = parse_label(r.gold_label);
    if (!label) {
      ++out.dropped_unlabeled;
      continue;
    }
    if (!seen_pairs.insert(r.pair_id).second) {
      ++out.duplicates;
      out.diagnostics.push_back({r.line, "duplicate pairID " + r.pair_id + " ignored"});
      continue;
    }
    auto image = derive_image_id(r.caption_id);
    if (!image.had_caption_index) {
      out.diagnostics.push_back({r.line, "captionID '" + r.caption_id + "' has no caption index"});
    }
    const auto part = split.find(image.image_id);
    if (!part) {
      if (opts.on_missing_image == MissingImagePolicy::abort) {
        throw ConfigError("line " + std::to_string(r.line) + ": image " + image.image_id + " is not in the split");
      }
      ++out.dropped_unassigned;
      out.diagnostics.push_back({r.line, "image " + image.image_id + " is not in the split; dropped"});
      continue;
    }
    out.dataset[*part].push_back({std::move(image.image_id), tokenize(r.hypothesis), *label, r.pair_id});
  }
  for (auto& part : out.dataset.partitions) {
    std::sort(part.begin(), part.end(), [](const VEInstance& a, const VEInstance& b) {
      return std::tie(a.image_id, a.pair_id) < std::tie(b.image_id, b.pair_id);
    });
  }
  if (out.dataset.empty()) out.diagnostics.push_back({0, "no labeled instances survived filtering"});
  return out;
}

// ---- serialization: one JSON-lines file per partition -----------------------

inline json instance_to_json(const VEInstance& inst) {
  return {{"image_id", inst.image_id}, {"tokens", inst.tokens}, {"label", std::string(to_string(inst.label))}};
}

inline VEInstance instance_from_json(const json& j, std::size_t line) {
  try {
    VEInstance inst;
    inst.image_id = j.at("image_id").get<std::string>();
    inst.tokens = j.at("tokens").get<std::vector<std::string>>();
    const auto label = parse_label(j.at("label").get<std::string>());
    if (!label) throw SchemaError("line " + std::to_string(line) + ": unknown label");
    inst.label = *label;
    return inst;
  } catch (const json::exception& e) {
    throw SchemaError("line " + std::to_string(line) + ": " + e.what());
  }
}

inline std::filesystem::path partition_file(const std::filesystem::path& dir, Partition p) {
  return dir / (std::string(to_string(p)) + ".jsonl");
}

inline void save_dataset(const VEDataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (auto p : all_partitions) {
    std::ofstream out(partition_file(dir, p), std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + partition_file(dir, p).string());
    for (const auto& inst : d[p]) out << instance_to_json(inst).dump() << '\n';
  }
}

inline std::vector<VEInstance> load_partition(std::istream& in) {
  std::vector<VEInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    out.push_back(instance_from_json(j, lineno));
  }
  return out;
}

inline VEDataset load_dataset(const std::filesystem::path& dir) {
  VEDataset d;
  for (auto p : all_partitions) {
    std::ifstream in(partition_file(dir, p));
    if (!in) throw NotFoundError("missing partition file " + partition_file(dir, p).string());
    d[p] = load_partition(in);
  }
  return d;
}

// ---- audit -----------------------------------------------------------------

inline constexpr double default_balance_threshold = 0.05;

struct PartitionOverlap {
  Partition a;
  Partition b;
  std::vector<std::string> images;
};

struct AuditReport {
  std::vector<PartitionOverlap> overlaps;  // one entry per partition pair, possibly empty
  std::array<std::array<std::size_t, num_classes>, 3> class_counts{};
  std::array<std::optional<double>, 3> class_ratio{};  // max/min class count; nullopt if a class is absent
  double balance_threshold = default_balance_threshold;

  bool disjoint() const {
    return std::all_of(overlaps.begin(), overlaps.end(), [](const auto& o) { return o.images.empty(); });
  }

  /// Spread max/min - 1 within the threshold for every non-empty partition.
  bool balanced() const {
    for (std::size_t p = 0; p < 3; ++p) {
      const auto total = class_counts[p][0] + class_counts[p][1] + class_counts[p][2];
      if (total == 0) continue;
      if (!class_ratio[p] || *class_ratio[p] - 1.0 > balance_threshold) return false;
    }
    return true;
  }

  /// Only image overlap fails an audit; balance is informational.
  bool passed() const { return disjoint(); }

  json to_json() const {
    json j;
    j["passed"] = passed();
    j["disjoint"] = disjoint();
    j["balanced"] = balanced();
    j["balance_threshold"] = balance_threshold;
    j["overlaps"] = json::array();
    for (const auto& o : overlaps) {
      j["overlaps"].push_back({{"partitions", {std::string(to_string(o.a)), std::string(to_string(o.b))}},
                               {"images", o.images}});
    }
    for (auto p : all_partitions) {
      const auto i = static_cast<std::size_t>(p);
      json part;
      for (std::size_t c = 0; c < num_classes; ++c) part["counts"][std::string(label_short[c])] = class_counts[i][c];
      part["max_min_ratio"] = class_ratio[i] ? json(*class_ratio[i]) : json(nullptr);
      j["partitions"][std::string(to_string(p))] = part;
    }
    return j;
  }
};

inline AuditReport validate_partitions(const VEDataset& d, double balance_threshold = default_balance_threshold) {
  AuditReport r;
  r.balance_threshold = balance_threshold;
  std::array<std::set<std::string>, 3> images;
  for (auto p : all_partitions) images[static_cast<std::size_t>(p)] = d.image_ids(p);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      PartitionOverlap o{all_partitions[a], all_partitions[b], {}};
      std::set_intersection(images[a].begin(), images[a].end(), images[b].begin(), images[b].end(),
                            std::back_inserter(o.images));
      r.overlaps.push_back(std::move(o));
    }
  }
  for (auto p : all_partitions) {
    const auto i = static_cast<std::size_t>(p);
    for (const auto& inst : d[p]) ++r.class_counts[i][index_of(inst.label)];
    const auto [lo, hi] = std::minmax_element(r.class_counts[i].begin(), r.class_counts[i].end());
    if (*lo > 0) r.class_ratio[i] = static_cast<double>(*hi) / static_cast<double>(*lo);
  }
  return r;
}

// ---- statistics --------------------------------------------------------------

struct CorpusStats {
  std::array<std::size_t, 3> instances{};
  std::array<std::size_t, 3> images{};
  std::array<std::size_t, 3> partition_vocabulary{};
  double mean_length = 0;
  double median_length = 0;
  std::size_t mode_length = 0;
  std::size_t max_length = 0;
  std::size_t vocabulary_size = 0;
  std::map<std::size_t, std::size_t> length_histogram;
  std::vector<std::string> warnings;

  json to_json() const {
    json j;
    for (auto p : all_partitions) {
      const auto i = static_cast<std::size_t>(p);
      const auto name = std::string(to_string(p));
      j["partition_size"][name] = instances[i];
      j["images"][name] = images[i];
      j["partition_vocabulary"][name] = partition_vocabulary[i];
    }
    j["question_length"] = {
        {"mean", mean_length}, {"median", median_length}, {"mode", mode_length}, {"max", max_length}};
    j["vocabulary_size"] = vocabulary_size;
    j["warnings"] = warnings;
    return j;
  }

  std::string histogram_csv() const {
    std::string out = "length,count\n";
    for (const auto& [len, n] : length_histogram) out += std::to_string(len) + "," + std::to_string(n) + "\n";
    return out;
  }
};

/// Hypothesis length and vocabulary statistics over all partitions combined,
/// plus per-partition sizes. Median averages the two middle values for an
/// even count; ties for the mode resolve to the shortest length.
inline CorpusStats compute_stats(const VEDataset& d) {
  CorpusStats s;
  std::vector<std::size_t> lengths;
  std::unordered_set<std::string> vocab;
  for (auto p : all_partitions) {
    const auto i = static_cast<std::size_t>(p);
    std::unordered_set<std::string> part_vocab;
    s.instances[i] = d[p].size();
    s.images[i] = d.image_ids(p).size();
    for (const auto& inst : d[p]) {
      lengths.push_back(inst.tokens.size());
      ++s.length_histogram[inst.tokens.size()];
      part_vocab.insert(inst.tokens.begin(), inst.tokens.end());
    }
    s.partition_vocabulary[i] = part_vocab.size();
    vocab.merge(part_vocab);
  }
  s.vocabulary_size = vocab.size();
  if (lengths.empty()) {
    s.warnings.push_back("dataset is empty");
    return s;
  }
  std::sort(lengths.begin(), lengths.end());
  const auto n = lengths.size();
  s.mean_length = static_cast<double>(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0})) /
                  static_cast<double>(n);
  s.median_length = n % 2 ? static_cast<double>(lengths[n / 2])
                          : (static_cast<double>(lengths[n / 2 - 1]) + static_cast<double>(lengths[n / 2])) / 2.0;
  s.max_length = lengths.back();
  std::size_t best = 0;
  for (const auto& [len, count] : s.length_histogram) {
    if (count > best) {
      best = count;
      s.mode_length = len;
    }
  }
  return s;
}

// ---- batching ----------------------------------------------------------------

inline constexpr std::size_t default_train_batch_size = 64;
inline constexpr std::size_t default_eval_batch_size = 32;

/// Hypotheses padded with PAD to the longest one in the batch.
struct Batch {
  std::vector<std::size_t> indices;  // positions in the source partition
  std::vector<std::string> image_ids;
  std::size_t width = 0;
  std::vector<std::int32_t> tokens;  // size() x width, row-major
  std::vector<bool> pad_mask;        // true where tokens[] is padding
  std::vector<Label> labels;

  std::size_t size() const { return indices.size(); }

  std::span<const std::int32_t> row(std::size_t i) const {
    return std::span<const std::int32_t>(tokens).subspan(i * width, width);
  }
};

/// Splits a partition into batches of at most batch_size; with `shuffle`,
/// the instance order is permuted by a generator seeded with `seed`.
inline std::vector<Batch> make_batches(const std::vector<VEInstance>& partition, const Vocabulary& vocab,
                                       std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<std::size_t> order(partition.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto end = std::min(order.size(), start + batch_size);
    Batch b;
    for (auto k = start; k < end; ++k) b.width = std::max(b.width, partition[order[k]].tokens.size());
    for (auto k = start; k < end; ++k) {
      const auto& inst = partition[order[k]];
      b.indices.push_back(order[k]);
      b.image_ids.push_back(inst.image_id);
      b.labels.push_back(inst.label);
      for (std::size_t t = 0; t < b.width; ++t) {
        const bool pad = t >= inst.tokens.size();
        b.tokens.push_back(pad ? Vocabulary::pad : vocab.index(inst.tokens[t]));
        b.pad_mask.push_back(pad);
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Vocabulary over every hypothesis in every partition, in dataset order.
inline Vocabulary dataset_vocabulary(const VEDataset& d) {
  Vocabulary v;
  for (auto p : all_partitions)
    for (const auto& inst : d[p])
      for (const auto& t : inst.tokens) v.add(t);
  return v;
}

}  // namespace vekit
