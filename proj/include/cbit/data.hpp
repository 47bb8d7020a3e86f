#pragma once

// Interaction ingestion, 5-core filtering, chronological sequences,
// slide-window training instances and the leave-one-out split.
//
// Dense token layout: 0 = padding, 1 = [mask], 2.. = items.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cbit/error.hpp"

namespace cbit::data {

inline constexpr std::size_t kPadToken = 0;
inline constexpr std::size_t kMaskToken = 1;
inline constexpr std::size_t kFirstItem = 2;

enum class InputFormat { triplet, sequence };

inline InputFormat parse_format(std::string_view s) {
  if (s == "triplet") return InputFormat::triplet;
  if (s == "sequence") return InputFormat::sequence;
  throw ConfigError("unknown input format '" + std::string(s) + "' (expected triplet|sequence)");
}

struct Interaction {
  std::string user;
  std::string item;
  double timestamp = 0.0;
};

// Bijection raw item id <-> dense index in [2, num_items + 1].
class Vocabulary {
 public:
  std::size_t add(const std::string& raw) {
    auto [it, inserted] = dense_.emplace(raw, raw_.size() + kFirstItem);
    if (inserted) raw_.push_back(raw);
    return it->second;
  }

  std::size_t dense(const std::string& raw) const {
    auto it = dense_.find(raw);
    if (it == dense_.end()) throw IndexError("unknown item '" + raw + "'");
    return it->second;
  }

  const std::string& raw(std::size_t dense_id) const {
    if (dense_id < kFirstItem || dense_id - kFirstItem >= raw_.size())
      throw IndexError("dense id " + std::to_string(dense_id) + " is not an item");
    return raw_[dense_id - kFirstItem];
  }

  std::size_t num_items() const { return raw_.size(); }
  // |V| + 2: items plus padding and mask.
  std::size_t vocab_size() const { return raw_.size() + kFirstItem; }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, std::size_t> dense_;
};

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double avg_length = 0.0;
  double sparsity = 0.0;
};

struct InteractionDataset {
  std::vector<std::string> users;                 // raw user ids, first-appearance order
  std::vector<std::vector<std::size_t>> sequences;  // chronological dense item ids per user
  Vocabulary items;

  std::size_t num_users() const { return users.size(); }
  std::size_t num_items() const { return items.num_items(); }
  std::size_t vocab_size() const { return items.vocab_size(); }

  DatasetStats stats() const {
    DatasetStats s;
    s.users = users.size();
    s.items = items.num_items();
    for (const auto& seq : sequences) s.actions += seq.size();
    if (s.users > 0) s.avg_length = static_cast<double>(s.actions) / static_cast<double>(s.users);
    if (s.users > 0 && s.items > 0)
      s.sparsity = 1.0 - static_cast<double>(s.actions) /
                             (static_cast<double>(s.users) * static_cast<double>(s.items));
    return s;
  }
};

inline std::string format_stats(const DatasetStats& s) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os << "users=" << s.users << "\titems=" << s.items << "\tactions=" << s.actions;
  os.precision(1);
  os << "\tavg_length=" << s.avg_length;
  os.precision(2);
  os << "\tsparsity=" << s.sparsity * 100.0 << "%";
  return os.str();
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace detail

// Parses one interaction per `user item timestamp` line (triplet) or a whole
// chronological sequence per `user item item ...` line (sequence; the
// position stands in for the timestamp). Blank lines are skipped.
inline std::vector<Interaction> parse_interactions(std::istream& in, InputFormat format) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t line_no = 0;
  std::unordered_map<std::string, double> next_position;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (format == InputFormat::triplet) {
      if (fields.size() != 3)
        throw DataError("line " + std::to_string(line_no) + ": expected 'user item timestamp', got " +
                        std::to_string(fields.size()) + " fields");
      double ts = 0.0;
      auto [ptr, ec] = std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(), ts);
      if (ec != std::errc() || ptr != fields[2].data() + fields[2].size())
        throw DataError("line " + std::to_string(line_no) + ": bad timestamp '" + std::string(fields[2]) + "'");
      out.push_back({std::string(fields[0]), std::string(fields[1]), ts});
    } else {
      if (fields.size() < 2)
        throw DataError("line " + std::to_string(line_no) + ": expected 'user item ...'");
      std::string user(fields[0]);
      double& pos = next_position[user];
      for (std::size_t k = 1; k < fields.size(); ++k) out.push_back({user, std::string(fields[k]), pos++});
    }
  }
  return out;
}

struct FilterOptions {
  std::size_t min_user_interactions = 5;
  std::size_t min_item_users = 5;
};

// Drops exact (user, item, timestamp) duplicates, then applies iterative
// k-core filtering until nothing changes: users need min_user_interactions
// interactions, items need min_item_users distinct users. Sequences are sorted
// by timestamp, ties kept in input order.
inline InteractionDataset build_dataset(const std::vector<Interaction>& raw, const FilterOptions& opt = {}) {
  struct Key {
    std::string user, item;
    double ts;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return std::hash<std::string>()(k.user) * 31 ^ std::hash<std::string>()(k.item) * 17 ^
             std::hash<double>()(k.ts);
    }
  };
  std::unordered_set<Key, KeyHash> seen;
  std::vector<Interaction> rows;
  for (const auto& r : raw)
    if (seen.insert({r.user, r.item, r.timestamp}).second) rows.push_back(r);

  std::vector<bool> alive(rows.size(), true);
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> user_count;
    std::unordered_map<std::string, std::unordered_set<std::string>> item_users;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!alive[i]) continue;
      ++user_count[rows[i].user];
      item_users[rows[i].item].insert(rows[i].user);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!alive[i]) continue;
      if (user_count[rows[i].user] < opt.min_user_interactions ||
          item_users[rows[i].item].size() < opt.min_item_users) {
        alive[i] = false;
        changed = true;
      }
    }
  }

  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> rows_by_user;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!alive[i]) continue;
    auto& v = rows_by_user[rows[i].user];
    if (v.empty()) user_order.push_back(rows[i].user);
    v.push_back(i);
  }
  if (user_order.empty()) throw DataError("dataset is empty after filtering");

  InteractionDataset ds;
  for (const auto& u : user_order) {
    auto& idx = rows_by_user[u];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return rows[a].timestamp < rows[b].timestamp; });
    std::vector<std::size_t> seq;
    seq.reserve(idx.size());
    for (std::size_t i : idx) seq.push_back(ds.items.add(rows[i].item));
    ds.users.push_back(u);
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

inline InteractionDataset load_interactions(const std::filesystem::path& path, InputFormat format,
                                            const FilterOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return build_dataset(parse_interactions(in, format), opt);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

struct TrainingWindow {
  std::vector<std::size_t> tokens;
  std::size_t source_user = 0;
  std::size_t valid_from = 0;  // first non-padding position
};

// Fixed-length windows over one sequence. A sequence no longer than T yields
// one pre-padded window. Longer sequences yield windows at offsets 0, stride,
// 2*stride, ... plus an end-aligned final window if the stride skipped it.
inline std::vector<TrainingWindow> slide_windows(std::span<const std::size_t> seq, std::size_t T,
                                                 std::size_t stride = 1, std::size_t user = 0) {
  if (T < 1) throw ConfigError("window size must be >= 1");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (seq.empty()) throw DataError("cannot window an empty sequence");
  std::vector<TrainingWindow> out;
  if (seq.size() <= T) {
    TrainingWindow w{std::vector<std::size_t>(T, kPadToken), user, T - seq.size()};
    std::copy(seq.begin(), seq.end(), w.tokens.begin() + static_cast<std::ptrdiff_t>(w.valid_from));
    out.push_back(std::move(w));
    return out;
  }
  const std::size_t last = seq.size() - T;
  auto emit = [&](std::size_t off) {
    out.push_back({std::vector<std::size_t>(seq.begin() + static_cast<std::ptrdiff_t>(off),
                                            seq.begin() + static_cast<std::ptrdiff_t>(off + T)),
                   user, 0});
  };
  std::size_t off = 0;
  for (; off <= last; off += stride) emit(off);
  if (off - stride != last) emit(last);
  return out;
}

// Most recent T-1 items, leaving one slot for the appended [mask] token.
inline std::vector<std::size_t> truncate_for_inference(std::span<const std::size_t> seq, std::size_t T) {
  const std::size_t keep = T == 0 ? 0 : T - 1;
  const std::size_t start = seq.size() > keep ? seq.size() - keep : 0;
  return {seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end()};
}

struct HeldOut {
  std::size_t user = 0;
  std::vector<std::size_t> context;
  std::size_t target = 0;
};

struct EvalSplit {
  std::vector<std::vector<std::size_t>> train_sequences;  // per user, excludes last two items
  std::vector<HeldOut> validation;
  std::vector<HeldOut> test;
};

inline EvalSplit leave_one_out(const InteractionDataset& ds) {
  EvalSplit split;
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const auto& s = ds.sequences[u];
    if (s.size() < 3)
      throw DataError("user '" + ds.users[u] + "' has fewer than 3 interactions; cannot hold out two");
    std::vector<std::size_t> train(s.begin(), s.end() - 2);
    split.validation.push_back({u, train, s[s.size() - 2]});
    split.test.push_back({u, std::vector<std::size_t>(s.begin(), s.end() - 1), s.back()});
    split.train_sequences.push_back(std::move(train));
  }
  return split;
}

inline std::vector<TrainingWindow> training_windows(const EvalSplit& split, std::size_t T, std::size_t stride) {
  std::vector<TrainingWindow> out;
  for (std::size_t u = 0; u < split.train_sequences.size(); ++u) {
    auto w = slide_windows(split.train_sequences[u], T, stride, u);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

// ---- serialization -------------------------------------------------------
//
// <dir>/dataset.txt  "#cbit-data v1 <users> <items>[ <T>]" then one line of
//                    dense ids per user, in user order
// <dir>/vocab.txt    "raw_id dense_id" per item
// <dir>/users.txt    raw user id per line, same order as dataset.txt

inline void save_dataset(const std::filesystem::path& dir, const InteractionDataset& ds,
                         std::optional<std::size_t> T = std::nullopt) {
  std::filesystem::create_directories(dir);
  std::ofstream data(dir / "dataset.txt"), vocab(dir / "vocab.txt"), users(dir / "users.txt");
  if (!data || !vocab || !users) throw DataError("cannot write dataset files under " + dir.string());
  data << "#cbit-data v1 " << ds.num_users() << ' ' << ds.num_items();
  if (T) data << ' ' << *T;
  data << '\n';
  for (const auto& seq : ds.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) data << (i ? " " : "") << seq[i];
    data << '\n';
  }
  for (std::size_t id = kFirstItem; id < ds.vocab_size(); ++id) vocab << ds.items.raw(id) << ' ' << id << '\n';
  for (const auto& u : ds.users) users << u << '\n';
}

struct LoadedDataset {
  InteractionDataset dataset;
  std::optional<std::size_t> T;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream data(dir / "dataset.txt"), vocab(dir / "vocab.txt"), users(dir / "users.txt");
  if (!data || !vocab || !users) throw DataError("missing dataset files under " + dir.string());
  LoadedDataset out;
  std::string line;
  std::getline(data, line);
  auto header = detail::split_ws(line);
  if (header.size() < 4 || header[0] != "#cbit-data" || header[1] != "v1")
    throw DataError(dir.string() + "/dataset.txt: bad header '" + line + "'");
  auto to_size = [&](std::string_view f) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || ptr != f.data() + f.size()) throw DataError("bad integer '" + std::string(f) + "'");
    return v;
  };
  const std::size_t n_users = to_size(header[2]), n_items = to_size(header[3]);
  if (header.size() >= 5) out.T = to_size(header[4]);

  std::vector<std::pair<std::size_t, std::string>> entries;
  while (std::getline(vocab, line)) {
    auto f = detail::split_ws(line);
    if (f.empty()) continue;
    if (f.size() != 2) throw DataError("vocab.txt: bad line '" + line + "'");
    entries.emplace_back(to_size(f[1]), std::string(f[0]));
  }
  std::sort(entries.begin(), entries.end());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != i + kFirstItem) throw DataError("vocab.txt: dense ids are not contiguous from 2");
    out.dataset.items.add(entries[i].second);
  }
  while (std::getline(users, line))
    if (!line.empty()) out.dataset.users.push_back(line);
  while (std::getline(data, line)) {
    std::vector<std::size_t> seq;
    for (auto f : detail::split_ws(line)) {
      const std::size_t id = to_size(f);
      if (id < kFirstItem || id >= n_items + kFirstItem)
        throw DataError("dataset.txt: token " + std::to_string(id) + " outside the item range");
      seq.push_back(id);
    }
    if (!seq.empty()) out.dataset.sequences.push_back(std::move(seq));
  }
  if (out.dataset.users.size() != n_users || out.dataset.sequences.size() != n_users ||
      out.dataset.num_items() != n_items)
    throw DataError(dir.string() + ": header counts disagree with file contents");
  return out;
}

}  // namespace cbit::data
