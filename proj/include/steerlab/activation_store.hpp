#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "steerlab/binary_io.hpp"
#include "steerlab/error.hpp"
#include "steerlab/linalg.hpp"

namespace steerlab {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kActivationsFile = "activations.bin";

// Which token position(s) an activation was read from.
enum class TokenRole { pre_response, response_mean, custom };

enum class Label { faithful, faithless, unlabeled };

enum class Category { malicious, benign };

inline std::string to_string(TokenRole r) {
  switch (r) {
    case TokenRole::pre_response: return "pre_response";
    case TokenRole::response_mean: return "response_mean";
    case TokenRole::custom: return "custom";
  }
  return "custom";
}

inline TokenRole parse_token_role(std::string_view s) {
  if (s == "pre_response") return TokenRole::pre_response;
  if (s == "response_mean") return TokenRole::response_mean;
  if (s == "custom") return TokenRole::custom;
  throw FormatError("unknown token_position_role '" + std::string(s) + "'");
}

inline std::string to_string(Label l) {
  switch (l) {
    case Label::faithful: return "faithful";
    case Label::faithless: return "faithless";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline Label parse_label(std::string_view s) {
  if (s == "faithful") return Label::faithful;
  if (s == "faithless") return Label::faithless;
  if (s == "unlabeled") return Label::unlabeled;
  throw FormatError("unknown label '" + std::string(s) + "'");
}

inline std::string to_string(Category c) { return c == Category::benign ? "benign" : "malicious"; }

inline Category parse_category(std::string_view s) {
  if (s == "benign") return Category::benign;
  if (s == "malicious") return Category::malicious;
  throw FormatError("unknown prompt category '" + std::string(s) + "'");
}

struct CaptureSpec {
  TokenRole role = TokenRole::pre_response;
  std::string description;
};

// One prompt's activations at every layer. `values` is layer-major: L·d floats.
struct ActivationRecord {
  std::int64_t record_id = 0;
  std::int64_t prompt_id = 0;
  int source_iteration = 0;
  TokenRole role = TokenRole::pre_response;
  Label label = Label::unlabeled;
  std::optional<double> score;
  std::vector<float> values;

  bool operator==(const ActivationRecord&) const = default;
};

class ActivationSet {
 public:
  ActivationSet() = default;
  ActivationSet(int num_layers, int hidden_dim) : num_layers_(num_layers), hidden_dim_(hidden_dim) {
    if (num_layers < 1 || hidden_dim < 1) {
      throw DimensionError("activation set needs num_layers >= 1 and hidden_dim >= 1");
    }
  }

  int num_layers() const { return num_layers_; }
  int hidden_dim() const { return hidden_dim_; }
  int format_version() const { return kFormatVersion; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::vector<ActivationRecord>& records() const { return records_; }
  std::vector<ActivationRecord>& mutable_records() { return records_; }

  std::span<const float> vector(std::size_t index, int layer) const {
    return layer_of(records_.at(index), layer);
  }

  std::span<const float> layer_of(const ActivationRecord& rec, int layer) const {
    if (layer < 0 || layer >= num_layers_) throw DimensionError("layer index " + std::to_string(layer) + " out of range");
    return std::span<const float>(rec.values).subspan(static_cast<std::size_t>(layer) * hidden_dim_, hidden_dim_);
  }

  void add(ActivationRecord rec) {
    check_record(rec);
    records_.push_back(std::move(rec));
  }

  // Throws on any violated invariant.
  void validate() const {
    std::unordered_set<std::int64_t> ids;
    for (const auto& rec : records_) {
      check_record(rec);
      if (!ids.insert(rec.record_id).second) {
        throw FormatError("duplicate record_id " + std::to_string(rec.record_id));
      }
    }
  }

  std::size_t count(Label label) const {
    return static_cast<std::size_t>(
        std::count_if(records_.begin(), records_.end(), [&](const auto& r) { return r.label == label; }));
  }

  bool operator==(const ActivationSet&) const = default;

 private:
  void check_record(const ActivationRecord& rec) const {
    const auto expected = static_cast<std::size_t>(num_layers_) * static_cast<std::size_t>(hidden_dim_);
    if (rec.values.size() != expected) {
      throw DimensionError("record " + std::to_string(rec.record_id) + " has " + std::to_string(rec.values.size()) +
                           " values, expected " + std::to_string(expected));
    }
    if (!linalg::all_finite(std::span<const float>(rec.values))) {
      throw FormatError("record " + std::to_string(rec.record_id) + " contains a non-finite value");
    }
    if (rec.label != Label::unlabeled && !rec.score) {
      throw FormatError("labelled record " + std::to_string(rec.record_id) + " has no score");
    }
    if (rec.score && !(*rec.score >= 0.0 && *rec.score <= 1.0)) {
      throw FormatError("record " + std::to_string(rec.record_id) + " score outside [0,1]");
    }
  }

  int num_layers_ = 1;
  int hidden_dim_ = 1;
  std::vector<ActivationRecord> records_;
};

inline void save_activation_set(const ActivationSet& set, const fs::path& dir) {
  set.validate();
  io::ensure_directory(dir);

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["num_layers"] = set.num_layers();
  manifest["hidden_dim"] = set.hidden_dim();
  json records = json::array();
  std::vector<unsigned char> payload;
  payload.reserve(set.size() * static_cast<std::size_t>(set.num_layers()) * set.hidden_dim() * 4);
  for (const auto& rec : set.records()) {
    json r;
    r["record_id"] = rec.record_id;
    r["prompt_id"] = rec.prompt_id;
    r["source_iteration"] = rec.source_iteration;
    r["token_position_role"] = to_string(rec.role);
    r["label"] = to_string(rec.label);
    r["score"] = rec.score ? json(*rec.score) : json(nullptr);
    records.push_back(std::move(r));
    for (const float v : rec.values) io::append_f32(payload, v);
  }
  manifest["records"] = std::move(records);

  io::write_text(dir / kManifestFile, manifest.dump(2) + "\n");
  io::write_bytes(dir / kActivationsFile, payload);
}

inline ActivationSet load_activation_set(const fs::path& dir) {
  const auto manifest_path = dir / kManifestFile;
  const auto tensor_path = dir / kActivationsFile;
  if (!fs::exists(manifest_path)) throw IoError("missing " + manifest_path.string());
  if (!fs::exists(tensor_path)) throw IoError("missing " + tensor_path.string());

  json manifest;
  try {
    manifest = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError("unsupported format_version " + std::to_string(version) + " in " + manifest_path.string());
    }
    ActivationSet set(manifest.at("num_layers").get<int>(), manifest.at("hidden_dim").get<int>());
    const auto& records = manifest.at("records");
    const std::size_t per_record = static_cast<std::size_t>(set.num_layers()) * set.hidden_dim();
    const auto bytes = io::read_bytes(tensor_path);
    const std::size_t expected = records.size() * per_record * 4;
    if (bytes.size() != expected) {
      throw FormatError("tensor file length " + std::to_string(bytes.size()) + " != expected " +
                        std::to_string(expected) + " bytes (" + std::to_string(records.size()) + " records)");
    }
    const unsigned char* p = bytes.data();
    for (const auto& r : records) {
      ActivationRecord rec;
      rec.record_id = r.at("record_id").get<std::int64_t>();
      rec.prompt_id = r.at("prompt_id").get<std::int64_t>();
      rec.source_iteration = r.at("source_iteration").get<int>();
      rec.role = parse_token_role(r.at("token_position_role").get<std::string>());
      rec.label = parse_label(r.at("label").get<std::string>());
      if (r.contains("score") && !r.at("score").is_null()) rec.score = r.at("score").get<double>();
      rec.values.resize(per_record);
      for (auto& v : rec.values) {
        v = io::read_f32(p);
        p += 4;
      }
      set.mutable_records().push_back(std::move(rec));
    }
    set.validate();
    return set;
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
}

// Concatenation with record ids renumbered 0..n-1 in merged order.
inline ActivationSet merge(const ActivationSet& a, const ActivationSet& b) {
  if (a.num_layers() != b.num_layers() || a.hidden_dim() != b.hidden_dim()) {
    throw DimensionError("merge: shape (" + std::to_string(a.num_layers()) + "," + std::to_string(a.hidden_dim()) +
                         ") vs (" + std::to_string(b.num_layers()) + "," + std::to_string(b.hidden_dim()) + ")");
  }
  ActivationSet out(a.num_layers(), a.hidden_dim());
  auto& recs = out.mutable_records();
  recs.reserve(a.size() + b.size());
  for (const auto* src : {&a, &b}) {
    for (const auto& rec : src->records()) recs.push_back(rec);
  }
  for (std::size_t i = 0; i < recs.size(); ++i) recs[i].record_id = static_cast<std::int64_t>(i);
  return out;
}

struct Prompt {
  std::int64_t prompt_id = 0;
  std::string text;
  Category category = Category::malicious;

  bool operator==(const Prompt&) const = default;
};

class PromptSet {
 public:
  PromptSet() = default;
  explicit PromptSet(std::vector<Prompt> prompts) {
    for (auto& p : prompts) add(std::move(p));
  }

  void add(Prompt p) {
    if (!ids_.insert(p.prompt_id).second) throw FormatError("duplicate prompt_id " + std::to_string(p.prompt_id));
    prompts_.push_back(std::move(p));
  }

  const std::vector<Prompt>& prompts() const { return prompts_; }
  std::size_t size() const { return prompts_.size(); }
  bool empty() const { return prompts_.empty(); }
  const Prompt& operator[](std::size_t i) const { return prompts_.at(i); }

  PromptSet of_category(Category c) const {
    PromptSet out;
    for (const auto& p : prompts_) {
      if (p.category == c) out.add(p);
    }
    return out;
  }

  bool operator==(const PromptSet& o) const { return prompts_ == o.prompts_; }

 private:
  std::vector<Prompt> prompts_;
  std::unordered_set<std::int64_t> ids_;
};

// JSON Lines: {"prompt_id":..,"category":"benign"|"malicious","text":..}
inline PromptSet load_prompts(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("prompts file not found: " + path.string());
  std::istringstream in(io::read_text(path));
  PromptSet set;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      set.add(Prompt{j.at("prompt_id").get<std::int64_t>(), j.at("text").get<std::string>(),
                     parse_category(j.at("category").get<std::string>())});
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return set;
}

inline void save_prompts(const PromptSet& set, const fs::path& path) {
  std::string out;
  for (const auto& p : set.prompts()) {
    json j;
    j["prompt_id"] = p.prompt_id;
    j["category"] = to_string(p.category);
    j["text"] = p.text;
    out += j.dump() + "\n";
  }
  io::write_text(path, out);
}

// Keeps every malicious prompt and the benign prompts whose score is >= min_score.
inline PromptSet filter_prompts(const PromptSet& prompts, const std::map<std::int64_t, double>& scores,
                                double min_score) {
  PromptSet out;
  std::size_t benign_in = 0;
  std::size_t benign_kept = 0;
  for (const auto& p : prompts.prompts()) {
    if (p.category == Category::malicious) {
      out.add(p);
      continue;
    }
    ++benign_in;
    const auto it = scores.find(p.prompt_id);
    if (it == scores.end()) throw ValueError("no score for benign prompt " + std::to_string(p.prompt_id));
    if (it->second >= min_score) {
      out.add(p);
      ++benign_kept;
    }
  }
  if (benign_in > 0 && benign_kept == 0) {
    log::warn("filter_prompts: every benign prompt scored below " + std::to_string(min_score));
  }
  return out;
}

// Responses are persisted as JSON Lines keyed by an id field.
struct ResponseLine {
  std::int64_t id = 0;
  std::string text;
};

inline void save_responses(const std::vector<ResponseLine>& lines, const fs::path& path, const std::string& key) {
  std::string out;
  for (const auto& r : lines) {
    json j;
    j[key] = r.id;
    j["response"] = r.text;
    out += j.dump() + "\n";
  }
  io::write_text(path, out);
}

inline std::vector<ResponseLine> load_responses(const fs::path& path, const std::string& key) {
  std::istringstream in(io::read_text(path));
  std::vector<ResponseLine> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at(key).get<std::int64_t>(), j.at("response").get<std::string>()});
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace steerlab
