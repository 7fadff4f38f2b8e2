#pragma once

// Turning records into training sequences: chat-template rendering with a
// loss mask over assistant content only, order-preserving packing, and the
// LoRA training configuration handed to the external trainer.

#include <cstdint>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sftkit/corpus.hpp"

namespace sftkit {

using TokenId = std::int32_t;

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
};

// Test tokenizer: maximal runs of non-whitespace and maximal runs of
// whitespace are tokens, so decode(encode(x)) == x. Ids are handed out on
// first sight; the vocabulary is shared across threads.
class WhitespaceTokenizer : public Tokenizer {
 public:
  std::vector<TokenId> encode(std::string_view text) const override {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
      const bool space = is_space(text[i]);
      std::size_t j = i;
      while (j < text.size() && is_space(text[j]) == space) ++j;
      out.push_back(intern(text.substr(i, j - i)));
      i = j;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const override {
    std::lock_guard lock(mu_);
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        throw ValidationError("sft", "unknown token id " + std::to_string(id));
      }
      out += pieces_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  std::size_t vocab_size() const {
    std::lock_guard lock(mu_);
    return pieces_.size();
  }

  // Pieces in id order; loadable with VocabTokenizer.
  std::vector<std::string> vocabulary() const {
    std::lock_guard lock(mu_);
    return pieces_;
  }

 private:
  TokenId intern(std::string_view piece) const {
    std::lock_guard lock(mu_);
    auto it = ids_.find(std::string(piece));
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(pieces_.size());
    pieces_.emplace_back(piece);
    ids_.emplace(std::string(piece), id);
    return id;
  }

  mutable std::mutex mu_;
  mutable std::vector<std::string> pieces_;
  mutable std::unordered_map<std::string, TokenId> ids_;
};

// Vocabulary-file tokenizer: greedy longest match over bytes against a
// fixed vocabulary (a JSON array of strings, id = position), with one
// fallback id per byte value after the vocabulary for anything unmatched.
class VocabTokenizer : public Tokenizer {
 public:
  explicit VocabTokenizer(std::vector<std::string> vocab) : pieces_(std::move(vocab)) {
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (pieces_[i].empty()) throw ValidationError("sft", "vocabulary entry " + std::to_string(i) + " is empty");
      ids_.emplace(pieces_[i], static_cast<TokenId>(i));
      max_len_ = std::max(max_len_, pieces_[i].size());
    }
  }

  static VocabTokenizer from_file(const std::filesystem::path& path) {
    json j = json::parse(read_file(path));
    if (!j.is_array()) throw ValidationError("sft", path.string() + ": vocabulary must be a JSON array");
    return VocabTokenizer(j.get<std::vector<std::string>>());
  }

  std::vector<TokenId> encode(std::string_view text) const override {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - i);
      for (; len > 0; --len) {
        auto it = ids_.find(std::string(text.substr(i, len)));
        if (it != ids_.end()) {
          out.push_back(it->second);
          break;
        }
      }
      if (len == 0) {
        out.push_back(byte_id(static_cast<unsigned char>(text[i])));
        len = 1;
      }
      i += len;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const override {
    std::string out;
    const auto n = static_cast<TokenId>(pieces_.size());
    for (TokenId id : ids) {
      if (id >= 0 && id < n) {
        out += pieces_[static_cast<std::size_t>(id)];
      } else if (id >= n && id < n + 256) {
        out.push_back(static_cast<char>(id - n));
      } else {
        throw ValidationError("sft", "unknown token id " + std::to_string(id));
      }
    }
    return out;
  }

 private:
  TokenId byte_id(unsigned char b) const { return static_cast<TokenId>(pieces_.size()) + b; }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t max_len_ = 1;
};

// Role headers and separators. Only the assistant message text is trained
// on; headers, turn ends and the terminator are context.
struct ChatTemplate {
  std::string system_header = "<|system|>\n";
  std::string user_header = "<|user|>\n";
  std::string assistant_header = "<|assistant|>\n";
  std::string turn_end = "\n";
  std::string terminator = "</s>";

  const std::string& header_for(Role r) const {
    switch (r) {
      case Role::system: return system_header;
      case Role::user: return user_header;
      case Role::assistant: return assistant_header;
    }
    return user_header;
  }

  static ChatTemplate from_json(const json& j) {
    ChatTemplate t;
    t.system_header = j.value("system_header", t.system_header);
    t.user_header = j.value("user_header", t.user_header);
    t.assistant_header = j.value("assistant_header", t.assistant_header);
    t.turn_end = j.value("turn_end", t.turn_end);
    t.terminator = j.value("terminator", t.terminator);
    return t;
  }

  ordered_json to_json() const {
    ordered_json j;
    j["system_header"] = system_header;
    j["user_header"] = user_header;
    j["assistant_header"] = assistant_header;
    j["turn_end"] = turn_end;
    j["terminator"] = terminator;
    return j;
  }
};

struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct ChatExample {
  std::vector<TokenId> token_ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<Segment> segment_boundaries;
  std::vector<std::string> source_ids;

  std::size_t size() const { return token_ids.size(); }

  // Mask length matches, segments tile [0, size) in order, one source id
  // per segment.
  void validate() const {
    if (loss_mask.size() != token_ids.size()) throw ValidationError("sft", "loss mask length differs from token count");
    if (segment_boundaries.size() != source_ids.size()) {
      throw ValidationError("sft", "segment count differs from source id count");
    }
    std::size_t at = 0;
    for (const auto& s : segment_boundaries) {
      if (s.begin != at || s.end < s.begin) throw ValidationError("sft", "segments do not partition the sequence");
      at = s.end;
    }
    if (at != token_ids.size()) throw ValidationError("sft", "segments do not cover the sequence");
    for (auto m : loss_mask) {
      if (m > 1) throw ValidationError("sft", "loss mask values must be 0 or 1");
    }
  }

  friend bool operator==(const ChatExample&, const ChatExample&) = default;
};

inline ChatExample serialize_chat(const InstructionRecord& record, const Tokenizer& tok,
                                  const ChatTemplate& tmpl = {}) {
  validate(record);
  ChatExample ex;
  auto emit = [&](std::string_view text, std::uint8_t mask) {
    if (text.empty()) return;
    std::vector<TokenId> ids;
    try {
      ids = tok.encode(text);
    } catch (const std::exception& e) {
      throw Error("sft", "tokenizer failed on record '" + record.id + "': " + e.what());
    }
    ex.token_ids.insert(ex.token_ids.end(), ids.begin(), ids.end());
    ex.loss_mask.insert(ex.loss_mask.end(), ids.size(), mask);
  };
  for (std::size_t i = 0; i < record.turns.size(); ++i) {
    const auto& m = record.turns[i];
    const bool assistant = m.role == Role::assistant;
    if (assistant && m.text.empty()) {
      throw ValidationError("sft", "record '" + record.id + "' turn " + std::to_string(i) + ": empty assistant turn",
                            "turns[" + std::to_string(i) + "].text");
    }
    emit(tmpl.header_for(m.role), 0);
    emit(m.text, assistant ? 1 : 0);
    emit(tmpl.turn_end, 0);
  }
  emit(tmpl.terminator, 0);
  ex.segment_boundaries.push_back({0, ex.token_ids.size()});
  ex.source_ids.push_back(record.id);
  return ex;
}

// Order-preserving greedy packing: each example joins the current pack if
// it fits within max_len, otherwise it opens a new pack.
inline std::vector<ChatExample> pack_examples(const std::vector<ChatExample>& examples, std::size_t max_len) {
  if (max_len == 0) throw ValidationError("sft", "max_len must be > 0", "max_len");
  std::vector<ChatExample> packs;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.size() > max_len) {
      throw ValidationError("sft", "example " + std::to_string(i) + " has " + std::to_string(ex.size()) +
                                       " tokens, more than max_len " + std::to_string(max_len),
                            "max_len");
    }
    if (packs.empty() || packs.back().size() + ex.size() > max_len) packs.emplace_back();
    auto& p = packs.back();
    const std::size_t offset = p.size();
    p.token_ids.insert(p.token_ids.end(), ex.token_ids.begin(), ex.token_ids.end());
    p.loss_mask.insert(p.loss_mask.end(), ex.loss_mask.begin(), ex.loss_mask.end());
    for (const auto& s : ex.segment_boundaries) p.segment_boundaries.push_back({s.begin + offset, s.end + offset});
    p.source_ids.insert(p.source_ids.end(), ex.source_ids.begin(), ex.source_ids.end());
  }
  return packs;
}

// Splits a (possibly packed) example back into one example per segment.
inline std::vector<ChatExample> unpack_example(const ChatExample& packed) {
  packed.validate();
  std::vector<ChatExample> out;
  for (std::size_t i = 0; i < packed.segment_boundaries.size(); ++i) {
    const auto& s = packed.segment_boundaries[i];
    ChatExample ex;
    ex.token_ids.assign(packed.token_ids.begin() + static_cast<std::ptrdiff_t>(s.begin),
                        packed.token_ids.begin() + static_cast<std::ptrdiff_t>(s.end));
    ex.loss_mask.assign(packed.loss_mask.begin() + static_cast<std::ptrdiff_t>(s.begin),
                        packed.loss_mask.begin() + static_cast<std::ptrdiff_t>(s.end));
    ex.segment_boundaries.push_back({0, s.size()});
    ex.source_ids.push_back(packed.source_ids[i]);
    out.push_back(std::move(ex));
  }
  return out;
}

inline ordered_json to_json(const ChatExample& ex) {
  ordered_json j;
  j["token_ids"] = ex.token_ids;
  j["loss_mask"] = ex.loss_mask;
  ordered_json segs = ordered_json::array();
  for (const auto& s : ex.segment_boundaries) segs.push_back({s.begin, s.end});
  j["segment_boundaries"] = std::move(segs);
  j["source_ids"] = ex.source_ids;
  return j;
}

inline ChatExample chat_example_from_json(const json& j) {
  ChatExample ex;
  ex.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
  ex.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
  for (const auto& s : j.at("segment_boundaries")) {
    ex.segment_boundaries.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  }
  ex.source_ids = j.at("source_ids").get<std::vector<std::string>>();
  ex.validate();
  return ex;
}

inline void write_chat_examples(const std::filesystem::path& path, const std::vector<ChatExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += to_json(ex).dump();
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<ChatExample> read_chat_examples(const std::filesystem::path& path) {
  std::vector<ChatExample> out;
  for (const auto& [lineno, line] : read_lines(path)) {
    try {
      out.push_back(chat_example_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError("sft", path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

// LoRA fine-tuning hyperparameters; defaults are the published recipe.
struct TrainingConfig {
  int lora_rank = 16;
  int lora_alpha = 32;
  double lora_dropout = 0.05;
  std::vector<std::string> target_modules = {"q_proj", "v_proj", "k_proj", "gate_proj", "up_proj", "down_proj"};
  int epochs = 4;
  double learning_rate = 5e-4;
  int batch_size = 128;
  std::string precision = "bfloat16";

  void validate() const {
    auto positive = [](auto v, const char* field) {
      if (!(v > 0)) throw ValidationError("sft", std::string(field) + " must be positive", field);
    };
    positive(lora_rank, "lora_rank");
    positive(lora_alpha, "lora_alpha");
    positive(lora_dropout, "lora_dropout");
    if (!(lora_dropout < 1)) throw ValidationError("sft", "lora_dropout must be below 1", "lora_dropout");
    positive(epochs, "epochs");
    positive(learning_rate, "learning_rate");
    positive(batch_size, "batch_size");
    if (target_modules.empty()) throw ValidationError("sft", "target_modules is empty", "target_modules");
    static const std::set<std::string> kPrecisions = {"bfloat16", "float16", "float32"};
    if (!kPrecisions.count(precision)) {
      throw ValidationError("sft", "precision must be bfloat16, float16 or float32", "precision");
    }
  }

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

inline ordered_json to_json(const TrainingConfig& c) {
  ordered_json j;
  j["lora_rank"] = c.lora_rank;
  j["lora_alpha"] = c.lora_alpha;
  j["lora_dropout"] = c.lora_dropout;
  j["target_modules"] = c.target_modules;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["precision"] = c.precision;
  return j;
}

inline TrainingConfig training_config_from_json(const json& j) {
  static const std::set<std::string> kFields = {"lora_rank",  "lora_alpha",    "lora_dropout", "target_modules",
                                                "epochs",     "learning_rate", "batch_size",   "precision"};
  for (const auto& [k, _] : j.items()) {
    if (!kFields.count(k)) throw ValidationError("sft", "unknown training config field '" + k + "'", k);
  }
  TrainingConfig c;
  try {
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<int>();
    c.lora_dropout = j.at("lora_dropout").get<double>();
    c.target_modules = j.at("target_modules").get<std::vector<std::string>>();
    c.epochs = j.at("epochs").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.precision = j.at("precision").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError("sft", std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline void emit_training_config(const TrainingConfig& cfg, const std::filesystem::path& path) {
  cfg.validate();
  write_file(path, to_json(cfg).dump(2) + "\n");
}

inline TrainingConfig read_training_config(const std::filesystem::path& path) {
  return training_config_from_json(json::parse(read_file(path)));
}

}  // namespace sftkit
