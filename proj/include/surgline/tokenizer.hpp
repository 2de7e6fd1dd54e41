#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace surgline {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  /// Token ids including start/end markers, truncated to `context_length`
  /// with the end marker kept last.
  virtual std::vector<int> encode(const std::string& text, int context_length) const = 0;
};

/// Lower-cased alphanumeric words hashed into a fixed-size table.
/// Id 0 marks start of text, id 1 end of text.
class HashTokenizer : public Tokenizer {
 public:
  explicit HashTokenizer(int vocab_size);
  std::vector<int> encode(const std::string& text, int context_length) const override;

 private:
  int vocab_size_;
};

/// Byte-level BPE as used by CLIP text encoders (vocab.json + merges.txt).
class BpeTokenizer : public Tokenizer {
 public:
  BpeTokenizer(std::unordered_map<std::string, int> vocab, std::vector<std::pair<std::string, std::string>> merges);

  static BpeTokenizer from_text(const std::string& vocab_json, const std::string& merges_txt);

  std::vector<int> encode(const std::string& text, int context_length) const override;
  /// BPE pieces for one pre-tokenized word (for inspection and tests).
  std::vector<std::string> bpe(const std::string& word) const;

 private:
  std::unordered_map<std::string, int> vocab_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
  std::vector<std::string> byte_encoder_;
  int sot_ = 0;
  int eot_ = 0;
};

}  // namespace surgline
