#include "surgline/tokenizer.hpp"

#include <cctype>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "surgline/common.hpp"

namespace surgline {

namespace {

std::vector<int> wrap(std::vector<int> body, int sot, int eot, int context_length) {
  if (context_length < 2) throw ValidationError("context length must be >= 2");
  if (static_cast<int>(body.size()) > context_length - 2) body.resize(static_cast<std::size_t>(context_length - 2));
  std::vector<int> ids;
  ids.reserve(body.size() + 2);
  ids.push_back(sot);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(eot);
  return ids;
}

std::string utf8(unsigned cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

// GPT-2/CLIP reversible byte -> printable unicode mapping.
std::vector<std::string> make_byte_encoder() {
  std::vector<int> printable;
  for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) printable.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) printable.push_back(b);
  const std::set<int> direct(printable.begin(), printable.end());
  std::vector<std::string> enc(256);
  int extra = 0;
  for (int b = 0; b < 256; ++b) {
    enc[static_cast<std::size_t>(b)] = direct.count(b) ? utf8(static_cast<unsigned>(b)) : utf8(256u + extra++);
  }
  return enc;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

// Approximates CLIP's pre-tokenization pattern: contractions, letter runs,
// single digits, and runs of other non-space characters.
std::vector<std::string> pretokenize(const std::string& text) {
  static const char* kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    bool matched = false;
    if (c == '\'') {
      for (const char* k : kContractions) {
        const std::string_view kv(k);
        if (text.compare(i, kv.size(), kv) == 0) {
          words.emplace_back(kv);
          i += kv.size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    std::size_t j = i + 1;
    if (is_letter(c)) {
      while (j < text.size() && is_letter(static_cast<unsigned char>(text[j]))) ++j;
    } else if (std::isdigit(c)) {
      // one digit per token
    } else {
      while (j < text.size()) {
        const auto d = static_cast<unsigned char>(text[j]);
        if (std::isspace(d) || is_letter(d) || std::isdigit(d)) break;
        ++j;
      }
    }
    words.push_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// Splits a UTF-8 string into code point substrings.
std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace

HashTokenizer::HashTokenizer(int vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < 3) throw ValidationError("hash tokenizer needs at least 3 ids");
}

std::vector<int> HashTokenizer::encode(const std::string& text, int context_length) const {
  std::vector<int> body;
  std::string word;
  const auto flush = [&] {
    if (word.empty()) return;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : word) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    body.push_back(2 + static_cast<int>(h % static_cast<std::uint64_t>(vocab_size_ - 2)));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) word.push_back(static_cast<char>(std::tolower(c)));
    else flush();
  }
  flush();
  return wrap(std::move(body), 0, 1, context_length);
}

BpeTokenizer::BpeTokenizer(std::unordered_map<std::string, int> vocab,
                           std::vector<std::pair<std::string, std::string>> merges)
    : vocab_(std::move(vocab)), byte_encoder_(make_byte_encoder()) {
  for (std::size_t r = 0; r < merges.size(); ++r) ranks_.emplace(merges[r], static_cast<int>(r));
  const auto sot = vocab_.find("<|startoftext|>");
  const auto eot = vocab_.find("<|endoftext|>");
  if (sot == vocab_.end() || eot == vocab_.end()) throw ValidationError("BPE vocab lacks start/end tokens");
  sot_ = sot->second;
  eot_ = eot->second;
}

BpeTokenizer BpeTokenizer::from_text(const std::string& vocab_json, const std::string& merges_txt) {
  std::unordered_map<std::string, int> vocab;
  try {
    const auto doc = nlohmann::json::parse(vocab_json);
    for (auto it = doc.begin(); it != doc.end(); ++it) vocab[it.key()] = it.value().get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("vocab.json: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& raw : split(merges_txt, '\n')) {
    const auto line = trim(raw);
    if (line.empty() || line.starts_with("#version")) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw ParseError("merges.txt: bad line '" + line + "'");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeTokenizer(std::move(vocab), std::move(merges));
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
  std::string mapped;
  for (unsigned char c : word) mapped += byte_encoder_[c];
  auto parts = utf8_chars(mapped);
  if (parts.empty()) return parts;
  parts.back() += "</w>";
  while (parts.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      const auto it = ranks_.find({parts[i], parts[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    // Merge every occurrence of the best pair, left to right.
    const auto first = parts[best], second = parts[best + 1];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == first && parts[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(parts[i++]);
      }
    }
    parts = std::move(merged);
  }
  return parts;
}

std::vector<int> BpeTokenizer::encode(const std::string& text, int context_length) const {
  std::vector<int> body;
  for (const auto& word : pretokenize(normalize_text(text))) {
    for (const auto& piece : bpe(word)) {
      const auto it = vocab_.find(piece);
      if (it == vocab_.end()) throw ValidationError("BPE piece '" + piece + "' missing from vocab");
      body.push_back(it->second);
    }
  }
  return wrap(std::move(body), sot_, eot_, context_length);
}

}  // namespace surgline
