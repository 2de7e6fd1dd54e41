#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "surgline/common.hpp"

namespace surgline {

enum class Task { gesture, phase };

std::string to_string(Task task);
Task task_from_string(std::string_view name);

/// Number of classes a vocabulary for `task` must carry (15 gestures, 7 phases).
std::size_t expected_class_count(Task task);

struct ClassEntry {
  ClassId id;
  std::string canonical;
  std::vector<std::string> paraphrases;  // exactly 4

  bool operator==(const ClassEntry&) const = default;
};

enum class PromptMode { canonical_only, all_texts };

/// Text bank for one task. Immutable once constructed.
class ClassVocabulary {
 public:
  /// Validates every entry invariant; throws ValidationError naming the class.
  ClassVocabulary(Task task, std::vector<ClassEntry> entries, std::string note = {});

  Task task() const { return task_; }
  const std::vector<ClassEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const std::string& note() const { return note_; }

  std::optional<std::size_t> index_of(std::string_view id) const;
  /// Throws ValidationError("unknown class_id ...") when absent.
  std::size_t require_index(std::string_view id) const;
  const ClassEntry& entry(std::string_view id) const { return entries_[require_index(id)]; }
  std::vector<ClassId> class_ids() const;

  bool operator==(const ClassVocabulary& other) const {
    return task_ == other.task_ && entries_ == other.entries_;
  }

 private:
  Task task_;
  std::vector<ClassEntry> entries_;
  std::string note_;
};

ClassVocabulary load_vocabulary(const std::filesystem::path& path);
ClassVocabulary parse_vocabulary(std::string_view json_text);
std::string serialize_vocabulary(const ClassVocabulary& vocab);
void save_vocabulary(const ClassVocabulary& vocab, const std::filesystem::path& path);

/// canonical_only -> [canonical]; all_texts -> canonical followed by the 4 paraphrases.
std::vector<std::string> prompts_for_class(const ClassVocabulary& vocab, std::string_view class_id,
                                           PromptMode mode);

/// Sentence used in timelines and reports; always the canonical description.
const std::string& narrative_for(const ClassVocabulary& vocab, std::string_view class_id);

/// Directory holding the bundled text banks (set at build time, overridable
/// through SURGLINE_DATA_DIR).
std::filesystem::path bundled_data_dir();
ClassVocabulary bundled_vocabulary(Task task);

}  // namespace surgline
