#include "surgline/vocab.hpp"

#include <cctype>
#include <cstdlib>
#include <set>

#include <nlohmann/json.hpp>

#ifndef SURGLINE_DATA_DIR
#define SURGLINE_DATA_DIR "data"
#endif

namespace surgline {

namespace {

bool valid_class_id(std::string_view id) {
  if (id.size() < 2 || !std::isalpha(static_cast<unsigned char>(id[0]))) return false;
  for (std::size_t i = 1; i < id.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(id[i]))) return false;
  }
  return true;
}

}  // namespace

std::string to_string(Task task) { return task == Task::gesture ? "gesture" : "phase"; }

Task task_from_string(std::string_view name) {
  if (name == "gesture") return Task::gesture;
  if (name == "phase") return Task::phase;
  throw ValidationError("unknown task '" + std::string(name) + "'");
}

std::size_t expected_class_count(Task task) { return task == Task::gesture ? 15 : 7; }

ClassVocabulary::ClassVocabulary(Task task, std::vector<ClassEntry> entries, std::string note)
    : task_(task), entries_(std::move(entries)), note_(std::move(note)) {
  const auto expected = expected_class_count(task_);
  if (entries_.size() != expected) {
    throw ValidationError("wrong entry count: expected " + std::to_string(expected) + ", got " +
                          std::to_string(entries_.size()));
  }
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (e.id.empty()) throw ValidationError("missing class_id");
    if (!valid_class_id(e.id)) throw ValidationError("malformed class_id '" + e.id + "'");
    if (!seen.insert(e.id).second) throw ValidationError("duplicate class_id '" + e.id + "'");
    if (e.canonical.empty()) throw ValidationError(e.id + ": empty canonical description");
    if (e.paraphrases.size() != 4) {
      throw ValidationError(e.id + ": expected 4 paraphrases, got " +
                            std::to_string(e.paraphrases.size()));
    }
    std::set<std::string> texts{e.canonical};
    for (const auto& p : e.paraphrases) {
      if (p.empty()) throw ValidationError(e.id + ": empty paraphrase");
      if (!texts.insert(p).second) throw ValidationError(e.id + ": duplicate text '" + p + "'");
    }
  }
}

std::optional<std::size_t> ClassVocabulary::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id == id) return i;
  }
  return std::nullopt;
}

std::size_t ClassVocabulary::require_index(std::string_view id) const {
  if (auto idx = index_of(id)) return *idx;
  throw ValidationError("unknown class_id '" + std::string(id) + "' for " + to_string(task_) +
                        " vocabulary");
}

std::vector<ClassId> ClassVocabulary::class_ids() const {
  std::vector<ClassId> ids;
  ids.reserve(entries_.size());
  for (const auto& e : entries_) ids.push_back(e.id);
  return ids;
}

ClassVocabulary parse_vocabulary(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("vocabulary: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("task") || !doc.contains("classes") ||
      !doc["classes"].is_array()) {
    throw ParseError("vocabulary: expected object with 'task' and 'classes'");
  }
  const Task task = task_from_string(doc["task"].get<std::string>());
  std::vector<ClassEntry> entries;
  std::size_t position = 0;
  for (const auto& c : doc["classes"]) {
    const std::string where =
        c.contains("id") && c["id"].is_string() ? c["id"].get<std::string>()
                                                : "entry #" + std::to_string(position);
    if (!c.contains("id") || !c["id"].is_string()) throw ValidationError(where + ": missing class_id");
    if (!c.contains("canonical") || !c["canonical"].is_string()) {
      throw ParseError(where + ": missing canonical");
    }
    if (!c.contains("paraphrases") || !c["paraphrases"].is_array()) {
      throw ParseError(where + ": missing paraphrases");
    }
    ClassEntry e;
    e.id = c["id"].get<std::string>();
    e.canonical = c["canonical"].get<std::string>();
    for (const auto& p : c["paraphrases"]) {
      if (!p.is_string()) throw ParseError(where + ": paraphrase is not a string");
      e.paraphrases.push_back(p.get<std::string>());
    }
    entries.push_back(std::move(e));
    ++position;
  }
  std::string note = doc.contains("note") && doc["note"].is_string() ? doc["note"].get<std::string>() : "";
  return ClassVocabulary(task, std::move(entries), std::move(note));
}

ClassVocabulary load_vocabulary(const std::filesystem::path& path) {
  return parse_vocabulary(read_file(path));
}

std::string serialize_vocabulary(const ClassVocabulary& vocab) {
  nlohmann::ordered_json doc;
  doc["task"] = to_string(vocab.task());
  if (!vocab.note().empty()) doc["note"] = vocab.note();
  doc["classes"] = nlohmann::ordered_json::array();
  for (const auto& e : vocab.entries()) {
    nlohmann::ordered_json c;
    c["id"] = e.id;
    c["canonical"] = e.canonical;
    c["paraphrases"] = e.paraphrases;
    doc["classes"].push_back(std::move(c));
  }
  return doc.dump(2) + "\n";
}

void save_vocabulary(const ClassVocabulary& vocab, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_vocabulary(vocab));
}

std::vector<std::string> prompts_for_class(const ClassVocabulary& vocab, std::string_view class_id,
                                           PromptMode mode) {
  const auto& e = vocab.entry(class_id);
  std::vector<std::string> out{e.canonical};
  if (mode == PromptMode::all_texts) {
    out.insert(out.end(), e.paraphrases.begin(), e.paraphrases.end());
  }
  return out;
}

const std::string& narrative_for(const ClassVocabulary& vocab, std::string_view class_id) {
  return vocab.entry(class_id).canonical;
}

std::filesystem::path bundled_data_dir() {
  if (const char* env = std::getenv("SURGLINE_DATA_DIR"); env && *env) return env;
  return SURGLINE_DATA_DIR;
}

ClassVocabulary bundled_vocabulary(Task task) {
  const auto file = task == Task::gesture ? "jigsaws_gestures.json" : "cholec80_phases.json";
  return load_vocabulary(bundled_data_dir() / "vocab" / file);
}

}  // namespace surgline
