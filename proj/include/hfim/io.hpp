#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/evalkit.hpp"
#include "hfim/vocab.hpp"

namespace hfim {

inline constexpr const char* kToolVersion = "0.1.0";

// Corpus files are JSON Lines of {"doc_id": ..., "text": ...}; tokens are
// derived from the text on load so the files stay human-readable.

inline void write_corpus_jsonl(const std::string& path,
                               const std::vector<Document>& docs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& doc : docs) {
    nlohmann::json j{{"doc_id", doc.doc_id}, {"text", detokenize(doc.tokens)}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

inline std::vector<Document> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Document> docs;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      docs.push_back(make_document(j.at("doc_id").get<std::string>(),
                                   j.at("text").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (docs.empty()) throw IoError(path + ": no documents");
  return docs;
}

// Task files are JSON Lines of {"doc_id", "prefix", "middle", "suffix"} with
// the three parts as text.

inline void write_tasks_jsonl(const std::string& path,
                              const std::vector<InfillTask>& tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& t : tasks) {
    nlohmann::json j{{"doc_id", t.doc_id},
                     {"prefix", detokenize(t.prefix)},
                     {"middle", detokenize(t.middle)},
                     {"suffix", detokenize(t.suffix)}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

inline std::vector<InfillTask> read_tasks_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<InfillTask> tasks;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      InfillTask t;
      t.doc_id = j.at("doc_id").get<std::string>();
      t.prefix = tokenize(j.at("prefix").get<std::string>());
      t.middle = tokenize(j.at("middle").get<std::string>());
      t.suffix = tokenize(j.at("suffix").get<std::string>());
      validate(t);
      tasks.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (tasks.empty()) throw IoError(path + ": no tasks");
  return tasks;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("short write to " + path);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// Run provenance, written on success and on failure.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::array();
  nlohmann::json seeds = nlohmann::json::object();
  std::string status = "ok";  // "ok" | "error"
  std::string error;
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j{{"tool_version", kToolVersion},
                   {"command", m.command},
                   {"config", m.config},
                   {"inputs", m.inputs},
                   {"outputs", m.outputs},
                   {"seeds", m.seeds},
                   {"status", m.status},
                   {"wall_ms", m.wall_ms}};
  if (!m.error.empty()) j["error"] = m.error;
  return j;
}

// Exclusive per-directory lock; concurrent runs over the same --out fail
// fast instead of interleaving artifacts.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw IoError("output directory is locked by another run (or the lock is stale): " +
                    path_.string());
    }
    const std::string pid = "pid " + std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace hfim
