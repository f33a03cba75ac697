// Copyright (c) 2026 The svpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tab-separated text files: manifests, speaker attributes, trial lists,
// score files and embedding tables. Errors carry the file name and line.

#pragma once

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/metrics.hpp"

namespace svpool {

struct ManifestEntry {
  std::string utterance_id;
  std::string speaker_id;
  std::string path;  // as written; relative paths resolve against the file's directory
  std::size_t frames = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }
};

struct SpeakerAttr {
  std::string speaker_id;
  std::map<std::string, std::string> strata;
};

// Indices refer to Manifest::entries.
struct TrialPair {
  std::size_t enroll = 0;
  std::size_t test = 0;
  int label = 0;
  std::string stratum;  // e.g. "accent=same;gender=diff", empty for positives
};

namespace detail {

inline std::vector<std::string_view> SplitTabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] inline void LineError(const std::string& file, std::size_t line,
                                   const std::string& msg) {
  throw DataError(file + ":" + std::to_string(line) + ": " + msg);
}

// Calls fn(fields, line_number) for each non-empty, non-comment line.
template <typename Fn>
void ForEachLine(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    fn(SplitTabs(line), n);
  }
}

inline std::ofstream OpenText(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  return os;
}

inline void CloseText(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

}  // namespace detail

// Shortest representation that parses back to the same double.
inline std::string FormatDouble(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string FormatFloat(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline bool ParseDouble(std::string_view s, double& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

inline bool ParseSize(std::string_view s, std::size_t& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

// utterance_id <TAB> speaker_id <TAB> path <TAB> T
inline Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  m.base_dir = path.parent_path();
  std::set<std::string> seen;
  const std::string file = path.string();
  detail::ForEachLine(path, [&](const auto& f, std::size_t line) {
    if (f.size() != 4) detail::LineError(file, line, "expected 4 tab-separated fields");
    ManifestEntry e{std::string(f[0]), std::string(f[1]), std::string(f[2]), 0};
    if (e.utterance_id.empty() || e.speaker_id.empty() || e.path.empty()) {
      detail::LineError(file, line, "empty field");
    }
    if (!ParseSize(f[3], e.frames) || e.frames == 0) {
      detail::LineError(file, line, "frame count must be a positive integer");
    }
    if (!seen.insert(e.utterance_id).second) {
      detail::LineError(file, line, "duplicate utterance '" + e.utterance_id + "'");
    }
    m.entries.push_back(std::move(e));
  });
  return m;
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestEntry>& entries) {
  auto os = detail::OpenText(path);
  for (const auto& e : entries) {
    os << e.utterance_id << '\t' << e.speaker_id << '\t' << e.path << '\t' << e.frames << '\n';
  }
  detail::CloseText(os, path);
}

// Throws when a manifest file does not exist.
inline void CheckManifestPaths(const Manifest& m) {
  for (const auto& e : m.entries) {
    if (!std::filesystem::exists(m.resolve(e))) {
      throw DataError("manifest entry '" + e.utterance_id + "': missing feature file '" +
                      m.resolve(e).string() + "'");
    }
  }
}

// speaker_id <TAB> key=value;key=value
inline std::vector<SpeakerAttr> read_speakers(const std::filesystem::path& path) {
  std::vector<SpeakerAttr> out;
  std::set<std::string> seen;
  const std::string file = path.string();
  detail::ForEachLine(path, [&](const auto& f, std::size_t line) {
    if (f.empty() || f.size() > 2) detail::LineError(file, line, "expected speaker_id and strata");
    SpeakerAttr s{std::string(f[0]), {}};
    if (!seen.insert(s.speaker_id).second) {
      detail::LineError(file, line, "duplicate speaker '" + s.speaker_id + "'");
    }
    if (f.size() == 2 && !f[1].empty()) {
      std::string_view rest = f[1];
      while (!rest.empty()) {
        const auto semi = rest.find(';');
        const auto kv = rest.substr(0, semi);
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos || eq == 0) {
          detail::LineError(file, line, "stratum must be key=value");
        }
        s.strata[std::string(kv.substr(0, eq))] = std::string(kv.substr(eq + 1));
        rest = semi == std::string_view::npos ? std::string_view{} : rest.substr(semi + 1);
      }
    }
    out.push_back(std::move(s));
  });
  return out;
}

inline void write_speakers(const std::filesystem::path& path,
                           const std::vector<SpeakerAttr>& speakers) {
  auto os = detail::OpenText(path);
  for (const auto& s : speakers) {
    os << s.speaker_id << '\t';
    bool first = true;
    for (const auto& [k, v] : s.strata) {
      if (!first) os << ';';
      os << k << '=' << v;
      first = false;
    }
    os << '\n';
  }
  detail::CloseText(os, path);
}

// label <TAB> enroll_path <TAB> test_path, with paths as they appear in the
// manifest.
inline void write_trials(const std::filesystem::path& path, const std::vector<TrialPair>& trials,
                         const Manifest& manifest) {
  auto os = detail::OpenText(path);
  for (const auto& t : trials) {
    os << t.label << '\t' << manifest.entries.at(t.enroll).path << '\t'
       << manifest.entries.at(t.test).path << '\n';
  }
  detail::CloseText(os, path);
}

// Maps each trial path back to a manifest entry.
inline std::vector<TrialPair> read_trials(const std::filesystem::path& path,
                                          const Manifest& manifest) {
  std::unordered_map<std::string, std::size_t> by_path;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    by_path.emplace(manifest.entries[i].path, i);
  }
  std::vector<TrialPair> out;
  const std::string file = path.string();
  detail::ForEachLine(path, [&](const auto& f, std::size_t line) {
    if (f.size() != 3) detail::LineError(file, line, "expected label, enroll path, test path");
    TrialPair t;
    if (f[0] == "1") {
      t.label = 1;
    } else if (f[0] == "0") {
      t.label = 0;
    } else {
      detail::LineError(file, line, "label must be 0 or 1");
    }
    for (int side = 0; side < 2; ++side) {
      auto it = by_path.find(std::string(f[1 + side]));
      if (it == by_path.end()) {
        detail::LineError(file, line, "path '" + std::string(f[1 + side]) + "' is not in the manifest");
      }
      (side == 0 ? t.enroll : t.test) = it->second;
    }
    out.push_back(t);
  });
  return out;
}

// label <TAB> score
inline void write_scores(const std::filesystem::path& path, const std::vector<ScoredTrial>& s) {
  auto os = detail::OpenText(path);
  for (const auto& t : s) os << t.label << '\t' << FormatDouble(t.score) << '\n';
  detail::CloseText(os, path);
}

inline std::vector<ScoredTrial> read_scores(const std::filesystem::path& path) {
  std::vector<ScoredTrial> out;
  const std::string file = path.string();
  detail::ForEachLine(path, [&](const auto& f, std::size_t line) {
    if (f.size() != 2) detail::LineError(file, line, "expected label and score");
    ScoredTrial t{0.0, 0};
    if (f[0] == "1") {
      t.label = 1;
    } else if (f[0] != "0") {
      detail::LineError(file, line, "label must be 0 or 1");
    }
    if (!ParseDouble(f[1], t.score) || !std::isfinite(t.score)) {
      detail::LineError(file, line, "score is not a finite number");
    }
    out.push_back(t);
  });
  return out;
}

// utterance_id <TAB> comma-separated values
inline void write_embeddings(const std::filesystem::path& path,
                             const std::vector<std::string>& ids,
                             const std::vector<std::vector<float>>& embeddings) {
  auto os = detail::OpenText(path);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    os << ids[i] << '\t';
    for (std::size_t j = 0; j < embeddings[i].size(); ++j) {
      if (j) os << ',';
      os << FormatFloat(embeddings[i][j]);
    }
    os << '\n';
  }
  detail::CloseText(os, path);
}

}  // namespace svpool
