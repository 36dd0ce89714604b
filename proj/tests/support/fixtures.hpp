// Shared helpers for unit and acceptance tests: temp directories and a
// synthetic dataset whose images carry their own caption for the echo VLM.
#pragma once

#include <fmt/format.h>
#include <json.hpp>
#include <stdlib.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "keycomp/runner.hpp"

namespace keycomp::testing {

#ifndef KEYCOMP_TEST_DATA
#define KEYCOMP_TEST_DATA "tests"
#endif

inline std::filesystem::path test_data(const std::string& rel) { return std::filesystem::path(KEYCOMP_TEST_DATA) / rel; }

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "keycomp-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct SyntheticPair {
  std::string caption_0;
  std::string caption_1;
};

// "the X is <relation> the Y" / "the Y is <relation> the X": same words,
// swapped roles, neither caption contained in the other.
inline std::vector<SyntheticPair> synthetic_pairs(int n) {
  static const char* nouns[] = {"cat",   "dog",   "horse", "bird",  "chair", "table", "lamp",
                                "apple", "train", "boat",  "child", "tree",  "clock"};
  static const char* relations[] = {"above", "below", "behind", "beside", "inside"};
  std::vector<SyntheticPair> out;
  constexpr int kNouns = static_cast<int>(std::size(nouns));
  for (int i = 0; i < n; ++i) {
    const char* x = nouns[i % kNouns];
    const char* y = nouns[(i * 5 + 3) % kNouns];
    if (x == y) y = nouns[(i + 1) % kNouns];
    const char* rel = relations[i % std::size(relations)];
    out.push_back({fmt::format("the {} is {} the {}", x, rel, y), fmt::format("the {} is {} the {}", y, rel, x)});
  }
  return out;
}

struct SyntheticDataset {
  std::filesystem::path metadata;
  std::filesystem::path images_root;
  std::vector<SyntheticPair> pairs;
};

// Images are small text files "GT:<caption>" with a .png name.
inline SyntheticDataset write_synthetic_dataset(const std::filesystem::path& dir, int n) {
  SyntheticDataset ds;
  ds.metadata = dir / "metadata.jsonl";
  ds.images_root = dir / "images";
  ds.pairs = synthetic_pairs(n);
  std::filesystem::create_directories(ds.images_root);
  std::string lines;
  for (int i = 0; i < n; ++i) {
    const auto& p = ds.pairs[static_cast<std::size_t>(i)];
    for (int j = 0; j < 2; ++j) {
      write_text(ds.images_root / fmt::format("ex_{}_img_{}.png", i, j),
                 fmt::format("GT:{}\n", j == 0 ? p.caption_0 : p.caption_1));
    }
    lines += nlohmann::json{{"id", i},
                            {"caption_0", p.caption_0},
                            {"caption_1", p.caption_1},
                            {"image_0", fmt::format("ex_{}_img_0.png", i)},
                            {"image_1", fmt::format("ex_{}_img_1.png", i)}}
                 .dump();
    lines += '\n';
  }
  write_text(ds.metadata, lines);
  return ds;
}

// Echo VLM + rule LLM over the synthetic dataset, three selection runs.
inline ExperimentConfig mock_config(const SyntheticDataset& ds, const std::filesystem::path& output_dir) {
  ExperimentConfig c;
  c.name = "mock";
  c.metadata = ds.metadata;
  c.images_root = ds.images_root;
  c.vlm.type = EndpointType::MockEcho;
  c.vlm.model_name = "mock-echo";
  c.llm.type = EndpointType::MockRule;
  c.llm.model_name = "mock-rule";
  c.llm_runs = 3;
  c.mode = ReplayMode::Record;
  c.output_dir = output_dir;
  c.fixed_clock = "2024-01-01T00:00:00Z";
  return c;
}

}  // namespace keycomp::testing
