#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cllab/errors.hpp"

namespace cllab {

struct Example {
    std::vector<int32_t> prompt;
    std::vector<int32_t> target;

    bool operator==(const Example&) const = default;
};

struct GeneratorSpec {
    std::string kind;
    uint64_t seed = 0;
    int64_t size = 0;
};

/// Seeded, reproducible set of (prompt, target) token sequences.
struct TaskDataset {
    std::string label;
    std::string split;  // "train" | "test"
    GeneratorSpec gen;
    std::vector<Example> examples;

    int64_t size() const { return static_cast<int64_t>(examples.size()); }
};

// Line-delimited JSON: one {"prompt": [...], "target": [...]} per line.
void write_jsonl(const std::filesystem::path& file, const std::vector<Example>& examples);
std::vector<Example> read_jsonl(const std::filesystem::path& file);

/// Dataset directory: spec.json + train.jsonl + test.jsonl.
void save_dataset_dir(const std::filesystem::path& dir, const TaskDataset& train,
                      const TaskDataset& test);
std::pair<TaskDataset, TaskDataset> load_dataset_dir(const std::filesystem::path& dir);

/// Single-split dataset directory (pretraining corpus): spec.json + data.jsonl.
void save_corpus_dir(const std::filesystem::path& dir, const TaskDataset& corpus);
TaskDataset load_corpus_dir(const std::filesystem::path& dir);

}  // namespace cllab
