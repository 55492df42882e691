#include "cllab/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "cllab/tensor_io.hpp"

namespace cllab {

namespace fs = std::filesystem;
using nlohmann::json;

void write_jsonl(const fs::path& file, const std::vector<Example>& examples) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + file.string());
    for (const Example& e : examples) {
        json j;
        j["prompt"] = e.prompt;
        j["target"] = e.target;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("short write: " + file.string());
}

std::vector<Example> read_jsonl(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + file.string());
    std::vector<Example> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            Example e;
            e.prompt = j.at("prompt").get<std::vector<int32_t>>();
            e.target = j.at("target").get<std::vector<int32_t>>();
            out.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw FormatError(file.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

namespace {
json spec_json(const TaskDataset& train, const TaskDataset* test) {
    json j;
    j["label"] = train.label;
    j["kind"] = train.gen.kind;
    j["seed"] = train.gen.seed;
    j["train_size"] = train.size();
    if (test) j["test_size"] = test->size();
    return j;
}
}  // namespace

void save_dataset_dir(const fs::path& dir, const TaskDataset& train, const TaskDataset& test) {
    fs::create_directories(dir);
    write_text_file(dir / "spec.json", spec_json(train, &test).dump(2) + "\n");
    write_jsonl(dir / "train.jsonl", train.examples);
    write_jsonl(dir / "test.jsonl", test.examples);
}

std::pair<TaskDataset, TaskDataset> load_dataset_dir(const fs::path& dir) {
    json j;
    try {
        j = json::parse(read_text_file(dir / "spec.json"));
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + "/spec.json: " + e.what());
    }
    TaskDataset train, test;
    train.label = test.label = j.at("label").get<std::string>();
    train.gen.kind = test.gen.kind = j.value("kind", "");
    train.gen.seed = test.gen.seed = j.value("seed", uint64_t{0});
    train.split = "train";
    test.split = "test";
    train.examples = read_jsonl(dir / "train.jsonl");
    test.examples = read_jsonl(dir / "test.jsonl");
    train.gen.size = train.size();
    test.gen.size = test.size();
    return {std::move(train), std::move(test)};
}

void save_corpus_dir(const fs::path& dir, const TaskDataset& corpus) {
    fs::create_directories(dir);
    write_text_file(dir / "spec.json", spec_json(corpus, nullptr).dump(2) + "\n");
    write_jsonl(dir / "data.jsonl", corpus.examples);
}

TaskDataset load_corpus_dir(const fs::path& dir) {
    json j;
    try {
        j = json::parse(read_text_file(dir / "spec.json"));
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + "/spec.json: " + e.what());
    }
    TaskDataset d;
    d.label = j.at("label").get<std::string>();
    d.gen.kind = j.value("kind", "");
    d.gen.seed = j.value("seed", uint64_t{0});
    d.split = "train";
    d.examples = read_jsonl(dir / "data.jsonl");
    d.gen.size = d.size();
    return d;
}

}  // namespace cllab
