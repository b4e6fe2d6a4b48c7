#pragma once

// On-disk formats for the toy corpora: JSON-lines examples plus a
// manifest.json sidecar describing the language set and each file's counts.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "axlab/toy_data.hpp"

namespace axlab::data {

using ordered_json = nlohmann::ordered_json;

ordered_json example_to_json(const InstructionExample& ex);
InstructionExample example_from_json(const nlohmann::json& j);

void write_jsonl(const std::filesystem::path& path, const Dataset& data);
Dataset read_jsonl(const std::filesystem::path& path);

ordered_json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// Contents of manifest.json written next to the dataset files.
struct DataBundle {
    int format_version = kFormatVersion;
    std::uint64_t seed = 0;
    int base_vocab = kDefaultBaseVocab;
    std::vector<ToyLanguageSpec> languages;
    std::map<std::string, DatasetManifest> files;  // file name -> counts
};

void write_bundle(const std::filesystem::path& path, const DataBundle& bundle);
DataBundle read_bundle(const std::filesystem::path& path);

struct LoadedDataset {
    Dataset data;
    DatasetManifest manifest;
    std::vector<ToyLanguageSpec> specs;
};

/// Reads a JSONL file and the manifest.json in the same directory, then checks
/// that counts reconcile and every example satisfies its span invariants.
LoadedDataset load_dataset(const std::filesystem::path& jsonl_path);

/// Writes text atomically enough for our purposes (truncate + write); throws IoError.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace axlab::data
