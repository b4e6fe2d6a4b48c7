#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>

#include "axlab/run_config.hpp"
#include "axlab/toy_data.hpp"

namespace axlab::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

/// Languages and all three datasets, derived from one seed.
struct GeneratedData {
    std::uint64_t seed = 0;
    int base_vocab = data::kDefaultBaseVocab;
    std::vector<data::ToyLanguageSpec> specs;
    data::Dataset stage1;
    data::Dataset stage2;
    data::Dataset eval;
};

GeneratedData generate_data(const config::LanguagesSection& languages, std::uint64_t seed);

/// stage1.jsonl, stage2.jsonl, eval.jsonl and manifest.json.
void write_generated(const std::filesystem::path& dir, const GeneratedData& data);

/// Entry point behind the `axlab` executable.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace axlab::cli
