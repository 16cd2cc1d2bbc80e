#pragma once

#include <string>
#include <vector>

namespace relgen::corpus {

// One description/code example. `id` is the line position in the source file.
struct RawPair {
    int id = 0;
    std::string description;
    std::string code;
};

struct Corpus {
    std::vector<RawPair> train;
    std::vector<RawPair> dev;
    std::vector<RawPair> test;
    std::string name;
};

// Parallel-file loader: pair i is (line i of desc file, line i of code file).
// Throws on unreadable files or line-count mismatch.
std::vector<RawPair> load_pairs(const std::string& desc_path, const std::string& code_path);

// JSON-lines loader: one object per line with "intent" and "snippet" keys.
std::vector<RawPair> load_pairs_jsonl(const std::string& path);

// Loads `prefix.desc`/`prefix.code`, or a single .jsonl file if `prefix`
// ends in .jsonl.
std::vector<RawPair> load_split(const std::string& prefix);

// Deterministic shuffle by seed, then contiguous partition. Fractions must be
// positive and sum to 1 (within 1e-9); needs at least 3 pairs.
Corpus split_corpus(const std::vector<RawPair>& pairs, double train_frac, double dev_frac,
                    double test_frac, uint64_t seed);

void write_split(const std::vector<RawPair>& pairs, const std::string& prefix);

}  // namespace relgen::corpus
