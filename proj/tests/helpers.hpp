#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "relgen/tokenizer.hpp"

namespace testutil {

// Hand-built vocabulary: `ordinary` in id order, then the four specials, then
// oov_slots positional slots.
inline relgen::tokenizer::Vocabulary make_vocab(const std::vector<std::string>& ordinary,
                                                int oov_slots) {
    using namespace relgen::tokenizer;
    Vocabulary v;
    v.id_to_token = ordinary;
    v.n_ordinary = static_cast<int>(ordinary.size());
    v.pad_id = v.size();
    v.id_to_token.push_back(kPad);
    v.sos_id = v.size();
    v.id_to_token.push_back(kSos);
    v.eos_id = v.size();
    v.id_to_token.push_back(kEos);
    v.unk_id = v.size();
    v.id_to_token.push_back(kUnk);
    v.oov_base = v.size();
    v.oov_slots = oov_slots;
    for (int j = 0; j < oov_slots; ++j)
        v.id_to_token.push_back("<oov_" + std::to_string(j) + ">");
    for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
    return v;
}

// Fresh scratch directory per test binary; wiped on entry.
inline std::string scratch_dir(const std::string& name) {
    namespace fs = std::filesystem;
    const fs::path p = fs::temp_directory_path() / "relgen_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    os << content;
}

}  // namespace testutil
