#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "relgen/corpus.hpp"

namespace relgen::tokenizer {

// Bumped whenever the splitting rules change, so runs can cite it.
inline constexpr const char* kTokenizerVersion = "rt-tok-1";

struct TokenizeStats {
    bool unterminated_literal = false;
};

// Splits text into tokens: whitespace-separated, with quoted string literals
// ('...' or "...", backslash escapes honored) kept whole even across spaces,
// punctuation split into single characters, identifiers split at dots, and
// decimal number literals kept whole. An unterminated literal consumes the
// remainder of the text as one token and sets the stats flag.
std::vector<std::string> tokenize(std::string_view text, TokenizeStats* stats = nullptr);

struct Vocabulary {
    std::vector<std::string> id_to_token;            // full table, line number = id
    std::unordered_map<std::string, int> token_to_id;
    int n_ordinary = 0;
    int pad_id = 0, sos_id = 0, eos_id = 0, unk_id = 0;
    int oov_base = 0;
    int oov_slots = 0;

    int size() const { return static_cast<int>(id_to_token.size()); }
    bool is_oov_id(int id) const { return id >= oov_base && id < oov_base + oov_slots; }
    int oov_id(int slot) const { return oov_base + slot; }
    bool is_special_id(int id) const {
        return id == pad_id || id == sos_id || id == eos_id || id == unk_id;
    }
    const std::string& token(int id) const { return id_to_token.at(id); }
    uint64_t hash() const;
};

inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kSos = "<sos>";
inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kUnk = "<unk>";

// Unified vocabulary over tokenized train descriptions and codes combined:
// the max_size most frequent tokens (ties by first occurrence), then the four
// specials, then oov_slots positional slots.
Vocabulary build_vocabulary(const std::vector<corpus::RawPair>& train, int max_size,
                            int oov_slots);

void save_vocabulary(const Vocabulary& v, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

struct EncodedPair {
    std::vector<int> src_ids;
    std::vector<int> tgt_ids;                  // <sos> ... <eos>
    std::map<int, std::string> oov_map;        // slot index -> surface form
    bool oov_overflow = false;
};

// Assigns positional OOV slots to out-of-vocabulary source tokens in order of
// first appearance; the rest of the stream maps through `slots`/vocab.
struct SourceEncoding {
    std::vector<int> ids;
    std::map<int, std::string> oov_map;
    std::unordered_map<std::string, int> slots;
    bool overflow = false;
};
SourceEncoding encode_source(const std::vector<std::string>& tokens, const Vocabulary& vocab);

// <sos> ... <eos> framing; a target OOV token reuses its source slot when the
// surface occurred in the source, otherwise becomes <unk>.
std::vector<int> encode_target(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                               const SourceEncoding& src);

EncodedPair encode_pair(const corpus::RawPair& pair, const Vocabulary& vocab);

// Inverse of encoding for emitting predictions: drops <sos>/<eos>/<pad>,
// resolves OOV ids through oov_map (or renders <oov_j>), joins with spaces.
std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab,
                       const std::map<int, std::string>& oov_map);

std::vector<std::string> decode_ids_tokens(const std::vector<int>& ids, const Vocabulary& vocab,
                                           const std::map<int, std::string>& oov_map);

}  // namespace relgen::tokenizer
