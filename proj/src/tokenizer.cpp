#include "relgen/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "relgen/util.hpp"

namespace relgen::tokenizer {

namespace {

bool is_ident_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

bool is_punct_char(char c) {
    static const std::string punct = "()[]{},:;=+-*/%<>!&|^~@";
    return punct.find(c) != std::string::npos;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)); }

bool all_digits(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c < '0' || c > '9') return false;
    return true;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text, TokenizeStats* stats) {
    std::vector<std::string> out;
    std::string cur;  // identifier/number run in progress
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };

    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        char c = text[i];
        if (c == '\'' || c == '"') {
            flush();
            char quote = c;
            size_t j = i + 1;
            bool closed = false;
            while (j < n) {
                if (text[j] == '\\' && j + 1 < n) {
                    j += 2;
                    continue;
                }
                if (text[j] == quote) {
                    closed = true;
                    break;
                }
                ++j;
            }
            if (closed) {
                out.emplace_back(text.substr(i, j - i + 1));
                i = j + 1;
            } else {
                // unterminated literal: the remainder becomes one token
                out.emplace_back(text.substr(i));
                if (stats) stats->unterminated_literal = true;
                i = n;
            }
        } else if (is_space(c)) {
            flush();
            ++i;
        } else if (c == '.') {
            // a dot stays inside a decimal number literal; otherwise it splits
            if (all_digits(cur) && i + 1 < n && text[i + 1] >= '0' && text[i + 1] <= '9') {
                cur += c;
            } else {
                flush();
                out.emplace_back(1, c);
            }
            ++i;
        } else if (is_ident_char(c)) {
            // a fresh identifier run after "3." style input still splits the dot,
            // handled above; digits after a number-dot continue the literal
            cur += c;
            ++i;
        } else if (is_punct_char(c)) {
            flush();
            out.emplace_back(1, c);
            ++i;
        } else {
            // any other printable character stands alone (backticks, ?, #, ...)
            flush();
            out.emplace_back(1, c);
            ++i;
        }
    }
    flush();
    return out;
}

uint64_t Vocabulary::hash() const {
    uint64_t h = 14695981039346656037ull;
    for (const auto& t : id_to_token) {
        h = fnv1a64(t, h);
        h = fnv1a64("\n", h);
    }
    return h;
}

Vocabulary build_vocabulary(const std::vector<corpus::RawPair>& train, int max_size,
                            int oov_slots) {
    if (max_size < 10) throw std::invalid_argument("max_size must be >= 10");
    if (oov_slots < 1) throw std::invalid_argument("oov_slots must be >= 1");
    if (train.empty()) throw std::runtime_error("cannot build vocabulary from empty training set");

    TokenCounter counter;
    for (const auto& p : train) {
        for (auto& t : tokenize(p.description)) counter.add(t);
        for (auto& t : tokenize(p.code)) counter.add(t);
    }

    Vocabulary v;
    auto order = counter.ranked();
    size_t keep = std::min<size_t>(order.size(), static_cast<size_t>(max_size));
    for (size_t r = 0; r < keep; ++r) {
        const std::string& tok = counter.tokens[order[r]];
        v.token_to_id[tok] = static_cast<int>(v.id_to_token.size());
        v.id_to_token.push_back(tok);
    }
    v.n_ordinary = static_cast<int>(v.id_to_token.size());

    auto add_special = [&](const char* s) {
        int id = static_cast<int>(v.id_to_token.size());
        v.token_to_id[s] = id;
        v.id_to_token.push_back(s);
        return id;
    };
    v.pad_id = add_special(kPad);
    v.sos_id = add_special(kSos);
    v.eos_id = add_special(kEos);
    v.unk_id = add_special(kUnk);

    v.oov_base = static_cast<int>(v.id_to_token.size());
    v.oov_slots = oov_slots;
    for (int j = 0; j < oov_slots; ++j) {
        std::string s = "<oov_" + std::to_string(j) + ">";
        v.token_to_id[s] = static_cast<int>(v.id_to_token.size());
        v.id_to_token.push_back(s);
    }
    return v;
}

void save_vocabulary(const Vocabulary& v, const std::string& path) {
    std::string body;
    for (const auto& t : v.id_to_token) {
        body += t;
        body += '\n';
    }
    write_text_file(path, body);
}

Vocabulary load_vocabulary(const std::string& path) {
    auto lines = read_lines(path);
    Vocabulary v;
    v.id_to_token = lines;
    for (size_t i = 0; i < lines.size(); ++i) v.token_to_id[lines[i]] = static_cast<int>(i);

    auto it = v.token_to_id.find(kPad);
    if (it == v.token_to_id.end()) throw std::runtime_error("vocabulary file missing <pad>: " + path);
    v.n_ordinary = it->second;
    v.pad_id = v.n_ordinary;
    v.sos_id = v.pad_id + 1;
    v.eos_id = v.pad_id + 2;
    v.unk_id = v.pad_id + 3;
    v.oov_base = v.pad_id + 4;
    v.oov_slots = static_cast<int>(lines.size()) - v.oov_base;
    if (v.oov_slots < 1 || v.id_to_token.at(v.sos_id) != kSos ||
        v.id_to_token.at(v.eos_id) != kEos || v.id_to_token.at(v.unk_id) != kUnk ||
        v.id_to_token.at(v.oov_base) != "<oov_0>") {
        throw std::runtime_error("malformed vocabulary file: " + path);
    }
    return v;
}

SourceEncoding encode_source(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
    SourceEncoding enc;
    enc.ids.reserve(tokens.size());
    for (const auto& tok : tokens) {
        // Ordinary and special ids map directly (specials only occur when a
        // caller injects one, e.g. the naive-retrieval separator); OOV slots
        // are assigned by first appearance.
        auto it = vocab.token_to_id.find(tok);
        if (it != vocab.token_to_id.end() && !vocab.is_oov_id(it->second)) {
            enc.ids.push_back(it->second);
            continue;
        }
        auto slot_it = enc.slots.find(tok);
        if (slot_it == enc.slots.end()) {
            int slot = static_cast<int>(enc.slots.size());
            if (slot >= vocab.oov_slots) {
                enc.overflow = true;
                enc.ids.push_back(vocab.unk_id);
                continue;
            }
            enc.slots.emplace(tok, slot);
            enc.oov_map[slot] = tok;
            enc.ids.push_back(vocab.oov_id(slot));
        } else {
            enc.ids.push_back(vocab.oov_id(slot_it->second));
        }
    }
    return enc;
}

std::vector<int> encode_target(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                               const SourceEncoding& src) {
    std::vector<int> ids;
    ids.reserve(tokens.size() + 2);
    ids.push_back(vocab.sos_id);
    for (const auto& tok : tokens) {
        auto it = vocab.token_to_id.find(tok);
        if (it != vocab.token_to_id.end() && it->second < vocab.n_ordinary) {
            ids.push_back(it->second);
            continue;
        }
        auto slot_it = src.slots.find(tok);
        if (slot_it != src.slots.end())
            ids.push_back(vocab.oov_id(slot_it->second));
        else
            ids.push_back(vocab.unk_id);
    }
    ids.push_back(vocab.eos_id);
    return ids;
}

EncodedPair encode_pair(const corpus::RawPair& pair, const Vocabulary& vocab) {
    auto src_tokens = tokenize(pair.description);
    auto tgt_tokens = tokenize(pair.code);

    SourceEncoding src = encode_source(src_tokens, vocab);

    EncodedPair enc;
    enc.tgt_ids = encode_target(tgt_tokens, vocab, src);
    enc.src_ids = std::move(src.ids);
    enc.oov_map = std::move(src.oov_map);
    enc.oov_overflow = src.overflow;
    return enc;
}

std::vector<std::string> decode_ids_tokens(const std::vector<int>& ids, const Vocabulary& vocab,
                                           const std::map<int, std::string>& oov_map) {
    std::vector<std::string> toks;
    for (int id : ids) {
        if (id == vocab.pad_id || id == vocab.sos_id || id == vocab.eos_id) continue;
        if (vocab.is_oov_id(id)) {
            int slot = id - vocab.oov_base;
            auto it = oov_map.find(slot);
            toks.push_back(it != oov_map.end() ? it->second
                                               : "<oov_" + std::to_string(slot) + ">");
        } else if (id >= 0 && id < vocab.size()) {
            toks.push_back(vocab.id_to_token[id]);
        } else {
            toks.push_back(kUnk);
        }
    }
    return toks;
}

std::string decode_ids(const std::vector<int>& ids, const Vocabulary& vocab,
                       const std::map<int, std::string>& oov_map) {
    auto toks = decode_ids_tokens(ids, vocab, oov_map);
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

}  // namespace relgen::tokenizer
