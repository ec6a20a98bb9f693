#pragma once

// Atomwise SMILES tokenization, vocabulary handling and a purely
// syntactic validity check (parentheses, ring-closure pairing, bracket
// atoms). No chemistry: no valence, no aromaticity perception.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "retrospec/common.hpp"

namespace retrospec::smiles {

class tokenize_error : public error {
public:
    tokenize_error(const std::string& msg, size_t position)
        : error(msg + " at position " + std::to_string(position)), pos(position) {}
    size_t pos;
};

namespace detail {

// Two-letter elements recognized outside brackets. Cl/Br are the classic
// atomwise cases; the rest keeps the tokenizer total on common organics.
inline bool is_two_letter(char a, char b) {
    return (a == 'C' && b == 'l') || (a == 'B' && b == 'r');
}

inline bool is_single_atom_char(char c) {
    switch (c) {
        case 'B': case 'C': case 'N': case 'O': case 'S': case 'P':
        case 'F': case 'I': case 'H':
        case 'b': case 'c': case 'n': case 'o': case 's': case 'p':
            return true;
        default:
            return false;
    }
}

inline bool is_plain_symbol(char c) {
    switch (c) {
        case '(': case ')': case '.': case '=': case '#': case '-':
        case '+': case '\\': case '/': case ':': case '~': case '@':
        case '?': case '>': case '*': case '$':
            return true;
        default:
            return false;
    }
}

}  // namespace detail

// Atomwise scan: bracket atoms "[...]" are one token, Cl/Br are one
// token, "%NN" two-digit ring closures are one token, everything else is
// a single character.
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < s.size()) {
        char c = s[i];
        if (c == '[') {
            size_t close = s.find(']', i + 1);
            if (close == std::string_view::npos)
                throw tokenize_error("unterminated bracket atom", i);
            if (close == i + 1)
                throw tokenize_error("empty bracket atom", i);
            tokens.emplace_back(s.substr(i, close - i + 1));
            i = close + 1;
        } else if (c == '%') {
            if (i + 2 >= s.size() || !isdigit(static_cast<unsigned char>(s[i + 1])) ||
                !isdigit(static_cast<unsigned char>(s[i + 2])))
                throw tokenize_error("'%' ring closure needs two digits", i);
            tokens.emplace_back(s.substr(i, 3));
            i += 3;
        } else if (i + 1 < s.size() && detail::is_two_letter(c, s[i + 1])) {
            tokens.emplace_back(s.substr(i, 2));
            i += 2;
        } else if (detail::is_single_atom_char(c) || detail::is_plain_symbol(c) ||
                   isdigit(static_cast<unsigned char>(c))) {
            tokens.emplace_back(1, c);
            i += 1;
        } else {
            throw tokenize_error(std::string("unexpected character '") + c + "'", i);
        }
    }
    return tokens;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) out += t;
    return out;
}

// Special token ids are fixed so checkpoints stay portable across
// corpora sharing a token set.
constexpr int pad_id = 0;
constexpr int bos_id = 1;
constexpr int eos_id = 2;
constexpr int unk_id = 3;
constexpr int num_specials = 4;

inline const char* special_name(int id) {
    switch (id) {
        case pad_id: return "<pad>";
        case bos_id: return "<bos>";
        case eos_id: return "<eos>";
        case unk_id: return "<unk>";
        default: return nullptr;
    }
}

class Vocabulary {
public:
    Vocabulary() {
        for (int i = 0; i < num_specials; ++i) add_token(special_name(i));
    }

    // Deterministic: specials first, then corpus tokens sorted
    // lexicographically.
    template <typename Iterable>
    static Vocabulary build(const Iterable& corpus) {
        std::set<std::string> seen;
        for (const auto& s : corpus) {
            for (auto& t : tokenize(s)) seen.insert(std::move(t));
        }
        Vocabulary v;
        for (const auto& t : seen) v.add_token(t);
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& non_special_sorted) {
        Vocabulary v;
        for (const auto& t : non_special_sorted) v.add_token(t);
        return v;
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    const std::string& token(int id) const { return id_to_token_.at(static_cast<size_t>(id)); }

    std::optional<int> find(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end()) return std::nullopt;
        return it->second;
    }

    // Unknown tokens map to <unk>.
    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) {
            auto it = token_to_id_.find(t);
            ids.push_back(it == token_to_id_.end() ? unk_id : it->second);
        }
        return ids;
    }

    std::vector<int> encode_string(std::string_view s) const { return encode(tokenize(s)); }

    // Specials are dropped; used to turn hypotheses back into strings.
    std::string decode_string(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < num_specials) continue;
            out += token(id);
        }
        return out;
    }

    // One token per line, line number = id, first four lines specials.
    std::string to_text() const {
        std::string out;
        for (const auto& t : id_to_token_) {
            out += t;
            out += '\n';
        }
        return out;
    }

    static Vocabulary from_text(const std::string& text) {
        auto lines = split(text, '\n');
        while (!lines.empty() && lines.back().empty()) lines.pop_back();
        if (lines.size() < num_specials)
            throw io_error("vocabulary file too short");
        for (int i = 0; i < num_specials; ++i) {
            if (lines[static_cast<size_t>(i)] != special_name(i))
                throw io_error("vocabulary file: bad special token line " + std::to_string(i));
        }
        Vocabulary v;
        for (size_t i = num_specials; i < lines.size(); ++i) {
            if (lines[i].empty()) throw io_error("vocabulary file: empty token line");
            v.add_token(lines[i]);
        }
        return v;
    }

    void save(const std::string& path) const { write_file(path, to_text()); }

    static Vocabulary load(const std::string& path) { return from_text(read_file(path)); }

    // Stable content hash, embedded in checkpoints to catch mismatched
    // vocabularies at load time.
    uint64_t hash() const { return fnv1a64(to_text()); }

private:
    void add_token(const std::string& t) {
        if (token_to_id_.count(t)) return;
        token_to_id_[t] = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(t);
    }

    std::map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

enum class invalid_reason {
    none,
    empty_string,
    unknown_character,
    unbalanced_parentheses,
    unpaired_ring_closure,
    malformed_bracket_atom,
};

inline const char* to_string(invalid_reason r) {
    switch (r) {
        case invalid_reason::none: return "none";
        case invalid_reason::empty_string: return "empty string";
        case invalid_reason::unknown_character: return "unknown character";
        case invalid_reason::unbalanced_parentheses: return "unbalanced parentheses";
        case invalid_reason::unpaired_ring_closure: return "unpaired ring closure";
        case invalid_reason::malformed_bracket_atom: return "malformed bracket atom";
    }
    return "unknown";
}

struct ValidityReport {
    bool valid = false;
    invalid_reason reason = invalid_reason::none;
    std::string detail;

    static ValidityReport ok() { return {true, invalid_reason::none, ""}; }
    static ValidityReport fail(invalid_reason r, std::string d = "") {
        return {false, r, std::move(d)};
    }
};

// Syntactic check only: parentheses balance, ring-closure digits appear
// an even number of times, bracket atoms well-formed, non-empty, and
// every character tokenizable.
inline ValidityReport validate_syntactic(std::string_view s) {
    if (s.empty()) return ValidityReport::fail(invalid_reason::empty_string);

    std::vector<std::string> tokens;
    try {
        tokens = tokenize(s);
    } catch (const tokenize_error& e) {
        std::string_view what = e.what();
        if (what.find("bracket") != std::string_view::npos)
            return ValidityReport::fail(invalid_reason::malformed_bracket_atom, e.what());
        return ValidityReport::fail(invalid_reason::unknown_character, e.what());
    }

    int depth = 0;
    std::map<std::string, int> ring_counts;
    for (const auto& t : tokens) {
        if (t == "(") {
            ++depth;
        } else if (t == ")") {
            if (--depth < 0)
                return ValidityReport::fail(invalid_reason::unbalanced_parentheses);
        } else if (t.size() == 1 && isdigit(static_cast<unsigned char>(t[0]))) {
            ++ring_counts[t];
        } else if (t[0] == '%') {
            ++ring_counts[t.substr(1)];
        } else if (t[0] == '[') {
            if (t.size() < 3) return ValidityReport::fail(invalid_reason::malformed_bracket_atom, t);
        }
    }
    if (depth != 0) return ValidityReport::fail(invalid_reason::unbalanced_parentheses);
    for (const auto& [digit, count] : ring_counts) {
        if (count % 2 != 0)
            return ValidityReport::fail(invalid_reason::unpaired_ring_closure,
                                        "ring closure " + digit);
    }
    return ValidityReport::ok();
}

}  // namespace retrospec::smiles
