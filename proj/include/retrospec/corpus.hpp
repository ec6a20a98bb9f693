#pragma once

// Data provisioning: a synthetic retro-grammar for desk-scale training
// and evaluation, plus loaders for external reaction/stock files.
//
// Grammar: a pool of terminal fragments (valid SMILES strings over a
// plain-atom alphabet) and a set of single-token linker rules drawn from
// a reserved token set that never occurs inside terminals. A molecule of
// depth d is m_d = m_{d-1} ++ linker ++ terminal. The single
// retro step splits at the rightmost linker token, so reactants share
// all tokens with the product except the linker. Terminals form the
// stock, and every depth-d product reaches the stock in d steps.

#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "retrospec/common.hpp"
#include "retrospec/smiles.hpp"

namespace retrospec::corpus {

struct ReactionPair {
    std::string product;
    std::string reactants;  // dot-joined precursors
};

struct GrammarConfig {
    std::vector<std::string> alphabet = {"C", "N", "O", "S", "F"};
    int n_rules = 10;
    int n_terminals = 60;
    int frag_len_min = 4;   // terminal length range, in tokens
    int frag_len_max = 9;
    int max_depth = 5;
    int dataset_size = 20000;
    double valid_frac = 0.05;
    double test_frac = 0.05;
    uint64_t seed = 1;

    void validate() const {
        if (alphabet.empty()) throw config_error("grammar: empty alphabet");
        if (n_rules < 1) throw config_error("grammar: need at least one rule");
        if (n_terminals < 2) throw config_error("grammar: need at least two terminals");
        if (frag_len_min < 2 || frag_len_max < frag_len_min)
            throw config_error("grammar: bad fragment length range");
        if (max_depth < 1 || max_depth > 5) throw config_error("grammar: depth must be 1..5");
        if (dataset_size < 1) throw config_error("grammar: empty dataset");
        if (valid_frac < 0 || test_frac < 0 || valid_frac + test_frac >= 1.0)
            throw config_error("grammar: bad split fractions");
    }
};

// Reserved single-token linkers; kept disjoint from terminal content.
inline const std::vector<std::string>& linker_pool() {
    static const std::vector<std::string> pool = {
        "P", "B", "I", "[Si]", "[Se]", "[Te]", "[As]", "[Ge]", "[Sn]", "[Sb]", "[Pb]", "[Bi]"};
    return pool;
}

struct SyntheticData {
    GrammarConfig config;
    std::vector<std::string> linkers;
    std::vector<std::string> stock;  // the terminals
    std::vector<ReactionPair> train, valid, test;
    std::vector<int> train_depth, valid_depth, test_depth;  // chain depth per pair
};

namespace detail {

inline const std::vector<std::vector<std::string>>& ring_motifs() {
    static const std::vector<std::vector<std::string>> motifs = {
        smiles::tokenize("C1CC1"),
        smiles::tokenize("C1CCC1"),
        smiles::tokenize("C1CCCC1"),
        smiles::tokenize("c1ccccc1"),
    };
    return motifs;
}

inline std::string build_terminal(rng& gen, const GrammarConfig& cfg) {
    const int target_len =
        cfg.frag_len_min + int(gen.next_below(uint64_t(cfg.frag_len_max - cfg.frag_len_min + 1)));
    std::vector<std::string> toks;
    auto atom = [&]() -> const std::string& {
        return cfg.alphabet[size_t(gen.next_below(cfg.alphabet.size()))];
    };
    toks.push_back(atom());
    while (int(toks.size()) < target_len) {
        const double r = gen.next_double();
        const int remaining = target_len - int(toks.size());
        if (r < 0.12 && remaining >= 5) {
            const auto& motif = ring_motifs()[size_t(gen.next_below(ring_motifs().size()))];
            if (int(motif.size()) <= remaining + 2)
                toks.insert(toks.end(), motif.begin(), motif.end());
        } else if (r < 0.32 && remaining >= 3) {
            toks.push_back("(");
            toks.push_back(atom());
            if (remaining >= 4 && gen.next_double() < 0.4) toks.push_back(atom());
            toks.push_back(")");
        } else if (r < 0.42) {
            toks.push_back("=");
            toks.push_back(atom());
        } else {
            toks.push_back(atom());
        }
    }
    return smiles::detokenize(toks);
}

}  // namespace detail

// Deterministic for a fixed seed. Products are unique across the whole
// dataset, so the splits are disjoint on product strings.
inline SyntheticData gen_synthetic(const GrammarConfig& cfg) {
    cfg.validate();
    if (cfg.n_rules > int(linker_pool().size()))
        throw config_error("grammar: at most " + std::to_string(linker_pool().size()) + " rules");
    for (const auto& a : cfg.alphabet)
        for (const auto& l : linker_pool())
            if (a == l) throw config_error("grammar: alphabet overlaps linker pool: " + a);

    SyntheticData data;
    data.config = cfg;
    data.linkers.assign(linker_pool().begin(), linker_pool().begin() + cfg.n_rules);

    rng gen(cfg.seed ^ 0x6ea9a77a11ull);

    // terminal pool; collisions are retried, persistent failure means the
    // alphabet cannot support the requested pool
    std::set<std::string> terminal_set;
    int attempts = 0;
    while (int(terminal_set.size()) < cfg.n_terminals) {
        if (++attempts > cfg.n_terminals * 200)
            throw error("grammar: cannot generate enough distinct terminals; enlarge alphabet "
                        "or length range");
        std::string t = detail::build_terminal(gen, cfg);
        auto rep = smiles::validate_syntactic(t);
        if (!rep.valid) continue;
        terminal_set.insert(t);
    }
    data.stock.assign(terminal_set.begin(), terminal_set.end());

    // depth mixture biased toward shallow chains
    auto sample_depth = [&]() {
        const double r = gen.next_double();
        int d;
        if (r < 0.35) d = 1;
        else if (r < 0.60) d = 2;
        else if (r < 0.78) d = 3;
        else if (r < 0.90) d = 4;
        else d = 5;
        return std::min(d, cfg.max_depth);
    };

    std::unordered_set<std::string> seen_products;
    std::vector<ReactionPair> pairs;
    std::vector<int> depths;
    attempts = 0;
    while (int(pairs.size()) < cfg.dataset_size) {
        if (++attempts > cfg.dataset_size * 50)
            throw error("grammar: cannot generate enough distinct products");
        const int depth = sample_depth();
        std::string m = data.stock[size_t(gen.next_below(data.stock.size()))];
        std::string last_terminal, last_linker;
        for (int i = 0; i < depth; ++i) {
            last_linker = data.linkers[size_t(gen.next_below(data.linkers.size()))];
            last_terminal = data.stock[size_t(gen.next_below(data.stock.size()))];
            if (i + 1 < depth) {
                m = m + last_linker + last_terminal;
            }
        }
        const std::string reactants = m + "." + last_terminal;
        const std::string product = m + last_linker + last_terminal;
        if (seen_products.count(product)) continue;
        seen_products.insert(product);
        pairs.push_back({product, reactants});
        depths.push_back(depth);
    }

    // seeded split
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[size_t(gen.next_below(i))]);
    const size_t n_test = size_t(double(pairs.size()) * cfg.test_frac);
    const size_t n_valid = size_t(double(pairs.size()) * cfg.valid_frac);
    for (size_t i = 0; i < order.size(); ++i) {
        const auto& p = pairs[order[i]];
        const int d = depths[order[i]];
        if (i < n_test) {
            data.test.push_back(p);
            data.test_depth.push_back(d);
        } else if (i < n_test + n_valid) {
            data.valid.push_back(p);
            data.valid_depth.push_back(d);
        } else {
            data.train.push_back(p);
            data.train_depth.push_back(d);
        }
    }
    return data;
}

// Reverse rule application without any model: split at the rightmost
// linker occurrence. Returns false when no linker is present (the
// molecule is atomic for the grammar).
inline bool grammar_split(const std::string& molecule, const std::vector<std::string>& linkers,
                          std::string* left, std::string* right) {
    auto toks = smiles::tokenize(molecule);
    for (size_t i = toks.size(); i-- > 0;) {
        for (const auto& l : linkers) {
            if (toks[i] == l) {
                std::vector<std::string> a(toks.begin(), toks.begin() + long(i));
                std::vector<std::string> b(toks.begin() + long(i) + 1, toks.end());
                if (a.empty() || b.empty()) return false;
                *left = smiles::detokenize(a);
                *right = smiles::detokenize(b);
                return true;
            }
        }
    }
    return false;
}

struct LoadReport {
    std::vector<ReactionPair> pairs;
    int64_t skipped = 0;
};

// Tab-separated `product<TAB>reactants` lines; untokenizable rows are
// skipped and counted.
inline LoadReport load_reactions(const std::string& path) {
    LoadReport report;
    auto lines = read_lines(path);
    for (const auto& raw : lines) {
        const std::string line = strip(raw);
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) {
            ++report.skipped;
            continue;
        }
        ReactionPair pair{strip(line.substr(0, tab)), strip(line.substr(tab + 1))};
        try {
            smiles::tokenize(pair.product);
            smiles::tokenize(pair.reactants);
        } catch (const smiles::tokenize_error&) {
            ++report.skipped;
            continue;
        }
        if (pair.product.empty() || pair.reactants.empty()) {
            ++report.skipped;
            continue;
        }
        report.pairs.push_back(std::move(pair));
    }
    if (report.pairs.empty()) throw io_error("no usable reactions in " + path);
    return report;
}

inline void write_reactions(const std::string& path, const std::vector<ReactionPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        out += p.product;
        out += '\t';
        out += p.reactants;
        out += '\n';
    }
    write_file(path, out);
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) {
        out += l;
        out += '\n';
    }
    write_file(path, out);
}

inline uint64_t lines_checksum(const std::vector<std::string>& lines) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& l : lines) {
        h = fnv1a64(l, h);
        h = fnv1a64("\n", h);
    }
    return h;
}

// Manifest describing a generated dataset: config, seed, split sizes,
// split checksums.
inline nlohmann::json dataset_manifest(const SyntheticData& data) {
    auto pair_lines = [](const std::vector<ReactionPair>& pairs) {
        std::vector<std::string> lines;
        lines.reserve(pairs.size());
        for (const auto& p : pairs) lines.push_back(p.product + "\t" + p.reactants);
        return lines;
    };
    nlohmann::json j;
    j["config"] = {{"alphabet", data.config.alphabet},
                   {"n_rules", data.config.n_rules},
                   {"n_terminals", data.config.n_terminals},
                   {"frag_len_min", data.config.frag_len_min},
                   {"frag_len_max", data.config.frag_len_max},
                   {"max_depth", data.config.max_depth},
                   {"dataset_size", data.config.dataset_size},
                   {"valid_frac", data.config.valid_frac},
                   {"test_frac", data.config.test_frac}};
    j["seed"] = data.config.seed;
    j["splits"] = {{"train", data.train.size()},
                   {"valid", data.valid.size()},
                   {"test", data.test.size()},
                   {"stock", data.stock.size()}};
    j["checksums"] = {{"train", lines_checksum(pair_lines(data.train))},
                      {"valid", lines_checksum(pair_lines(data.valid))},
                      {"test", lines_checksum(pair_lines(data.test))},
                      {"stock", lines_checksum(data.stock)}};
    return j;
}

}  // namespace retrospec::corpus
