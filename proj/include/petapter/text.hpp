#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "petapter/errors.hpp"

namespace petapter {

struct TokenSequence {
    std::vector<int> ids;

    std::size_t length() const { return ids.size(); }
    bool operator==(const TokenSequence& o) const { return ids == o.ids; }
};

// Lowercases and splits text into word tokens. Whitespace separates tokens,
// ASCII punctuation characters become single-character tokens, and any
// non-ASCII bytes are treated as word characters.
inline std::vector<std::string> word_split(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            out.push_back(current);
            current.clear();
        }
    };
    for (unsigned char ch : text) {
        if (ch < 128 && std::isspace(ch)) {
            flush();
        } else if (ch < 128 && std::ispunct(ch)) {
            flush();
            out.emplace_back(1, static_cast<char>(ch));
        } else {
            current.push_back(ch < 128 ? static_cast<char>(std::tolower(ch))
                                       : static_cast<char>(ch));
        }
    }
    flush();
    return out;
}

// Word-level vocabulary with dense ids. The five reserved specials always
// occupy ids 0..4 in this order.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;

    static const std::array<std::string, 5>& specials() {
        static const std::array<std::string, 5> s = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
        return s;
    }

    // Frequency-ranked construction. Words are counted after word_split
    // normalization; required words are always included (id assigned even if
    // absent from the corpus); ties broken lexicographically.
    static Vocabulary build(const std::vector<std::string>& corpus, std::size_t max_size,
                            const std::vector<std::string>& required_words) {
        std::vector<std::string> required;
        for (const auto& w : required_words) {
            for (auto& tok : word_split(w)) {
                if (std::find(required.begin(), required.end(), tok) == required.end()) {
                    required.push_back(tok);
                }
            }
        }
        if (max_size < specials().size() + required.size()) {
            throw VocabError("vocabulary max_size " + std::to_string(max_size) +
                             " below specials + required words (" +
                             std::to_string(specials().size() + required.size()) + ")");
        }
        std::map<std::string, std::size_t> counts;
        for (const auto& line : corpus) {
            for (auto& tok : word_split(line)) {
                ++counts[tok];
            }
        }
        if (counts.empty() && required.empty()) {
            throw VocabError("empty corpus and no required words");
        }
        for (const auto& w : required) {
            counts.emplace(w, 0); // keeps an existing count
        }
        // Rank: frequency descending, then lexicographic.
        std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) {
                return a.second > b.second;
            }
            return a.first < b.first;
        });
        const std::size_t budget = max_size - specials().size();
        std::vector<std::string> chosen;
        chosen.reserve(budget);
        std::vector<bool> is_required(ranked.size(), false);
        std::size_t required_remaining = required.size();
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            is_required[i] =
                std::find(required.begin(), required.end(), ranked[i].first) != required.end();
        }
        for (std::size_t i = 0; i < ranked.size() && chosen.size() < budget; ++i) {
            const std::size_t slots_left = budget - chosen.size();
            if (is_required[i]) {
                chosen.push_back(ranked[i].first);
                --required_remaining;
            } else if (slots_left > required_remaining) {
                chosen.push_back(ranked[i].first);
            }
        }
        Vocabulary v;
        for (const auto& s : specials()) {
            v.push_token(s);
        }
        for (auto& w : chosen) {
            v.push_token(w);
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }

    // Id of a token, or kUnk when absent.
    int id_or_unk(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw VocabError("token id " + std::to_string(id) + " out of range " +
                             std::to_string(tokens_.size()));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw DataError("cannot write vocabulary file: " + path);
        }
        out << serialize();
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "petapter-vocab v1\n";
        os << "specials";
        for (const auto& s : specials()) {
            os << ' ' << s;
        }
        os << '\n';
        for (const auto& t : tokens_) {
            os << t << '\n';
        }
        return os.str();
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw DataError("cannot read vocabulary file: " + path);
        }
        std::ostringstream buf;
        buf << in.rdbuf();
        return deserialize(buf.str());
    }

    static Vocabulary deserialize(const std::string& text) {
        std::istringstream in(text);
        std::string line;
        if (!std::getline(in, line) || line != "petapter-vocab v1") {
            throw DataError("bad vocabulary header: " + line);
        }
        if (!std::getline(in, line) ||
            line != "specials [PAD] [UNK] [CLS] [SEP] [MASK]") {
            throw DataError("bad vocabulary specials line: " + line);
        }
        Vocabulary v;
        while (std::getline(in, line)) {
            v.push_token(line);
        }
        if (v.size() < specials().size()) {
            throw DataError("vocabulary file truncated");
        }
        for (std::size_t i = 0; i < specials().size(); ++i) {
            if (v.tokens_[i] != specials()[i]) {
                throw DataError("vocabulary special out of place: " + v.tokens_[i]);
            }
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;

    void push_token(const std::string& t) {
        if (index_.count(t)) {
            throw VocabError("duplicate token in vocabulary: " + t);
        }
        index_[t] = static_cast<int>(tokens_.size());
        tokens_.push_back(t);
    }
};

inline TokenSequence tokenize(const Vocabulary& vocab, const std::string& text) {
    TokenSequence seq;
    for (auto& w : word_split(text)) {
        seq.ids.push_back(vocab.id_or_unk(w));
    }
    return seq;
}

inline std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq) {
    std::string out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += vocab.token(seq.ids[i]);
    }
    return out;
}

} // namespace petapter
