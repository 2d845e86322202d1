#pragma once

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "petapter/data.hpp"
#include "petapter/errors.hpp"
#include "petapter/text.hpp"

namespace petapter {

// ---------------------------------------------------------------------------
// pattern templates
// ---------------------------------------------------------------------------
//
// Template grammar:
//   [MASK] / [SEP]   reserved specials
//   [name]           field reference, looked up in the record by exact name
//   [name]*          truncatable field (a truncation region)
//   { ... }*         truncation group of fields/literals/[SEP]s
//   anything else    literal text, tokenized with the word tokenizer
//
// Exactly one truncation region per template. When a compiled instance
// exceeds the maximum length, tokens are removed from the tail of that
// region only: the last item loses tokens first; once an item empties, the
// [SEP] that interleaved it is dropped with it.

struct PatternElement {
    enum class Kind { Literal, Mask, Sep, Field, Group };

    Kind kind;
    std::string text;                      // literal text or field name
    bool truncatable{false};               // fields and groups
    std::vector<PatternElement> children;  // group members
};

struct PatternTemplate {
    std::string source;
    std::vector<PatternElement> elements;
    std::size_t mask_count{0};
};

namespace detail {

inline PatternElement parse_bracket(const std::string& src, std::size_t& pos) {
    const std::size_t close = src.find(']', pos + 1);
    if (close == std::string::npos) {
        throw TemplateError("unterminated '[' at offset " + std::to_string(pos));
    }
    std::string inner = src.substr(pos + 1, close - pos - 1);
    pos = close + 1;
    PatternElement e;
    if (inner == "MASK") {
        e.kind = PatternElement::Kind::Mask;
    } else if (inner == "SEP") {
        e.kind = PatternElement::Kind::Sep;
    } else {
        if (inner.empty()) {
            throw TemplateError("empty field reference '[]'");
        }
        e.kind = PatternElement::Kind::Field;
        e.text = inner;
    }
    if (pos < src.size() && src[pos] == '*') {
        if (e.kind != PatternElement::Kind::Field) {
            throw TemplateError("'*' may only follow a field or a '{...}' group");
        }
        e.truncatable = true;
        ++pos;
    }
    return e;
}

inline void flush_literal(std::string& buf, std::vector<PatternElement>& out) {
    // Literal whitespace only shapes tokenization, which already splits on it.
    bool blank = true;
    for (char c : buf) {
        blank = blank && (c == ' ' || c == '\t' || c == '\n');
    }
    if (!buf.empty() && !blank) {
        PatternElement e;
        e.kind = PatternElement::Kind::Literal;
        e.text = buf;
        out.push_back(e);
    }
    buf.clear();
}

} // namespace detail

inline PatternTemplate parse_template(const std::string& source) {
    PatternTemplate tmpl;
    tmpl.source = source;

    std::vector<PatternElement> top;
    std::string literal;
    std::size_t pos = 0;
    bool in_group = false;
    std::vector<PatternElement> group;

    auto sink = [&]() -> std::vector<PatternElement>& {
        return in_group ? group : top;
    };

    while (pos < source.size()) {
        const char c = source[pos];
        if (c == '[') {
            detail::flush_literal(literal, sink());
            PatternElement e = detail::parse_bracket(source, pos);
            if (in_group) {
                if (e.kind == PatternElement::Kind::Mask) {
                    throw TemplateError("[MASK] is not allowed inside a truncation group");
                }
                if (e.truncatable) {
                    throw TemplateError("nested truncation marker inside a group");
                }
            }
            sink().push_back(e);
        } else if (c == '{') {
            if (in_group) {
                throw TemplateError("nested '{' in pattern");
            }
            detail::flush_literal(literal, top);
            in_group = true;
            group.clear();
            ++pos;
        } else if (c == '}') {
            if (!in_group) {
                throw TemplateError("unbalanced '}' in pattern");
            }
            detail::flush_literal(literal, group);
            in_group = false;
            ++pos;
            if (pos >= source.size() || source[pos] != '*') {
                throw TemplateError("'{...}' group must be marked truncatable with '*'");
            }
            ++pos;
            PatternElement g;
            g.kind = PatternElement::Kind::Group;
            g.truncatable = true;
            g.children = group;
            top.push_back(g);
        } else {
            literal.push_back(c);
            ++pos;
        }
    }
    if (in_group) {
        throw TemplateError("unbalanced '{' in pattern");
    }
    detail::flush_literal(literal, top);

    std::size_t regions = 0;
    for (const auto& e : top) {
        if (e.kind == PatternElement::Kind::Mask) {
            ++tmpl.mask_count;
        }
        if (e.truncatable) {
            ++regions;
        }
    }
    if (regions != 1) {
        throw TemplateError("pattern must contain exactly one truncation region, found " +
                            std::to_string(regions) + ": " + source);
    }
    tmpl.elements = std::move(top);
    return tmpl;
}

// ---------------------------------------------------------------------------
// compiled cloze instances
// ---------------------------------------------------------------------------

struct ClozeInstance {
    TokenSequence tokens;
    std::vector<std::size_t> mask_positions;
    std::size_t added_tokens{0}; // mask/literal/[SEP] tokens in the final instance
    std::size_t field_tokens{0}; // surviving field content tokens
    int gold_label{-1};
};

namespace detail {

struct CompiledItem {
    enum class Kind { Text, Field, Sep, Mask };
    Kind kind;
    std::vector<int> ids;
};

inline CompiledItem compile_element(const PatternElement& e, const Record& record,
                                    const Vocabulary& vocab,
                                    std::vector<std::string>* warnings) {
    CompiledItem item;
    switch (e.kind) {
    case PatternElement::Kind::Literal:
        item.kind = CompiledItem::Kind::Text;
        item.ids = tokenize(vocab, e.text).ids;
        break;
    case PatternElement::Kind::Mask:
        item.kind = CompiledItem::Kind::Mask;
        item.ids = {Vocabulary::kMask};
        break;
    case PatternElement::Kind::Sep:
        item.kind = CompiledItem::Kind::Sep;
        item.ids = {Vocabulary::kSep};
        break;
    case PatternElement::Kind::Field: {
        item.kind = CompiledItem::Kind::Field;
        const std::string* value = record.find(e.text);
        if (!value) {
            if (warnings) {
                warnings->push_back("field '" + e.text + "' missing, treated as empty");
            }
        } else {
            item.ids = tokenize(vocab, *value).ids;
        }
        break;
    }
    case PatternElement::Kind::Group:
        throw ContractError("compile_element: group passed as a plain element");
    }
    return item;
}

// Drops empty field items, then strips [SEP]s that no longer separate
// anything (boundary SEPs and SEP runs).
inline void normalize_group(std::vector<CompiledItem>& items) {
    std::vector<CompiledItem> kept;
    for (auto& it : items) {
        if (it.kind == CompiledItem::Kind::Field && it.ids.empty()) {
            continue;
        }
        kept.push_back(std::move(it));
    }
    std::vector<CompiledItem> out;
    for (auto& it : kept) {
        if (it.kind == CompiledItem::Kind::Sep &&
            (out.empty() || out.back().kind == CompiledItem::Kind::Sep)) {
            continue;
        }
        out.push_back(std::move(it));
    }
    while (!out.empty() && out.back().kind == CompiledItem::Kind::Sep) {
        out.pop_back();
    }
    items = std::move(out);
}

inline std::size_t items_length(const std::vector<CompiledItem>& items) {
    std::size_t n = 0;
    for (const auto& it : items) {
        n += it.ids.size();
    }
    return n;
}

// Removes `over` tokens from the tail of the region. An emptied item takes
// its interleaving [SEP] with it.
inline void truncate_region(std::vector<CompiledItem>& region, std::size_t over) {
    while (over > 0 && !region.empty()) {
        CompiledItem& last = region.back();
        if (last.kind == CompiledItem::Kind::Sep) {
            over -= std::min<std::size_t>(over, last.ids.size());
            region.pop_back();
            continue;
        }
        if (last.ids.empty()) {
            region.pop_back();
            continue;
        }
        const std::size_t remove = std::min(over, last.ids.size());
        last.ids.resize(last.ids.size() - remove);
        over -= remove;
        if (last.ids.empty()) {
            region.pop_back();
            if (!region.empty() && region.back().kind == CompiledItem::Kind::Sep) {
                over -= std::min<std::size_t>(over, region.back().ids.size());
                region.pop_back();
            }
        }
    }
}

} // namespace detail

inline ClozeInstance apply_pattern(const PatternTemplate& tmpl, const Record& record,
                                   const Vocabulary& vocab, std::size_t max_len,
                                   std::vector<std::string>* warnings = nullptr) {
    using detail::CompiledItem;

    std::vector<CompiledItem> before, region, after;
    bool seen_region = false;
    for (const auto& e : tmpl.elements) {
        if (e.kind == PatternElement::Kind::Group) {
            std::vector<CompiledItem> items;
            for (const auto& child : e.children) {
                items.push_back(detail::compile_element(child, record, vocab, warnings));
            }
            detail::normalize_group(items);
            region = std::move(items);
            seen_region = true;
        } else {
            CompiledItem item = detail::compile_element(e, record, vocab, warnings);
            if (e.truncatable) {
                region.push_back(std::move(item));
                seen_region = true;
            } else {
                (seen_region ? after : before).push_back(std::move(item));
            }
        }
    }

    const std::size_t fixed_len = detail::items_length(before) + detail::items_length(after);
    if (fixed_len > max_len) {
        throw CapacityError("fixed pattern content (" + std::to_string(fixed_len) +
                            " tokens) exceeds max_len " + std::to_string(max_len));
    }
    const std::size_t total = fixed_len + detail::items_length(region);
    if (total > max_len) {
        detail::truncate_region(region, total - max_len);
    }

    ClozeInstance out;
    auto emit = [&](const std::vector<CompiledItem>& items) {
        for (const auto& it : items) {
            for (int id : it.ids) {
                if (it.kind == CompiledItem::Kind::Mask) {
                    out.mask_positions.push_back(out.tokens.ids.size());
                }
                if (it.kind == CompiledItem::Kind::Field) {
                    ++out.field_tokens;
                } else {
                    ++out.added_tokens;
                }
                out.tokens.ids.push_back(id);
            }
        }
    };
    emit(before);
    emit(region);
    emit(after);
    return out;
}

// ---------------------------------------------------------------------------
// verbalizers and the sub-vocabulary
// ---------------------------------------------------------------------------

struct VerbalizerMap {
    std::vector<std::string> labels;                        // canonical order
    std::vector<std::vector<std::string>> words_per_label;  // parallel to labels

    std::size_t label_count() const { return labels.size(); }

    int label_index(const std::string& label) const {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == label) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    // Normalized token strings per label (what the verbalizer maps onto).
    std::vector<std::vector<std::string>> token_strings() const {
        std::vector<std::vector<std::string>> out;
        out.reserve(labels.size());
        for (const auto& words : words_per_label) {
            std::vector<std::string> toks;
            for (const auto& w : words) {
                for (auto& t : word_split(w)) {
                    toks.push_back(std::move(t));
                }
            }
            out.push_back(std::move(toks));
        }
        return out;
    }

    // Tokens per label; every label must agree.
    std::size_t tokens_per_label() const {
        const auto toks = token_strings();
        if (toks.empty()) {
            throw PvpError("verbalizer map has no labels");
        }
        const std::size_t m = toks[0].size();
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (toks[i].size() != m) {
                throw PvpError("label '" + labels[i] + "' has " +
                               std::to_string(toks[i].size()) + " verbalizer tokens, expected " +
                               std::to_string(m));
            }
        }
        return m;
    }
};

// The verbalizer-relevant slice of the vocabulary: sorted unique token ids,
// plus for every (label, mask position) the index of that verbalizer token
// within the slice.
struct SubVocabulary {
    std::vector<int> token_ids;
    std::vector<std::vector<std::size_t>> label_index; // [c][m]

    std::size_t t() const { return token_ids.size(); }
    std::size_t c() const { return label_index.size(); }
    std::size_t m() const { return label_index.empty() ? 0 : label_index[0].size(); }
};

inline SubVocabulary build_sub_vocab(const VerbalizerMap& verbalizers, const Vocabulary& vocab) {
    const auto token_strings = verbalizers.token_strings();
    const std::size_t m = verbalizers.tokens_per_label();
    (void)m;

    // Injectivity over token sequences.
    for (std::size_t i = 0; i < token_strings.size(); ++i) {
        for (std::size_t j = i + 1; j < token_strings.size(); ++j) {
            if (token_strings[i] == token_strings[j]) {
                throw PvpError("verbalizer map is not injective: labels '" +
                               verbalizers.labels[i] + "' and '" + verbalizers.labels[j] +
                               "' share the same tokens");
            }
        }
    }

    std::set<int> ids;
    std::vector<std::vector<int>> label_ids(token_strings.size());
    for (std::size_t i = 0; i < token_strings.size(); ++i) {
        for (const auto& tok : token_strings[i]) {
            if (!vocab.contains(tok)) {
                throw VocabError("verbalizer token '" + tok + "' of label '" +
                                 verbalizers.labels[i] + "' is not in the vocabulary");
            }
            const int id = vocab.id_or_unk(tok);
            ids.insert(id);
            label_ids[i].push_back(id);
        }
    }

    SubVocabulary sv;
    sv.token_ids.assign(ids.begin(), ids.end()); // std::set iterates sorted
    sv.label_index.resize(label_ids.size());
    for (std::size_t i = 0; i < label_ids.size(); ++i) {
        for (int id : label_ids[i]) {
            const auto it = std::lower_bound(sv.token_ids.begin(), sv.token_ids.end(), id);
            sv.label_index[i].push_back(
                static_cast<std::size_t>(it - sv.token_ids.begin()));
        }
    }
    return sv;
}

// Mask count of the pattern must match the verbalizer token count, and the
// verbalizer map must be injective.
inline void validate_pvp(const PatternTemplate& tmpl, const VerbalizerMap& verbalizers) {
    const std::size_t m_v = verbalizers.tokens_per_label();
    if (tmpl.mask_count != m_v) {
        throw PvpError("pattern has " + std::to_string(tmpl.mask_count) +
                       " [MASK] tokens but verbalizers map to " + std::to_string(m_v) +
                       " tokens per label");
    }
    const auto toks = verbalizers.token_strings();
    for (std::size_t i = 0; i < toks.size(); ++i) {
        for (std::size_t j = i + 1; j < toks.size(); ++j) {
            if (toks[i] == toks[j]) {
                throw PvpError("verbalizer map is not injective: labels '" +
                               verbalizers.labels[i] + "' and '" + verbalizers.labels[j] +
                               "' share the same tokens");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PVP files
// ---------------------------------------------------------------------------

struct Pvp {
    PatternTemplate pattern;
    VerbalizerMap verbalizers;
};

inline Pvp parse_pvp_json(const std::string& text) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed PVP file: ") + e.what());
    }
    if (!j.is_object() || !j.contains("pattern") || !j.contains("verbalizers")) {
        throw DataError("PVP file must contain 'pattern' and 'verbalizers'");
    }
    Pvp pvp;
    pvp.pattern = parse_template(j["pattern"].get<std::string>());
    if (!j["verbalizers"].is_object()) {
        throw DataError("'verbalizers' must map labels to word lists");
    }
    for (auto& [label, words] : j["verbalizers"].items()) {
        if (!words.is_array()) {
            throw DataError("verbalizer for label '" + label + "' must be a list of words");
        }
        std::vector<std::string> wlist;
        for (const auto& w : words) {
            if (!w.is_string()) {
                throw DataError("verbalizer word for label '" + label + "' must be a string");
            }
            wlist.push_back(w.get<std::string>());
        }
        pvp.verbalizers.labels.push_back(label);
        pvp.verbalizers.words_per_label.push_back(std::move(wlist));
    }
    if (pvp.verbalizers.labels.empty()) {
        throw DataError("PVP file defines no labels");
    }
    return pvp;
}

inline Pvp load_pvp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read PVP file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_pvp_json(buf.str());
}

// All words a PVP needs present in the vocabulary: verbalizer words plus the
// pattern's literal tokens.
inline std::vector<std::string> pvp_required_words(const Pvp& pvp) {
    std::vector<std::string> words;
    auto add = [&](const std::string& w) {
        if (std::find(words.begin(), words.end(), w) == words.end()) {
            words.push_back(w);
        }
    };
    for (const auto& wlist : pvp.verbalizers.words_per_label) {
        for (const auto& w : wlist) {
            for (auto& tok : word_split(w)) {
                add(tok);
            }
        }
    }
    std::function<void(const PatternElement&)> walk = [&](const PatternElement& e) {
        if (e.kind == PatternElement::Kind::Literal) {
            for (auto& tok : word_split(e.text)) {
                add(tok);
            }
        }
        for (const auto& child : e.children) {
            walk(child);
        }
    };
    for (const auto& e : pvp.pattern.elements) {
        walk(e);
    }
    return words;
}

// ---------------------------------------------------------------------------
// one-vs-all augmentation
// ---------------------------------------------------------------------------

// Crosses every record with every candidate label: the candidate's name is
// stored under `candidate_field` and the gold label becomes Yes/No depending
// on whether the candidate matches the record's original label.
inline LabeledDataset one_vs_all_augment(const LabeledDataset& data,
                                         const std::vector<std::string>& labels,
                                         const std::string& candidate_field) {
    if (labels.empty()) {
        throw DataError("one_vs_all_augment: empty label list");
    }
    LabeledDataset out;
    out.records.reserve(data.size() * labels.size());
    for (const auto& r : data.records) {
        const std::string original = r.label();
        for (const auto& candidate : labels) {
            Record copy = r;
            copy.set(candidate_field, candidate);
            copy.set("label", candidate == original ? "Yes" : "No");
            out.records.push_back(std::move(copy));
        }
    }
    return out;
}

} // namespace petapter
