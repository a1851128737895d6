#include "forenx/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "forenx/resources.hpp"
#include "forenx/tensor.hpp"

namespace forenx {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

bool is_printable_punct(char c) {
    auto u = static_cast<unsigned char>(c);
    return u >= 0x21 && u < 0x7f && !std::isalnum(u);
}

// Pieces that attach to the previous piece without a space.
bool attaches_left(const std::string& p) {
    static const std::set<std::string> kLeft{".", ",", "!", "?", ";", ":", ")", "]", "}",
                                             "'", "-", "%", "/"};
    return kLeft.count(p) > 0;
}

// Pieces after which the next piece attaches without a space.
bool attaches_right(const std::string& p) {
    static const std::set<std::string> kRight{"(", "[", "{", "'", "-", "/", "$", "#"};
    return kRight.count(p) > 0;
}

template <typename Fn>
void split_words(std::string_view text, Fn&& emit) {
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (is_word_char(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word_char(text[j])) ++j;
            emit(text.substr(i, j - i));
            i = j;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else {
            emit(text.substr(i, 1));
            ++i;
        }
    }
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
        if (!index_.emplace(pieces_[i], static_cast<int>(i)).second) {
            throw ValidationError("duplicate tokenizer piece '" + pieces_[i] + "'");
        }
    }
    if (pieces_.size() < 4 || pieces_[kPad] != "<pad>" || pieces_[kUnk] != "<unk>" ||
        pieces_[kBos] != "<bos>" || pieces_[kEos] != "<eos>") {
        throw ValidationError("tokenizer vocabulary must start with <pad> <unk> <bos> <eos>");
    }
}

Tokenizer Tokenizer::build_default(std::size_t size) {
    std::vector<std::string> pieces{"<pad>", "<unk>", "<bos>", "<eos>"};
    std::set<std::string> seen(pieces.begin(), pieces.end());
    auto add = [&](std::string p) {
        if (seen.insert(p).second) pieces.push_back(std::move(p));
    };
    for (char c = 0x21; c < 0x7f; ++c) add(std::string(1, c));
    for (char c = '0'; c <= '9'; ++c) add("##" + std::string(1, c));
    for (char c = 'a'; c <= 'z'; ++c) add("##" + std::string(1, c));
    for (char c = 'A'; c <= 'Z'; ++c) add("##" + std::string(1, c));

    std::map<std::string, int> freq;
    auto count_text = [&](std::string_view text) {
        split_words(text, [&](std::string_view w) {
            if (w.size() > 1) ++freq[std::string(w)];
        });
    };
    namespace r = resources;
    count_text(r::kDefaultSystemPrompt);
    count_text(r::kExpertSystemPrompt);
    for (const auto& p : r::kDetectionPrompts) count_text(p.user);
    count_text(r::kFakeAnswer);
    count_text(r::kRealAnswer);
    for (auto q : r::kContentQuestions) count_text(q);
    count_text(r::kReasonQuestion);
    count_text(r::kSummaryPreamble);
    count_text(r::kUserTag);
    count_text(r::kAssistantTag);
    for (auto w : r::kBrightnessWords) count_text(w);
    for (auto w : r::kToneWords) count_text(w);
    for (auto t : r::kCaptionTemplates) count_text(t);
    for (auto w : r::kForgeryVocabulary) count_text(w);
    for (auto w : r::kSpatialWords) count_text(w);

    std::vector<std::pair<std::string, int>> words(freq.begin(), freq.end());
    std::stable_sort(words.begin(), words.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [w, n] : words) {
        if (pieces.size() >= size) break;
        add(w);
    }
    if (pieces.size() > size) {
        throw ValidationError("vocabulary size " + std::to_string(size) +
                              " is too small for the base character set (" +
                              std::to_string(pieces.size()) + ")");
    }
    for (std::size_t i = 0; pieces.size() < size; ++i) add("<unused" + std::to_string(i) + ">");
    return Tokenizer(std::move(pieces));
}

int Tokenizer::id_of(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    return it == index_.end() ? kUnk : it->second;
}

void Tokenizer::encode_word(std::string_view word, std::vector<int>& out) const {
    if (auto it = index_.find(std::string(word)); it != index_.end()) {
        out.push_back(it->second);
        return;
    }
    std::size_t pos = 0;
    while (pos < word.size()) {
        const std::string prefix = pos == 0 ? "" : "##";
        int found = kUnk;
        std::size_t len = word.size() - pos;
        for (; len > 0; --len) {
            auto it = index_.find(prefix + std::string(word.substr(pos, len)));
            if (it != index_.end()) {
                found = it->second;
                break;
            }
        }
        if (found == kUnk) {
            out.push_back(kUnk);
            return;
        }
        out.push_back(found);
        pos += len;
    }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    split_words(text, [&](std::string_view w) {
        if (w.size() == 1 && !is_word_char(w[0]) && !is_printable_punct(w[0])) {
            ids.push_back(kUnk);
        } else {
            encode_word(w, ids);
        }
    });
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    std::string prev;
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) continue;
        if (id == kPad || id == kBos || id == kEos) continue;
        const std::string& p = pieces_[static_cast<std::size_t>(id)];
        if (p.rfind("##", 0) == 0 && p.size() > 2) {
            out += p.substr(2);
        } else {
            if (!out.empty() && !attaches_left(p) && !attaches_right(prev)) out += ' ';
            out += p;
        }
        prev = p;
    }
    return out;
}

}  // namespace forenx
