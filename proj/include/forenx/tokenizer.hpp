#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace forenx {

/// Word-piece tokenizer with a fixed vocabulary.
///
/// Text is split into ASCII alphanumeric runs and single punctuation characters.
/// Known words map to one id; unknown words fall back to the longest known
/// prefix followed by "##"-continuation pieces, down to single characters.
/// Bytes outside printable ASCII map to <unk>.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;

    explicit Tokenizer(std::vector<std::string> pieces);

    /// Vocabulary drawn from the built-in prompt, answer and caption resources, padded to `size`.
    static Tokenizer build_default(std::size_t size);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;

    int id_of(std::string_view piece) const;
    const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return pieces_.size(); }
    const std::vector<std::string>& pieces() const { return pieces_; }

private:
    void encode_word(std::string_view word, std::vector<int>& out) const;

    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace forenx
