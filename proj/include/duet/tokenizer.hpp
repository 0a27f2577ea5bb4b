#pragma once

#include <array>
#include <cctype>
#include <string>
#include <vector>

#include "duet/error.hpp"

namespace duet {

/// Fixed character-level vocabulary, 64 symbols. Ids 0..3 are control tokens;
/// the printable set covers lowercased corpus text. Input is lowercased
/// before lookup; a character outside the table is a validation error.
class Tokenizer {
  public:
    static constexpr std::int64_t kVocab = 64;
    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kBos = 1;
    static constexpr std::int64_t kEos = 2;
    static constexpr std::int64_t kSep = 3;

    Tokenizer() {
        for (auto& v : to_id_) v = -1;
        int id = 4;
        auto reserve = [&](char c) {
            chars_[static_cast<std::size_t>(id)] = c;
            to_id_[static_cast<unsigned char>(c)] = id;
            ++id;
        };
        reserve(' ');
        for (char c = 'a'; c <= 'z'; ++c) reserve(c);
        for (char c = '0'; c <= '9'; ++c) reserve(c);
        for (char c : {'.', ',', '-', ':', ';', '?', '!', '/', '<', '>', '(', ')', '=', '%', '+', '\'', '"', '*'}) reserve(c);
        // 4 + 1 + 26 + 10 + 18 = 59; ids 59..63 stay unassigned spares
        if (id > kVocab) throw ContractError("Tokenizer: charset exceeds vocab");
        used_ = id;
    }

    std::int64_t id_of(char c) const {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        const int v = to_id_[static_cast<unsigned char>(c)];
        if (v < 0)
            throw ValidationError(std::string("Tokenizer: unsupported character '") + c + "'");
        return v;
    }

    std::vector<std::int64_t> encode(const std::string& text, bool bos = false, bool eos = false) const {
        std::vector<std::int64_t> out;
        out.reserve(text.size() + 2);
        if (bos) out.push_back(kBos);
        for (char c : text) out.push_back(id_of(c));
        if (eos) out.push_back(kEos);
        return out;
    }

    std::string decode(const std::vector<std::int64_t>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (auto i : ids) {
            if (i < 0 || i >= kVocab)
                throw ValidationError("Tokenizer: id " + std::to_string(i) + " outside vocab");
            if (i < 4 || i >= used_) continue;  // control ids and spares decode to nothing
            out.push_back(chars_[static_cast<std::size_t>(i)]);
        }
        return out;
    }

    std::int64_t used_symbols() const { return used_; }

  private:
    std::array<char, kVocab> chars_{};
    std::array<int, 256> to_id_{};
    std::int64_t used_ = 0;
};

inline const Tokenizer& tokenizer() {
    static const Tokenizer tk;
    return tk;
}

}  // namespace duet
