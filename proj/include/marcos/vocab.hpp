#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "marcos/common.hpp"

namespace marcos {

// Character-level vocabulary over printable ASCII plus four reserved ids.
// "<NOP>" is a single token: it is the emission target for padded steps.
// Unknown characters are a hard error; there is no UNK.
class Vocabulary {
public:
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int NOP = 3;
    static constexpr const char* NOP_TEXT = "<NOP>";

    Vocabulary();

    int size() const { return static_cast<int>(tokens_.size()); }

    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    // Token string for one id (specials render as "<PAD>" etc).
    const std::string& token(int id) const;

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<char, int> char_to_id_;
};

}  // namespace marcos
