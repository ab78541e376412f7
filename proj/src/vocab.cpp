#include "marcos/vocab.hpp"

#include <fstream>

namespace marcos {

Vocabulary::Vocabulary() {
    tokens_ = {"<PAD>", "<BOS>", "<EOS>", NOP_TEXT};
    for (char c = 0x20; c <= 0x7e; ++c) {
        char_to_id_.emplace(c, static_cast<int>(tokens_.size()));
        tokens_.push_back(std::string(1, c));
    }
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size());
    const std::string nop(NOP_TEXT);
    for (std::size_t i = 0; i < text.size();) {
        if (text.compare(i, nop.size(), nop) == 0) {
            out.push_back(NOP);
            i += nop.size();
            continue;
        }
        auto it = char_to_id_.find(text[i]);
        require(it != char_to_id_.end(), ErrorKind::invalid_argument,
                "unknown symbol in text: byte " + std::to_string(static_cast<int>(static_cast<unsigned char>(text[i]))));
        out.push_back(it->second);
        ++i;
    }
    return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        require(id >= 0 && id < size(), ErrorKind::invalid_argument, "token id out of range");
        if (id == PAD || id == BOS || id == EOS) continue;
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
}

const std::string& Vocabulary::token(int id) const {
    require(id >= 0 && id < size(), ErrorKind::invalid_argument, "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path);
    require(f.good(), ErrorKind::io, "cannot write vocabulary file: " + path);
    for (const auto& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), ErrorKind::io, "cannot read vocabulary file: " + path);
    Vocabulary v;  // fixed alphabet; loading validates the file matches
    std::string line;
    int id = 0;
    while (std::getline(f, line)) {
        require(id < v.size() && line == v.tokens_[static_cast<std::size_t>(id)], ErrorKind::parse,
                "vocabulary file mismatch at line " + std::to_string(id + 1));
        ++id;
    }
    require(id == v.size(), ErrorKind::parse, "vocabulary file truncated");
    return v;
}

}  // namespace marcos
