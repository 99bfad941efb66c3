#include "prisp/tokenizer.hpp"

#include "prisp/matrix.hpp"

#include <array>

namespace prisp {
namespace tok {

namespace {

// char -> id lookup, -1 for out-of-alphabet bytes.
constexpr std::array<int, 256> build_lut() {
  std::array<int, 256> lut{};
  for (auto& v : lut) v = -1;
  for (size_t i = 0; i < kAlphabet.size(); ++i) {
    lut[size_t(static_cast<unsigned char>(kAlphabet[i]))] = int(i) + kNumSpecials;
  }
  return lut;
}

constexpr std::array<int, 256> kLut = build_lut();

}  // namespace

int vocab_size() { return int(kAlphabet.size()) + kNumSpecials; }

bool in_alphabet(char c) { return kLut[size_t(static_cast<unsigned char>(c))] >= 0; }

int char_id(char c) {
  int id = kLut[size_t(static_cast<unsigned char>(c))];
  if (id < 0) {
    throw ConfigError(std::string("tokenize: character '") + c +
                      "' (byte " + std::to_string(int(static_cast<unsigned char>(c))) +
                      ") is not in the alphabet");
  }
  return id;
}

}  // namespace tok

TokenSeq tokenize(const std::string& text) {
  TokenSeq seq;
  seq.ids.reserve(text.size() + 1);
  seq.ids.push_back(tok::kBos);
  for (char c : text) seq.ids.push_back(tok::char_id(c));
  seq.prompt_len = int(seq.ids.size());
  return seq;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= tok::vocab_size()) {
      throw ConfigError("detokenize: id " + std::to_string(id) + " out of range");
    }
    if (id >= tok::kNumSpecials) {
      out.push_back(tok::kAlphabet[size_t(id - tok::kNumSpecials)]);
    }
  }
  return out;
}

std::string detokenize(const TokenSeq& seq) { return detokenize(seq.ids); }

TokenSeq encode_example(const std::string& input, const std::string& output) {
  TokenSeq seq;
  seq.ids.reserve(input.size() + output.size() + 3);
  seq.ids.push_back(tok::kBos);
  for (char c : input) seq.ids.push_back(tok::char_id(c));
  seq.ids.push_back(tok::kSep);
  seq.prompt_len = int(seq.ids.size());
  for (char c : output) seq.ids.push_back(tok::char_id(c));
  seq.ids.push_back(tok::kEos);
  return seq;
}

TokenSeq encode_prompt(const std::string& input) {
  TokenSeq seq;
  seq.ids.reserve(input.size() + 2);
  seq.ids.push_back(tok::kBos);
  for (char c : input) seq.ids.push_back(tok::char_id(c));
  seq.ids.push_back(tok::kSep);
  seq.prompt_len = int(seq.ids.size());
  return seq;
}

}  // namespace prisp
