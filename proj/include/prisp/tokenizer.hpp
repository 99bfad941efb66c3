#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace prisp {

// Character-level vocabulary: 4 control ids then 60 printable symbols, 64 ids
// total to match the backbone's default vocab exactly.
namespace tok {

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kSep = 3;
constexpr int kNumSpecials = 4;

// 60 characters; id = kNumSpecials + index.
constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyz0123456789 .,:;!?'\"()-+*/=<>[]_#@&";

int vocab_size();
bool in_alphabet(char c);
int char_id(char c);  // throws on out-of-alphabet characters

}  // namespace tok

// Token ids plus the boundary between conditioning prompt and completion.
// Loss and decoding both key off prompt_len, so it always satisfies
// 0 < prompt_len <= ids.size().
struct TokenSeq {
  std::vector<int> ids;
  int prompt_len = 0;
};

// [BOS] + characters. prompt_len covers the whole sequence.
TokenSeq tokenize(const std::string& text);

// Inverse of tokenize on the printable span; control ids are skipped.
std::string detokenize(const std::vector<int>& ids);
std::string detokenize(const TokenSeq& seq);

// [BOS] input [SEP] output [EOS], prompt_len = through the separator.
TokenSeq encode_example(const std::string& input, const std::string& output);

// [BOS] input [SEP]; the decoding-time prefix.
TokenSeq encode_prompt(const std::string& input);

}  // namespace prisp
