#pragma once

#include <string>
#include <vector>

namespace prisp {

// One supervised pair over the synthetic alphabet.
struct Example {
  std::string input;
  std::string output;
};

using Dataset = std::vector<Example>;

// A user's interaction history, oldest first. Few-shot selection always takes
// the suffix (most recent items).
struct UserHistory {
  std::string user_id;
  Dataset items;
};

}  // namespace prisp
