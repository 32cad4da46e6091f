#pragma once

// Character-level tokenizer over printable ASCII plus reserved specials.
// Vocabulary layout:
//   0..94   printable ASCII 0x20..0x7e
//   95      end-of-text (doubles as the scoring context start)
//   96      "[MASK]" (atomic)
//   97      unknown-key marker, local tokenizers only
//   98..    key-token slots, local tokenizers only
// The public tokenizer never produces ids >= 97; key strings fed to it fall
// back to their character split.

#include <stdexcept>
#include <string>
#include <vector>

namespace securegate {

namespace tok {
constexpr int kNumPrintable = 95;
constexpr int kEot = 95;
constexpr int kMask = 96;
constexpr int kUnknownKey = 97;
constexpr int kFirstKeySlot = 98;
constexpr int kNumReserved = 98;  // ids below kFirstKeySlot
inline const char* kMaskText = "[MASK]";
}  // namespace tok

inline std::vector<int> public_encode(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  std::size_t i = 0;
  const std::string mask = tok::kMaskText;
  while (i < text.size()) {
    if (text.compare(i, mask.size(), mask) == 0) {
      ids.push_back(tok::kMask);
      i += mask.size();
      continue;
    }
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (c < 0x20 || c > 0x7e)
      throw std::invalid_argument("tokenizer: byte " + std::to_string(c) +
                                  " at offset " + std::to_string(i) +
                                  " is outside the printable alphabet");
    ids.push_back(c - 0x20);
    ++i;
  }
  return ids;
}

inline std::string public_decode(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < tok::kNumPrintable)
      out.push_back(static_cast<char>(id + 0x20));
    else if (id == tok::kMask)
      out += tok::kMaskText;
    // end-of-text and reserved slots render as nothing
  }
  return out;
}

}  // namespace securegate
