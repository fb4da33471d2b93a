#include "millassist/common.hpp"

#include <array>

namespace millassist {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return "validation";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::authorization: return "authorization";
    case ErrorCode::ordering: return "ordering";
    case ErrorCode::range: return "range";
    case ErrorCode::state: return "state";
    case ErrorCode::cycle: return "cycle";
    case ErrorCode::contract: return "contract";
    case ErrorCode::training: return "training";
    case ErrorCode::unavailable: return "unavailable";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

std::string to_hex(std::uint64_t value) {
  static constexpr std::array<char, 16> digits{'0', '1', '2', '3', '4', '5', '6', '7',
                                               '8', '9', 'a', 'b', 'c', 'd', 'e', 'f'};
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

}  // namespace millassist
