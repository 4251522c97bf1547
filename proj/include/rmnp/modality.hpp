#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

#include "rmnp/errors.hpp"

namespace rmnp {

enum class Modality : std::size_t { Metadata = 0, Text = 1, Graph = 2 };

inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::size_t kNumClasses = 2;

inline constexpr std::array<std::string_view, kNumModalities> kModalityNames = {"metadata", "text", "graph"};

inline std::string_view to_string(Modality m) { return kModalityNames[static_cast<std::size_t>(m)]; }

inline Modality parse_modality(std::string_view s) {
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (kModalityNames[m] == s) {
      return static_cast<Modality>(m);
    }
  }
  throw ContractError("unknown modality '" + std::string(s) + "'");
}

}  // namespace rmnp
