#pragma once

namespace pal {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace pal
