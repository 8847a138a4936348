#pragma once

namespace bodvw {

inline constexpr const char* kToolVersion = "1.0.0";

}  // namespace bodvw
