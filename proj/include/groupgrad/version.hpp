#pragma once

namespace groupgrad {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace groupgrad
