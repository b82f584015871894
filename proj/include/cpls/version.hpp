#pragma once

namespace cpls {

inline constexpr const char* kVersion = "0.1.0";

} // namespace cpls
