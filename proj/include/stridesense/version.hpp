#pragma once

namespace stridesense {
inline constexpr const char* kVersion = "0.1.0";
}
