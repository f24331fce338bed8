#pragma once

#include <iostream>
#include <string_view>

namespace focustune {

inline bool& warnings_enabled() {
    static bool enabled = true;
    return enabled;
}

inline void log_warning(std::string_view message) {
    if (warnings_enabled()) {
        std::clog << "warning: " << message << '\n';
    }
}

} // namespace focustune
