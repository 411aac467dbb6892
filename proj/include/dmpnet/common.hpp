#pragma once

#include <stdexcept>
#include <string>

namespace dmpnet {

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace dmpnet
