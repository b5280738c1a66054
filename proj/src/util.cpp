#include "hgnp/util.hpp"

#include <charconv>
#include <cstdio>

namespace hgnp {

std::string format_double(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace hgnp
