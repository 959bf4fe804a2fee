#include "attnkit/rng.hpp"

#include <sstream>

#include "attnkit/errors.hpp"

namespace attnkit {

std::string Rng::save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
}

void Rng::restore_state(const std::string& text) {
    std::istringstream is(text);
    is >> gen_;
    if (is.fail()) {
        throw FormatError("rng: malformed engine state");
    }
}

}  // namespace attnkit
