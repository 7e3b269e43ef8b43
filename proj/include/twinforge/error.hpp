#pragma once

#include <stdexcept>
#include <string>

namespace twinforge {

/// Error categories; the CLI maps them to exit codes (config -> 2, io/numeric -> 3).
enum class errc { config, io, numeric };

class error : public std::runtime_error {
public:
    error(errc kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    errc kind() const { return kind_; }

private:
    errc kind_;
};

} // namespace twinforge
