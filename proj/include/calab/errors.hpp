#ifndef CALAB_ERRORS_HPP
#define CALAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace calab {

/// Base class for all calab exceptions.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimensions do not line up.
struct shape_error : error {
    explicit shape_error(const std::string& msg) : error(msg) {}
};

/// Non-finite or otherwise unusable input values.
struct input_error : error {
    explicit input_error(const std::string& msg) : error(msg) {}
};

/// Invalid configuration (bad hyperparameter, batch too small, ...).
struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

/// A calibration metric cannot be computed (empty set, N < M, ...).
struct metric_error : error {
    explicit metric_error(const std::string& msg) : error(msg) {}
};

/// File or serialization failure.
struct io_error : error {
    explicit io_error(const std::string& msg) : error(msg) {}
};

/// Training produced a non-finite loss.
struct divergence_error : error {
    explicit divergence_error(const std::string& msg) : error(msg) {}
};

} // namespace calab

#endif // CALAB_ERRORS_HPP
