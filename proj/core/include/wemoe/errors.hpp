#pragma once

#include <stdexcept>
#include <string>

namespace wemoe {

// Error taxonomy; the CLI maps these onto process exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis disagreements between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// Two parameter sets do not share names, shapes and order.
struct CongruenceError : Error {
    using Error::Error;
};

// Bad magic, unsupported version, unparseable manifest.
struct FormatError : Error {
    using Error::Error;
};

// Structurally valid file whose contents are inconsistent (offsets, sizes).
struct IntegrityError : Error {
    using Error::Error;
};

// Invalid run configuration or arguments.
struct ConfigError : Error {
    using Error::Error;
};

// A required upstream artifact (checkpoint, dataset) is absent.
struct MissingArtifactError : Error {
    using Error::Error;
};

// NaN/Inf detected while finite checks are enabled.
struct NumericalError : Error {
    using Error::Error;
};

// API contract violation (e.g. backward on a non-scalar loss).
struct ContractError : Error {
    using Error::Error;
};

// A checkpoint is missing parameters the model requires.
struct IncompatibleModelError : Error {
    using Error::Error;
};

}  // namespace wemoe
