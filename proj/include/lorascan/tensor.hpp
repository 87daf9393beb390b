#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lorascan/dtype.hpp"

namespace lorascan {

// One named tensor decoded from a container. Values are widened to double
// regardless of storage dtype; layout is row-major.
struct TensorRecord {
    std::string name;
    Dtype dtype = Dtype::F32;
    std::vector<uint64_t> shape;
    std::vector<double> values;

    uint64_t num_elements() const {
        uint64_t n = 1;
        for (uint64_t s : shape) n *= s;
        return n;
    }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

}  // namespace lorascan
