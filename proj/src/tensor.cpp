#include "sca/tensor.hpp"

#include <cmath>
#include <sstream>

namespace sca {

std::string Shape4::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* where) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape().str() +
                         " vs " + b.shape().str());
    }
}

void check_finite(const Tensor4& t, const char* where) {
    const scalar* p = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(p[i])) {
            throw NumericError(std::string(where) + ": non-finite element at flat index " +
                               std::to_string(i));
        }
    }
}

}  // namespace sca
