#include "vegecast/rng.hpp"

#include <cmath>

namespace vegecast {

uint64_t Rng::mix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

NDArray Rng::normal_array(std::vector<int> shape) {
    NDArray a(std::move(shape));
    fill_normal(a);
    return a;
}

void Rng::fill_normal(NDArray& a) {
    for (int64_t i = 0; i < a.size(); ++i) a[i] = normal();
}

} // namespace vegecast
