#include "valid/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace valid {

std::vector<int> Rng::sample_without_replacement(int n, int k) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    // partial Fisher-Yates: the first k slots end up a uniform k-subset
    for (int i = 0; i < k; ++i) {
        int j = i + uniform_int(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::string Rng::state() const {
    std::ostringstream ss;
    ss << eng_;
    return ss.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream ss(s);
    ss >> eng_;
}

uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> path) {
    uint64_t s = mix_seed(base);
    for (uint64_t p : path) s = mix_seed(s ^ mix_seed(p));
    return s;
}

}  // namespace valid
