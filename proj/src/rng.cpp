#include "cllab/rng.hpp"

namespace cllab {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

uint64_t mix_seed(uint64_t seed, std::string_view key) {
    return splitmix64(seed ^ splitmix64(fnv1a(key)));
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x51ed2701ULL));
}

uint64_t mix_seed(uint64_t seed, uint64_t index, std::string_view key) {
    return mix_seed(mix_seed(seed, index), key);
}

}  // namespace cllab
