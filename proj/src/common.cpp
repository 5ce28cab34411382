#include "seq2seg/common.hpp"

#include <cstdlib>

namespace seq2seg {

int worker_thread_count() {
    static const int cached = [] {
        const char* env = std::getenv("SEQ2SEG_THREADS");
        if (!env) return 1;
        const int v = std::atoi(env);
        return v >= 1 ? v : 1;
    }();
    return cached;
}

}  // namespace seq2seg
