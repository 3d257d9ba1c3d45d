// Standalone acceptance battery: one line per criterion, nonzero exit when
// any fails.  --threads widens the data-parallel criteria; --flip-theta-sign
// injects the drift-sign fault the validation workflow must catch.

#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "ivol/acceptance.hpp"

int main(int argc, char** argv) {
    ivol::AcceptanceOptions opt;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--flip-theta-sign") == 0) {
            opt.flip_theta_sign = true;
        } else if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc) {
            opt.threads = static_cast<std::size_t>(std::strtoull(argv[++i], nullptr, 10));
            if (opt.threads == 0) opt.threads = 1;
        } else {
            std::fprintf(stderr, "usage: %s [--threads N] [--flip-theta-sign]\n", argv[0]);
            return 2;
        }
    }

    bool all_pass = true;
    for (const ivol::CriterionResult& r : ivol::run_acceptance(opt)) {
        std::printf("%s  %s: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.c_str(), r.seconds);
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}
