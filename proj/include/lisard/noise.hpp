#pragma once
// Random perturbed companion images: x_r = x_c + sqrt(mu) * n with n drawn
// elementwise from a standard Gaussian, fresh for every batch.

#include "lisard/core.hpp"

namespace lisard {

struct NoiseSpec {
    double mu = 8.0 / 255.0;  // variance-like magnitude, mirrors the attack budget
    bool clamp = true;
    std::uint64_t seed_stream = 0;  // per-batch stream; disjoint streams parallelize safely

    void validate() const { require(mu >= 0.0, "NoiseSpec: mu must be >= 0"); }
};

inline ImageBatch perturb_random(const ImageBatch& x_c, const NoiseSpec& spec) {
    spec.validate();
    Tensor out = x_c.data;
    if (spec.mu > 0.0) {
        RngStream rng(spec.seed_stream);
        const double scale = std::sqrt(spec.mu);
        for (long i = 0; i < out.numel(); ++i) {
            out[i] = static_cast<float>(out[i] + scale * rng.normal());
        }
    }
    if (spec.clamp) {
        for (long i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0f, 1.0f);
    }
    return ImageBatch(std::move(out));
}

}  // namespace lisard
