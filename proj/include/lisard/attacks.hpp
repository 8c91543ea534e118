#pragma once
// White-box adversarial example generators (FGSM, PGD) and persisted
// evaluation attack sets with checksummed manifests. All perturbation math
// lives in raw pixel space [0,1], so the L-inf budget is exact.

#include "lisard/data.hpp"
#include "lisard/losses.hpp"
#include "lisard/models.hpp"

namespace lisard {

enum class AttackKind { fgsm, pgd };

inline const char* attack_kind_name(AttackKind k) { return k == AttackKind::fgsm ? "fgsm" : "pgd"; }

inline AttackKind attack_kind_from(const std::string& s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "pgd") return AttackKind::pgd;
    throw ContractError("unknown attack kind: " + s);
}

struct AttackSpec {
    AttackKind kind = AttackKind::pgd;
    double epsilon = 8.0 / 255.0;  // L-inf budget, pixel units
    double step_size = 2.0 / 255.0;  // pgd only
    long steps = 10;                 // pgd only
    bool random_start = false;       // pgd only
    long restarts = 1;
    std::uint64_t seed = 0;

    void validate() const {
        require(epsilon > 0.0 && epsilon <= 1.0, "AttackSpec: epsilon must be in (0,1]");
        require(restarts >= 1, "AttackSpec: restarts must be >= 1");
        if (kind == AttackKind::pgd) {
            require(step_size > 0.0, "AttackSpec: pgd step_size must be > 0");
            require(steps >= 1, "AttackSpec: pgd steps must be >= 1");
        }
    }

    // Recommended, not required.
    bool step_exceeds_budget() const {
        return kind == AttackKind::pgd && step_size > epsilon;
    }
};

inline void to_json(json& j, const AttackSpec& s) {
    j = json{{"kind", attack_kind_name(s.kind)}, {"epsilon", s.epsilon},
             {"step_size", s.step_size},         {"steps", s.steps},
             {"random_start", s.random_start},   {"restarts", s.restarts},
             {"seed", s.seed}};
}

inline void from_json(const json& j, AttackSpec& s) {
    s.kind = attack_kind_from(j.at("kind").get<std::string>());
    j.at("epsilon").get_to(s.epsilon);
    s.step_size = j.value("step_size", 0.0);
    s.steps = j.value("steps", 1L);
    s.random_start = j.value("random_start", false);
    s.restarts = j.value("restarts", 1L);
    s.seed = j.value("seed", std::uint64_t{0});
}

namespace detail {

inline float sign0(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

// dCE/dx for the current iterate; throws AttackError on non-finite values.
inline Tensor input_gradient(DifferentiableModel& model, const ImageBatch& x,
                             const LabelBatch& y) {
    Tape tape;
    ForwardResult out = model.forward_full_taped(x, tape);
    Tensor glogits;
    cross_entropy_with_grad(out.logits.data, y, glogits);
    Tensor gx = model.backward_full(glogits, Tensor(), tape);
    for (long b = 0; b < gx.dim(0); ++b) {
        const long sz = gx.numel() / gx.dim(0);
        const float* p = gx.data() + b * sz;
        for (long i = 0; i < sz; ++i) {
            if (!std::isfinite(p[i])) {
                throw AttackError("non-finite input gradient at batch index " +
                                  std::to_string(b));
            }
        }
    }
    return gx;
}

}  // namespace detail

// x_adv = clip_[0,1](x + epsilon * sign(grad_x CE)), sign(0) = 0.
inline ImageBatch fgsm(DifferentiableModel& model, const ImageBatch& x, const LabelBatch& y,
                       double epsilon) {
    require(model.mode() == Mode::inference, "fgsm: model must be in inference mode");
    require(epsilon >= 0.0 && epsilon <= 1.0, "fgsm: epsilon must be in [0,1]");
    require(x.batch() == y.size(), "fgsm: batch size mismatch");
    Tensor gx = detail::input_gradient(model, x, y);
    Tensor adv = x.data;
    const float eps = static_cast<float>(epsilon);
    for (long i = 0; i < adv.numel(); ++i) {
        adv[i] = std::clamp(adv[i] + eps * detail::sign0(gx[i]), 0.0f, 1.0f);
    }
    return ImageBatch(std::move(adv));
}

// Iterated sign steps projected onto the epsilon ball intersected with
// [0,1]. With restarts > 1 the per-sample restart with maximal final loss is
// kept. sample_index_base keys the random-start streams by global sample
// index, so artifact generation is batch-size invariant.
inline ImageBatch pgd(DifferentiableModel& model, const ImageBatch& x, const LabelBatch& y,
                      const AttackSpec& spec, long sample_index_base = 0) {
    require(model.mode() == Mode::inference, "pgd: model must be in inference mode");
    require(spec.kind == AttackKind::pgd, "pgd: spec.kind must be pgd");
    spec.validate();
    require(x.batch() == y.size(), "pgd: batch size mismatch");

    const long batch = x.batch();
    const long sz = x.data.numel() / batch;
    const float eps = static_cast<float>(spec.epsilon);
    const float step = static_cast<float>(spec.step_size);

    Tensor best = x.data;
    std::vector<double> best_loss(static_cast<std::size_t>(batch),
                                  -std::numeric_limits<double>::infinity());

    for (long restart = 0; restart < spec.restarts; ++restart) {
        Tensor cur = x.data;
        if (spec.random_start) {
            for (long b = 0; b < batch; ++b) {
                RngStream rng(mix_seed(spec.seed, stream::attack,
                                       static_cast<std::uint64_t>(restart),
                                       static_cast<std::uint64_t>(sample_index_base + b)));
                float* p = cur.data() + b * sz;
                for (long i = 0; i < sz; ++i) {
                    p[i] = std::clamp(p[i] + static_cast<float>(rng.uniform(-spec.epsilon,
                                                                            spec.epsilon)),
                                      0.0f, 1.0f);
                }
            }
        }
        for (long t = 0; t < spec.steps; ++t) {
            Tensor gx = detail::input_gradient(model, ImageBatch(cur), y);
            for (long i = 0; i < cur.numel(); ++i) {
                float moved = cur[i] + step * detail::sign0(gx[i]);
                float delta = std::clamp(moved - x.data[i], -eps, eps);
                cur[i] = std::clamp(x.data[i] + delta, 0.0f, 1.0f);
            }
        }
        if (spec.restarts == 1) {
            best = std::move(cur);
            break;
        }
        ForwardResult out = model.forward_full(ImageBatch(cur));
        std::vector<double> losses = cross_entropy_per_sample(out.logits.data, y);
        for (long b = 0; b < batch; ++b) {
            if (losses[static_cast<std::size_t>(b)] > best_loss[static_cast<std::size_t>(b)]) {
                best_loss[static_cast<std::size_t>(b)] = losses[static_cast<std::size_t>(b)];
                std::memcpy(best.data() + b * sz, cur.data() + b * sz,
                            sizeof(float) * static_cast<std::size_t>(sz));
            }
        }
    }
    return ImageBatch(std::move(best));
}

// Dispatch on the spec kind; used by training-time companions and artifact
// generation.
inline ImageBatch run_attack(DifferentiableModel& model, const ImageBatch& x, const LabelBatch& y,
                             const AttackSpec& spec, long sample_index_base = 0) {
    if (spec.kind == AttackKind::fgsm) return fgsm(model, x, y, spec.epsilon);
    return pgd(model, x, y, spec, sample_index_base);
}

// ---------------------------------------------------------------------------
// Persisted evaluation attack sets

struct AdvSetArtifact {
    Tensor images;  // N,C,H,W covering the full test split
    json manifest;
    std::string path;  // tensor dump path
};

// Deterministic cache identity of an artifact.
inline std::string advset_key(const std::string& surrogate_hash, const DatasetHandle& ds,
                              const AttackSpec& spec) {
    json j;
    j["surrogate"] = surrogate_hash;
    j["dataset"] = {{"name", ds.name},
                    {"split", split_name(ds.split)},
                    {"length", ds.length()},
                    {"image", {ds.image_spec[0], ds.image_spec[1], ds.image_spec[2]}}};
    j["attack"] = spec;
    return sha256_hex(j.dump());
}

inline void check_budget(const Tensor& adv, const DatasetHandle& ds, double epsilon,
                         double slack = 1e-6) {
    const long sz = ds.image_size();
    for (long i = 0; i < ds.length(); ++i) {
        const float* a = adv.data() + i * sz;
        const float* c = ds.image(i);
        for (long p = 0; p < sz; ++p) {
            require(a[p] >= 0.0f && a[p] <= 1.0f, "adversarial pixel out of [0,1]");
            require(std::abs(static_cast<double>(a[p]) - static_cast<double>(c[p])) <=
                        epsilon + slack,
                    "adversarial perturbation exceeds budget at sample " + std::to_string(i));
        }
    }
}

// Generates one adversarial image per test sample with the surrogate and
// persists (raw little-endian float32 N,C,H,W dump + JSON manifest).
// Regeneration with identical inputs is bit-identical.
inline AdvSetArtifact generate_advset(DifferentiableModel& surrogate, const DatasetHandle& ds,
                                      const AttackSpec& spec, const std::string& out_base,
                                      long batch_size = 256) {
    require(ds.split == Split::test, "generate_advset: dataset must be a test split");
    spec.validate();
    surrogate.set_mode(Mode::inference);

    AdvSetArtifact artifact;
    artifact.images = Tensor({ds.length(), ds.image_spec[0], ds.image_spec[1], ds.image_spec[2]});
    const long sz = ds.image_size();
    for_each_sequential_batch(ds, batch_size, [&](long start, ImageBatch xb, LabelBatch yb) {
        ImageBatch adv = run_attack(surrogate, xb, yb, spec, start);
        std::memcpy(artifact.images.data() + start * sz, adv.data.data(),
                    sizeof(float) * static_cast<std::size_t>(adv.data.numel()));
    });
    check_budget(artifact.images, ds, spec.epsilon);

    fs::path bin_path(out_base + ".bin");
    if (bin_path.has_parent_path()) fs::create_directories(bin_path.parent_path());
    {
        std::ofstream os(bin_path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write advset tensor dump: " + bin_path.string());
        os.write(reinterpret_cast<const char*>(artifact.images.data()),
                 static_cast<std::streamsize>(sizeof(float) * artifact.images.numel()));
    }
    std::string surrogate_hash = model_state_sha256(surrogate);
    json m;
    m["format"] = "lisard-advset-v1";
    m["surrogate"] = surrogate_hash;
    m["dataset"] = {{"name", ds.name},
                    {"split", split_name(ds.split)},
                    {"length", ds.length()},
                    {"image", {ds.image_spec[0], ds.image_spec[1], ds.image_spec[2]}}};
    m["attack"] = spec;
    m["seed"] = spec.seed;
    m["shape"] = {ds.length(), ds.image_spec[0], ds.image_spec[1], ds.image_spec[2]};
    m["dtype"] = "f32le";
    m["content_sha256"] = sha256_file_hex(bin_path.string());
    m["key"] = advset_key(surrogate_hash, ds, spec);
    m["created"] = iso8601_utc_now();
    std::ofstream ms(out_base + ".json", std::ios::trunc);
    if (!ms) throw IoError("cannot write advset manifest: " + out_base + ".json");
    ms << m.dump(2) << '\n';
    artifact.manifest = std::move(m);
    artifact.path = bin_path.string();
    return artifact;
}

// Reload and hash-verify a persisted artifact.
inline AdvSetArtifact load_advset(const std::string& out_base) {
    std::ifstream ms(out_base + ".json");
    if (!ms) throw IoError("missing advset manifest: " + out_base + ".json");
    json m;
    ms >> m;
    fs::path bin_path(out_base + ".bin");
    std::string want = m.at("content_sha256").get<std::string>();
    std::string got = sha256_file_hex(bin_path.string());
    if (want != got) {
        throw IoError("advset content hash mismatch for " + bin_path.string() + " (manifest " +
                      want.substr(0, 12) + "..., file " + got.substr(0, 12) + "...)");
    }
    auto shape = m.at("shape").get<std::vector<long>>();
    require(shape.size() == 4, "advset manifest shape must be rank 4");
    AdvSetArtifact artifact;
    artifact.images = Tensor(shape);
    std::ifstream is(bin_path, std::ios::binary);
    if (!is) throw IoError("missing advset tensor dump: " + bin_path.string());
    is.read(reinterpret_cast<char*>(artifact.images.data()),
            static_cast<std::streamsize>(sizeof(float) * artifact.images.numel()));
    if (!is) throw IoError("truncated advset tensor dump: " + bin_path.string());
    artifact.manifest = std::move(m);
    artifact.path = bin_path.string();
    return artifact;
}

}  // namespace lisard
