#pragma once
// Training loops: standard supervised training for baselines and surrogates,
// and similarity-regularized training where every batch sees a clean image
// and a perturbed companion (Gaussian noise by default, or an attack against
// the current model state for the perturbation-mechanism ablation).

#include <chrono>
#include <optional>

#include "lisard/attacks.hpp"
#include "lisard/noise.hpp"

namespace lisard {

// Caps Eigen and OpenMP threads for the lifetime of the object; strict
// determinism pins everything to one thread.
class ThreadLimit {
public:
    explicit ThreadLimit(int n) {
        prev_eigen_ = Eigen::nbThreads();
        Eigen::setNbThreads(n);
#ifdef _OPENMP
        prev_omp_ = omp_get_max_threads();
        omp_set_num_threads(n);
#endif
    }
    ~ThreadLimit() {
        Eigen::setNbThreads(prev_eigen_);
#ifdef _OPENMP
        omp_set_num_threads(prev_omp_);
#endif
    }

private:
    int prev_eigen_ = 0;
    int prev_omp_ = 1;
};

enum class TrainMode { standard, lisard };
enum class PerturbMode { random, fgsm, pgd };

struct TrainConfig {
    TrainMode mode = TrainMode::lisard;
    long epochs = 200;
    long batch_size = 2048;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    PerturbMode perturb_mode = PerturbMode::random;
    NoiseSpec noise;    // perturb_mode == random
    AttackSpec attack;  // perturb_mode == fgsm/pgd
    LossWeights weights;
    std::uint64_t seed = 0;
    long checkpoint_every = 50;
    long micro_batches = 1;
    bool strict_determinism = false;
    bool augment = false;
    bool include_lc = true;  // loss-terms ablation switches
    bool include_lr = true;

    void validate() const;
};

struct EpochRow {
    long epoch = 0;
    double alpha = 0.0;
    double l_c = 0.0;
    double l_r = 0.0;
    double l_s = 0.0;
    double composite = 0.0;
    double train_accuracy = 0.0;
    double wall_time = 0.0;
};

struct TrainRecord {
    std::vector<EpochRow> rows;

    std::string to_csv() const;
    static TrainRecord from_csv(std::istream& is);
};

class SgdOptimizer;

struct TrainCallbacks {
    std::function<void(long epoch, DifferentiableModel& model, SgdOptimizer& opt,
                       const TrainRecord& record)>
        on_epoch_end;
};

// ---------------------------------------------------------------------------
// Optimizer

// SGD with momentum; weight decay enters the gradient before the momentum
// update, so lr = 0 leaves weights untouched.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    void step(const std::vector<Param*>& params) {
        if (velocity_.empty()) {
            for (Param* p : params) velocity_.emplace_back(p->value.shape());
        }
        require(velocity_.size() == params.size(), "optimizer/model parameter count mismatch");
        const float lr = static_cast<float>(lr_);
        const float mom = static_cast<float>(momentum_);
        const float wd = static_cast<float>(weight_decay_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param* p = params[i];
            p->ensure_grad();
            Tensor& v = velocity_[i];
            for (long j = 0; j < v.numel(); ++j) {
                float g = p->grad[j] + wd * p->value[j];
                v[j] = mom * v[j] + g;
                p->value[j] -= lr * v[j];
            }
        }
    }

    NamedState state() {
        NamedState out;
        for (std::size_t i = 0; i < velocity_.size(); ++i) {
            out.emplace_back("velocity." + std::to_string(i), &velocity_[i]);
        }
        return out;
    }

    void restore(const std::map<std::string, Tensor>& tensors, std::size_t n_params) {
        velocity_.clear();
        for (std::size_t i = 0; i < n_params; ++i) {
            auto it = tensors.find("velocity." + std::to_string(i));
            if (it == tensors.end()) throw IoError("optimizer state missing velocity tensor");
            velocity_.push_back(it->second);
        }
    }

    bool initialized() const { return !velocity_.empty(); }

private:
    double lr_, momentum_, weight_decay_;
    std::vector<Tensor> velocity_;
};

// ---------------------------------------------------------------------------
// Config and record

inline void TrainConfig::validate() const {
    require(epochs >= 0, "TrainConfig: epochs must be >= 0");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(lr >= 0.0, "TrainConfig: lr must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must be in [0,1)");
    require(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
    require(micro_batches >= 1, "TrainConfig: micro_batches must be >= 1");
    require(checkpoint_every >= 1, "TrainConfig: checkpoint_every must be >= 1");
    if (mode == TrainMode::lisard) {
        weights.validate();
        if (perturb_mode == PerturbMode::random) {
            noise.validate();
        }
    }
}

inline const char* train_mode_name(TrainMode m) {
    return m == TrainMode::standard ? "standard" : "lisard";
}

inline const char* perturb_mode_name(PerturbMode m) {
    switch (m) {
        case PerturbMode::random: return "random";
        case PerturbMode::fgsm: return "fgsm";
        default: return "pgd";
    }
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"mode", train_mode_name(c.mode)},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"lr", c.lr},
             {"momentum", c.momentum},
             {"weight_decay", c.weight_decay},
             {"perturb_mode", perturb_mode_name(c.perturb_mode)},
             {"noise", {{"mu", c.noise.mu}, {"clamp", c.noise.clamp}}},
             {"attack", c.attack},
             {"loss",
              {{"lambda", c.weights.lambda_},
               {"tau", c.weights.tau},
               {"alpha0", c.weights.alpha0},
               {"delta", c.weights.delta},
               {"include_lc", c.include_lc},
               {"include_lr", c.include_lr}}},
             {"seed", c.seed},
             {"checkpoint_every", c.checkpoint_every},
             {"micro_batches", c.micro_batches},
             {"strict_determinism", c.strict_determinism},
             {"augment", c.augment}};
}

inline std::string train_config_hash(const TrainConfig& c) {
    json j;
    to_json(j, c);
    return sha256_hex(j.dump());
}

inline std::string TrainRecord::to_csv() const {
    std::string out = "epoch,alpha,l_c,l_r,l_s,composite,train_accuracy,wall_time\n";
    for (const EpochRow& r : rows) {
        out += std::to_string(r.epoch) + ',' + fmt_g(r.alpha, 17) + ',' + fmt_g(r.l_c) + ',' +
               fmt_g(r.l_r) + ',' + fmt_g(r.l_s) + ',' + fmt_g(r.composite) + ',' +
               fmt_g(r.train_accuracy) + ',' + fmt_g(r.wall_time) + '\n';
    }
    return out;
}

inline TrainRecord TrainRecord::from_csv(std::istream& is) {
    TrainRecord rec;
    std::string line;
    if (!std::getline(is, line)) return rec;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        EpochRow r{};
        std::istringstream ls(line);
        std::string field;
        auto next = [&]() {
            if (!std::getline(ls, field, ',')) throw IoError("malformed train record row");
            return field;
        };
        r.epoch = std::stol(next());
        r.alpha = std::stod(next());
        r.l_c = std::stod(next());
        r.l_r = std::stod(next());
        r.l_s = std::stod(next());
        r.composite = std::stod(next());
        r.train_accuracy = std::stod(next());
        r.wall_time = std::stod(next());
        rec.rows.push_back(r);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Training loops

namespace detail {

struct EpochStats {
    double loss_c = 0.0, loss_r = 0.0, loss_s = 0.0;
    long ce_samples = 0;
    long sim_chunks = 0;
    long correct = 0;

    void add_ce(double l_c, double l_r, long n) {
        loss_c += l_c * n;
        loss_r += l_r * n;
        ce_samples += n;
    }
    void add_sim(double l_s) {
        loss_s += l_s;
        ++sim_chunks;
    }
    double mean_c() const { return ce_samples ? loss_c / ce_samples : 0.0; }
    double mean_r() const { return ce_samples ? loss_r / ce_samples : 0.0; }
    double mean_s() const { return sim_chunks ? loss_s / sim_chunks : 0.0; }
};

inline void count_correct(const Tensor& logits, const LabelBatch& y, long& correct) {
    LogitBatch lb(logits);
    LabelBatch pred = argmax_classes(lb);
    for (long i = 0; i < y.size(); ++i) {
        if (pred[i] == y[i]) ++correct;
    }
}

inline void check_finite(double loss, long epoch, long step) {
    if (!std::isfinite(loss)) {
        throw Error("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(step));
    }
}

inline void check_logits(const Tensor& logits, long epoch, long step) {
    if (!logits.all_finite()) check_finite(std::numeric_limits<double>::quiet_NaN(), epoch, step);
}

}  // namespace detail

// Minimizes mean cross-entropy on clean images. The returned record logs
// alpha = 1 (pure classification) so the composite column stays meaningful.
inline TrainRecord train_standard(DifferentiableModel& model, const DatasetHandle& ds,
                                  const TrainConfig& cfg, const TrainCallbacks& cb = {},
                                  long start_epoch = 1, TrainRecord record = {},
                                  SgdOptimizer* resumed_opt = nullptr) {
    require(cfg.mode == TrainMode::standard, "train_standard: cfg.mode must be standard");
    cfg.validate();
    std::optional<ThreadLimit> threads;
    if (cfg.strict_determinism) threads.emplace(1);
    SgdOptimizer local_opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    SgdOptimizer& opt = resumed_opt ? *resumed_opt : local_opt;
    BatchPlan plan{cfg.batch_size, cfg.seed, false};
    for (long epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        detail::EpochStats stats;
        long step = 0;
        model.set_mode(Mode::train);
        for_each_batch(ds, plan, epoch, [&](ImageBatch xb, LabelBatch yb) {
            if (cfg.augment) {
                RngStream rng(mix_seed(cfg.seed, 0xau, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(step)));
                xb = augment_batch(xb, rng);
            }
            Tape tape;
            ForwardResult out = model.forward_full_taped(xb, tape);
            detail::check_logits(out.logits.data, epoch, step);
            Tensor glogits;
            double l_c = cross_entropy_with_grad(out.logits.data, yb, glogits);
            detail::check_finite(l_c, epoch, step);
            model.zero_grad();
            model.backward_full(glogits, Tensor(), tape);
            opt.step(model.params());
            stats.add_ce(l_c, 0.0, yb.size());
            detail::count_correct(out.logits.data, yb, stats.correct);
            ++step;
        });
        auto t1 = std::chrono::steady_clock::now();
        EpochRow row;
        row.epoch = epoch;
        row.alpha = 1.0;
        row.l_c = stats.mean_c();
        row.l_r = 0.0;
        row.l_s = 0.0;
        row.composite = row.l_c;
        row.train_accuracy = static_cast<double>(stats.correct) / ds.length();
        row.wall_time =
            cfg.strict_determinism ? 0.0 : std::chrono::duration<double>(t1 - t0).count();
        record.rows.push_back(row);
        if (cb.on_epoch_end) cb.on_epoch_end(epoch, model, opt, record);
    }
    return record;
}

// Per batch: build the perturbed companion, run both images through the
// model, and step on alpha * (L_C + L_R) + (1 - alpha) * L_S / tau with
// alpha updated once per epoch. Training-time attack companions target the
// current model snapshot in inference mode; the update pass runs in train
// mode. With gradient accumulation the classification terms honor the full
// batch while the cross-correlation matrix is computed per micro-batch.
inline TrainRecord train_lisard(DifferentiableModel& model, const DatasetHandle& ds,
                                const TrainConfig& cfg, const TrainCallbacks& cb = {},
                                long start_epoch = 1, TrainRecord record = {},
                                SgdOptimizer* resumed_opt = nullptr) {
    require(cfg.mode == TrainMode::lisard, "train_lisard: cfg.mode must be lisard");
    cfg.validate();
    std::optional<ThreadLimit> threads;
    if (cfg.strict_determinism) threads.emplace(1);
    SgdOptimizer local_opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    SgdOptimizer& opt = resumed_opt ? *resumed_opt : local_opt;
    BatchPlan plan{cfg.batch_size, cfg.seed, false};
    const double tau = cfg.weights.tau;
    const double lambda = cfg.weights.lambda_;

    for (long epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        const double alpha = alpha_at(epoch, cfg.weights);
        detail::EpochStats stats;
        long step = 0;
        for_each_batch(ds, plan, epoch, [&](ImageBatch xb, LabelBatch yb) {
            if (cfg.augment) {
                RngStream rng(mix_seed(cfg.seed, 0xau, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(step)));
                xb = augment_batch(xb, rng);
            }
            // Companion images for the whole batch.
            ImageBatch xr;
            if (cfg.perturb_mode == PerturbMode::random) {
                NoiseSpec ns = cfg.noise;
                ns.seed_stream = mix_seed(cfg.seed, stream::noise,
                                          static_cast<std::uint64_t>(epoch),
                                          static_cast<std::uint64_t>(step));
                xr = perturb_random(xb, ns);
            } else {
                AttackSpec as = cfg.attack;
                as.seed = mix_seed(cfg.seed, stream::attack, static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(step));
                model.set_mode(Mode::inference);
                xr = run_attack(model, xb, yb, as);
            }
            model.set_mode(Mode::train);
            model.zero_grad();

            const long total = yb.size();
            const long n_chunks = std::min<long>(cfg.micro_batches, total);
            const long chunk_len = (total + n_chunks - 1) / n_chunks;
            // Chunks too small for batch statistics skip the similarity term.
            long sim_chunks = 0;
            for (long start = 0; start < total; start += chunk_len) {
                if (std::min(chunk_len, total - start) >= 2) ++sim_chunks;
            }

            double batch_lc = 0.0, batch_lr = 0.0, batch_ls = 0.0;
            long ls_chunks = 0;
            for (long start = 0; start < total; start += chunk_len) {
                const long count = std::min(chunk_len, total - start);
                const double frac = static_cast<double>(count) / static_cast<double>(total);

                Tensor xc_chunk({count, xb.channels(), xb.height(), xb.width()});
                Tensor xr_chunk(xc_chunk.shape());
                const long sz = xb.data.numel() / xb.batch();
                std::memcpy(xc_chunk.data(), xb.data.data() + start * sz,
                            sizeof(float) * static_cast<std::size_t>(count * sz));
                std::memcpy(xr_chunk.data(), xr.data.data() + start * sz,
                            sizeof(float) * static_cast<std::size_t>(count * sz));
                LabelBatch y_chunk;
                y_chunk.labels.assign(yb.labels.begin() + start,
                                      yb.labels.begin() + start + count);

                Tape tape_c, tape_r;
                ForwardResult out_c =
                    model.forward_full_taped(ImageBatch(std::move(xc_chunk)), tape_c);
                ForwardResult out_r =
                    model.forward_full_taped(ImageBatch(std::move(xr_chunk)), tape_r);
                detail::check_logits(out_c.logits.data, epoch, step);
                detail::check_logits(out_r.logits.data, epoch, step);

                Tensor glogits_c, glogits_r;
                double l_c = cross_entropy_with_grad(out_c.logits.data, y_chunk, glogits_c);
                double l_r = cross_entropy_with_grad(out_r.logits.data, y_chunk, glogits_r);
                batch_lc += l_c * frac;
                batch_lr += l_r * frac;
                detail::count_correct(out_c.logits.data, y_chunk, stats.correct);

                const double wc = cfg.include_lc ? alpha * frac : 0.0;
                const double wr = cfg.include_lr ? alpha * frac : 0.0;
                for (long i = 0; i < glogits_c.numel(); ++i) {
                    glogits_c[i] = static_cast<float>(glogits_c[i] * wc);
                    glogits_r[i] = static_cast<float>(glogits_r[i] * wr);
                }

                Tensor gembed_c, gembed_r;
                if (count >= 2) {
                    const long e = out_c.embedding.width();
                    MatrixD za = to_double(out_c.embedding.data, count, e);
                    MatrixD zb = to_double(out_r.embedding.data, count, e);
                    SimilarityGrad sg = similarity_loss_grad(za, zb, lambda);
                    batch_ls += sg.loss;
                    ++ls_chunks;
                    const double ws = (1.0 - alpha) / (tau * static_cast<double>(sim_chunks));
                    gembed_c = Tensor({count, e});
                    gembed_r = Tensor({count, e});
                    for (long r = 0; r < count; ++r) {
                        for (long c = 0; c < e; ++c) {
                            gembed_c.at(r, c) = static_cast<float>(sg.dza(r, c) * ws);
                            gembed_r.at(r, c) = static_cast<float>(sg.dzb(r, c) * ws);
                        }
                    }
                }
                model.backward_full(glogits_c, gembed_c, tape_c);
                model.backward_full(glogits_r, gembed_r, tape_r);
            }
            double batch_ls_mean = ls_chunks ? batch_ls / ls_chunks : 0.0;
            double composite =
                composite_loss(cfg.include_lc ? batch_lc : 0.0, cfg.include_lr ? batch_lr : 0.0,
                               batch_ls_mean, alpha, tau);
            detail::check_finite(composite, epoch, step);
            opt.step(model.params());
            stats.add_ce(batch_lc, batch_lr, total);
            if (ls_chunks) stats.add_sim(batch_ls_mean);
            ++step;
        });
        auto t1 = std::chrono::steady_clock::now();
        EpochRow row;
        row.epoch = epoch;
        row.alpha = alpha;
        row.l_c = stats.mean_c();
        row.l_r = stats.mean_r();
        row.l_s = stats.mean_s();
        row.composite = composite_loss(row.l_c, row.l_r, row.l_s, alpha, tau);
        row.train_accuracy = static_cast<double>(stats.correct) / ds.length();
        row.wall_time =
            cfg.strict_determinism ? 0.0 : std::chrono::duration<double>(t1 - t0).count();
        record.rows.push_back(row);
        if (cb.on_epoch_end) cb.on_epoch_end(epoch, model, opt, record);
    }
    return record;
}

inline TrainRecord train_model(DifferentiableModel& model, const DatasetHandle& ds,
                               const TrainConfig& cfg, const TrainCallbacks& cb = {},
                               long start_epoch = 1, TrainRecord record = {},
                               SgdOptimizer* resumed_opt = nullptr) {
    if (cfg.mode == TrainMode::standard) {
        return train_standard(model, ds, cfg, cb, start_epoch, std::move(record), resumed_opt);
    }
    return train_lisard(model, ds, cfg, cb, start_epoch, std::move(record), resumed_opt);
}

}  // namespace lisard
