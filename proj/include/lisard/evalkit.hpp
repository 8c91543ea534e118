#pragma once
// Gray-box evaluation protocol: attack sets are generated once from a
// surrogate model and every target is scored on literally the same pixels.
// Targets are held through the inference-only interface, so no code path
// here can request their gradients. Also the embedding-overlap diagnostics
// (first-principal-axis statistic and the decidability index d').

#include <iomanip>

#include "lisard/trainer.hpp"

namespace lisard {

// ---------------------------------------------------------------------------
// Decidability index

struct DecidabilityResult {
    double dprime = 0.0;
    double mean_a = 0.0, sigma_a = 0.0;
    double mean_b = 0.0, sigma_b = 0.0;
};

// d' = |mean_a - mean_b| / sqrt((var_a + var_b) / 2) with unbiased
// variances. Zero pooled variance yields 0 for equal means and +infinity
// otherwise.
inline DecidabilityResult decidability(const std::vector<double>& a,
                                       const std::vector<double>& b) {
    require(a.size() >= 2 && b.size() >= 2, "decidability: each sample needs length >= 2");
    auto stats = [](const std::vector<double>& v, double& mean, double& var) {
        double s = 0.0;
        for (double x : v) s += x;
        mean = s / static_cast<double>(v.size());
        double q = 0.0;
        for (double x : v) q += (x - mean) * (x - mean);
        var = q / static_cast<double>(v.size() - 1);
    };
    DecidabilityResult r;
    double va = 0.0, vb = 0.0;
    stats(a, r.mean_a, va);
    stats(b, r.mean_b, vb);
    r.sigma_a = std::sqrt(va);
    r.sigma_b = std::sqrt(vb);
    const double pooled = (va + vb) / 2.0;
    const double sep = std::abs(r.mean_a - r.mean_b);
    if (pooled <= 0.0) {
        r.dprime = sep == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
        r.dprime = sep / std::sqrt(pooled);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Embedding statistic

// Scalar statistic per sample: the projection of each embedding onto the
// first principal axis of the clean-set embeddings (the top singular
// direction of the embedding matrix, not mean-centered — for non-negative
// post-ReLU embeddings this axis tracks both magnitude and direction drift,
// which is what attacked embeddings change). The axis is fitted once on
// clean data and reused for attacked data. A degenerate fit (near-constant
// projections) falls back to the embedding L2 norm, and the choice is
// recorded.
class EmbeddingProjector {
public:
    void fit(const MatrixD& clean_embeddings) {
        require(clean_embeddings.rows() >= 2, "EmbeddingProjector: need >= 2 samples");
        const long e = clean_embeddings.cols();
        MatrixD moment = clean_embeddings.transpose() * clean_embeddings /
                         static_cast<double>(clean_embeddings.rows());
        // Power iteration from a fixed start; plenty for the top axis.
        Eigen::VectorXd v = Eigen::VectorXd::Ones(e).normalized();
        double eigenvalue = 0.0;
        for (int it = 0; it < 256; ++it) {
            Eigen::VectorXd w = moment * v;
            double n = w.norm();
            if (!std::isfinite(n) || n < 1e-12) {
                eigenvalue = 0.0;
                break;
            }
            v = w / n;
            eigenvalue = n;
        }
        fitted_ = true;
        if (eigenvalue < 1e-10) {
            fallback_ = true;
            return;
        }
        // Deterministic sign: largest-magnitude coordinate positive.
        long arg = 0;
        for (long i = 1; i < e; ++i) {
            if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
        }
        if (v(arg) < 0.0) v = -v;
        axis_ = v;
        // Constant projections carry no information; fall back.
        Eigen::VectorXd proj = clean_embeddings * axis_;
        double mean = proj.mean();
        double var = (proj.array() - mean).square().sum() /
                     static_cast<double>(proj.size() - 1);
        fallback_ = var < 1e-12;
    }

    void fit(ClassifierModel& model, const DatasetHandle& clean, long batch_size = 256) {
        fit(collect_embeddings(model, clean, batch_size));
    }

    std::vector<double> statistic(const MatrixD& embeddings) const {
        require(fitted_, "EmbeddingProjector: fit() before statistic()");
        std::vector<double> out(static_cast<std::size_t>(embeddings.rows()));
        if (fallback_) {
            for (long i = 0; i < embeddings.rows(); ++i) out[static_cast<std::size_t>(i)] =
                embeddings.row(i).norm();
        } else {
            Eigen::VectorXd proj = embeddings * axis_;
            for (long i = 0; i < proj.size(); ++i) out[static_cast<std::size_t>(i)] = proj(i);
        }
        return out;
    }

    std::vector<double> statistic(ClassifierModel& model, const ImageBatch& x) const {
        require(model.mode() == Mode::inference, "embedding statistic requires inference mode");
        ForwardResult out = model.forward_full(x);
        return statistic(to_double(out.embedding.data, out.embedding.batch(),
                                   out.embedding.width()));
    }

    bool used_fallback() const { return fallback_; }
    std::string name() const { return fallback_ ? "l2-norm" : "principal-axis-projection"; }

    static MatrixD collect_embeddings(ClassifierModel& model, const DatasetHandle& ds,
                                      long batch_size = 256) {
        require(model.mode() == Mode::inference, "collect_embeddings requires inference mode");
        MatrixD all(ds.length(), model.embedding_width());
        for_each_sequential_batch(ds, batch_size, [&](long start, ImageBatch xb, LabelBatch) {
            ForwardResult out = model.forward_full(xb);
            all.middleRows(start, xb.batch()) =
                to_double(out.embedding.data, out.embedding.batch(), out.embedding.width());
        });
        return all;
    }

private:
    Eigen::VectorXd axis_;
    bool fitted_ = false;
    bool fallback_ = false;
};

inline std::vector<double> embedding_statistic(ClassifierModel& model, const ImageBatch& x,
                                               const EmbeddingProjector& projector) {
    return projector.statistic(model, x);
}

// ---------------------------------------------------------------------------
// Robust accuracy

inline LabelBatch predict_on_tensor(ClassifierModel& model, const Tensor& images,
                                    long batch_size = 256) {
    const long n = images.dim(0);
    const long sz = images.numel() / n;
    LabelBatch pred;
    pred.labels.reserve(static_cast<std::size_t>(n));
    for (long start = 0; start < n; start += batch_size) {
        const long count = std::min(batch_size, n - start);
        Tensor chunk({count, images.dim(1), images.dim(2), images.dim(3)});
        std::memcpy(chunk.data(), images.data() + start * sz,
                    sizeof(float) * static_cast<std::size_t>(count * sz));
        LabelBatch p = predict_classes(model, ImageBatch(std::move(chunk)));
        pred.labels.insert(pred.labels.end(), p.labels.begin(), p.labels.end());
    }
    return pred;
}

// Accuracy of argmax predictions over a persisted attack set.
inline double robust_accuracy(ClassifierModel& model, const AdvSetArtifact& artifact,
                              const LabelBatch& labels) {
    require(artifact.images.rank() == 4 && artifact.images.dim(0) >= 1,
            "robust_accuracy: empty or malformed artifact");
    require(artifact.images.dim(0) == labels.size(),
            "robust_accuracy: artifact/label length mismatch");
    auto spec = model.input_spec();
    require(artifact.images.dim(1) == spec[0] && artifact.images.dim(2) == spec[1] &&
                artifact.images.dim(3) == spec[2],
            "robust_accuracy: artifact shape does not match model input");
    model.set_mode(Mode::inference);
    return accuracy(predict_on_tensor(model, artifact.images), labels);
}

inline double clean_accuracy(ClassifierModel& model, const DatasetHandle& ds,
                             long batch_size = 256) {
    model.set_mode(Mode::inference);
    LabelBatch pred;
    pred.labels.reserve(static_cast<std::size_t>(ds.length()));
    for_each_sequential_batch(ds, batch_size, [&](long, ImageBatch xb, LabelBatch) {
        LabelBatch p = predict_classes(model, xb);
        pred.labels.insert(pred.labels.end(), p.labels.begin(), p.labels.end());
    });
    return accuracy(pred, all_labels(ds));
}

// ---------------------------------------------------------------------------
// Gray-box protocol

struct NamedAttack {
    std::string name;  // display name; flags substitutes like the AA slot
    AttackSpec spec;
};

struct EvalRow {
    std::string target;
    std::string attack;  // "clean" or an attack display name
    double accuracy = 0.0;
};

struct DprimeRow {
    std::string target;
    std::string attack;
    std::string statistic;
    double mean_clean = 0.0, sigma_clean = 0.0;
    double mean_adv = 0.0, sigma_adv = 0.0;
    double dprime = 0.0;
};

// Raw statistic samples for figure output; never serialized into the JSON
// report.
struct StatSamples {
    std::string target;
    std::string attack;
    std::vector<double> clean_stat;
    std::vector<double> adv_stat;
};

struct EvalReport {
    std::vector<std::string> attack_names;
    std::vector<EvalRow> rows;
    std::vector<DprimeRow> dprime_rows;
    std::vector<StatSamples> stat_samples;
    json provenance;  // surrogate hash, dataset, advset manifests, cache hits

    double lookup(const std::string& target, const std::string& attack) const {
        for (const EvalRow& r : rows) {
            if (r.target == target && r.attack == attack) return r.accuracy;
        }
        throw ContractError("EvalReport: no row for (" + target + ", " + attack + ")");
    }

    const DprimeRow& lookup_dprime(const std::string& target, const std::string& attack) const {
        for (const DprimeRow& r : dprime_rows) {
            if (r.target == target && r.attack == attack) return r;
        }
        throw ContractError("EvalReport: no d' row for (" + target + ", " + attack + ")");
    }
};

inline void to_json(json& j, const EvalReport& rep) {
    j = json::object();
    j["attacks"] = rep.attack_names;
    j["rows"] = json::array();
    for (const EvalRow& r : rep.rows) {
        j["rows"].push_back({{"target", r.target}, {"attack", r.attack}, {"accuracy", r.accuracy}});
    }
    j["dprime"] = json::array();
    for (const DprimeRow& r : rep.dprime_rows) {
        j["dprime"].push_back({{"target", r.target},
                               {"attack", r.attack},
                               {"statistic", r.statistic},
                               {"mean_clean", r.mean_clean},
                               {"sigma_clean", r.sigma_clean},
                               {"mean_adv", r.mean_adv},
                               {"sigma_adv", r.sigma_adv},
                               {"dprime", r.dprime}});
    }
    j["provenance"] = rep.provenance;
}

inline void from_json(const json& j, EvalReport& rep) {
    rep.attack_names = j.at("attacks").get<std::vector<std::string>>();
    rep.rows.clear();
    for (const auto& r : j.at("rows")) {
        rep.rows.push_back({r.at("target").get<std::string>(), r.at("attack").get<std::string>(),
                            r.at("accuracy").get<double>()});
    }
    rep.dprime_rows.clear();
    for (const auto& r : j.at("dprime")) {
        DprimeRow d;
        d.target = r.at("target").get<std::string>();
        d.attack = r.at("attack").get<std::string>();
        d.statistic = r.at("statistic").get<std::string>();
        d.mean_clean = r.at("mean_clean").get<double>();
        d.sigma_clean = r.at("sigma_clean").get<double>();
        d.mean_adv = r.at("mean_adv").get<double>();
        d.sigma_adv = r.at("sigma_adv").get<double>();
        d.dprime = r.at("dprime").get<double>();
        rep.dprime_rows.push_back(d);
    }
    rep.provenance = j.value("provenance", json::object());
}

// One column per attack plus clean, one row per target; accuracies as
// percentages in the table and fractions in the JSON.
inline std::string render_table(const EvalReport& rep) {
    std::vector<std::string> targets;
    for (const EvalRow& r : rep.rows) {
        if (std::find(targets.begin(), targets.end(), r.target) == targets.end()) {
            targets.push_back(r.target);
        }
    }
    std::size_t name_w = 6;
    for (auto& t : targets) name_w = std::max(name_w, t.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w + 2)) << "Model" << std::right;
    os << std::setw(9) << "Clean";
    for (auto& a : rep.attack_names) os << std::setw(std::max<int>(9, static_cast<int>(a.size()) + 2))
                                        << a;
    os << '\n';
    for (auto& t : targets) {
        os << std::left << std::setw(static_cast<int>(name_w + 2)) << t << std::right;
        os << std::setw(9) << std::fixed << std::setprecision(2) << rep.lookup(t, "clean") * 100.0;
        for (auto& a : rep.attack_names) {
            os << std::setw(std::max<int>(9, static_cast<int>(a.size()) + 2)) << std::fixed
               << std::setprecision(2) << rep.lookup(t, a) * 100.0;
        }
        os << '\n';
    }
    if (!rep.dprime_rows.empty()) {
        os << "\nd' (clean vs attacked embedding statistic)\n";
        for (const DprimeRow& r : rep.dprime_rows) {
            os << "  " << r.target << " / " << r.attack << " [" << r.statistic
               << "]: d'=" << fmt_g(r.dprime, 6) << " (clean " << fmt_g(r.mean_clean, 6) << "+-"
               << fmt_g(r.sigma_clean, 6) << ", adv " << fmt_g(r.mean_adv, 6) << "+-"
               << fmt_g(r.sigma_adv, 6) << ")\n";
        }
    }
    return os.str();
}

// Targets are deliberately typed as the inference-only interface.
struct GrayBoxModels {
    DifferentiableModel* surrogate = nullptr;
    std::string surrogate_id;
    std::vector<ClassifierModel*> targets;
    std::vector<std::string> target_ids;
    std::vector<std::string> target_hashes;  // may be empty when unknown
};

struct GrayBoxOptions {
    std::string advset_dir = "advsets";
    bool allow_generation = true;
    bool allow_self_target = false;  // test-only escape hatch
    bool compute_dprime = true;
    bool collect_stat_samples = false;
    long eval_batch = 256;
};

// Generates (or reuses, keyed by manifest hash) one attack set per spec with
// the surrogate, then scores every target on clean data and on each set.
inline EvalReport run_graybox(GrayBoxModels& models, const DatasetHandle& ds,
                              const std::vector<NamedAttack>& attacks,
                              const GrayBoxOptions& opt = {}) {
    require(models.surrogate != nullptr, "run_graybox: missing surrogate");
    require(models.targets.size() == models.target_ids.size(),
            "run_graybox: target id count mismatch");
    require(ds.split == Split::test, "run_graybox: dataset must be a test split");
    models.surrogate->set_mode(Mode::inference);
    const std::string surrogate_hash = model_state_sha256(*models.surrogate);

    if (!opt.allow_self_target) {
        for (std::size_t t = 0; t < models.target_hashes.size(); ++t) {
            if (models.target_hashes[t] == surrogate_hash) {
                throw ProtocolError("gray-box violation: target '" + models.target_ids[t] +
                                    "' has the surrogate's exact weights (that would be "
                                    "white-box)");
            }
        }
    }

    EvalReport rep;
    rep.provenance["surrogate"] = surrogate_hash;
    rep.provenance["dataset"] = {{"name", ds.name},
                                 {"split", split_name(ds.split)},
                                 {"length", ds.length()}};
    rep.provenance["advsets"] = json::array();
    rep.provenance["cache_hits"] = json::array();

    // Build or reuse artifacts.
    std::vector<AdvSetArtifact> artifacts;
    for (const NamedAttack& na : attacks) {
        rep.attack_names.push_back(na.name);
        const std::string key = advset_key(surrogate_hash, ds, na.spec);
        const std::string base = (fs::path(opt.advset_dir) / key).string();
        bool reused = false;
        if (fs::exists(base + ".json")) {
            AdvSetArtifact art = load_advset(base);
            require(art.manifest.at("key").get<std::string>() == key,
                    "advset cache key mismatch for " + base);
            artifacts.push_back(std::move(art));
            reused = true;
        } else {
            if (!opt.allow_generation) {
                throw IoError("missing advset artifact " + base + " and generation is disabled");
            }
            artifacts.push_back(generate_advset(*models.surrogate, ds, na.spec, base));
        }
        rep.provenance["advsets"].push_back(artifacts.back().manifest);
        if (reused) rep.provenance["cache_hits"].push_back(key);
    }

    const LabelBatch labels = all_labels(ds);
    for (std::size_t t = 0; t < models.targets.size(); ++t) {
        ClassifierModel& target = *models.targets[t];
        const std::string& id = models.target_ids[t];
        target.set_mode(Mode::inference);
        rep.rows.push_back({id, "clean", clean_accuracy(target, ds, opt.eval_batch)});

        EmbeddingProjector projector;
        std::vector<double> clean_stat;
        if (opt.compute_dprime) {
            MatrixD clean_emb = EmbeddingProjector::collect_embeddings(target, ds, opt.eval_batch);
            projector.fit(clean_emb);
            clean_stat = projector.statistic(clean_emb);
        }
        for (std::size_t a = 0; a < attacks.size(); ++a) {
            rep.rows.push_back(
                {id, attacks[a].name, robust_accuracy(target, artifacts[a], labels)});
            if (opt.compute_dprime) {
                std::vector<double> adv_stat;
                adv_stat.reserve(static_cast<std::size_t>(ds.length()));
                const Tensor& imgs = artifacts[a].images;
                const long sz = imgs.numel() / imgs.dim(0);
                for (long start = 0; start < imgs.dim(0); start += opt.eval_batch) {
                    const long count = std::min(opt.eval_batch, imgs.dim(0) - start);
                    Tensor chunk({count, imgs.dim(1), imgs.dim(2), imgs.dim(3)});
                    std::memcpy(chunk.data(), imgs.data() + start * sz,
                                sizeof(float) * static_cast<std::size_t>(count * sz));
                    auto s = projector.statistic(target, ImageBatch(std::move(chunk)));
                    adv_stat.insert(adv_stat.end(), s.begin(), s.end());
                }
                DecidabilityResult d = decidability(clean_stat, adv_stat);
                rep.dprime_rows.push_back({id, attacks[a].name, projector.name(), d.mean_a,
                                           d.sigma_a, d.mean_b, d.sigma_b, d.dprime});
                if (opt.collect_stat_samples) {
                    rep.stat_samples.push_back({id, attacks[a].name, clean_stat, adv_stat});
                }
            }
        }
    }
    return rep;
}

}  // namespace lisard
