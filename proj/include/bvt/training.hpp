#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>
#include <vector>

#include "json.hpp"

#include "bvt/checkpoint.hpp"
#include "bvt/data.hpp"
#include "bvt/model.hpp"
#include "bvt/ops.hpp"

namespace bvt {

// ---------------------------------------------------------------------------
// losses

namespace detail {

inline void check_labels(const Shape& logits, std::span<const int> labels, const char* op) {
    if (logits.size() != 2) throw DimensionError(std::string(op) + ": expected logits [batch x K], got " + shape_str(logits));
    if (labels.size() != logits[0]) {
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(logits[0]));
    }
    if (logits[0] == 0) throw ValidationError(std::string(op) + ": empty batch");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= logits[1]) {
            throw ValidationError(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(logits[1]) + ")");
        }
    }
}

template <class Real>
Real softplus(Real z) {
    return std::max(z, Real(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <class Real>
Real sigmoid(Real z) {
    if (z >= 0) return Real(1) / (Real(1) + std::exp(-z));
    const Real e = std::exp(z);
    return e / (Real(1) + e);
}

}  // namespace detail

/// Mean over the batch of -log softmax(logits)[label].
template <class Real>
TensorT<Real> cce_loss(const TensorT<Real>& logits, std::span<const int> labels) {
    detail::check_labels(logits.shape(), labels, "cce_loss");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const auto& z = logits.values();
    std::vector<Real> probs(z.size());
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = z.data() + i * k;
        const Real m = *std::max_element(row, row + k);
        Real s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - m) / s;
        total += m + std::log(s) - row[labels[i]];
    }
    auto li = logits.impl();
    std::vector<int> y(labels.begin(), labels.end());
    return detail::record<Real>("cce_loss", Shape{}, {total / Real(n)}, {li},
                                [li, probs = std::move(probs), y = std::move(y), n, k](std::span<const Real> g) {
                                    auto& gz = li->grad_buffer();
                                    const Real s = g[0] / Real(n);
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < k; ++j)
                                            gz[i * k + j] += s * (probs[i * k + j] - (static_cast<int>(j) == y[i]));
                                });
}

/// Mean over batch and classes of the per-logit binary cross-entropy against
/// one-hot targets, in the fused softplus(z) - y z form.
template <class Real>
TensorT<Real> bce_onehot_loss(const TensorT<Real>& logits, std::span<const int> labels) {
    detail::check_labels(logits.shape(), labels, "bce_onehot_loss");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const auto& z = logits.values();
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            total += detail::softplus(z[i * k + j]) - (static_cast<int>(j) == labels[i] ? z[i * k + j] : Real(0));
    auto li = logits.impl();
    std::vector<int> y(labels.begin(), labels.end());
    return detail::record<Real>("bce_onehot_loss", Shape{}, {total / Real(n * k)}, {li},
                                [li, y = std::move(y), n, k](std::span<const Real> g) {
                                    auto& gz = li->grad_buffer();
                                    const auto& zv = li->data;
                                    const Real s = g[0] / Real(n * k);
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < k; ++j)
                                            gz[i * k + j] += s * (detail::sigmoid(zv[i * k + j]) - (static_cast<int>(j) == y[i]));
                                });
}

enum class LossKind { cce, bce };

inline const char* to_string(LossKind l) { return l == LossKind::cce ? "cce" : "bce"; }

inline LossKind parse_loss(const std::string& s) {
    if (s == "cce") return LossKind::cce;
    if (s == "bce") return LossKind::bce;
    throw ValidationError("unknown loss '" + s + "' (expected cce or bce)");
}

template <class Real>
TensorT<Real> classification_loss(LossKind kind, const TensorT<Real>& logits, std::span<const int> labels) {
    return kind == LossKind::cce ? cce_loss(logits, labels) : bce_onehot_loss(logits, labels);
}

// ---------------------------------------------------------------------------
// optimizer and schedule

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay. Parameters without a gradient are skipped.
template <class Real>
class AdamW {
   public:
    explicit AdamW(std::vector<TensorT<Real>> params, AdamWOptions opt = {}) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), Real(0));
            v_.emplace_back(p.numel(), Real(0));
        }
    }

    std::uint64_t steps() const { return t_; }
    const AdamWOptions& options() const { return opt_; }

    /// `grad_scale` multiplies every gradient first (global-norm clipping).
    void step(double lr, double grad_scale = 1.0) {
        ++t_;
        const Real b1 = Real(opt_.beta1), b2 = Real(opt_.beta2);
        const Real c1 = Real(1) - std::pow(b1, Real(t_)), c2 = Real(1) - std::pow(b2, Real(t_));
        const Real decay = Real(lr * opt_.weight_decay);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto theta = p.mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < theta.size(); ++j) {
                const Real gj = g[j] * Real(grad_scale);
                m[j] = b1 * m[j] + (1 - b1) * gj;
                v[j] = b2 * v[j] + (1 - b2) * gj * gj;
                theta[j] -= decay * theta[j];
                theta[j] -= Real(lr) * (m[j] / c1) / (std::sqrt(v[j] / c2) + Real(opt_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double grad_norm() const {
        double s = 0;
        for (const auto& p : params_)
            for (Real g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
        return std::sqrt(s);
    }

   private:
    std::vector<TensorT<Real>> params_;
    AdamWOptions opt_;
    std::vector<std::vector<Real>> m_, v_;
    std::uint64_t t_ = 0;
};

struct WarmRestart {
    std::size_t restart_step = 0;
    double lr_divisor = 10.0;
};

/// Cosine annealing from lr_max to lr_min over [0, total_steps]. With a warm
/// restart the first segment ends at restart_step and a second one starts
/// there from lr_max / lr_divisor.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min,
                        std::optional<WarmRestart> restart = std::nullopt) {
    if (step > total_steps) throw ValidationError("cosine_lr: step past the schedule end");
    double top = lr_max;
    std::size_t s = step, span = total_steps;
    if (restart && restart->restart_step > 0 && restart->restart_step < total_steps) {
        if (step < restart->restart_step) {
            span = restart->restart_step;
        } else {
            s = step - restart->restart_step;
            span = total_steps - restart->restart_step;
            top = lr_max / restart->lr_divisor;
        }
    }
    if (span == 0) return top;
    return lr_min + 0.5 * (top - lr_min) * (1 + std::cos(std::numbers::pi * static_cast<double>(s) / static_cast<double>(span)));
}

// ---------------------------------------------------------------------------
// metrics

struct MetricsReport {
    std::size_t count = 0;
    std::size_t num_classes = 0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double f1_macro = 0, top1 = 0, top3 = 0;
    std::vector<double> precision, recall, f1;
    std::vector<bool> zero_support;  // class absent from the labels; its F1 counts as 0
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    double imbalance_ratio = 0;  // over the evaluated labels
};

/// Position of `label` when classes are sorted by logit descending, ties by index.
inline std::size_t label_rank(std::span<const double> row, std::size_t label) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] > row[label] || (row[j] == row[label] && j < label)) ++rank;
    return rank;
}

inline MetricsReport compute_metrics(std::span<const double> logits, std::span<const int> labels, std::size_t k) {
    if (labels.empty()) throw ValidationError("metrics: empty input");
    if (k < 2) throw ValidationError("metrics: need at least 2 classes");
    if (logits.size() != labels.size() * k) throw DimensionError("metrics: logits do not match labels x classes");
    MetricsReport r;
    r.count = labels.size();
    r.num_classes = k;
    r.confusion.assign(k, std::vector<std::size_t>(k, 0));
    std::size_t hit1 = 0, hit3 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw ValidationError("metrics: label out of range");
        auto row = logits.subspan(i * k, k);
        const auto y = static_cast<std::size_t>(labels[i]);
        const std::size_t pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        r.confusion[y][pred]++;
        const std::size_t rank = label_rank(row, y);
        hit1 += rank < 1;
        hit3 += rank < 3;
    }
    r.top1 = static_cast<double>(hit1) / static_cast<double>(r.count);
    r.top3 = static_cast<double>(hit3) / static_cast<double>(r.count);
    std::size_t min_support = std::numeric_limits<std::size_t>::max(), max_support = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t tp = r.confusion[c][c], support = 0, predicted = 0;
        for (std::size_t j = 0; j < k; ++j) {
            support += r.confusion[c][j];
            predicted += r.confusion[j][c];
        }
        min_support = std::min(min_support, support);
        max_support = std::max(max_support, support);
        const double p = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double rc = support ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
        r.precision.push_back(p);
        r.recall.push_back(rc);
        r.f1.push_back(p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0);
        r.zero_support.push_back(support == 0);
    }
    r.f1_macro = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / static_cast<double>(k);
    r.imbalance_ratio = min_support ? static_cast<double>(max_support) / static_cast<double>(min_support)
                                    : std::numeric_limits<double>::infinity();
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j{{"count", r.count},     {"loss", r.loss},   {"f1_macro", r.f1_macro}, {"top1", r.top1},
                     {"top3", r.top3},       {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
                     {"confusion", r.confusion}};
    std::vector<std::size_t> flagged;
    for (std::size_t c = 0; c < r.zero_support.size(); ++c)
        if (r.zero_support[c]) flagged.push_back(c);
    j["zero_support_classes"] = flagged;
    j["imbalance_ratio"] = std::isfinite(r.imbalance_ratio) ? nlohmann::json(r.imbalance_ratio) : nlohmann::json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// evaluation

struct Evaluation {
    std::vector<double> logits;  // [count x K]
    std::vector<int> labels;
    MetricsReport metrics;
};

/// Forward passes in fixed batches of `batch_size`, spread over `threads`
/// workers; results do not depend on the thread count.
inline Evaluation evaluate(const Model& model, const Dataset& ds, const std::vector<std::size_t>& indices, LossKind loss,
                           std::size_t batch_size = 32, std::size_t threads = 1) {
    if (indices.empty()) throw ValidationError("evaluate: no samples");
    batch_size = std::max<std::size_t>(batch_size, 1);
    const std::size_t k = model.cfg.num_classes, batches = (indices.size() + batch_size - 1) / batch_size;
    Evaluation ev;
    ev.logits.assign(indices.size() * k, 0.0);
    ev.labels.assign(indices.size(), 0);
    auto run = [&](std::size_t worker, std::size_t workers) {
        NoTapeScope<double> no_tape;
        for (std::size_t b = worker; b < batches; b += workers) {
            const std::size_t lo = b * batch_size, hi = std::min(indices.size(), lo + batch_size);
            std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(lo),
                                         indices.begin() + static_cast<std::ptrdiff_t>(hi));
            auto batch = make_batch(ds, idx, model.cfg.family);
            auto logits = model.forward(batch.images);
            std::copy(logits.values().begin(), logits.values().end(), ev.logits.begin() + static_cast<std::ptrdiff_t>(lo * k));
            std::copy(batch.labels.begin(), batch.labels.end(), ev.labels.begin() + static_cast<std::ptrdiff_t>(lo));
        }
    };
    threads = std::clamp<std::size_t>(threads, 1, batches);
    if (threads == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(run, w, threads);
        for (auto& t : pool) t.join();
    }
    ev.metrics = compute_metrics(ev.logits, ev.labels, k);
    ev.metrics.loss = classification_loss(loss, Tensor({indices.size(), k}, ev.logits), ev.labels).item();
    return ev;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
    LossKind loss = LossKind::cce;
    std::optional<double> lr_max;  // family default when unset
    double lr_min = 0.0;
    double weight_decay = 1e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 10;
    std::size_t max_steps = 0;  // 0: no cap
    std::optional<std::size_t> restart_epoch;
    double lr_divisor = 10.0;
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double clip_grad_norm = 0.0;  // 0: off
    std::optional<double> stop_at_train_top1;  // end after the first epoch whose running accuracy reaches this
    std::size_t eval_batch_size = 32;
    std::size_t threads = 1;

    double resolved_lr(Family f) const { return lr_max ? *lr_max : (uses_bcos(f) ? 1e-3 : 1e-4); }

    void validate(Family f) const {
        const double lr = resolved_lr(f);
        if (!(lr > lr_min) || lr_min < 0) throw ValidationError("train config: need lr_max > lr_min >= 0");
        if (batch_size == 0) throw ValidationError("train config: batch_size must be at least 1");
        if (epochs == 0) throw ValidationError("train config: epochs must be at least 1");
        if (weight_decay < 0) throw ValidationError("train config: weight_decay must be non-negative");
        if (clip_grad_norm < 0) throw ValidationError("train config: clip_grad_norm must be non-negative");
        if (lr_divisor <= 0) throw ValidationError("train config: lr_divisor must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"loss", to_string(c.loss)},
                       {"lr_min", c.lr_min},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"max_steps", c.max_steps},
                       {"lr_divisor", c.lr_divisor},
                       {"seed", c.seed},
                       {"betas", {c.beta1, c.beta2}},
                       {"adam_eps", c.adam_eps},
                       {"clip_grad_norm", c.clip_grad_norm},
                       {"eval_batch_size", c.eval_batch_size}};
    j["lr_max"] = c.lr_max ? nlohmann::json(*c.lr_max) : nlohmann::json(nullptr);
    j["restart_epoch"] = c.restart_epoch ? nlohmann::json(*c.restart_epoch) : nlohmann::json(nullptr);
    j["stop_at_train_top1"] = c.stop_at_train_top1 ? nlohmann::json(*c.stop_at_train_top1) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const char* known[] = {"loss",      "lr_max",         "lr_min",   "weight_decay",   "batch_size",
                                  "epochs",    "max_steps",      "restart_epoch", "lr_divisor", "seed",
                                  "betas",     "adam_eps",       "clip_grad_norm", "stop_at_train_top1",
                                  "eval_batch_size"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
            throw ValidationError("train config: unknown key '" + it.key() + "'");
        }
    }
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    auto nullable = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        if (j.at(key).is_null()) {
            field.reset();
        } else {
            field = j.at(key).get<typename std::remove_reference_t<decltype(field)>::value_type>();
        }
    };
    if (j.contains("loss")) c.loss = parse_loss(j.at("loss").get<std::string>());
    nullable("lr_max", c.lr_max);
    opt("lr_min", c.lr_min);
    opt("weight_decay", c.weight_decay);
    opt("batch_size", c.batch_size);
    opt("epochs", c.epochs);
    opt("max_steps", c.max_steps);
    nullable("restart_epoch", c.restart_epoch);
    opt("lr_divisor", c.lr_divisor);
    opt("seed", c.seed);
    if (j.contains("betas")) {
        auto b = j.at("betas").get<std::vector<double>>();
        if (b.size() != 2) throw ValidationError("train config: betas must have two entries");
        c.beta1 = b[0];
        c.beta2 = b[1];
    }
    opt("adam_eps", c.adam_eps);
    opt("clip_grad_norm", c.clip_grad_norm);
    nullable("stop_at_train_top1", c.stop_at_train_top1);
    opt("eval_batch_size", c.eval_batch_size);
}

/// One JSON line of the metrics log.
struct EpochRecord {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0, f1_macro = 0, top1 = 0, top3 = 0, lr = 0;

    std::string json_line() const {
        nlohmann::json j{{"epoch", epoch}, {"split", split}, {"loss", loss}, {"f1_macro", f1_macro},
                         {"top1", top1},   {"top3", top3},   {"lr", lr}};
        return j.dump();
    }
};

struct TrainResult {
    Checkpoint best;  // best validation macro F1 (last epoch when there is no validation split)
    Checkpoint last;
    std::vector<EpochRecord> history;
    std::size_t steps = 0;
    std::size_t best_epoch = 0;
    double best_val_f1 = -1;
};

/// Trains `model` in place on the train split. Sample order per epoch is a
/// pure function of (seed, epoch). Each epoch logs one "train" line with
/// running metrics of that epoch's forward passes and one "val" line.
inline TrainResult train_loop(Model& model, const Dataset& ds, const TrainConfig& cfg, std::ostream* log = nullptr) {
    const Family family = model.cfg.family;
    cfg.validate(family);
    auto train_idx = ds.indices(Split::train);
    const auto val_idx = ds.indices(Split::val);
    if (train_idx.empty()) throw ValidationError("train_loop: dataset has no training samples");
    const std::size_t k = model.cfg.num_classes;
    for (const auto& s : ds.samples) {
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= k) {
            throw ValidationError("train_loop: label " + std::to_string(s.label) + " does not fit a " + std::to_string(k) +
                                  "-class model");
        }
    }

    const std::size_t per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total = per_epoch * cfg.epochs;
    if (cfg.max_steps) total = std::min(total, cfg.max_steps);
    std::optional<WarmRestart> restart;
    if (cfg.restart_epoch) restart = WarmRestart{*cfg.restart_epoch * per_epoch, cfg.lr_divisor};
    const double lr_max = cfg.resolved_lr(family);

    AdamW<double> opt(model.parameters(), {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    Tape<double> tape;
    TrainResult result;
    Rng order_rng(derive_seed(cfg.seed, 0x6f72646572ULL));

    for (std::size_t epoch = 1; epoch <= cfg.epochs && result.steps < total; ++epoch) {
        order_rng.shuffle(train_idx);
        std::vector<double> seen_logits;
        std::vector<int> seen_labels;
        double loss_sum = 0, lr = 0;
        for (std::size_t lo = 0; lo < train_idx.size() && result.steps < total; lo += cfg.batch_size) {
            const std::size_t hi = std::min(train_idx.size(), lo + cfg.batch_size);
            std::vector<std::size_t> idx(train_idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                         train_idx.begin() + static_cast<std::ptrdiff_t>(hi));
            auto batch = make_batch(ds, idx, family);
            lr = cosine_lr(result.steps, total, lr_max, cfg.lr_min, restart);
            tape.reset();
            opt.zero_grad();
            double loss_value = 0;
            {
                TapeScope<double> scope(tape);
                auto logits = model.forward(batch.images);
                auto loss = classification_loss(cfg.loss, logits, batch.labels);
                loss_value = loss.item();
                if (std::isfinite(loss_value)) backward(loss);
                seen_logits.insert(seen_logits.end(), logits.values().begin(), logits.values().end());
            }
            const double gnorm = opt.grad_norm();
            if (!std::isfinite(loss_value) || !std::isfinite(gnorm)) {
                std::ostringstream msg;
                msg << "non-finite training loss at step " << result.steps + 1 << " (epoch " << epoch << "): loss "
                    << loss_value << ", lr " << lr << ", grad-norm " << gnorm;
                throw NumericalError(msg.str());
            }
            double scale = 1.0;
            if (cfg.clip_grad_norm > 0 && gnorm > cfg.clip_grad_norm) scale = cfg.clip_grad_norm / gnorm;
            opt.step(lr, scale);
            ++result.steps;
            loss_sum += loss_value * static_cast<double>(idx.size());
            seen_labels.insert(seen_labels.end(), batch.labels.begin(), batch.labels.end());
        }
        tape.reset();
        opt.zero_grad();

        auto train_metrics = compute_metrics(seen_logits, seen_labels, k);
        EpochRecord tr{epoch, "train", loss_sum / static_cast<double>(seen_labels.size()), train_metrics.f1_macro,
                       train_metrics.top1, train_metrics.top3, lr};
        result.history.push_back(tr);
        if (log) *log << tr.json_line() << "\n";

        double val_f1 = train_metrics.f1_macro;
        if (!val_idx.empty()) {
            auto ev = evaluate(model, ds, val_idx, cfg.loss, cfg.eval_batch_size, cfg.threads);
            EpochRecord vr{epoch, "val", ev.metrics.loss, ev.metrics.f1_macro, ev.metrics.top1, ev.metrics.top3, lr};
            result.history.push_back(vr);
            if (log) *log << vr.json_line() << "\n";
            val_f1 = ev.metrics.f1_macro;
        }
        if (val_idx.empty() || val_f1 > result.best_val_f1) {
            result.best_val_f1 = val_f1;
            result.best_epoch = epoch;
            result.best = make_checkpoint(model, result.steps, cfg.seed);
        }
        if (log) log->flush();
        if (cfg.stop_at_train_top1 && train_metrics.top1 >= *cfg.stop_at_train_top1) break;
    }
    result.last = make_checkpoint(model, result.steps, cfg.seed);
    return result;
}

}  // namespace bvt
