// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only when
// every gated criterion passes. Criterion 9 is reported but not gated.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bvt/bvt.hpp"

using namespace bvt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Verdict {
    bool pass = false;
    std::string detail;
    bool gated = true;
};

Tensor uniform(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

Tensor away_from_zero(Rng& rng, Shape shape, double margin = 0.1) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) {
        const double m = rng.uniform(margin, 2.0);
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return Tensor(std::move(shape), std::move(v));
}

double vnorm(std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Models of at most 10k parameters, one per family.
ModelConfig tiny(Family family) {
    ModelConfig c;
    c.family = family;
    c.dim = 8;
    c.heads = 2;
    c.patch_size = 2;
    c.mlp_ratio = 2;
    c.num_classes = 3;
    c.in_channels = uses_bcos(family) ? 6 : 3;
    if (is_windowed(family)) {
        c.image_size = 8;
        c.stage_depths = {2, 1};
        c.window_size = 2;
        c.depth = 0;
        c.modified_last_block = true;
    } else {
        c.image_size = 4;
        c.depth = 2;
    }
    return c;
}

// ---------------------------------------------------------------------------

Verdict gradient_fidelity() {
    const auto t0 = Clock::now();
    using Fn = std::function<Tensor(const Tensor&)>;
    Rng rng(101);
    auto fixed = uniform(rng, {3, 4});
    auto weights = uniform(rng, {3, 4});
    auto w = [&](const Tensor& t) { return sum(t * weights); };
    auto positive = [&](Shape s) { return uniform(rng, std::move(s), 0.2, 2.0); };
    Rng layer_rng(102);
    BcosLayer<double> bcos_layer(4, 3, 2, layer_rng);
    LayerNorm<double> norm(4, true);
    MultiHeadAttention<double> attn(AttentionConfig{4, 2, ProjectionKind::linear, 2, std::nullopt}, layer_rng);
    MultiHeadAttention<double> battn(AttentionConfig{4, 2, ProjectionKind::bcos, 2, std::nullopt}, layer_rng);
    const std::vector<int> labels{0, 2, 1};
    struct Case {
        const char* name;
        Fn f;
        std::function<Tensor()> input;
    };
    auto any = [&](Shape s) { return [&rng, s] { return uniform(rng, s); }; };
    std::vector<Case> cases = {
        {"add", [&](const Tensor& t) { return w(t + fixed); }, any({3, 4})},
        {"add_broadcast", [&](const Tensor& t) { return sum(add(fixed, t) * weights); }, any({4})},
        {"add_scalar", [&](const Tensor& t) { return w(add_scalar(t * t, 0.7)); }, any({3, 4})},
        {"sub", [&](const Tensor& t) { return w(fixed - t); }, any({3, 4})},
        {"mul", [&](const Tensor& t) { return w(t * t); }, any({3, 4})},
        {"div", [&](const Tensor& t) { return w(fixed / t); }, [&] { return away_from_zero(rng, {3, 4}, 0.3); }},
        {"neg", [&](const Tensor& t) { return w(-t); }, any({3, 4})},
        {"abs", [&](const Tensor& t) { return w(abs(t)); }, [&] { return away_from_zero(rng, {3, 4}); }},
        {"sign", [&](const Tensor& t) { return w(sign(t) * t); }, [&] { return away_from_zero(rng, {3, 4}); }},
        {"pow", [&](const Tensor& t) { return w(pow(t, 3.0)); }, any({3, 4})},
        {"pow_frac", [&](const Tensor& t) { return w(pow(t, 0.5)); }, [&] { return positive({3, 4}); }},
        {"exp", [&](const Tensor& t) { return w(exp(t)); }, any({3, 4})},
        {"log", [&](const Tensor& t) { return w(log(t)); }, [&] { return positive({3, 4}); }},
        {"relu", [&](const Tensor& t) { return w(relu(t)); }, [&] { return away_from_zero(rng, {3, 4}); }},
        {"maximum", [&](const Tensor& t) { return w(maximum(t, fixed)); },
         [&] { return away_from_zero(rng, {3, 4}, 0.1) + fixed; }},
        {"mean", [&](const Tensor& t) { return mean(t * t); }, any({3, 4})},
        {"sum_axis", [&](const Tensor& t) { return sum(pow(sum(t, 0), 2.0)); }, any({3, 4})},
        {"mean_axis", [&](const Tensor& t) { return sum(pow(mean(t, 1, true), 2.0)); }, any({3, 4})},
        {"softmax", [&](const Tensor& t) { return w(softmax(t, 1)); }, any({3, 4})},
        {"l2_norm", [&](const Tensor& t) { return sum(l2_norm(t, 1) * Tensor::vector({1, 2, 3})); }, any({3, 4})},
        {"matmul", [&](const Tensor& t) { return w(matmul(fixed, t)); }, any({4, 4})},
        {"reshape", [&](const Tensor& t) { return w(reshape(t * t, {3, 4})); }, any({4, 3})},
        {"transpose", [&](const Tensor& t) { return w(transpose(t * t)); }, any({4, 3})},
        {"concat", [&](const Tensor& t) { return w(concat<double>({t * t, t}, 1)); }, any({3, 2})},
        {"slice", [&](const Tensor& t) { return sum(pow(slice(t, 1, 1, 3), 2.0)); }, any({3, 4})},
        {"gather_rows", [&](const Tensor& t) { return w(gather_rows(t * t, {2, 0, 0})); }, any({3, 4})},
        {"scale", [&](const Tensor& t) { return w(scale(t * t, 0.3)); }, any({3, 4})},
        {"patchify", [&](const Tensor& t) { return sum(pow(patchify(t, 2), 2.0)); }, any({1, 2, 4, 4})},
        {"layer_norm", [&](const Tensor& t) { return w(norm(t)); }, any({3, 4})},
        {"bcos_layer", [&](const Tensor& t) { return sum(bcos_layer(t) * Tensor::vector({1, -2, 3})); }, any({2, 4})},
        {"attention", [&](const Tensor& t) { return w(attn(t)); }, any({3, 4})},
        {"bcos_attention", [&](const Tensor& t) { return w(battn(t)); }, any({3, 4})},
        {"cce_loss", [&](const Tensor& t) { return cce_loss(t, labels); }, any({3, 3})},
        {"bce_loss", [&](const Tensor& t) { return bce_onehot_loss(t, labels); }, any({3, 3})},
    };
    double worst = 0;
    std::string worst_name;
    for (auto& c : cases) {
        for (int trial = 0; trial < 50; ++trial) {
            const double e = finite_difference_check(c.f, c.input());
            if (e > worst) worst = e, worst_name = c.name;
        }
    }
    double worst_model = 0;
    std::size_t largest = 0;
    for (auto f : {Family::vit, Family::bvt, Family::swin, Family::bwin}) {
        auto c = tiny(f);
        Model m(c, 12);
        largest = std::max(largest, m.param_count());
        Rng irng(13);
        auto x = uniform(irng, {2, c.in_channels, c.image_size, c.image_size}, 0.0, 1.0);
        auto mix = uniform(irng, {2, 3});
        const double h = 1e-7;  // far below the distance to MaxOut ties and c = 0 kinks
        auto loss = [&] { return sum(mul(m.forward(x), mix)); };
        worst_model = std::max(worst_model, gradient_check_parameters<double>(loss, m.parameters(), h, 3));
        auto f_in = [&](const Tensor& t) { return sum(mul(m.forward(t), mix)); };
        worst_model = std::max(worst_model, finite_difference_check<double>(f_in, x, h));
    }
    const double secs = seconds_since(t0);
    const bool ok = worst < 1e-4 && worst_model < 1e-4 && largest <= 10000 && secs < 60;
    return {ok, fmt("ops max rel err %.2e (%s, %zu ops x 50), 4 micro models (<= %zu params) %.2e, %.1f s", worst,
                    worst_name.c_str(), cases.size(), largest, worst_model, secs)};
}

Verdict alignment_bound() {
    Rng rng(201);
    std::size_t violations = 0, false_equal = 0, missed_equal = 0;
    double tightest = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
        const int B = 1 + static_cast<int>(i % 3);
        const std::size_t d = 2 + rng.below(15);
        std::vector<double> x(d), w(d);
        for (auto& v : x) v = rng.uniform(-3, 3);
        for (auto& v : w) v = rng.uniform(-1, 1);
        const double out = std::abs(bcos_star<double>(x, w, B)), nx = vnorm(x);
        if (out > nx + 1e-10) ++violations;
        tightest = std::max(tightest, out - nx);
        if (out >= nx - 1e-10) ++false_equal;  // random pairs are never collinear
    }
    const std::size_t m = 3000;
    for (std::size_t i = 0; i < m; ++i) {
        const int B = 1 + static_cast<int>(i % 3);
        const std::size_t d = 2 + rng.below(15);
        std::vector<double> w(d), x(d);
        for (auto& v : w) v = rng.uniform(-1, 1);
        const double a = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 3.0);
        for (std::size_t k = 0; k < d; ++k) x[k] = a * w[k];
        const double out = std::abs(bcos_star<double>(x, w, B)), nx = vnorm(x);
        if (out > nx + 1e-10 || out < nx - 1e-10) ++missed_equal;
    }
    const bool ok = violations == 0 && false_equal == 0 && missed_equal == 0;
    return {ok, fmt("%zu random triples: %zu above ||x|| + 1e-10 (max |out| - ||x|| = %.2e), %zu flagged equal; "
                    "%zu collinear pairs: %zu not at equality",
                    n, violations, tightest, false_equal, m, missed_equal)};
}

Verdict dynamic_linear() {
    Rng rng(301);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        const int B = 1 + i % 3;
        const std::size_t d = 2 + rng.below(15);
        std::vector<double> x(d), w(d);
        for (auto& v : x) v = rng.uniform(-2, 2);
        for (auto& v : w) v = rng.uniform(-1, 1);
        const double nw = vnorm(w), nx = vnorm(x);
        double lin = 0;
        for (std::size_t k = 0; k < d; ++k) lin += w[k] / nw * x[k];
        const double c = lin / nx;
        worst = std::max(worst, std::abs(bcos_star<double>(x, w, B) - std::pow(std::abs(c), B - 1) * lin));
    }
    double worst_layer = 0;
    for (int B : {1, 2, 3}) {
        for (int trial = 0; trial < 100; ++trial) {
            BcosLayer<double> layer(8, 6, B, rng);
            std::vector<double> x(8);
            for (auto& v : x) v = rng.uniform(-1, 1);
            auto y = layer(Tensor({1, 8}, x));
            auto wx = dynamic_linear_summary<double>(x, layer);
            for (std::size_t o = 0; o < 6; ++o) {
                double s = 0;
                for (std::size_t k = 0; k < 8; ++k) s += wx.at(o, k) * x[k];
                worst_layer = std::max(worst_layer, std::abs(s - y[o]));
            }
        }
    }
    return {worst < 1e-12 && worst_layer < 1e-10,
            fmt("10000 units max |diff| %.2e (< 1e-12); 300 layers W(x) x vs forward max |diff| %.2e (< 1e-10)", worst,
                worst_layer)};
}

Verdict architecture() {
    std::ostringstream detail;
    bool ok = true;
    for (auto f : {Family::vit, Family::bvt, Family::swin, Family::bwin}) {
        auto c = preset("micro", f);
        Model m(c, 6);
        Rng rng(7);
        auto x = uniform(rng, {2, c.in_channels, c.image_size, c.image_size}, 0.0, 1.0);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        m.forward(x);
        const std::size_t relus = tape.count("relu");
        std::size_t biases = 0;
        for (auto& [name, t] : m.named_parameters()) {
            const bool is_norm = name.find("norm") != std::string::npos;
            if (!is_norm && name.ends_with(".bias")) ++biases;
        }
        const bool good = uses_bcos(f) ? relus == 0 && biases == 0 : relus == c.total_blocks() && biases > 0;
        ok = ok && good;
        detail << to_string(f) << " relu " << relus << "/" << (uses_bcos(f) ? 0 : c.total_blocks()) << " bias " << biases << "; ";
    }
    // data -> batch -> patch tokens, six-channel pairs
    auto ds = generate_synthetic(SyntheticSpec::three_class(3, 10));
    std::vector<std::size_t> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto cfg = preset("micro", Family::bvt);
    Model m(cfg, 1);
    auto batch = make_batch(ds, idx, Family::bvt);
    ForwardCapture<double> cap;
    {
        NoTapeScope<double> off;
        m.forward(batch.images, PassMode::standard, &cap);
    }
    std::size_t broken = 0, pairs = 0;
    const auto& v = batch.images.values();
    const std::size_t plane = cfg.image_size * cfg.image_size;
    for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i, ++pairs)
                broken += v[(b * 6 + c) * plane + i] + v[(b * 6 + c + 3) * plane + i] != 1.0;
    const std::size_t pp = cfg.patch_size * cfg.patch_size, len = 6 * pp;
    const auto& pv = cap.patches.values();
    for (std::size_t t = 0; t < pv.size() / len; ++t)
        for (std::size_t k = 0; k < 3 * pp; ++k, ++pairs) broken += pv[t * len + k] + pv[t * len + k + 3 * pp] != 1.0;
    ok = ok && broken == 0;
    detail << "complement pairs " << pairs - broken << "/" << pairs << " sum to exactly 1";
    return {ok, detail.str()};
}

Verdict window_oracle() {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        MultiHeadAttention<double> attn(
            AttentionConfig{8, 2, seed % 2 ? ProjectionKind::bcos : ProjectionKind::linear, 2, WindowSpec{4, 0}}, rng);
        Rng xr(1000 + seed);
        auto x = uniform(xr, {4, 4, 8}, -1, 1);
        auto yw = window_attention(x, attn);
        auto yg = attn(reshape(x, {16, 8}));
        for (std::size_t i = 0; i < yg.numel(); ++i) worst = std::max(worst, std::abs(yw[i] - yg[i]));
    }
    return {worst < 1e-10, fmt("100 seeds, 4x4 grid, max |window - global| %.2e (< 1e-10)", worst)};
}

Verdict explainability() {
    std::ostringstream detail;
    bool ok = true;
    Rng rng(601);

    // rollout on a micro BvT trace
    {
        auto cfg = preset("micro", Family::bvt);
        Model m(cfg, 2);
        auto tp = trace_prediction(m, uniform(rng, {3, 32, 32}, 0, 1));
        double worst = 0;
        for (const auto& r : rollout_matrices(tp.trace)) {
            const std::size_t n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(r.size()))));
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < n; ++j) s += r[i * n + j];
                worst = std::max(worst, std::abs(s - 1));
            }
        }
        ok = ok && worst <= 1e-10;
        detail << fmt("rollout row sums |1 - s| <= %.1e; ", worst);
    }

    // epsilon-LRP conservation, eps = 1e-6
    {
        double bcos_worst = 0, vit_inputs = 0, vit_accounted = 0;
        for (auto f : {Family::bvt, Family::bwin, Family::vit}) {
            auto cfg = preset("micro", f);
            cfg.modified_last_block = is_windowed(f);
            Model m(cfg, 3);
            if (f == Family::vit) {
                for (auto& [name, p] : m.named_parameters()) {
                    if (!name.ends_with(".bias") && !name.ends_with(".beta")) continue;
                    for (auto& v : p.mutable_data()) v = rng.uniform(-0.1, 0.1);
                }
            }
            for (int trial = 0; trial < 3; ++trial) {
                auto image = uniform(rng, {3, 32, 32}, 0, 1);
                for (std::size_t c = 0; c < 3; ++c) {
                    auto r = lrp_epsilon(m, image, c, LrpReadout::all, 1e-6);
                    if (f == Family::vit) {
                        vit_inputs = std::max(vit_inputs, r.conservation_error());
                        vit_accounted = std::max(vit_accounted, r.accounted_error());
                    } else {
                        bcos_worst = std::max(bcos_worst, r.conservation_error());
                    }
                }
            }
        }
        ok = ok && bcos_worst < 1e-3 && vit_accounted < 1e-3;
        detail << fmt("LRP conservation bvt/bwin %.2e, vit with bias share %.2e (inputs only %.2e, reported); ", bcos_worst,
                      vit_accounted, vit_inputs);
    }

    // transformer attribution on a two-block trace vs (I + Abar_2)(I + Abar_1)
    {
        auto cfg = preset("micro", Family::vit);
        cfg.depth = 2;
        Model m(cfg, 4);
        auto tp = trace_prediction(m, uniform(rng, {3, 32, 32}, 0, 1));
        const auto& recs = tp.trace.attention;
        const std::size_t n = recs[0].tokens;
        std::vector<Eigen::MatrixXd> factors;
        for (const auto& rec : recs) {
            Eigen::MatrixXd a = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
            for (std::size_t h = 0; h < rec.heads; ++h)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t o = rec.offset(h, i, j);
                        a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +=
                            std::max(rec.grad[o] * rec.attention[o], 0.0) / static_cast<double>(rec.heads);
                    }
            factors.push_back(a);
        }
        Eigen::MatrixXd expected = factors[1] * factors[0];
        auto got = attribution_matrix(recs);
        double worst = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                worst = std::max(worst, std::abs(got[i * n + j] - expected(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        ok = ok && worst < 1e-12;
        detail << fmt("attribution vs product %.2e; ", worst);
    }

    // head accumulation on uniform rows keeps ceil(mass n) tokens
    {
        std::size_t checked = 0, wrong = 0;
        for (std::size_t n : {2u, 5u, 17u, 65u}) {
            for (double mass : {0.1, 0.25, 0.5, 0.7, 1.0}) {
                AttentionRecord r;
                r.heads = 3;
                r.tokens = n;
                r.grid_h = 1;
                r.grid_w = n;
                r.attention.assign(3 * n * n, 1.0 / static_cast<double>(n));
                auto hm = accumulate_heads(r, mass);
                const auto expected = static_cast<std::size_t>(std::ceil(mass * static_cast<double>(n) - 1e-9));
                for (const auto& kept : hm.kept) {
                    ++checked;
                    wrong += static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true)) != expected;
                }
            }
        }
        ok = ok && wrong == 0;
        detail << fmt("head mass %zu/%zu rows keep ceil(mass n)", checked - wrong, checked);
    }
    return {ok, detail.str()};
}

Verdict cka_properties() {
    Rng rng(701);
    auto gaussian = [&](Eigen::Index n, Eigen::Index d) {
        Matrix m(n, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal();
        return m;
    };
    double self = 0, rot = 0, scl = 0, sym = 0, diag = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto x = gaussian(48, 10), y = gaussian(48, 7);
        y.col(0) += x.col(2);
        self = std::max(self, std::abs(linear_cka(x, x) - 1));
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(gaussian(10, 10)));
        Matrix q = qr.householderQ() * Eigen::MatrixXd::Identity(10, 10);
        const double base = linear_cka(x, y);
        rot = std::max(rot, std::abs(linear_cka(x * q, y) - base));
        scl = std::max(scl, std::abs(linear_cka(2.5 * x, y) - base));
        ActivationStack stack;
        stack.layer_names = {"a", "b", "c"};
        stack.layers = {x, y, gaussian(48, 5)};
        auto r = cka_matrix(stack);
        sym = std::max(sym, (r.matrix - r.matrix.transpose()).cwiseAbs().maxCoeff());
        diag = std::max(diag, (r.matrix.diagonal().array() - 1.0).abs().maxCoeff());
    }
    const bool ok = self <= 1e-12 && rot <= 1e-10 && scl <= 1e-10 && sym == 0 && diag == 0;
    return {ok, fmt("self |1 - cka| %.1e, rotation %.1e, scale %.1e, asymmetry %.1e, diagonal |1 - d| %.1e", self, rot, scl,
                    sym, diag)};
}

// ---------------------------------------------------------------------------
// desk-scale training

struct TrainedRun {
    Model model;
    double train_top1 = 0;
    std::size_t steps = 0;
    double seconds = 0;
    std::string log;
    double last_seconds = 0;
    std::string last_log;
};

TrainConfig pinned_train_config() {
    TrainConfig t;
    t.loss = LossKind::cce;
    t.batch_size = 8;
    t.epochs = 4;
    t.seed = 1;
    return t;
}

TrainedRun train_micro(Family f, const Dataset& ds) {
    const auto cfg = pinned_train_config();
    auto mc = preset("micro", f, ds.num_classes());
    auto run_once = [&](std::string& log_out, double& secs) {
        Model m(mc, cfg.seed);
        std::ostringstream log;
        const auto t0 = Clock::now();
        auto result = train_loop(m, ds, cfg, &log);
        secs = seconds_since(t0);
        log_out = log.str();
        return std::pair{std::move(m), result.steps};
    };
    TrainedRun out{Model(mc, cfg.seed)};
    auto [model, steps] = run_once(out.log, out.seconds);
    out.model = std::move(model);
    out.steps = steps;
    run_once(out.last_log, out.last_seconds);
    out.train_top1 = evaluate(out.model, ds, ds.indices(Split::train), cfg.loss).metrics.top1;
    return out;
}

Verdict training_check(const TrainedRun& bvt, const TrainedRun& vit) {
    auto ok_run = [](const TrainedRun& r) {
        return r.train_top1 >= 0.9 && r.steps <= 2000 && r.seconds < 600 && r.last_seconds < 600 && r.log == r.last_log &&
               !r.log.empty();
    };
    auto line = [](const char* name, const TrainedRun& r) {
        return fmt("%s train top1 %.3f after %zu steps, %.0f s / %.0f s, logs %s", name, r.train_top1, r.steps, r.seconds,
                   r.last_seconds, r.log == r.last_log ? "bit-identical" : "DIFFER");
    };
    return {ok_run(bvt) && ok_run(vit), line("bvt", bvt) + "; " + line("vit", vit)};
}

double mean_off_diagonal_cka(const Model& m, const Dataset& ds) {
    return cka_matrix(collect_activations(m, ds, ds.indices(Split::test))).mean_off_diagonal();
}

Verdict cka_direction(const TrainedRun& bvt, const TrainedRun& vit, const Dataset& ds) {
    const double b = mean_off_diagonal_cka(bvt.model, ds), v = mean_off_diagonal_cka(vit.model, ds);
    return {b >= v, fmt("mean off-diagonal CKA bvt %.4f vs vit %.4f (reported, not gated)", b, v), false};
}

double attention_last_localization(const Model& m, const Dataset& ds, std::size_t count) {
    auto idx = ds.indices(Split::test);
    idx.resize(std::min(idx.size(), count));
    double total = 0;
    for (auto i : idx) {
        const auto& s = ds.samples[i];
        auto tp = trace_prediction(m, Tensor({3, s.image.height, s.image.width}, s.image.pixels),
                                   static_cast<std::size_t>(s.label), false, false);
        total += localization_score(attention_last(tp.trace, tp.target), s.mask).inside_fraction;
    }
    return total / static_cast<double>(idx.size());
}

Verdict localization(const TrainedRun& bvt, const TrainedRun& vit, const Dataset& ds) {
    const std::size_t available = ds.indices(Split::test).size();
    const double b = attention_last_localization(bvt.model, ds, 100), v = attention_last_localization(vit.model, ds, 100);
    return {b >= 0.5 && available >= 100,
            fmt("top-10%% attention-last mass inside mask on 100 test images: bvt %.3f (>= 0.5), vit %.3f (reported)", b, v)};
}

Verdict loss_closed_forms() {
    double worst_cce = 0, worst_bce = 0;
    for (std::size_t k : {2u, 3u, 7u, 10u}) {
        for (double level : {0.0, 1.5, -4.0}) {
            Tensor logits({4, k}, level);
            std::vector<int> labels{0, 1, 1, 0};
            worst_cce = std::max(worst_cce, std::abs(cce_loss(logits, labels).item() - std::log(static_cast<double>(k))));
        }
        worst_bce = std::max(worst_bce, std::abs(bce_onehot_loss(Tensor({4, k}, 0.0), std::vector<int>{0, 1, 1, 0}).item() -
                                                 std::log(2.0)));
    }
    // AdamW without decay against a plain Adam on flat vectors
    Rng rng(1101);
    std::vector<double> init(12), ref, m(12, 0.0), v(12, 0.0);
    for (auto& x : init) x = rng.uniform(-1, 1);
    ref = init;
    Tensor p({3, 4}, init, true);
    AdamW<double> opt({p}, {0.9, 0.999, 1e-8, 0.0});
    double worst_adam = 0;
    for (int t = 1; t <= 100; ++t) {
        std::vector<double> g(12);
        for (auto& x : g) x = rng.uniform(-1, 1);
        opt.zero_grad();
        {
            Tape<double> tape;
            TapeScope<double> scope(tape);
            backward(sum(mul(p, Tensor({3, 4}, g))));
        }
        opt.step(1e-2);
        for (std::size_t i = 0; i < 12; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            ref[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
            worst_adam = std::max(worst_adam, std::abs(ref[i] - p.values()[i]));
        }
    }
    return {worst_cce <= 1e-12 && worst_bce <= 1e-12 && worst_adam <= 1e-12,
            fmt("cce - ln K %.1e, bce - ln 2 %.1e, AdamW(wd=0) vs Adam over 100 steps %.1e", worst_cce, worst_bce, worst_adam)};
}

}  // namespace

int main() {
    int failed = 0;
    auto report = [&](int id, const char* name, const Verdict& v) {
        const char* status = v.pass ? "PASS" : (v.gated ? "FAIL" : "MISS");
        std::printf("[%s] %2d %s: %s\n", status, id, name, v.detail.c_str());
        std::fflush(stdout);
        if (!v.pass && v.gated) ++failed;
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "alignment bound", alignment_bound());
    report(3, "dynamic-linear identity", dynamic_linear());
    report(4, "architecture contract", architecture());
    report(5, "window/global oracle", window_oracle());
    report(6, "explainability invariants", explainability());
    report(7, "CKA invariants", cka_properties());

    const auto ds = generate_synthetic(SyntheticSpec::three_class(1, 280));
    const auto bvt = train_micro(Family::bvt, ds);
    const auto vit = train_micro(Family::vit, ds);
    report(8, "desk-scale training", training_check(bvt, vit));
    report(9, "CKA uniformity direction", cka_direction(bvt, vit, ds));
    report(10, "saliency localization", localization(bvt, vit, ds));
    report(11, "loss closed forms", loss_closed_forms());

    std::printf("%s: %d gated criteria failed\n", failed ? "FAILED" : "ACCEPTED", failed);
    return failed ? 1 : 0;
}
