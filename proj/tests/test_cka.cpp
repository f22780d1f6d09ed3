#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "bvt/cka.hpp"

using namespace bvt;

namespace {

Matrix gaussian(Rng& rng, Eigen::Index n, Eigen::Index d) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal();
    return m;
}

Matrix orthogonal(Rng& rng, Eigen::Index d) {
    Eigen::MatrixXd a = gaussian(rng, d, d);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

// Row-permutation of y, using the library's own Fisher-Yates.
Matrix permute_rows(const Matrix& y, Rng& rng) {
    std::vector<Eigen::Index> p(static_cast<std::size_t>(y.rows()));
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    Matrix out(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) out.row(i) = y.row(p[static_cast<std::size_t>(i)]);
    return out;
}

// Gram-matrix form: tr(K L) / (||K|| ||L||) with centred Gram matrices.
double cka_via_gram(const Matrix& x, const Matrix& y) {
    const auto n = x.rows();
    const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
    const Eigen::MatrixXd k = h * (x * x.transpose()) * h, l = h * (y * y.transpose()) * h;
    return (k.cwiseProduct(l)).sum() / (k.norm() * l.norm());
}

ModelConfig tiny(Family family) {
    ModelConfig c;
    c.family = family;
    c.dim = 8;
    c.heads = 2;
    c.patch_size = 4;
    c.mlp_ratio = 2;
    c.num_classes = 3;
    c.in_channels = uses_bcos(family) ? 6 : 3;
    c.image_size = 16;
    c.depth = 3;
    return c;
}

}  // namespace

TEST(LinearCkaTest, SelfSimilarityIsOne) {
    Rng rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = gaussian(rng, 20 + trial, 3 + 2 * trial);
        EXPECT_NEAR(linear_cka(x, x), 1.0, 1e-12);
    }
}

TEST(LinearCkaTest, MatchesGramMatrixForm) {
    Rng rng(2);
    auto x = gaussian(rng, 30, 5), y = gaussian(rng, 30, 7);
    y.col(0) += 2 * x.col(1);
    EXPECT_NEAR(linear_cka(x, y), cka_via_gram(x, y), 1e-12);
}

TEST(LinearCkaTest, InvariantToOrthogonalTransformAndScale) {
    Rng rng(3);
    auto x = gaussian(rng, 40, 6), y = gaussian(rng, 40, 4);
    y.col(1) += x.col(0) - 0.5 * x.col(3);
    const double base = linear_cka(x, y);
    const Matrix q = orthogonal(rng, 6);
    EXPECT_NEAR(linear_cka(x * q, y), base, 1e-10);
    EXPECT_NEAR(linear_cka(3.0 * x, y), base, 1e-12);
    EXPECT_NEAR(linear_cka(x, 3.0 * y), base, 1e-12);
    // column offsets are removed by centring
    Matrix shifted = x;
    shifted.rowwise() += Eigen::RowVectorXd::Constant(6, 7.5);
    EXPECT_NEAR(linear_cka(shifted, y), base, 1e-12);
}

TEST(LinearCkaTest, SymmetricAndBounded) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = gaussian(rng, 25, 3), y = gaussian(rng, 25, 5);
        const double a = linear_cka(x, y), b = linear_cka(y, x);
        EXPECT_NEAR(a, b, 1e-14);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0 + 1e-12);
    }
}

TEST(LinearCkaTest, ZeroVarianceIsAnError) {
    Rng rng(5);
    auto x = gaussian(rng, 10, 3);
    Matrix c = Matrix::Constant(10, 4, 2.0);
    EXPECT_THROW(linear_cka(x, c), ValidationError);
    EXPECT_THROW(linear_cka(c, x), ValidationError);
    EXPECT_THROW(linear_cka(x, gaussian(rng, 9, 3)), DimensionError);
    EXPECT_THROW(linear_cka(gaussian(rng, 1, 3), gaussian(rng, 1, 3)), ValidationError);
}

// Under random row permutation of Y, E[||Yc^T Xc||^2] = tr(K) tr(L) / (n - 1)
// for centred Gram matrices K, L; the denominator does not change.
TEST(LinearCkaTest, IndependentLayersMatchPermutationNull) {
    Rng rng(6);
    const Eigen::Index n = 64, d = 16;
    auto x = gaussian(rng, n, d), y = gaussian(rng, n, d);
    const double observed = linear_cka(x, y);
    EXPECT_LT(observed, 0.5);

    const Matrix xc = x.rowwise() - x.colwise().mean(), yc = y.rowwise() - y.colwise().mean();
    const double expected = xc.squaredNorm() * yc.squaredNorm() /
                            (static_cast<double>(n - 1) * (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm());

    const int draws = 4000;
    std::vector<double> null(draws);
    Rng prng(7);
    for (auto& v : null) v = linear_cka(x, permute_rows(y, prng));
    const double mean = std::accumulate(null.begin(), null.end(), 0.0) / draws;
    double var = 0;
    for (double v : null) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / (draws - 1));
    EXPECT_NEAR(mean, expected, 4 * sd / std::sqrt(static_cast<double>(draws)));
    // the observed value is an ordinary draw from the null
    EXPECT_LT(std::abs(observed - mean), 4 * sd);
}

TEST(CkaMatrixTest, SingleLayer) {
    Rng rng(8);
    ActivationStack s;
    s.layer_names = {"block0"};
    s.layers = {gaussian(rng, 12, 4)};
    auto r = cka_matrix(s);
    ASSERT_EQ(r.matrix.rows(), 1);
    EXPECT_EQ(r.matrix(0, 0), 1.0);
}

TEST(CkaMatrixTest, SymmetricUnitDiagonalAndDuplicates) {
    Rng rng(9);
    ActivationStack s;
    auto a = gaussian(rng, 32, 6);
    s.layer_names = {"a", "b", "a_copy", "c"};
    s.layers = {a, gaussian(rng, 32, 5), a * orthogonal(rng, 6) * 2.0, gaussian(rng, 32, 8)};
    auto r = cka_matrix(s);
    for (Eigen::Index i = 0; i < 4; ++i) {
        EXPECT_EQ(r.matrix(i, i), 1.0);
        for (Eigen::Index j = 0; j < 4; ++j) EXPECT_EQ(r.matrix(i, j), r.matrix(j, i));
    }
    EXPECT_NEAR(r.matrix(0, 2), 1.0, 1e-10);
    EXPECT_NEAR(r.matrix(1, 3), linear_cka(s.layers[1], s.layers[3]), 1e-15);
    double off = 0;
    for (Eigen::Index i = 0; i < 4; ++i)
        for (Eigen::Index j = 0; j < 4; ++j)
            if (i != j) off += r.matrix(i, j);
    EXPECT_NEAR(r.mean_off_diagonal(), off / 12, 1e-15);
}

TEST(CkaMatrixTest, RejectsDegenerateLayer) {
    Rng rng(10);
    ActivationStack s;
    s.layer_names = {"a", "flat"};
    s.layers = {gaussian(rng, 8, 3), Matrix::Zero(8, 3)};
    EXPECT_THROW(cka_matrix(s), ValidationError);
    s.layers = {gaussian(rng, 8, 3), gaussian(rng, 7, 3)};
    EXPECT_THROW(cka_matrix(s), DimensionError);
    EXPECT_THROW(cka_matrix(ActivationStack{}), ValidationError);
}

TEST(CkaMatrixTest, CsvLayout) {
    CkaResult r;
    r.names = {"block0", "block1"};
    r.matrix = Matrix(2, 2);
    r.matrix << 1.0, 0.1234567, 0.1234567, 1.0;
    std::ostringstream os;
    write_cka_csv(os, r);
    EXPECT_EQ(os.str(), "layer,block0,block1\nblock0,1.000000,0.123457\nblock1,0.123457,1.000000\n");
}

TEST(ActivationTest, MeanPoolsPatchTokensWithoutCls) {
    auto ds = generate_synthetic(SyntheticSpec::three_class(3, 4, 16));
    std::vector<std::size_t> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (auto f : {Family::vit, Family::bvt}) {
        Model model(tiny(f), 11);
        auto stack = collect_activations(model, ds, idx, Pooling::mean_patch, 5);
        ASSERT_EQ(stack.layers.size(), 3u);
        EXPECT_EQ(stack.sample_ids.size(), idx.size());
        EXPECT_EQ(stack.layer_names[2], "block2");

        // recompute one sample directly
        auto batch = make_batch(ds, {7}, f);
        ForwardCapture<double> cap;
        {
            NoTapeScope<double> off;
            model.forward(batch.images, PassMode::standard, &cap);
        }
        const auto& out = cap.block_outputs[1];
        const std::size_t n = out.dim(1), d = out.dim(2);
        for (std::size_t k = 0; k < d; ++k) {
            double m = 0;
            for (std::size_t t = 1; t < n; ++t) m += out.values()[t * d + k];
            EXPECT_NEAR(stack.layers[1](7, static_cast<Eigen::Index>(k)), m / static_cast<double>(n - 1), 1e-12);
        }
        auto cls = collect_activations(model, ds, idx, Pooling::cls);
        EXPECT_NEAR(cls.layers[0](7, 0), cap.block_outputs[0].values()[0], 1e-12);

        auto r = cka_matrix(stack);
        EXPECT_EQ(r.matrix.rows(), 3);
    }
}
