#include "mixest/gmm.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace mixest;

namespace {

double scalar_normal_pdf(double x, double mean, double var) {
    return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

GaussianComponent scalar_component(double mean, double var) {
    return GaussianComponent(Vector::Constant(1, mean), Matrix::Constant(1, 1, var));
}

MixtureModel two_asset_model() {
    Matrix s1(2, 2), s2(2, 2), s3(2, 2);
    s1 << 0.0010, 0.0003, 0.0003, 0.0020;
    s2 << 0.0005, -0.0001, -0.0001, 0.0004;
    s3 << 0.0030, 0.0010, 0.0010, 0.0025;
    return MixtureModel({GaussianComponent(Vector{{0.004, 0.003}}, s1),
                         GaussianComponent(Vector{{0.000, 0.001}}, s2),
                         GaussianComponent(Vector{{-0.008, -0.006}}, s3)});
}

/// Well separated components: used for the weight-recovery checks.
MixtureModel separated_model() {
    const Matrix s = 0.01 * Matrix::Identity(2, 2);
    return MixtureModel({GaussianComponent(Vector{{1.0, 1.0}}, s), GaussianComponent(Vector{{-1.0, -1.0}}, s),
                         GaussianComponent(Vector{{1.0, -1.0}}, s)});
}

}  // namespace

TEST(GaussianComponent, RejectsNonPositiveDefiniteCovariance) {
    Matrix singular(2, 2);
    singular << 1.0, 1.0, 1.0, 1.0;
    EXPECT_THROW(GaussianComponent(Vector::Zero(2), singular), std::invalid_argument);
    EXPECT_THROW(GaussianComponent(Vector::Zero(3), Matrix::Identity(2, 2)), DimensionError);
    Matrix asym(2, 2);
    asym << 1.0, 0.5, 0.0, 1.0;
    EXPECT_THROW(GaussianComponent(Vector::Zero(2), asym), std::invalid_argument);
}

TEST(MixtureWeights, EnforcesSimplex) {
    EXPECT_THROW(MixtureWeights(Vector{{0.5, 0.6}}), std::invalid_argument);
    EXPECT_THROW(MixtureWeights(Vector{{1.2, -0.2}}), std::invalid_argument);
    const auto w = MixtureWeights::from_reduced(Vector{{0.2, 0.3}});
    EXPECT_NEAR(w[2], 0.5, 1e-15);
}

TEST(MixtureDensity, StandardNormalAtMode) {
    MixtureModel model({GaussianComponent(Vector::Zero(2), Matrix::Identity(2, 2))});
    EXPECT_NEAR(mixture_density(model, MixtureWeights(Vector{{1.0}}), Vector::Zero(2)),
                1.0 / (2.0 * std::numbers::pi), 1e-15);
}

TEST(MixtureDensity, IdenticalComponentsCollapse) {
    const auto c = two_asset_model()[0];
    MixtureModel twin({c, c});
    MixtureModel single({c});
    const Vector r{{0.01, -0.02}};
    EXPECT_NEAR(mixture_density(twin, MixtureWeights(Vector{{0.5, 0.5}}), r),
                mixture_density(single, MixtureWeights(Vector{{1.0}}), r), 1e-12);
}

TEST(MixtureDensity, TwoScalarComponentsMatchHandSummation) {
    MixtureModel model({scalar_component(0.004, 0.001), scalar_component(-0.008, 0.002)});
    const double expected = 0.7 * scalar_normal_pdf(0.0, 0.004, 0.001) + 0.3 * scalar_normal_pdf(0.0, -0.008, 0.002);
    EXPECT_NEAR(mixture_density(model, MixtureWeights(Vector{{0.7, 0.3}}), Vector::Zero(1)), expected,
                1e-12 * expected);
}

TEST(MixtureDensity, DimensionMismatchThrows) {
    const auto model = two_asset_model();
    EXPECT_THROW(mixture_density(model, MixtureWeights::uniform(3), Vector::Zero(3)), DimensionError);
    EXPECT_THROW(mixture_density(model, MixtureWeights::uniform(2), Vector::Zero(2)), DimensionError);
}

TEST(MixtureMoments, EqualMeansHaveNoDispersionTerm) {
    const Vector mu{{0.01, 0.02}};
    const auto base = two_asset_model();
    MixtureModel model({GaussianComponent(mu, base[0].sigma()), GaussianComponent(mu, base[1].sigma())});
    const auto mom = mixture_moments(model, MixtureWeights(Vector{{0.25, 0.75}}));
    EXPECT_TRUE(mom.mean.isApprox(mu, 1e-15));
    const Matrix expected = 0.25 * base[0].sigma() + 0.75 * base[1].sigma();
    EXPECT_LT((mom.cov - expected).cwiseAbs().maxCoeff(), 1e-18);
}

TEST(MixtureMoments, DegenerateWeightsReturnComponent) {
    const auto model = two_asset_model();
    const auto mom = mixture_moments(model, MixtureWeights(Vector{{0.0, 1.0, 0.0}}));
    EXPECT_LT((mom.mean - model[1].mu()).cwiseAbs().maxCoeff(), 1e-18);
    EXPECT_LT((mom.cov - model[1].sigma()).cwiseAbs().maxCoeff(), 1e-18);
}

TEST(MixtureMoments, TwoPointVariance) {
    // Zero-variance components are not admissible, so use a tiny variance and subtract it.
    const double eps = 1e-9;
    MixtureModel model({scalar_component(1.0, eps), scalar_component(-1.0, eps)});
    const auto mom = mixture_moments(model, MixtureWeights(Vector{{0.5, 0.5}}));
    EXPECT_NEAR(mom.mean[0], 0.0, 1e-15);
    EXPECT_NEAR(mom.cov(0, 0) - eps, 1.0, 1e-12);
}

TEST(SampleReturns, SingleComponentMeanWithinLlnBound) {
    const auto model = two_asset_model();
    const Eigen::Index count = 100000;
    const Matrix x = sample_returns(model, MixtureWeights(Vector{{1.0, 0.0, 0.0}}), count, std::uint64_t{7});
    const Vector mean = x.colwise().mean().transpose();
    for (Eigen::Index i = 0; i < 2; ++i) {
        const double se = std::sqrt(model[0].sigma()(i, i) / static_cast<double>(count));
        EXPECT_LT(std::abs(mean[i] - model[0].mu()[i]), 4.0 * se);
    }
}

TEST(SampleReturns, DeterministicForFixedSeed) {
    const auto model = two_asset_model();
    const auto w = MixtureWeights(Vector{{0.2, 0.3, 0.5}});
    EXPECT_EQ(sample_returns(model, w, 50, std::uint64_t{42}), sample_returns(model, w, 50, std::uint64_t{42}));
    EXPECT_NE(sample_returns(model, w, 50, std::uint64_t{42}), sample_returns(model, w, 50, std::uint64_t{43}));
}

TEST(SampleReturns, LabelFrequenciesWithinBinomialBound) {
    const auto base = two_asset_model();
    MixtureModel model({base[0], base[1]});
    std::mt19937_64 rng(11);
    const Eigen::Index count = 100000;
    const auto s = sample_returns_labeled(model, MixtureWeights(Vector{{0.7, 0.3}}), count, rng);
    double freq0 = 0.0;
    for (int k : s.labels) freq0 += (k == 0);
    freq0 /= static_cast<double>(count);
    EXPECT_LT(std::abs(freq0 - 0.7), 3.0 * std::sqrt(0.21 / static_cast<double>(count)));
}

TEST(SampleReturns, MomentsMatchAnalyticWithinFiveStandardErrors) {
    const auto model = two_asset_model();
    const auto w = MixtureWeights(Vector{{0.3, 0.5, 0.2}});
    const auto mom = mixture_moments(model, w);
    const Eigen::Index count = 100000;
    const Matrix x = sample_returns(model, w, count, std::uint64_t{2024});
    const Vector mean = x.colwise().mean().transpose();
    const Matrix cov = sample_covariance(x);
    const Matrix centered = x.rowwise() - mean.transpose();
    for (Eigen::Index i = 0; i < 2; ++i) {
        EXPECT_LT(std::abs(mean[i] - mom.mean[i]), 5.0 * std::sqrt(mom.cov(i, i) / count));
        for (Eigen::Index j = 0; j < 2; ++j) {
            // standard error of a sample covariance from the fourth moments of the data
            const Eigen::ArrayXd prod = centered.col(i).array() * centered.col(j).array();
            const double se = std::sqrt((prod - prod.mean()).square().mean() / static_cast<double>(count));
            EXPECT_LT(std::abs(cov(i, j) - mom.cov(i, j)), 5.0 * se) << i << "," << j;
        }
    }
}

TEST(MixtureDensity, IntegratesToOneByImportanceSampling) {
    // E_q[p(r)/q(r)] = 1 with q a broad Gaussian proposal.
    const auto model = two_asset_model();
    const auto w = MixtureWeights(Vector{{0.3, 0.5, 0.2}});
    MixtureModel proposal({GaussianComponent(Vector::Zero(2), 0.01 * Matrix::Identity(2, 2))});
    const auto one = MixtureWeights(Vector{{1.0}});
    const Eigen::Index count = 200000;
    const Matrix x = sample_returns(proposal, one, count, std::uint64_t{99});
    Eigen::ArrayXd ratio(count);
    for (Eigen::Index t = 0; t < count; ++t) {
        const Vector r = x.row(t).transpose();
        ratio[t] = std::exp(mixture_log_density(model, w, r) - mixture_log_density(proposal, one, r));
    }
    const double mean = ratio.mean();
    const double se = std::sqrt((ratio - mean).square().mean() / static_cast<double>(count));
    EXPECT_LT(std::abs(mean - 1.0), 3.0 * se);
}

TEST(EmFitWeights, SingleStepMatchesBruteForceResponsibilities) {
    const auto model = two_asset_model();
    const Matrix data = sample_returns(model, MixtureWeights(Vector{{0.5, 0.3, 0.2}}), 40, std::uint64_t{5});
    const Vector uniform = Vector::Constant(3, 1.0 / 3.0);
    const Vector step = em_step(component_log_densities(model, data), uniform);

    Vector brute = Vector::Zero(3);
    for (Eigen::Index t = 0; t < data.rows(); ++t) {
        const Vector r = data.row(t).transpose();
        double total = 0.0;
        Vector dens(3);
        for (int k = 0; k < 3; ++k) {
            dens[k] = uniform[k] * std::exp(model[k].log_density(r));
            total += dens[k];
        }
        brute += dens / total;
    }
    brute /= static_cast<double>(data.rows());
    EXPECT_LT((step - brute).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EmFitWeights, RecoversPureComponent) {
    const auto model = separated_model();
    const Matrix data = sample_returns(model, MixtureWeights(Vector{{1.0, 0.0, 0.0}}), 200, std::uint64_t{3});
    const auto fit = em_fit_weights(model, data);
    EXPECT_GE(fit.weights[0], 0.99);
    EXPECT_TRUE(fit.converged);
}

TEST(EmFitWeights, RecoversBalancedMixture) {
    MixtureModel model({GaussianComponent(Vector{{0.5, 0.5}}, 0.2 * Matrix::Identity(2, 2)),
                        GaussianComponent(Vector{{-0.5, -0.5}}, 0.2 * Matrix::Identity(2, 2))});
    const Matrix data = sample_returns(model, MixtureWeights(Vector{{0.5, 0.5}}), 20000, std::uint64_t{8});
    const auto fit = em_fit_weights(model, data);
    EXPECT_GE(fit.weights[0], 0.4);
    EXPECT_LE(fit.weights[0], 0.6);
}

TEST(EmFitWeights, LogLikelihoodIsMonotone) {
    const auto model = two_asset_model();
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        const Matrix data = sample_returns(model, MixtureWeights(Vector{{0.2, 0.6, 0.2}}), 30, seed);
        const auto fit = em_fit_weights(model, data);
        ASSERT_GE(fit.log_likelihood.size(), 2u);
        for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
            EXPECT_GE(fit.log_likelihood[i], fit.log_likelihood[i - 1] - 1e-9 * std::abs(fit.log_likelihood[i - 1]))
                << "seed " << seed << " iteration " << i;
    }
}

TEST(EmFitWeights, PriorSatisfiesInvariants) {
    const auto model = two_asset_model();
    const Matrix data = sample_returns(model, MixtureWeights(Vector{{0.2, 0.6, 0.2}}), 30, std::uint64_t{17});
    const auto fit = em_fit_weights(model, data);
    EXPECT_TRUE(in_gamma(fit.prior.lambda_hat_minus));
    EXPECT_TRUE(is_symmetric(fit.prior.phi));
    EXPECT_GT(smallest_eigenvalue(fit.prior.phi), 0.0);
    EXPECT_NEAR(fit.weights.full().sum(), 1.0, 1e-12);
}

TEST(EmFitWeights, PhiIsInverseObservedInformation) {
    // Finite-difference Hessian of the reduced log-likelihood as an independent check.
    const auto model = two_asset_model();
    const Matrix data = sample_returns(model, MixtureWeights(Vector{{0.3, 0.4, 0.3}}), 400, std::uint64_t{21});
    const auto fit = em_fit_weights(model, data);
    const Matrix logp = component_log_densities(model, data);
    auto ll = [&](const Vector& red) {
        Vector full(3);
        full << red[0], red[1], 1.0 - red.sum();
        double s = 0.0;
        for (Eigen::Index t = 0; t < logp.rows(); ++t) {
            double f = 0.0;
            for (int k = 0; k < 3; ++k) f += full[k] * std::exp(logp(t, k));
            s += std::log(f);
        }
        return s;
    };
    const Vector x = fit.prior.lambda_hat_minus;
    const double h = 1e-4;
    Matrix hess(2, 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            Vector a = x, b = x, c = x, d = x;
            a[i] += h; a[j] += h;
            b[i] += h; b[j] -= h;
            c[i] -= h; c[j] += h;
            d[i] -= h; d[j] -= h;
            hess(i, j) = (ll(a) - ll(b) - ll(c) + ll(d)) / (4 * h * h);
        }
    const Matrix info = -hess;
    EXPECT_LT((spd_inverse(info) - fit.prior.phi).cwiseAbs().maxCoeff(), 1e-3 * fit.prior.phi.cwiseAbs().maxCoeff());
}

TEST(EmFitWeights, RejectsTooFewObservations) {
    const auto model = two_asset_model();
    EXPECT_THROW(em_fit_weights(model, Matrix::Zero(2, 2)), std::invalid_argument);
}
