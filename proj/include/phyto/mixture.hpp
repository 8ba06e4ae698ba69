#pragma once

// Bayesian finite mixture of multinomials: y ~ Multinomial(N, Pi^T w), w ~ Dirichlet(alpha),
// sampled with a dynamic-trajectory HMC (multinomial NUTS) over a stick-breaking parameterisation.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <exception>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "phyto/assemblage.hpp"
#include "phyto/csv.hpp"
#include "phyto/error.hpp"
#include "phyto/plots.hpp"
#include "phyto/util.hpp"

namespace phyto::mixture {

// ---------------------------------------------------------------- inputs

struct ReferenceMatrix {
    Eigen::MatrixXd pi;  // P x C, rows on the simplex
    std::vector<std::string> process_names;
    std::vector<std::string> class_names;

    [[nodiscard]] Eigen::Index processes() const { return pi.rows(); }
    [[nodiscard]] Eigen::Index classes() const { return pi.cols(); }
};

/// Validates and renormalises every row to sum to one.
inline ReferenceMatrix make_reference(Eigen::MatrixXd pi, std::vector<std::string> process_names,
                                      std::vector<std::string> class_names) {
    if (pi.rows() < 1) fail(Errc::EmptyInput, "reference matrix has no processes");
    if (pi.cols() < 2) fail(Errc::InvalidArgument, "reference matrix needs at least two classes");
    if (static_cast<Eigen::Index>(process_names.size()) != pi.rows() ||
        static_cast<Eigen::Index>(class_names.size()) != pi.cols())
        fail(Errc::DimensionMismatch, "reference names do not match matrix shape");
    for (Eigen::Index i = 0; i < pi.rows(); ++i) {
        long double s = 0;
        for (Eigen::Index c = 0; c < pi.cols(); ++c) {
            const double v = pi(i, c);
            if (!std::isfinite(v)) fail(Errc::NonFiniteValue, "reference row " + process_names[i]);
            if (v < 0) fail(Errc::NegativeProbability, "reference row " + process_names[i]);
            s += v;
        }
        if (s <= 0) fail(Errc::AllZero, "reference row " + process_names[i]);
        for (Eigen::Index c = 0; c < pi.cols(); ++c) pi(i, c) = static_cast<double>(pi(i, c) / s);
    }
    return {std::move(pi), std::move(process_names), std::move(class_names)};
}

/// `process,<class1>,...,<classC>`
inline ReferenceMatrix parse_reference(std::string_view text) {
    const auto t = csv::parse(text);
    if (t.header.size() < 3 || t.header[0] != "process") fail(Errc::ParseError, "reference header must be process,<classes...>");
    std::vector<std::string> classes(t.header.begin() + 1, t.header.end());
    Eigen::MatrixXd pi(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(classes.size()));
    std::vector<std::string> names;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r].size() != t.header.size()) fail(Errc::ParseError, "reference row " + std::to_string(r + 1) + " has wrong width");
        names.push_back(t.rows[r][0]);
        for (std::size_t c = 0; c < classes.size(); ++c)
            pi(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = parse_double(t.rows[r][c + 1]);
    }
    return make_reference(std::move(pi), std::move(names), std::move(classes));
}

inline std::string format_reference(const ReferenceMatrix& ref) {
    csv::Table t;
    t.header = {"process"};
    t.header.insert(t.header.end(), ref.class_names.begin(), ref.class_names.end());
    for (Eigen::Index i = 0; i < ref.processes(); ++i) {
        csv::Row row{ref.process_names[static_cast<std::size_t>(i)]};
        for (Eigen::Index c = 0; c < ref.classes(); ++c) row.push_back(format_double(ref.pi(i, c)));
        t.rows.push_back(std::move(row));
    }
    return csv::format(t);
}

/// One process per composition, proportions over `classes`.
inline ReferenceMatrix reference_from_compositions(const std::vector<assemblage::Composition>& comps,
                                                   const std::vector<std::string>& classes) {
    Eigen::MatrixXd pi(static_cast<Eigen::Index>(comps.size()), static_cast<Eigen::Index>(classes.size()));
    std::vector<std::string> names;
    for (std::size_t i = 0; i < comps.size(); ++i) {
        const auto v = assemblage::count_vector(comps[i], classes);
        for (std::size_t c = 0; c < v.size(); ++c) pi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v[c];
        names.push_back(comps[i].unit_id);
    }
    return make_reference(std::move(pi), std::move(names), classes);
}

struct ObservedCounts {
    std::vector<long long> y;

    [[nodiscard]] long long total() const {
        long long n = 0;
        for (auto v : y) n += v;
        return n;
    }
};

inline void validate_counts(const ObservedCounts& obs, const ReferenceMatrix& ref) {
    if (static_cast<Eigen::Index>(obs.y.size()) != ref.classes()) fail(Errc::DimensionMismatch, "count vector length differs from class count");
    for (auto v : obs.y)
        if (v < 0) fail(Errc::InvalidArgument, "negative count");
    if (obs.total() < 1) fail(Errc::EmptyInput, "observed counts sum to zero");
}

/// `class,count`, aligned to the reference class order; absent classes count zero.
inline ObservedCounts parse_counts(std::string_view text, const ReferenceMatrix& ref) {
    const auto t = csv::parse(text);
    if (t.header != csv::Row{"class", "count"}) fail(Errc::ParseError, "counts header must be class,count");
    std::map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < ref.class_names.size(); ++c) index[ref.class_names[c]] = c;
    ObservedCounts obs{std::vector<long long>(ref.class_names.size(), 0)};
    std::vector<bool> seen(ref.class_names.size(), false);
    for (const auto& row : t.rows) {
        if (row.size() != 2) fail(Errc::ParseError, "counts row has wrong width");
        const auto it = index.find(row[0]);
        if (it == index.end()) fail(Errc::DimensionMismatch, "class '" + row[0] + "' not in reference matrix");
        if (seen[it->second]) fail(Errc::ParseError, "class '" + row[0] + "' listed twice");
        seen[it->second] = true;
        obs.y[it->second] = parse_int(row[1]);
    }
    validate_counts(obs, ref);
    return obs;
}

inline ObservedCounts counts_from_composition(const assemblage::Composition& comp, const ReferenceMatrix& ref) {
    ObservedCounts obs{std::vector<long long>(ref.class_names.size(), 0)};
    for (const auto& [cls, n] : comp.counts) {
        const auto it = std::find(ref.class_names.begin(), ref.class_names.end(), cls);
        if (it == ref.class_names.end()) fail(Errc::DimensionMismatch, "class '" + cls + "' not in reference matrix");
        obs.y[static_cast<std::size_t>(it - ref.class_names.begin())] = n;
    }
    validate_counts(obs, ref);
    return obs;
}

struct MixturePrior {
    std::vector<double> alpha{1.0};  // one value broadcasts to every process

    [[nodiscard]] Eigen::VectorXd resolve(Eigen::Index p) const {
        Eigen::VectorXd a(p);
        if (alpha.size() == 1) {
            a.setConstant(alpha[0]);
        } else if (static_cast<Eigen::Index>(alpha.size()) == p) {
            for (Eigen::Index i = 0; i < p; ++i) a(i) = alpha[static_cast<std::size_t>(i)];
        } else {
            fail(Errc::DimensionMismatch, "alpha has " + std::to_string(alpha.size()) + " entries for " + std::to_string(p) + " processes");
        }
        for (Eigen::Index i = 0; i < p; ++i)
            if (!(a(i) > 0) || !std::isfinite(a(i))) fail(Errc::InvalidArgument, "alpha must be positive");
        return a;
    }
};

struct SamplerConfig {
    int chains = 4;
    int iterations = 2000;
    int warmup = 1000;
    double target_accept = 0.9;
    int max_depth = 12;
    std::uint64_t seed = 1;

    void validate() const {
        if (chains < 1) fail(Errc::InvalidArgument, "chains must be >= 1");
        if (warmup < 0 || warmup >= iterations) fail(Errc::InvalidArgument, "need 0 <= warmup < iterations");
        if (!(target_accept > 0 && target_accept < 1)) fail(Errc::InvalidArgument, "target_accept must lie in (0,1)");
        if (max_depth < 1) fail(Errc::InvalidArgument, "max_depth must be >= 1");
    }

    [[nodiscard]] static SamplerConfig looped() {
        SamplerConfig c;
        c.chains = 7;
        return c;
    }
};

// ---------------------------------------------------------------- model

/// Weights from the unconstrained vector; u = 0 maps to the uniform weight vector.
inline Eigen::VectorXd stick_breaking(const Eigen::VectorXd& u) {
    const Eigen::Index k = u.size() + 1;
    Eigen::VectorXd w(k);
    double rest = 1.0;
    for (Eigen::Index i = 0; i + 1 < k; ++i) {
        const double x = u(i) - std::log(static_cast<double>(k - 1 - i));
        const double z = 1.0 / (1.0 + std::exp(-x));
        w(i) = rest * z;
        rest -= w(i);
    }
    w(k - 1) = std::max(rest, 0.0);
    return w;
}

inline Eigen::VectorXd stick_breaking_inverse(const Eigen::VectorXd& w) {
    const Eigen::Index k = w.size();
    if (k < 1) fail(Errc::InvalidArgument, "empty weight vector");
    Eigen::VectorXd u(k - 1);
    double rest = 1.0;
    for (Eigen::Index i = 0; i + 1 < k; ++i) {
        const double z = std::clamp(w(i) / rest, 1e-300, 1.0 - 1e-16);
        u(i) = std::log(z) - std::log1p(-z) + std::log(static_cast<double>(k - 1 - i));
        rest -= w(i);
    }
    return u;
}

struct LogDensity {
    double value = 0.0;
    Eigen::VectorXd gradient;
};

namespace detail {

// log(1 + e^x) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double log_multinomial_coefficient(const std::vector<long long>& y) {
    double n = 0, s = 0;
    for (auto v : y) {
        n += static_cast<double>(v);
        s += std::lgamma(static_cast<double>(v) + 1.0);
    }
    return std::lgamma(n + 1.0) - s;
}

/// Evaluation with preallocated buffers; the hot path of the sampler.
class Model {
public:
    Model(const ReferenceMatrix& ref, const ObservedCounts& obs, Eigen::VectorXd alpha)
        : pi_(ref.pi), alpha_(std::move(alpha)), p_(ref.processes()), c_(ref.classes()) {
        y_.resize(c_);
        for (Eigen::Index c = 0; c < c_; ++c) y_(c) = static_cast<double>(obs.y[static_cast<std::size_t>(c)]);
        log_coef_ = log_multinomial_coefficient(obs.y);
        tail_alpha_.resize(p_);
        double acc = 0;
        for (Eigen::Index i = p_ - 1; i >= 0; --i) {
            tail_alpha_(i) = acc;  // sum of alpha over later processes
            acc += alpha_(i);
        }
        w_.resize(p_), z_.resize(p_), rest_.resize(p_), q_.resize(c_), gw_.resize(p_), ratio_.resize(c_);
    }

    [[nodiscard]] Eigen::Index dim() const { return p_ - 1; }

    /// Log posterior kernel in u and its gradient (into `grad`).
    double operator()(const Eigen::VectorXd& u, Eigen::VectorXd& grad) {
        grad.resize(p_ - 1);
        double rest = 1.0;
        double prior = 0.0;
        for (Eigen::Index k = 0; k + 1 < p_; ++k) {
            const double x = u(k) - std::log(static_cast<double>(p_ - 1 - k));
            const double log_z = -softplus(-x), log_1mz = -softplus(x);
            z_(k) = 1.0 / (1.0 + std::exp(-x));
            rest_(k) = rest;
            w_(k) = rest * z_(k);
            rest *= 1.0 - z_(k);
            // Dirichlet kernel times the stick-breaking Jacobian collapses to Beta(alpha_k, sum of later alphas) kernels.
            prior += alpha_(k) * log_z + tail_alpha_(k) * log_1mz;
            grad(k) = alpha_(k) * (1.0 - z_(k)) - tail_alpha_(k) * z_(k);
        }
        w_(p_ - 1) = rest;
        q_.noalias() = pi_.transpose() * w_;
        double loglik = log_coef_;
        for (Eigen::Index c = 0; c < c_; ++c) {
            if (y_(c) == 0) {
                ratio_(c) = 0;
                continue;
            }
            if (!(q_(c) > 0)) {
                grad.setZero();
                return -std::numeric_limits<double>::infinity();
            }
            loglik += y_(c) * std::log(q_(c));
            ratio_(c) = y_(c) / q_(c);
        }
        gw_.noalias() = pi_ * ratio_;
        // Reverse pass through w_k = rest_k z_k, rest_{k+1} = rest_k (1 - z_k).
        double g_rest = gw_(p_ - 1);
        for (Eigen::Index k = p_ - 2; k >= 0; --k) {
            const double gz = rest_(k) * (gw_(k) - g_rest);
            grad(k) += gz * z_(k) * (1.0 - z_(k));
            g_rest = gw_(k) * z_(k) + g_rest * (1.0 - z_(k));
        }
        return loglik + prior;
    }

    [[nodiscard]] double log_likelihood_at(const Eigen::VectorXd& w) const {
        const Eigen::VectorXd q = pi_.transpose() * w;
        double ll = log_coef_;
        for (Eigen::Index c = 0; c < c_; ++c) {
            if (y_(c) == 0) continue;
            if (!(q(c) > 0)) return -std::numeric_limits<double>::infinity();
            ll += y_(c) * std::log(q(c));
        }
        return ll;
    }

    [[nodiscard]] const Eigen::VectorXd& alpha() const { return alpha_; }

private:
    Eigen::MatrixXd pi_;
    Eigen::VectorXd alpha_, tail_alpha_, y_;
    Eigen::Index p_, c_;
    double log_coef_ = 0;
    Eigen::VectorXd w_, z_, rest_, q_, gw_, ratio_;
};

}  // namespace detail

/// Multinomial log-likelihood + Dirichlet log kernel + log-Jacobian of the stick-breaking map.
/// The Dirichlet normalising constant is dropped, so alpha = 1 leaves the Jacobian alone.
inline LogDensity log_posterior(const Eigen::VectorXd& u, const ReferenceMatrix& ref, const ObservedCounts& y,
                                const MixturePrior& prior = {}) {
    validate_counts(y, ref);
    if (u.size() != ref.processes() - 1) fail(Errc::DimensionMismatch, "unconstrained vector must have P-1 entries");
    detail::Model model(ref, y, prior.resolve(ref.processes()));
    LogDensity out;
    out.value = model(u, out.gradient);
    return out;
}

// ---------------------------------------------------------------- sampler

struct Diagnostics {
    std::vector<double> rhat;  // split R-hat per process weight
    std::vector<double> ess;   // effective sample size per process weight
    std::size_t divergences = 0;
    double divergence_rate = 0.0;
    std::vector<double> step_sizes;  // adapted per chain
    std::vector<double> mean_accept;
    std::vector<double> mean_tree_depth;
};

struct MixtureResult {
    std::vector<std::string> process_names;
    std::vector<std::string> class_names;
    Eigen::MatrixXd pi;
    Eigen::MatrixXd weight_draws;  // draws x P, chains stacked in order
    Eigen::MatrixXd implied_q_draws;  // draws x C
    int chains = 0;
    int draws_per_chain = 0;
    SamplerConfig config;
    Diagnostics diagnostics;
    bool failed = false;  // divergence rate above 10 %
    bool not_converged = false;  // some split R-hat above 1.01
};

namespace detail {

inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct PhasePoint {
    Eigen::VectorXd q, p, g;  // position, momentum, gradient of log density
    double logp = 0;
};

class StepSizeAdaptation {
public:
    void set_mu(double mu) { mu_ = mu; }
    void restart() { counter_ = 0, s_bar_ = 0, x_bar_ = 0; }
    void learn(double& epsilon, double accept) {
        ++counter_;
        accept = std::min(1.0, accept);
        const double eta = 1.0 / (counter_ + t0_);
        s_bar_ = (1.0 - eta) * s_bar_ + eta * (delta_ - accept);
        const double x = mu_ - s_bar_ * std::sqrt(counter_) / gamma_;
        const double x_eta = std::pow(counter_, -kappa_);
        x_bar_ = (1.0 - x_eta) * x_bar_ + x_eta * x;
        epsilon = std::exp(x);
    }
    void complete(double& epsilon) const { epsilon = std::exp(x_bar_); }
    explicit StepSizeAdaptation(double delta) : delta_(delta) {}

private:
    double counter_ = 0, s_bar_ = 0, x_bar_ = 0, mu_ = 0;
    double delta_;
    double gamma_ = 0.05, kappa_ = 0.75, t0_ = 10;
};

/// Windowed diagonal-metric adaptation: fast initial buffer, doubling slow windows, fast terminal buffer.
class MetricAdaptation {
public:
    MetricAdaptation(int warmup, Eigen::Index dim) : warmup_(warmup), mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {
        if (warmup < 20) {
            init_buffer_ = warmup, term_buffer_ = 0, window_ = 0;  // too short: step size only
        } else if (init_buffer_ + base_window_ + term_buffer_ > warmup) {
            init_buffer_ = static_cast<int>(0.15 * warmup);
            term_buffer_ = static_cast<int>(0.1 * warmup);
            window_ = warmup - (init_buffer_ + term_buffer_);
        } else {
            window_ = base_window_;
        }
        next_window_ = init_buffer_ + window_ - 1;
    }

    /// Returns true when a window closed and `inv_metric` was updated.
    bool learn(Eigen::VectorXd& inv_metric, const Eigen::VectorXd& q) {
        if (window_ == 0) {
            ++counter_;
            return false;
        }
        if (counter_ >= init_buffer_ && counter_ < warmup_ - term_buffer_ && counter_ != warmup_) add(q);
        if (counter_ == next_window_ && counter_ != warmup_) {
            next();
            const double n = static_cast<double>(n_);
            inv_metric = (n / (n + 5.0)) * (m2_ / (n - 1.0)) + Eigen::VectorXd::Constant(q.size(), 1e-3 * 5.0 / (n + 5.0));
            n_ = 0;
            mean_.setZero();
            m2_.setZero();
            ++counter_;
            return true;
        }
        ++counter_;
        return false;
    }

private:
    void add(const Eigen::VectorXd& q) {
        ++n_;
        const Eigen::VectorXd d = q - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d.cwiseProduct(q - mean_);
    }
    void next() {
        const int last = warmup_ - term_buffer_ - 1;
        if (next_window_ == last) return;
        window_ *= 2;
        next_window_ = counter_ + window_;
        if (next_window_ != last && next_window_ + 2 * window_ >= warmup_ - term_buffer_) next_window_ = last;
    }

    int warmup_;
    int init_buffer_ = 75, term_buffer_ = 50, base_window_ = 25;
    int window_ = 0, next_window_ = 0, counter_ = 0;
    long n_ = 0;
    Eigen::VectorXd mean_, m2_;
};

struct Transition {
    double accept = 0;
    int depth = 0;
    bool divergent = false;
};

class Nuts {
public:
    Nuts(Model& model, Rng& rng, int max_depth) : model_(model), rng_(rng), max_depth_(max_depth) {
        inv_metric_ = Eigen::VectorXd::Ones(model.dim());
    }

    Eigen::VectorXd inv_metric_;
    double epsilon_ = 1.0;

    void init(const Eigen::VectorXd& q) {
        z_.q = q;
        z_.logp = model_(z_.q, z_.g);
        z_.p = Eigen::VectorXd::Zero(q.size());
    }
    [[nodiscard]] const Eigen::VectorXd& position() const { return z_.q; }

    /// Doubles or halves epsilon until one leapfrog step crosses an acceptance of 0.8.
    void init_stepsize() {
        const PhasePoint start = z_;
        sample_momentum();
        double h0 = hamiltonian(z_);
        leapfrog(z_, epsilon_);
        double delta = h0 - finite_or_inf(hamiltonian(z_));
        const int direction = delta > std::log(0.8) ? 1 : -1;
        for (;;) {
            z_ = start;
            sample_momentum();
            h0 = hamiltonian(z_);
            leapfrog(z_, epsilon_);
            delta = h0 - finite_or_inf(hamiltonian(z_));
            if (direction == 1 && !(delta > std::log(0.8))) break;
            if (direction == -1 && !(delta < std::log(0.8))) break;
            epsilon_ = direction == 1 ? 2 * epsilon_ : 0.5 * epsilon_;
            if (epsilon_ > 1e7) fail(Errc::NonFiniteValue, "step size diverged during initialisation; posterior is improper");
            if (epsilon_ == 0) fail(Errc::NonFiniteValue, "step size collapsed to zero during initialisation");
        }
        z_ = start;
    }

    Transition transition() {
        sample_momentum();
        const double h0 = hamiltonian(z_);
        PhasePoint fwd = z_, bck = z_, sample = z_;
        Eigen::VectorXd p_sharp = inv_metric_.cwiseProduct(z_.p);
        Eigen::VectorXd p_ff = z_.p, p_fb = z_.p, p_bf = z_.p, p_bb = z_.p;
        Eigen::VectorXd ps_ff = p_sharp, ps_fb = p_sharp, ps_bf = p_sharp, ps_bb = p_sharp;
        Eigen::VectorXd rho = z_.p;
        const auto dim = z_.q.size();
        double log_sum_weight = 0;
        n_leapfrog_ = 0;
        sum_metro_ = 0;
        divergent_ = false;
        int depth = 0;
        std::uniform_real_distribution<double> unif(0.0, 1.0);

        while (depth < max_depth_) {
            Eigen::VectorXd rho_f = Eigen::VectorXd::Zero(dim), rho_b = Eigen::VectorXd::Zero(dim);
            double lsw_subtree = -std::numeric_limits<double>::infinity();
            PhasePoint propose;
            bool valid = false;
            if (unif(rng_) > 0.5) {
                z_ = fwd;
                rho_b = rho;
                p_bf = p_ff;
                ps_bf = ps_ff;
                valid = build_tree(depth, propose, ps_fb, ps_ff, rho_f, p_fb, p_ff, h0, 1, lsw_subtree);
                fwd = z_;
            } else {
                z_ = bck;
                rho_f = rho;
                p_fb = p_bb;
                ps_fb = ps_bb;
                valid = build_tree(depth, propose, ps_bf, ps_bb, rho_b, p_bf, p_bb, h0, -1, lsw_subtree);
                bck = z_;
            }
            if (!valid) break;
            ++depth;
            if (lsw_subtree > log_sum_weight) {
                sample = propose;
            } else if (unif(rng_) < std::exp(lsw_subtree - log_sum_weight)) {
                sample = propose;
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            rho = rho_b + rho_f;
            bool persist = criterion(ps_bb, ps_ff, rho);
            persist = persist && criterion(ps_bb, ps_fb, rho_b + p_fb);
            persist = persist && criterion(ps_bf, ps_ff, rho_f + p_bf);
            if (!persist) break;
        }
        z_ = sample;
        return {n_leapfrog_ ? sum_metro_ / n_leapfrog_ : 0.0, depth, divergent_};
    }

private:
    static double finite_or_inf(double h) { return std::isnan(h) ? std::numeric_limits<double>::infinity() : h; }

    void sample_momentum() {
        std::normal_distribution<double> n01(0.0, 1.0);
        for (Eigen::Index i = 0; i < z_.p.size(); ++i) z_.p(i) = n01(rng_) / std::sqrt(inv_metric_(i));
    }
    [[nodiscard]] double hamiltonian(const PhasePoint& z) const {
        return -z.logp + 0.5 * z.p.dot(inv_metric_.cwiseProduct(z.p));
    }
    void leapfrog(PhasePoint& z, double eps) {
        z.p += 0.5 * eps * z.g;
        z.q += eps * inv_metric_.cwiseProduct(z.p);
        z.logp = model_(z.q, z.g);
        z.p += 0.5 * eps * z.g;
    }
    static bool criterion(const Eigen::VectorXd& ps_minus, const Eigen::VectorXd& ps_plus, const Eigen::VectorXd& rho) {
        return ps_plus.dot(rho) > 0 && ps_minus.dot(rho) > 0;
    }

    bool build_tree(int depth, PhasePoint& propose, Eigen::VectorXd& ps_beg, Eigen::VectorXd& ps_end, Eigen::VectorXd& rho,
                    Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end, double h0, int sign, double& log_sum_weight) {
        if (depth == 0) {
            leapfrog(z_, sign * epsilon_);
            ++n_leapfrog_;
            const double h = finite_or_inf(hamiltonian(z_));
            if (h - h0 > kMaxDeltaH) divergent_ = true;
            log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
            sum_metro_ += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
            propose = z_;
            ps_beg = inv_metric_.cwiseProduct(z_.p);
            ps_end = ps_beg;
            rho += z_.p;
            p_beg = z_.p;
            p_end = p_beg;
            return !divergent_;
        }
        const auto dim = z_.q.size();
        double lsw_init = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd p_init_end(dim), ps_init_end(dim), rho_init = Eigen::VectorXd::Zero(dim);
        if (!build_tree(depth - 1, propose, ps_beg, ps_init_end, rho_init, p_beg, p_init_end, h0, sign, lsw_init)) return false;

        PhasePoint propose_final = z_;
        double lsw_final = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd p_final_beg(dim), ps_final_beg(dim), rho_final = Eigen::VectorXd::Zero(dim);
        if (!build_tree(depth - 1, propose_final, ps_final_beg, ps_end, rho_final, p_final_beg, p_end, h0, sign, lsw_final))
            return false;

        const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
        if (lsw_final > lsw_subtree) {
            propose = propose_final;
        } else {
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            if (unif(rng_) < std::exp(lsw_final - lsw_subtree)) propose = propose_final;
        }
        const Eigen::VectorXd rho_subtree = rho_init + rho_final;
        rho += rho_subtree;
        bool persist = criterion(ps_beg, ps_end, rho_subtree);
        persist = persist && criterion(ps_beg, ps_final_beg, rho_init + p_final_beg);
        persist = persist && criterion(ps_init_end, ps_end, rho_final + p_init_end);
        return persist;
    }

    static constexpr double kMaxDeltaH = 1000.0;

    Model& model_;
    Rng& rng_;
    int max_depth_;
    PhasePoint z_;
    int n_leapfrog_ = 0;
    double sum_metro_ = 0;
    bool divergent_ = false;
};

struct ChainOutput {
    std::vector<Eigen::VectorXd> draws;  // unconstrained, post-warmup
    std::size_t divergences = 0;
    double step_size = 0;
    double accept_sum = 0;
    double depth_sum = 0;
};

inline Eigen::VectorXd dirichlet_draw(Rng& rng, const Eigen::VectorXd& alpha) {
    Eigen::VectorXd w(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
        std::gamma_distribution<double> g(alpha(i), 1.0);
        w(i) = g(rng);
    }
    const double s = w.sum();
    if (!(s > 0)) return Eigen::VectorXd::Constant(alpha.size(), 1.0 / static_cast<double>(alpha.size()));
    return w / s;
}

inline ChainOutput run_chain(const ReferenceMatrix& ref, const ObservedCounts& obs, const Eigen::VectorXd& alpha,
                             const SamplerConfig& cfg, int chain) {
    Model model(ref, obs, alpha);
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(chain));
    Nuts nuts(model, rng, cfg.max_depth);

    // Initial point drawn from the prior; retried while the likelihood is zero there.
    Eigen::VectorXd grad;
    Eigen::VectorXd u;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        u = stick_breaking_inverse(dirichlet_draw(rng, alpha));
        ok = std::isfinite(model(u, grad));
    }
    if (!ok) fail(Errc::NonFiniteValue, "log posterior is -inf at every initial point (a class with counts has zero reference mass)");
    nuts.init(u);
    nuts.init_stepsize();

    StepSizeAdaptation step(cfg.target_accept);
    step.set_mu(std::log(10 * nuts.epsilon_));
    MetricAdaptation metric(cfg.warmup, model.dim());

    ChainOutput out;
    for (int it = 0; it < cfg.iterations; ++it) {
        const auto t = nuts.transition();
        if (it < cfg.warmup) {
            step.learn(nuts.epsilon_, t.accept);
            if (metric.learn(nuts.inv_metric_, nuts.position())) {
                nuts.init_stepsize();
                step.set_mu(std::log(10 * nuts.epsilon_));
                step.restart();
            }
            if (it + 1 == cfg.warmup) step.complete(nuts.epsilon_);
        } else {
            out.draws.push_back(nuts.position());
            out.divergences += t.divergent ? 1 : 0;
            out.accept_sum += t.accept;
            out.depth_sum += t.depth;
        }
    }
    if (cfg.warmup == 0) step.complete(nuts.epsilon_);
    out.step_size = nuts.epsilon_;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------- diagnostics

/// Split R-hat over `chains` equal-length chains stored consecutively. Constant input gives 1.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
    std::vector<std::vector<double>> halves;
    for (const auto& c : chains) {
        const std::size_t h = c.size() / 2;
        if (h < 2) fail(Errc::TooFewDraws, "split R-hat needs at least 4 draws per chain");
        halves.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
        halves.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
    }
    const auto m = static_cast<double>(halves.size());
    const auto n = static_cast<double>(halves[0].size());
    std::vector<double> means, vars;
    for (const auto& c : halves) {
        double mu = 0;
        for (double v : c) mu += v;
        mu /= n;
        double s = 0;
        for (double v : c) s += (v - mu) * (v - mu);
        means.push_back(mu);
        vars.push_back(s / (n - 1));
    }
    double grand = 0, w = 0;
    for (std::size_t i = 0; i < halves.size(); ++i) grand += means[i], w += vars[i];
    grand /= m;
    w /= m;
    double b = 0;
    for (double mu : means) b += (mu - grand) * (mu - grand);
    b *= n / (m - 1);
    if (w <= 0) return 1.0;
    const double var_plus = (n - 1) / n * w + b / n;
    return std::sqrt(var_plus / w);
}

/// Multi-chain effective sample size on split chains (initial positive + monotone sequence estimator).
inline double effective_sample_size(const std::vector<std::vector<double>>& chains) {
    std::vector<std::vector<double>> split;
    for (const auto& c : chains) {
        const std::size_t h = c.size() / 2;
        if (h < 2) fail(Errc::TooFewDraws, "ESS needs at least 4 draws per chain");
        split.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
        split.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
    }
    const std::size_t m = split.size();
    const std::size_t n = split[0].size();
    std::vector<std::vector<double>> acov(m, std::vector<double>(n, 0.0));
    std::vector<double> means(m), vars(m);
    for (std::size_t j = 0; j < m; ++j) {
        const auto& c = split[j];
        double mu = 0;
        for (double v : c) mu += v;
        mu /= static_cast<double>(n);
        for (std::size_t lag = 0; lag < n; ++lag) {
            double s = 0;
            for (std::size_t i = 0; i + lag < n; ++i) s += (c[i] - mu) * (c[i + lag] - mu);
            acov[j][lag] = s / static_cast<double>(n);
        }
        means[j] = mu;
        vars[j] = acov[j][0] * static_cast<double>(n) / static_cast<double>(n - 1);
    }
    const double total = static_cast<double>(m * n);
    double mean_var = 0;
    for (double v : vars) mean_var += v;
    mean_var /= static_cast<double>(m);
    double var_plus = mean_var * static_cast<double>(n - 1) / static_cast<double>(n);
    if (m > 1) {
        double gm = 0;
        for (double v : means) gm += v;
        gm /= static_cast<double>(m);
        double b = 0;
        for (double v : means) b += (v - gm) * (v - gm);
        var_plus += b / static_cast<double>(m - 1);
    }
    if (!(var_plus > 0)) return total;
    auto mean_acov = [&](std::size_t lag) {
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) s += acov[j][lag];
        return s / static_cast<double>(m);
    };
    std::vector<double> rho(n, 0.0);
    rho[0] = 1;
    double rho_even = 1, rho_odd = 1 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = rho_odd;
    std::size_t t = 1;
    while (t + 5 < n && rho_even + rho_odd > 0) {
        rho_even = 1 - (mean_var - mean_acov(t + 1)) / var_plus;
        rho_odd = 1 - (mean_var - mean_acov(t + 2)) / var_plus;
        if (rho_even + rho_odd >= 0) {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    const std::size_t max_t = t;
    if (rho_even > 0 && max_t + 1 < n) rho[max_t + 1] = rho_even;
    for (std::size_t k = 1; k + 3 <= max_t; k += 2) {
        if (rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k]) {
            rho[k + 1] = (rho[k - 1] + rho[k]) / 2;
            rho[k + 2] = rho[k + 1];
        }
    }
    double sum = 0;
    for (std::size_t k = 0; k <= max_t && k < n; ++k) sum += rho[k];
    double tau = -1 + 2 * sum + (max_t + 1 < n ? rho[max_t + 1] : 0.0);
    tau = std::max(tau, 1.0 / std::log10(total));
    return total / tau;
}

// ---------------------------------------------------------------- posterior

namespace detail {

inline MixtureResult point_mass_result(const ReferenceMatrix& ref, const SamplerConfig& cfg) {
    MixtureResult r;
    r.process_names = ref.process_names;
    r.class_names = ref.class_names;
    r.pi = ref.pi;
    r.chains = cfg.chains;
    r.draws_per_chain = cfg.iterations - cfg.warmup;
    r.config = cfg;
    const Eigen::Index total = static_cast<Eigen::Index>(r.chains) * r.draws_per_chain;
    r.weight_draws = Eigen::MatrixXd::Ones(total, 1);
    r.implied_q_draws = ref.pi.row(0).replicate(total, 1);
    r.diagnostics.rhat = {1.0};
    r.diagnostics.ess = {static_cast<double>(total)};
    r.diagnostics.step_sizes.assign(static_cast<std::size_t>(cfg.chains), 0.0);
    r.diagnostics.mean_accept.assign(static_cast<std::size_t>(cfg.chains), 1.0);
    r.diagnostics.mean_tree_depth.assign(static_cast<std::size_t>(cfg.chains), 0.0);
    return r;
}

}  // namespace detail

/// Chains run on separate threads; each chain's stream depends only on (seed, chain index).
inline MixtureResult sample_posterior(const ReferenceMatrix& ref, const ObservedCounts& y, const MixturePrior& prior = {},
                                      const SamplerConfig& cfg = {}) {
    cfg.validate();
    validate_counts(y, ref);
    const Eigen::VectorXd alpha = prior.resolve(ref.processes());
    if (ref.processes() == 1) return detail::point_mass_result(ref, cfg);

    std::vector<detail::ChainOutput> outputs(static_cast<std::size_t>(cfg.chains));
    std::vector<std::exception_ptr> errors(outputs.size());
    {
        std::vector<std::jthread> workers;
        for (int c = 0; c < cfg.chains; ++c) {
            workers.emplace_back([&, c] {
                try {
                    outputs[static_cast<std::size_t>(c)] = detail::run_chain(ref, y, alpha, cfg, c);
                } catch (...) {
                    errors[static_cast<std::size_t>(c)] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    MixtureResult r;
    r.process_names = ref.process_names;
    r.class_names = ref.class_names;
    r.pi = ref.pi;
    r.chains = cfg.chains;
    r.draws_per_chain = cfg.iterations - cfg.warmup;
    r.config = cfg;
    const Eigen::Index p = ref.processes();
    const Eigen::Index total = static_cast<Eigen::Index>(cfg.chains) * r.draws_per_chain;
    r.weight_draws.resize(total, p);
    Eigen::Index row = 0;
    for (const auto& out : outputs) {
        for (const auto& u : out.draws) r.weight_draws.row(row++) = stick_breaking(u).transpose();
        r.diagnostics.divergences += out.divergences;
        r.diagnostics.step_sizes.push_back(out.step_size);
        r.diagnostics.mean_accept.push_back(out.accept_sum / r.draws_per_chain);
        r.diagnostics.mean_tree_depth.push_back(out.depth_sum / r.draws_per_chain);
    }
    r.implied_q_draws = r.weight_draws * ref.pi;
    r.diagnostics.divergence_rate = static_cast<double>(r.diagnostics.divergences) / static_cast<double>(total);
    r.failed = r.diagnostics.divergence_rate > 0.10;
    if (r.draws_per_chain >= 4) {
        for (Eigen::Index j = 0; j < p; ++j) {
            std::vector<std::vector<double>> per_chain(static_cast<std::size_t>(cfg.chains));
            for (int c = 0; c < cfg.chains; ++c)
                for (int d = 0; d < r.draws_per_chain; ++d)
                    per_chain[static_cast<std::size_t>(c)].push_back(r.weight_draws(static_cast<Eigen::Index>(c) * r.draws_per_chain + d, j));
            r.diagnostics.rhat.push_back(split_rhat(per_chain));
            r.diagnostics.ess.push_back(effective_sample_size(per_chain));
        }
        for (double v : r.diagnostics.rhat) r.not_converged = r.not_converged || v > 1.01;
    }
    return r;
}

// ---------------------------------------------------------------- summaries

/// Quantile that averages the two bracketing order statistics (exact order statistic when it lands on one).
inline double midpoint_quantile(std::span<const double> sorted, double prob) {
    if (sorted.empty()) fail(Errc::EmptyInput, "quantile of empty range");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (static_cast<double>(lo) == h || lo + 1 >= sorted.size()) return sorted[lo];
    return 0.5 * (sorted[lo] + sorted[lo + 1]);
}

inline constexpr std::array<double, 5> kSummaryProbs{0.025, 0.25, 0.5, 0.75, 0.975};

struct ProcessSummary {
    std::string name;
    double mean = 0;
    double sd = 0;
    std::array<double, 5> quantiles{};  // at kSummaryProbs
};

inline ProcessSummary summarise_draws(std::string name, std::vector<double> draws) {
    if (draws.size() < 100) fail(Errc::TooFewDraws, std::to_string(draws.size()) + " draws; need at least 100");
    ProcessSummary s;
    s.name = std::move(name);
    CompensatedSum sum;
    for (double v : draws) sum.add(v);
    s.mean = sum.value() / static_cast<double>(draws.size());
    CompensatedSum ss;
    for (double v : draws) ss.add((v - s.mean) * (v - s.mean));
    s.sd = std::sqrt(ss.value() / static_cast<double>(draws.size() - 1));
    std::sort(draws.begin(), draws.end());
    s.mean = std::clamp(s.mean, draws.front(), draws.back());
    for (std::size_t k = 0; k < kSummaryProbs.size(); ++k) s.quantiles[k] = midpoint_quantile(draws, kSummaryProbs[k]);
    return s;
}

inline std::vector<double> column(const Eigen::MatrixXd& m, Eigen::Index j) {
    std::vector<double> v(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, j);
    return v;
}

inline std::vector<ProcessSummary> posterior_summary(const MixtureResult& r) {
    std::vector<ProcessSummary> out;
    for (Eigen::Index j = 0; j < r.weight_draws.cols(); ++j)
        out.push_back(summarise_draws(r.process_names[static_cast<std::size_t>(j)], column(r.weight_draws, j)));
    return out;
}

/// Equal-tailed credible interval for one process weight.
inline std::pair<double, double> credible_interval(const MixtureResult& r, Eigen::Index process, double level) {
    auto v = column(r.weight_draws, process);
    if (v.size() < 100) fail(Errc::TooFewDraws, "credible interval needs at least 100 draws");
    std::sort(v.begin(), v.end());
    const double tail = (1.0 - level) / 2;
    return {midpoint_quantile(v, tail), midpoint_quantile(v, 1.0 - tail)};
}

/// Process indices by descending posterior mean; ties keep the lower index first.
inline std::vector<std::size_t> rank_processes(const MixtureResult& r) {
    std::vector<double> means(static_cast<std::size_t>(r.weight_draws.cols()));
    for (Eigen::Index j = 0; j < r.weight_draws.cols(); ++j) means[static_cast<std::size_t>(j)] = r.weight_draws.col(j).mean();
    std::vector<std::size_t> order(means.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return means[a] > means[b]; });
    return order;
}

/// One multinomial(N, q) sample per retained q draw.
inline Eigen::MatrixXi posterior_predictive(const MixtureResult& r, long long n, std::uint64_t seed) {
    if (n < 0) fail(Errc::InvalidArgument, "N must be non-negative");
    Rng rng = make_rng(seed, 0x70726564);
    Eigen::MatrixXi out(r.implied_q_draws.rows(), r.implied_q_draws.cols());
    for (Eigen::Index d = 0; d < out.rows(); ++d) {
        long long left = n;
        double mass = 1.0;
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
            long long k = 0;
            if (c + 1 == out.cols()) {
                k = left;
            } else if (left > 0 && mass > 0) {
                const double prob = std::clamp(r.implied_q_draws(d, c) / mass, 0.0, 1.0);
                std::binomial_distribution<long long> b(left, prob);
                k = b(rng);
            }
            out(d, c) = static_cast<int>(k);
            left -= k;
            mass -= r.implied_q_draws(d, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------- export

inline std::string weights_csv(const MixtureResult& r) {
    std::string out;
    csv::append_row(out, r.process_names);
    for (Eigen::Index i = 0; i < r.weight_draws.rows(); ++i) {
        csv::Row row;
        for (Eigen::Index j = 0; j < r.weight_draws.cols(); ++j) row.push_back(format_double(r.weight_draws(i, j)));
        csv::append_row(out, row);
    }
    return out;
}

/// Boxes span the quartiles, whiskers the 2.5-97.5 % range; processes ordered by descending mean.
inline std::string report_svg(const MixtureResult& r) {
    const auto summaries = posterior_summary(r);
    const auto order = rank_processes(r);
    constexpr double box_w = 24, slot = 40;
    const double m = plots::kMargin, h = plots::kPlotHeight;
    plots::Svg svg(2 * m + slot * static_cast<double>(order.size()), h + 2 * m + 60);
    auto y_of = [&](double v) { return m + h * (1.0 - v); };
    svg.line(m, m, m, m + h);
    svg.line(m, m + h, m + slot * static_cast<double>(order.size()), m + h);
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) svg.text(2, y_of(t) + 3, plots::num(t));
    for (std::size_t k = 0; k < order.size(); ++k) {
        const auto& s = summaries[order[k]];
        const double cx = m + slot * (static_cast<double>(k) + 0.5);
        svg.line(cx, y_of(s.quantiles[0]), cx, y_of(s.quantiles[1]));
        svg.line(cx, y_of(s.quantiles[3]), cx, y_of(s.quantiles[4]));
        svg.rect(cx - box_w / 2, y_of(s.quantiles[3]), box_w, std::max(0.0, y_of(s.quantiles[1]) - y_of(s.quantiles[3])),
                 plots::kPalette[order[k] % plots::kPalette.size()],
                 "class=\"box\" data-process=\"" + plots::xml_escape(s.name) + "\" data-mean=\"" + plots::num(s.mean) + "\"");
        svg.line(cx - box_w / 2, y_of(s.quantiles[2]), cx + box_w / 2, y_of(s.quantiles[2]));
        svg.text(cx, m + h + 12, s.name, "transform=\"rotate(60 " + plots::num(cx) + " " + plots::num(m + h + 12) + ")\"");
    }
    return svg.str();
}

inline nlohmann::ordered_json diagnostics_json(const MixtureResult& r) {
    nlohmann::ordered_json j;
    j["chains"] = r.chains;
    j["draws_per_chain"] = r.draws_per_chain;
    j["config"] = {{"chains", r.config.chains},           {"iterations", r.config.iterations},
                   {"warmup", r.config.warmup},           {"target_accept", r.config.target_accept},
                   {"max_depth", r.config.max_depth},     {"seed", r.config.seed}};
    j["divergences"] = r.diagnostics.divergences;
    j["divergence_rate"] = r.diagnostics.divergence_rate;
    j["failed"] = r.failed;
    j["not_converged"] = r.not_converged;
    j["step_sizes"] = r.diagnostics.step_sizes;
    j["mean_accept"] = r.diagnostics.mean_accept;
    j["mean_tree_depth"] = r.diagnostics.mean_tree_depth;
    auto procs = nlohmann::ordered_json::array();
    const bool summarise = r.weight_draws.rows() >= 100;
    for (std::size_t i = 0; i < r.process_names.size(); ++i) {
        nlohmann::ordered_json p;
        p["process"] = r.process_names[i];
        if (i < r.diagnostics.rhat.size()) p["rhat"] = r.diagnostics.rhat[i];
        if (i < r.diagnostics.ess.size()) p["ess"] = r.diagnostics.ess[i];
        if (summarise) {
            const auto s = summarise_draws(r.process_names[i], column(r.weight_draws, static_cast<Eigen::Index>(i)));
            p["mean"] = s.mean;
            p["sd"] = s.sd;
            p["quantiles"] = {{"2.5%", s.quantiles[0]}, {"25%", s.quantiles[1]}, {"50%", s.quantiles[2]},
                              {"75%", s.quantiles[3]},  {"97.5%", s.quantiles[4]}};
        }
        procs.push_back(std::move(p));
    }
    j["processes"] = std::move(procs);
    return j;
}

/// Writes diagnostics.json always; weights.csv and report.svg only when the run did not fail
/// (or `allow_failed`). Returns the written paths.
inline std::vector<std::filesystem::path> export_mixture_report(const MixtureResult& r, const std::filesystem::path& dir,
                                                                bool allow_failed = false) {
    std::vector<std::filesystem::path> written;
    write_file(dir / "diagnostics.json", diagnostics_json(r).dump(2) + "\n");
    written.push_back(dir / "diagnostics.json");
    if (r.failed && !allow_failed) return written;
    write_file(dir / "weights.csv", weights_csv(r));
    written.push_back(dir / "weights.csv");
    write_file(dir / "report.svg", report_svg(r));
    written.push_back(dir / "report.svg");
    return written;
}

}  // namespace phyto::mixture
