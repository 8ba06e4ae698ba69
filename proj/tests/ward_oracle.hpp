#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <vector>

#include "phyto/assemblage.hpp"

namespace phyto::fixture {

// Exhaustive reference: at each step merge the pair whose union raises the within-cluster SSE least.
inline std::vector<assemblage::Merge> ward_oracle(const Eigen::MatrixXd& x) {
    const auto n = static_cast<std::size_t>(x.rows());
    std::map<std::size_t, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
    auto sse = [&](const std::vector<std::size_t>& m) {
        Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(x.cols());
        for (auto i : m) c += x.row(static_cast<Eigen::Index>(i));
        c /= static_cast<double>(m.size());
        double s = 0;
        for (auto i : m) s += (x.row(static_cast<Eigen::Index>(i)) - c).squaredNorm();
        return s;
    };
    std::vector<assemblage::Merge> out;
    for (std::size_t step = 0; step + 1 < n; ++step) {
        double best = INFINITY;
        std::size_t ba = 0, bb = 0;
        for (auto a = clusters.begin(); a != clusters.end(); ++a)
            for (auto b = std::next(a); b != clusters.end(); ++b) {
                auto u = a->second;
                u.insert(u.end(), b->second.begin(), b->second.end());
                const double inc = sse(u) - sse(a->second) - sse(b->second);
                if (inc < best) best = inc, ba = a->first, bb = b->first;
            }
        auto u = clusters[ba];
        u.insert(u.end(), clusters[bb].begin(), clusters[bb].end());
        clusters.erase(ba);
        clusters.erase(bb);
        clusters[n + step] = u;
        out.push_back({ba, bb, std::sqrt(2 * std::max(0.0, best)), u.size()});
    }
    return out;
}

}  // namespace phyto::fixture
