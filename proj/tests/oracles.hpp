#pragma once

// Independent reference computations used by the tests. Nothing here calls into the library's
// numerical code paths.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/tensor.hpp"

namespace oracle {

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

/// Six nested loops over (n, co, od, oh, ow) and the taps.
inline dwp::Tensor<double> naive_conv3d(const dwp::Tensor<double>& x, const dwp::Tensor<double>& k, int pad,
                                        const dwp::Tensor<double>* bias = nullptr) {
    const long N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const long O = k.dim(0), K = k.dim(2);
    const long OD = D + 2 * pad - K + 1, OH = H + 2 * pad - K + 1, OW = W + 2 * pad - K + 1;
    dwp::Tensor<double> y({(std::size_t)N, (std::size_t)O, (std::size_t)OD, (std::size_t)OH, (std::size_t)OW});
    for (long n = 0; n < N; ++n)
        for (long o = 0; o < O; ++o)
            for (long d = 0; d < OD; ++d)
                for (long h = 0; h < OH; ++h)
                    for (long w = 0; w < OW; ++w) {
                        double s = bias ? (*bias)[o] : 0.0;
                        for (long c = 0; c < C; ++c)
                            for (long a = 0; a < K; ++a)
                                for (long b = 0; b < K; ++b)
                                    for (long e = 0; e < K; ++e) {
                                        const long id = d + a - pad, ih = h + b - pad, iw = w + e - pad;
                                        if (id < 0 || ih < 0 || iw < 0 || id >= D || ih >= H || iw >= W) continue;
                                        s += x[(((n * C + c) * D + id) * H + ih) * W + iw] *
                                             k[(((o * C + c) * K + a) * K + b) * K + e];
                                    }
                        y[(((n * O + o) * OD + d) * OH + h) * OW + w] = s;
                    }
    return y;
}

/// KL(N(m, s^2) || N(0, 1)) summed over coordinates.
inline double kl_to_std_normal(const std::vector<double>& m, const std::vector<double>& s) {
    double kl = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) kl += 0.5 * (m[i] * m[i] + s[i] * s[i] - 1.0) - std::log(s[i]);
    return kl;
}

/// KL(N(m, diag(s^2)) || N(0, S)) for a full covariance S.
inline double kl_diag_to_full(const Eigen::VectorXd& m, const Eigen::VectorXd& s, const Eigen::MatrixXd& S) {
    const Eigen::LLT<Eigen::MatrixXd> llt(S);
    const Eigen::MatrixXd Sinv = llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    double logdet_S = 0.0;
    const Eigen::MatrixXd L = llt.matrixL();
    for (Eigen::Index i = 0; i < S.rows(); ++i) logdet_S += 2.0 * std::log(L(i, i));
    double logdet_q = 0.0, trace = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        logdet_q += 2.0 * std::log(s(i));
        trace += Sinv(i, i) * s(i) * s(i);
    }
    const double quad = m.dot(Sinv * m);
    return 0.5 * (trace + quad - static_cast<double>(m.size()) + logdet_S - logdet_q);
}

/// Hard-threshold overlap by direct counting.
inline void overlap_counts(const std::vector<float>& p, const std::vector<std::uint8_t>& g, double& inter, double& a,
                           double& b) {
    inter = a = b = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool x = p[i] > 0.5f, y = g[i] != 0;
        inter += x && y;
        a += x;
        b += y;
    }
}

struct Pgm {
    int width = 0, height = 0, maxval = 0;
    std::vector<std::uint8_t> pixels;
};

/// Minimal binary PGM decoder (P5, maxval <= 255, '#' comments in the header).
inline Pgm read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    auto token = [&in]() {
        std::string t;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(c);
        }
        return t;
    };
    if (token() != "P5") throw std::runtime_error("not a P5 file");
    Pgm p;
    p.width = std::stoi(token());
    p.height = std::stoi(token());
    p.maxval = std::stoi(token());
    if (p.width <= 0 || p.height <= 0 || p.maxval <= 0 || p.maxval > 255) throw std::runtime_error("bad PGM header");
    p.pixels.resize(static_cast<std::size_t>(p.width) * p.height);
    in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(p.pixels.size())) throw std::runtime_error("short PGM payload");
    char extra;
    if (in.get(extra)) throw std::runtime_error("trailing bytes after PGM payload");
    return p;
}

}  // namespace oracle
