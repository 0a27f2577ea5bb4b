#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "duet/error.hpp"
#include "duet/image.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// pixel metrics
// ---------------------------------------------------------------------------

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw ValidationError(std::string(what) + ": image shapes differ");
}

inline double mse_images(const Image& a, const Image& b) {
    require_same_shape(a, b, "mse_images");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.pixels.size());
}

/// 10*log10(peak^2 / MSE); identical images give +infinity.
inline double psnr_from_mse(double mse, double peak = 1.0) {
    if (peak <= 0.0) throw ParamError("psnr: peak must be positive");
    if (mse < 0.0) throw ParamError("psnr: negative MSE");
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
    return psnr_from_mse(mse_images(a, b), peak);
}

/// PSNR restricted to a pixel box [y0,y1) x [x0,x1), all channels.
inline double psnr_region(const Image& a, const Image& b, const PixelBox& box, double peak = 1.0) {
    require_same_shape(a, b, "psnr_region");
    if (box.y0 < 0 || box.x0 < 0 || box.y1 > a.height || box.x1 > a.width || box.y0 >= box.y1 ||
        box.x0 >= box.x1)
        throw ValidationError("psnr_region: box outside image");
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::int64_t y = box.y0; y < box.y1; ++y)
        for (std::int64_t x = box.x0; x < box.x1; ++x)
            for (std::int64_t c = 0; c < a.channels; ++c) {
                const double d = a.at(y, x, c) - b.at(y, x, c);
                acc += d * d;
                ++n;
            }
    return psnr_from_mse(acc / static_cast<double>(n), peak);
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Mean SSIM over non-overlapping 8x8 windows (stride 8, trailing partial
/// windows dropped), population moments per window, stabilizers
/// C1=(0.01*peak)^2 and C2=(0.03*peak)^2. Channels are tiled independently
/// and pooled into the same mean.
inline double ssim(const Image& a, const Image& b, double peak = 1.0) {
    require_same_shape(a, b, "ssim");
    if (peak <= 0.0) throw ParamError("ssim: peak must be positive");
    constexpr std::int64_t W = 8;
    if (a.height < W || a.width < W) throw ValidationError("ssim: image smaller than 8x8 window");
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    double total = 0.0;
    std::int64_t windows = 0;
    for (std::int64_t c = 0; c < a.channels; ++c)
        for (std::int64_t y0 = 0; y0 + W <= a.height; y0 += W)
            for (std::int64_t x0 = 0; x0 + W <= a.width; x0 += W) {
                double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
                for (std::int64_t y = y0; y < y0 + W; ++y)
                    for (std::int64_t x = x0; x < x0 + W; ++x) {
                        const double va = a.at(y, x, c), vb = b.at(y, x, c);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                const double n = static_cast<double>(W * W);
                const double mu_a = sa / n, mu_b = sb / n;
                const double var_a = saa / n - mu_a * mu_a;
                const double var_b = sbb / n - mu_b * mu_b;
                const double cov = sab / n - mu_a * mu_b;
                const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                ++windows;
            }
    return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------
// feature statistics
// ---------------------------------------------------------------------------

/// Streaming Gaussian fit of feature vectors: running sum and second-moment
/// matrix, so partial accumulators merge associatively. Covariance is the
/// unbiased estimate, which needs at least two samples.
class FeatureStats {
  public:
    explicit FeatureStats(std::int64_t dim) : dim_(dim), sum_(dim, 0.0), outer_(dim * dim, 0.0) {
        if (dim < 1) throw ParamError("FeatureStats: dimension below 1");
    }

    void add(const std::vector<double>& x) {
        if (static_cast<std::int64_t>(x.size()) != dim_)
            throw ValidationError("FeatureStats: feature dimension mismatch");
        for (std::int64_t i = 0; i < dim_; ++i) {
            sum_[static_cast<std::size_t>(i)] += x[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < dim_; ++j)
                outer_[static_cast<std::size_t>(i * dim_ + j)] +=
                    x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(j)];
        }
        ++count_;
    }

    void merge(const FeatureStats& other) {
        if (other.dim_ != dim_) throw ValidationError("FeatureStats: merge dimension mismatch");
        for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += other.sum_[i];
        for (std::size_t i = 0; i < outer_.size(); ++i) outer_[i] += other.outer_[i];
        count_ += other.count_;
    }

    std::int64_t count() const { return count_; }
    std::int64_t dim() const { return dim_; }

    std::vector<double> mean() const {
        if (count_ < 1) throw ContractError("FeatureStats: mean of empty accumulator");
        std::vector<double> m(sum_);
        for (auto& v : m) v /= static_cast<double>(count_);
        return m;
    }

    /// Row-major dim x dim unbiased covariance.
    std::vector<double> covariance() const {
        if (count_ < 2) throw ContractError("FeatureStats: covariance needs at least 2 samples");
        const std::vector<double> m = mean();
        std::vector<double> cov(static_cast<std::size_t>(dim_ * dim_));
        const double n = static_cast<double>(count_);
        for (std::int64_t i = 0; i < dim_; ++i)
            for (std::int64_t j = 0; j < dim_; ++j) {
                const double raw = outer_[static_cast<std::size_t>(i * dim_ + j)] -
                                   n * m[static_cast<std::size_t>(i)] * m[static_cast<std::size_t>(j)];
                cov[static_cast<std::size_t>(i * dim_ + j)] = raw / (n - 1.0);
            }
        return cov;
    }

  private:
    std::int64_t dim_;
    std::int64_t count_ = 0;
    std::vector<double> sum_;
    std::vector<double> outer_;  // row-major accumulated x x^T
};

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

constexpr double kFrechetEps = 1e-6;  // ridge added to both covariances

/// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}) with
/// S = cov + eps*I. The inner square roots come from symmetric
/// eigendecompositions, exact for any PSD pair, so commuting cases hit
/// their closed forms and the result is nonnegative up to the ridge and
/// floating-point error.
inline double frechet_from_moments(const std::vector<double>& mu1, const std::vector<double>& cov1,
                                   const std::vector<double>& mu2, const std::vector<double>& cov2) {
    const auto d = static_cast<std::int64_t>(mu1.size());
    if (d < 1) throw ParamError("frechet: empty mean");
    if (static_cast<std::int64_t>(mu2.size()) != d ||
        static_cast<std::int64_t>(cov1.size()) != d * d ||
        static_cast<std::int64_t>(cov2.size()) != d * d)
        throw ValidationError("frechet: moment shapes disagree");

    double mean_term = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double diff = mu1[static_cast<std::size_t>(i)] - mu2[static_cast<std::size_t>(i)];
        mean_term += diff * diff;
    }

    using Mat = Eigen::MatrixXd;
    Mat s1(d, d), s2(d, d);
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            s1(i, j) = cov1[static_cast<std::size_t>(i * d + j)];
            s2(i, j) = cov2[static_cast<std::size_t>(i * d + j)];
        }
    s1 = ((s1 + s1.transpose()) / 2.0 + kFrechetEps * Mat::Identity(d, d)).eval();
    s2 = ((s2 + s2.transpose()) / 2.0 + kFrechetEps * Mat::Identity(d, d)).eval();

    Eigen::SelfAdjointEigenSolver<Mat> es1(s1);
    if (es1.info() != Eigen::Success) throw NumericError("frechet: eigensolver failed on first covariance");
    Mat root1 = es1.operatorSqrt();

    Mat inner = root1 * s2 * root1;
    inner = ((inner + inner.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es2(inner);
    if (es2.info() != Eigen::Success) throw NumericError("frechet: eigensolver failed on product");
    double trace_sqrt = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double lam = es2.eigenvalues()(i);
        trace_sqrt += std::sqrt(std::max(lam, 0.0));
    }

    const double value = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    if (!std::isfinite(value)) throw NumericError("frechet: non-finite distance");
    return value;
}

inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    return frechet_from_moments(a.mean(), a.covariance(), b.mean(), b.covariance());
}

}  // namespace duet
