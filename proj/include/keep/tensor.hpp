#pragma once

// Minimal row-major float32 matrix. Inner products accumulate in double so
// that results are insensitive to small summation reorders while storage
// stays 32-bit.

#include <cassert>
#include <cstddef>
#include <vector>

namespace keep {

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0f) {}

    float& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }

    float* row_ptr(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
    const float* row_ptr(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// out[n] = x[k] * W[k x n]
inline void vec_mat(const float* x, int k, const Mat& w, float* out) {
    assert(w.rows == k);
    std::vector<double> acc(static_cast<std::size_t>(w.cols), 0.0);
    for (int i = 0; i < k; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const float* wrow = w.row_ptr(i);
        for (int j = 0; j < w.cols; ++j) acc[j] += xi * wrow[j];
    }
    for (int j = 0; j < w.cols; ++j) out[j] = static_cast<float>(acc[j]);
}

inline double dot(const float* a, const float* b, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    assert(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.a.size(); ++i) {
        double d = static_cast<double>(a.a[i]) - b.a[i];
        if (d < 0) d = -d;
        if (d > m) m = d;
    }
    return m;
}

}  // namespace keep
