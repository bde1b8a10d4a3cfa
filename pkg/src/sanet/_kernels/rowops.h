/* Contiguous-row primitives behind the convolution kernels.
 *
 * The restrict qualifiers promise the compiler that source and destination
 * rows never overlap, which is what lets it vectorize the loops; the Cython
 * callers uphold the promise because inputs, outputs, and gradients are
 * always distinct arrays.  Everything is static inline: convolution rows are
 * short (a feature-map width), so a function call per kernel tap would cost
 * more than the loop body.
 */
#ifndef SANET_ROWOPS_H
#define SANET_ROWOPS_H

#include <stddef.h>

static inline void srow_axpy(float *restrict o, const float *restrict x,
                             float a, ptrdiff_t n) {
    for (ptrdiff_t i = 0; i < n; i++)
        o[i] += a * x[i];
}

static inline void drow_axpy(double *restrict o, const double *restrict x,
                             double a, ptrdiff_t n) {
    for (ptrdiff_t i = 0; i < n; i++)
        o[i] += a * x[i];
}

/* Dot products accumulate in four fixed lanes so the reduction order is
 * deterministic while still leaving the compiler independent chains to
 * pipeline or vectorize. */
static inline float srow_dot(const float *restrict a,
                             const float *restrict b, ptrdiff_t n) {
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    ptrdiff_t i = 0, tail = n - n % 4;
    for (; i < tail; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; i++)
        s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

static inline double drow_dot(const double *restrict a,
                              const double *restrict b, ptrdiff_t n) {
    double s0 = 0., s1 = 0., s2 = 0., s3 = 0.;
    ptrdiff_t i = 0, tail = n - n % 4;
    for (; i < tail; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; i++)
        s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

#endif
