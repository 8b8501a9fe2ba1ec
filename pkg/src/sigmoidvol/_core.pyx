# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled calibration kernels.

Same contract as ``_core_py``; see that module for argument conventions.
The Mills ratio uses the scaled complementary error function, as the numpy
backend does; the continued fraction in ``black_scholes`` is too slow for
the inner loop near x = 1.
"""

import numpy as np
cimport numpy as cnp
from scipy.special.cython_special cimport erfcx
from libc.math cimport erf, exp, tanh, atan, sqrt, fabs, isnan, M_PI, INFINITY

cnp.import_array()

cdef double DEGENERATE = 1e-8
cdef double SQRT_HALF = sqrt(0.5)

cdef double ERF_SCALE = sqrt(M_PI) / 2.0
cdef double SQRT_HALF_PI = sqrt(M_PI / 2.0)
cdef double A1 = 0.0705230784
cdef double A2 = 0.0422820123
cdef double A3 = 0.0092705272
cdef double A4 = 0.0001520143
cdef double A5 = 0.0002765672
cdef double A6 = 0.0000430638


cdef inline void _erf_approx_parts(double u, double* v, double* d1, double* d2) nogil:
    cdef double sgn = -1.0 if u < 0.0 else 1.0
    cdef double x = fabs(u)
    cdef double poly = 1.0 + x * (A1 + x * (A2 + x * (A3 + x * (A4 + x * (A5 + x * A6)))))
    cdef double dp = A1 + x * (2 * A2 + x * (3 * A3 + x * (4 * A4 + x * (5 * A5 + x * 6 * A6))))
    cdef double ddp = 2 * A2 + x * (6 * A3 + x * (12 * A4 + x * (20 * A5 + x * 30 * A6)))
    cdef double inv = 1.0 / poly
    cdef double p2 = inv * inv
    cdef double p4 = p2 * p2
    cdef double p8 = p4 * p4
    cdef double p16 = p8 * p8
    v[0] = sgn * (1.0 - p16)
    d1[0] = 16.0 * dp * p16 * inv
    d2[0] = sgn * 16.0 * p16 * inv * (ddp - 17.0 * dp * dp * inv)


cdef inline void _sigmoid(double x, int kind, double* s, double* s1, double* s2) nogil:
    cdef double q, g, v, d1, d2
    if kind == 1:
        q = 1.0 / (1.0 + x * x)
        s[0] = atan(x)
        s1[0] = q
        s2[0] = -2.0 * x * q * q
    elif kind == 0:
        g = exp(-0.25 * M_PI * x * x)
        s[0] = erf(ERF_SCALE * x)
        s1[0] = g
        s2[0] = -0.5 * M_PI * x * g
    else:
        _erf_approx_parts(ERF_SCALE * x, &v, &d1, &d2)
        s[0] = v
        s1[0] = ERF_SCALE * d1
        s2[0] = ERF_SCALE * ERF_SCALE * d2


cdef inline void _smile_point(const double* prm, double z, double sqrt_t, double p, int kind,
                              double* w, double* wz, double* wzz) nogil:
    cdef double y = z - prm[2]
    cdef double steep = prm[5] if y <= 0.0 else prm[6]
    cdef double Y, Y1, Y2, sv, s1, s2
    if fabs(steep) < DEGENERATE:
        Y = -y
        Y1 = -1.0
        Y2 = 0.0
    else:
        _sigmoid(-steep * y, kind, &sv, &s1, &s2)
        Y = sv / steep
        Y1 = -s1
        Y2 = steep * s2
    cdef double py = p * y
    cdef double t = tanh(py)
    cdef double sech2 = 1.0 - t * t
    cdef double h = y * t
    cdef double h1 = t + py * sech2
    cdef double h2 = 2.0 * p * sech2 * (1.0 - py * t)
    cdef double s = prm[3]
    cdef double kurt = prm[4]
    cdef double g = s * Y + kurt * Y * Y
    cdef double gY = s + 2.0 * kurt * Y
    cdef double y2 = y * y
    cdef double q = 1.0 / (1.0 + y2)
    w[0] = prm[0] + prm[1] * y * q + sqrt_t * h * g
    wz[0] = prm[1] * (1.0 - y2) * q * q + sqrt_t * (h1 * g + h * gY * Y1)
    wzz[0] = (prm[1] * (2.0 * y2 * y - 6.0 * y) * q * q * q
              + sqrt_t * (h2 * g + 2.0 * h1 * gY * Y1 + h * (2.0 * kurt * Y1 * Y1 + gY * Y2)))


cdef inline double _mills(double x) nogil:
    return SQRT_HALF_PI * erfcx(x * SQRT_HALF)


cdef inline double _neg(double m, double scale, double* worst) nogil:
    if -m > worst[0]:
        worst[0] = -m
    if m < 0.0:
        m = m / scale
        return m * m
    return 0.0


def erf_approx(x):
    cdef cnp.ndarray[double, ndim=1] xa = np.ascontiguousarray(np.ravel(x), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xa)
    cdef Py_ssize_t i
    cdef double v, d1, d2
    for i in range(xa.shape[0]):
        _erf_approx_parts(xa[i], &v, &d1, &d2)
        out[i] = v
    return out.reshape(np.shape(x))


def mills_ratio(x):
    cdef cnp.ndarray[double, ndim=1] xa = np.ascontiguousarray(np.ravel(x), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xa)
    cdef Py_ssize_t i
    for i in range(xa.shape[0]):
        out[i] = _mills(xa[i])
    return out.reshape(np.shape(x))


def smile_derivs_batch(P, z, double sqrt_t, double p, int sigmoid):
    cdef cnp.ndarray[double, ndim=2] Pa = np.ascontiguousarray(np.atleast_2d(P), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] za = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = Pa.shape[0], m = za.shape[0], i, j
    cdef cnp.ndarray[double, ndim=2] w = np.empty((n, m))
    cdef cnp.ndarray[double, ndim=2] wz = np.empty((n, m))
    cdef cnp.ndarray[double, ndim=2] wzz = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            _smile_point(&Pa[i, 0], za[j], sqrt_t, p, sigmoid, &w[i, j], &wz[i, j], &wzz[i, j])
    return w, wz, wzz


def evaluate_population(P, zq, wq, wt, wlo, whi, zn, chin, wprev,
                        double sqrt_t, double sigma_star, double p, int sigmoid,
                        int vconv, double wscale):
    cdef cnp.ndarray[double, ndim=2] Pa = np.ascontiguousarray(np.atleast_2d(P), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] zqa = np.ascontiguousarray(zq, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] wqa = np.ascontiguousarray(wq, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] wta = np.ascontiguousarray(wt, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] wloa = np.ascontiguousarray(wlo, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] whia = np.ascontiguousarray(whi, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] zna = np.ascontiguousarray(zn, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] chia = np.ascontiguousarray(chin, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] wpa = np.ascontiguousarray(wprev, dtype=np.float64)
    cdef Py_ssize_t n = Pa.shape[0], nq = zqa.shape[0], m = zna.shape[0], i, j
    cdef cnp.ndarray[double, ndim=1] obj = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] pen = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] worst = np.empty(n)
    cdef double dz = 1.0 / (sigma_star * sqrt_t)
    cdef double sw = sqrt(wscale)
    cdef double L = M_PI / 2.0 if sigmoid == 1 else 1.0
    cdef double w, wz, wzz, wchi, wchichi, chi, rw, bfly, d2, v_lo, v_hi, r
    cdef double acc, pacc, wst, s, kurt, a, b, phi_p, phi_m, big
    cdef bint flat
    cdef const double* prm
    with nogil:
        for i in range(n):
            prm = &Pa[i, 0]
            acc = 0.0
            pacc = 0.0
            wst = -INFINITY
            for j in range(nq):
                _smile_point(prm, zqa[j], sqrt_t, p, sigmoid, &w, &wz, &wzz)
                r = wqa[j] - w
                acc += wta[j] * r * r
                if not isnan(wloa[j]):
                    pacc += _neg(w - wloa[j], wscale, &wst)
                    pacc += _neg(whia[j] - w, wscale, &wst)
            for j in range(m):
                _smile_point(prm, zna[j], sqrt_t, p, sigmoid, &w, &wz, &wzz)
                chi = chia[j]
                pacc += _neg(w - 1e-7, wscale, &wst)
                if w > 0.0:
                    wchi = wz * dz
                    wchichi = wzz * dz * dz
                    rw = sqrt(w)
                    bfly = ((1.0 - chi * wchi / (2.0 * w)) ** 2
                            - 0.25 * wchi * wchi * (1.0 / w + 0.25) + 0.5 * wchichi)
                    d2 = -chi / rw - 0.5 * rw
                    if vconv == 0:
                        v_lo = wchi + 2.0 * rw * _mills(d2)
                    else:
                        v_lo = wchi - 2.0 * rw * _mills(d2)
                    v_hi = 2.0 * rw * _mills(-d2) - wchi
                    pacc += _neg(bfly, 1.0, &wst)
                    pacc += _neg(v_lo, sw, &wst)
                    pacc += _neg(v_hi, sw, &wst)
                else:
                    pacc += _neg(-1.0, 1.0, &wst)
                    pacc += _neg(-1.0, sw, &wst)
                    pacc += _neg(-1.0, sw, &wst)
                if not isnan(wpa[j]):
                    pacc += _neg(w - wpa[j], wscale, &wst)
                else:
                    pacc += _neg(0.0, wscale, &wst)
            s = prm[3]
            kurt = prm[4]
            a = fabs(prm[5])
            b = fabs(prm[6])
            flat = s == 0.0 and kurt == 0.0
            big = -1e6
            if b < DEGENERATE:
                phi_p = 0.0
                if not flat:
                    pacc += _neg(big, 1.0, &wst)
                    pacc += _neg(big, 1.0, &wst)
            else:
                phi_p = L * (L * kurt - s * b) / (b * b) / sigma_star
                pacc += _neg(phi_p, 1.0, &wst)
                pacc += _neg(2.0 - phi_p, 1.0, &wst)
            if a < DEGENERATE:
                phi_m = 0.0
                if not flat:
                    pacc += _neg(big, 1.0, &wst)
                    pacc += _neg(big, 1.0, &wst)
            else:
                phi_m = -L * (L * kurt + s * a) / (a * a) / sigma_star
                pacc += _neg(-phi_m, 1.0, &wst)
                pacc += _neg(phi_m + 2.0, 1.0, &wst)
            obj[i] = acc
            pen[i] = pacc
            worst[i] = wst
    return obj, pen, worst
