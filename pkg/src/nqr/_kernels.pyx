# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, fabs

cnp.import_array()

DEF MAX_K = 16


def bilinear_sample(img, xs, ys):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[::1] px = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    cdef const double[::1] py = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    cdef Py_ssize_t n = px.shape[0]
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, x0, y0, x1, y1
    cdef Py_ssize_t xmax = w - 2 if w >= 2 else 0
    cdef Py_ssize_t ymax = h - 2 if h >= 2 else 0
    cdef double fx, fy, wx, wy, top, bot
    with nogil:
        for i in range(n):
            fx = px[i] - 0.5
            fy = py[i] - 0.5
            if fx < 0.0:
                fx = 0.0
            elif fx > w - 1.0:
                fx = w - 1.0
            if fy < 0.0:
                fy = 0.0
            elif fy > h - 1.0:
                fy = h - 1.0
            x0 = <Py_ssize_t>floor(fx)
            y0 = <Py_ssize_t>floor(fy)
            if x0 > xmax:
                x0 = xmax
            if y0 > ymax:
                y0 = ymax
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            wx = fx - x0
            wy = fy - y0
            top = im[y0, x0] * (1.0 - wx) + im[y0, x1] * wx
            bot = im[y1, x0] * (1.0 - wx) + im[y1, x1] * wx
            out[i] = top * (1.0 - wy) + bot * wy
    return out_arr


def mog_update(double[:, ::1] means, double[:, ::1] variances,
               double[:, ::1] weights, frame, double lr, double threshold,
               double bg_cutoff, double var_init, double var_floor):
    cdef const double[::1] x = np.ascontiguousarray(frame, dtype=np.float64).ravel()
    cdef Py_ssize_t K = means.shape[0], N = means.shape[1]
    if K > MAX_K:
        raise ValueError("at most %d modes supported" % MAX_K)
    mask_arr = np.zeros(N, dtype=np.uint8)
    cdef unsigned char[::1] mask = mask_arr
    cdef Py_ssize_t order[MAX_K]
    cdef double score[MAX_K]
    cdef Py_ssize_t p, r, j, k, tmp, match_rank
    cdef double running, s, d, rho, total, v
    cdef bint bg
    with nogil:
        for p in range(N):
            for k in range(K):
                order[k] = k
                if weights[k, p] > 0:
                    score[k] = weights[k, p] / sqrt(variances[k, p])
                else:
                    score[k] = -1.0
            # stable insertion sort, descending score
            for r in range(1, K):
                tmp = order[r]
                s = score[tmp]
                j = r - 1
                while j >= 0 and score[order[j]] < s:
                    order[j + 1] = order[j]
                    j -= 1
                order[j + 1] = tmp

            match_rank = -1
            running = 0.0
            bg = False
            for r in range(K):
                k = order[r]
                if weights[k, p] > 0 and fabs(x[p] - means[k, p]) < threshold * sqrt(variances[k, p]):
                    match_rank = r
                    bg = running < bg_cutoff
                    break
                running = running + weights[k, p]

            if match_rank < 0 or not bg:
                mask[p] = 1

            for k in range(K):
                weights[k, p] = weights[k, p] * (1.0 - lr)
            if match_rank >= 0:
                k = order[match_rank]
                weights[k, p] = weights[k, p] + lr
                rho = lr / weights[k, p]
                if rho > 1.0:
                    rho = 1.0
                d = x[p] - means[k, p]
                means[k, p] = means[k, p] + rho * d
                v = variances[k, p] + rho * (d * d - variances[k, p])
                variances[k, p] = v if v > var_floor else var_floor
            else:
                k = order[K - 1]
                means[k, p] = x[p]
                variances[k, p] = var_init
                weights[k, p] = lr

            total = weights[0, p]
            for k in range(1, K):
                total = total + weights[k, p]
            for k in range(K):
                weights[k, p] = weights[k, p] / total
    return mask_arr
