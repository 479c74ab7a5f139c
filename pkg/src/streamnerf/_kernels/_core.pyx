# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_fallback.py``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, floor
from libc.stdint cimport uint32_t, int32_t

cnp.import_array()

cdef uint32_t P1 = 1u
cdef uint32_t P2 = 2654435761u
cdef uint32_t P3 = 805459861u


cdef inline long _floor(double x) noexcept nogil:
    cdef long b = <long>x
    if x < b:
        b -= 1
    return b


cdef void _encode_rows(const floating[:, ::1] q, const floating[:, :, ::1] table,
                       const long[::1] res, floating[:, ::1] feats,
                       int32_t[:, :, ::1] indices, floating[:, :, ::1] weights,
                       bint store) noexcept nogil:
    cdef Py_ssize_t n = q.shape[0], n_levels = table.shape[0], n_feat = table.shape[2]
    cdef Py_ssize_t table_size = table.shape[1]
    cdef uint32_t mask = <uint32_t>(table_size - 1)
    cdef Py_ssize_t i, lvl, c, f, k
    cdef floating p, frac, w, r, a0, a1
    cdef long b
    cdef uint32_t h
    cdef uint32_t hx[2]
    cdef uint32_t hy[2]
    cdef uint32_t hz[2]
    cdef floating wx[2]
    cdef floating wy[2]
    cdef floating wz[2]
    cdef floating acc[16]
    cdef const floating* qp = &q[0, 0]
    cdef const floating* tp = &table[0, 0, 0]
    cdef floating* fp = &feats[0, 0]
    cdef int32_t* ip = &indices[0, 0, 0]
    cdef floating* wp = &weights[0, 0, 0]
    cdef const floating* level
    cdef const floating* entry
    for i in range(n):
        for lvl in range(n_levels):
            level = tp + lvl * table_size * n_feat
            r = <floating>res[lvl]
            p = qp[3 * i] * r
            b = _floor(p)
            frac = p - b
            hx[0] = <uint32_t>b * P1
            hx[1] = <uint32_t>(b + 1) * P1
            wx[0] = 1 - frac
            wx[1] = frac
            p = qp[3 * i + 1] * r
            b = _floor(p)
            frac = p - b
            hy[0] = <uint32_t>b * P2
            hy[1] = <uint32_t>(b + 1) * P2
            wy[0] = 1 - frac
            wy[1] = frac
            p = qp[3 * i + 2] * r
            b = _floor(p)
            frac = p - b
            hz[0] = <uint32_t>b * P3
            hz[1] = <uint32_t>(b + 1) * P3
            wz[0] = 1 - frac
            wz[1] = frac
            k = (i * n_levels + lvl) * 8
            if n_feat == 2:
                a0 = 0
                a1 = 0
                for c in range(8):
                    h = (hx[c & 1] ^ hy[(c >> 1) & 1] ^ hz[(c >> 2) & 1]) & mask
                    w = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1]
                    if store:
                        ip[k + c] = <int32_t>h
                        wp[k + c] = w
                    entry = level + 2 * h
                    a0 += w * entry[0]
                    a1 += w * entry[1]
                fp[(i * n_levels + lvl) * 2] = a0
                fp[(i * n_levels + lvl) * 2 + 1] = a1
                continue
            for f in range(n_feat):
                acc[f] = 0
            for c in range(8):
                h = (hx[c & 1] ^ hy[(c >> 1) & 1] ^ hz[(c >> 2) & 1]) & mask
                w = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1]
                if store:
                    ip[k + c] = <int32_t>h
                    wp[k + c] = w
                entry = level + h * n_feat
                for f in range(n_feat):
                    acc[f] += w * entry[f]
            for f in range(n_feat):
                fp[(i * n_levels + lvl) * n_feat + f] = acc[f]


def hash_encode(const floating[:, ::1] q, const floating[:, :, ::1] table, resolutions,
                bint need_backward=True):
    cdef long[::1] res = np.ascontiguousarray(resolutions, dtype=np.int_)
    if table.shape[2] > 16:
        raise ValueError("at most 16 features per table entry")
    if table.shape[1] & (table.shape[1] - 1):
        raise ValueError("table size must be a power of two")
    n = q.shape[0]
    n_levels, n_feat = table.shape[0], table.shape[2]
    dtype = np.float32 if floating is float else np.float64
    feats = np.empty((n, n_levels * n_feat), dtype=dtype)
    if n == 0:
        return feats, np.empty((0, n_levels, 8), np.int32), np.empty((0, n_levels, 8), dtype)
    shape = (n, n_levels, 8) if need_backward else (1, n_levels, 8)
    indices = np.empty(shape, dtype=np.int32)
    weights = np.empty(shape, dtype=dtype)
    cdef floating[:, ::1] fv = feats
    cdef int32_t[:, :, ::1] iv = indices
    cdef floating[:, :, ::1] wv = weights
    with nogil:
        _encode_rows(q, table, res, fv, iv, wv, need_backward)
    if not need_backward:
        return feats, None, None
    return feats, indices, weights


def hash_encode_backward(const floating[:, ::1] grad_feats, const int32_t[:, :, ::1] indices,
                         const floating[:, :, ::1] weights, table_shape):
    dtype = np.float32 if floating is float else np.float64
    grad = np.zeros(table_shape, dtype=dtype)
    cdef floating[:, :, ::1] gv = grad
    cdef Py_ssize_t n = grad_feats.shape[0], n_levels = indices.shape[1]
    cdef Py_ssize_t n_feat = gv.shape[2]
    cdef Py_ssize_t i, lvl, c, f
    cdef int32_t h
    cdef floating w
    with nogil:
        for i in range(n):
            for lvl in range(n_levels):
                for c in range(8):
                    h = indices[i, lvl, c]
                    w = weights[i, lvl, c]
                    for f in range(n_feat):
                        gv[lvl, h, f] += w * grad_feats[i, lvl * n_feat + f]
    return grad


def composite(const floating[:, ::1] sigma, const floating[:, ::1] delta,
              const floating[:, :, ::1] rgb):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    dtype = np.float32 if floating is float else np.float64
    color = np.zeros((r, 3), dtype=dtype)
    opacity = np.zeros(r, dtype=dtype)
    weights = np.empty((r, s), dtype=dtype)
    trans = np.empty((r, s), dtype=dtype)
    cdef floating[:, ::1] cv = color, wv = weights, tv = trans
    cdef floating[::1] ov = opacity
    cdef Py_ssize_t i, k
    cdef floating t, a, w, acc
    with nogil:
        for i in range(r):
            t = 1
            acc = 0
            for k in range(s):
                a = 1 - exp(-sigma[i, k] * delta[i, k])
                w = t * a
                tv[i, k] = t
                wv[i, k] = w
                acc += w
                cv[i, 0] += w * rgb[i, k, 0]
                cv[i, 1] += w * rgb[i, k, 1]
                cv[i, 2] += w * rgb[i, k, 2]
                t = t * (1 - a)
            ov[i] = acc
    return color, opacity, weights, trans


def composite_backward(const floating[:, ::1] grad_color, grad_opacity,
                       const floating[:, ::1] sigma, const floating[:, ::1] delta,
                       const floating[:, :, ::1] rgb, const floating[:, ::1] weights,
                       const floating[:, ::1] trans):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1]
    dtype = np.float32 if floating is float else np.float64
    grad_sigma = np.empty((r, s), dtype=dtype)
    grad_rgb = np.empty((r, s, 3), dtype=dtype)
    cdef floating[:, ::1] gs = grad_sigma
    cdef floating[:, :, ::1] gr = grad_rgb
    cdef bint has_go = grad_opacity is not None
    cdef floating[::1] go = (np.ascontiguousarray(grad_opacity, dtype=dtype) if has_go
                             else np.zeros(1, dtype=dtype))
    cdef Py_ssize_t i, k
    cdef floating g, tail, gc0, gc1, gc2, extra
    with nogil:
        for i in range(r):
            gc0 = grad_color[i, 0]
            gc1 = grad_color[i, 1]
            gc2 = grad_color[i, 2]
            extra = go[i] if has_go else 0
            tail = 0
            for k in range(s - 1, -1, -1):
                g = gc0 * rgb[i, k, 0] + gc1 * rgb[i, k, 1] + gc2 * rgb[i, k, 2] + extra
                gs[i, k] = (g * trans[i, k] * exp(-sigma[i, k] * delta[i, k]) - tail) * delta[i, k]
                tail += g * weights[i, k]
                gr[i, k, 0] = weights[i, k] * gc0
                gr[i, k, 1] = weights[i, k] * gc1
                gr[i, k, 2] = weights[i, k] * gc2
    return grad_sigma, grad_rgb


# BT.601 limited range
cdef double KR = 0.299, KB = 0.114
cdef double KG = 1.0 - 0.299 - 0.114
cdef double YS = 255.0 / 219.0
cdef double CS = 255.0 / 224.0
cdef double V_TO_R = 2.0 * (1.0 - 0.299) * (255.0 / 224.0)
cdef double U_TO_B = 2.0 * (1.0 - 0.114) * (255.0 / 224.0)
cdef double U_TO_G = -2.0 * (1.0 - 0.114) * 0.114 / (1.0 - 0.299 - 0.114) * (255.0 / 224.0)
cdef double V_TO_G = -2.0 * (1.0 - 0.299) * 0.299 / (1.0 - 0.299 - 0.114) * (255.0 / 224.0)


cdef inline unsigned char _clamp_round(double x) noexcept nogil:
    x = floor(x + 0.5)
    if x < 0:
        return 0
    if x > 255:
        return 255
    return <unsigned char>x


def nv12_to_rgba(y_plane, uv_plane, int width, int height):
    cdef const unsigned char[::1] y = np.frombuffer(y_plane, dtype=np.uint8)
    cdef const unsigned char[::1] uv = np.frombuffer(uv_plane, dtype=np.uint8)
    out = np.empty((height, width, 4), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] o = out
    cdef int r, c, ci
    cdef double yy, u, v
    with nogil:
        for r in range(height):
            for c in range(width):
                ci = (r >> 1) * width + (c & ~1)
                u = uv[ci] - 128.0
                v = uv[ci + 1] - 128.0
                yy = YS * (y[r * width + c] - 16.0)
                o[r, c, 0] = _clamp_round(yy + V_TO_R * v)
                o[r, c, 1] = _clamp_round(yy + U_TO_G * u + V_TO_G * v)
                o[r, c, 2] = _clamp_round(yy + U_TO_B * u)
                o[r, c, 3] = 255
    return out


def rgba_to_nv12(const unsigned char[:, :, ::1] rgba):
    cdef int height = rgba.shape[0], width = rgba.shape[1]
    y_out = np.empty(height * width, dtype=np.uint8)
    uv_out = np.empty(height * width // 2, dtype=np.uint8)
    cdef unsigned char[::1] yv = y_out, uvv = uv_out
    cdef int r, c, dr, dc
    cdef double luma, su, sv, R, G, B
    with nogil:
        for r in range(0, height, 2):
            for c in range(0, width, 2):
                su = 0
                sv = 0
                for dr in range(2):
                    for dc in range(2):
                        R = rgba[r + dr, c + dc, 0]
                        G = rgba[r + dr, c + dc, 1]
                        B = rgba[r + dr, c + dc, 2]
                        luma = KR * R + KG * G + KB * B
                        yv[(r + dr) * width + c + dc] = _clamp_round(16.0 + luma / YS)
                        su += (B - luma) / (2.0 * (1.0 - KB) * CS)
                        sv += (R - luma) / (2.0 * (1.0 - KR) * CS)
                uvv[(r >> 1) * width + c] = _clamp_round(su / 4.0 + 128.0)
                uvv[(r >> 1) * width + c + 1] = _clamp_round(sv / 4.0 + 128.0)
    return y_out.tobytes(), uv_out.tobytes()
