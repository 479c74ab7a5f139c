"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_core.pyx``.
The two must agree to float rounding; tests/test_kernels.py checks that.
"""

import numpy as np

PRIMES = (1, 2654435761, 805459861)

# corner c -> (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1)
_CORNER_OFFSETS = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.int64)


def hash_encode(q, table, resolutions, need_backward=True):
    """Trilinear hash-grid lookup.

    Returns ``(features, indices, weights)`` where ``features`` is (N, L*F)
    and ``indices`` / ``weights`` are (N, L, 8) for the backward pass, or
    None when ``need_backward`` is false.
    """
    n = q.shape[0]
    n_levels, table_size, n_feat = table.shape
    dtype = table.dtype
    feats = np.empty((n, n_levels * n_feat), dtype=dtype)
    indices = np.empty((n, n_levels, 8), dtype=np.int32)
    weights = np.empty((n, n_levels, 8), dtype=dtype)
    mask = np.uint32(table_size - 1)
    for lvl in range(n_levels):
        pos = q.astype(dtype, copy=False) * dtype.type(resolutions[lvl])
        base = np.floor(pos)
        frac = pos - base
        base = base.astype(np.int64)
        corners = base[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (N, 8, 3)
        c32 = corners.astype(np.uint32)
        h = (c32[..., 0] * np.uint32(PRIMES[0])) ^ (c32[..., 1] * np.uint32(PRIMES[1])) ^ (
            c32[..., 2] * np.uint32(PRIMES[2])
        )
        idx = (h & mask).astype(np.int32)
        wsel = np.where(_CORNER_OFFSETS[None, :, :] == 1, frac[:, None, :], 1 - frac[:, None, :])
        w = wsel[..., 0] * wsel[..., 1] * wsel[..., 2]
        indices[:, lvl] = idx
        weights[:, lvl] = w
        entries = table[lvl][idx]  # (N, 8, F)
        feats[:, lvl * n_feat:(lvl + 1) * n_feat] = np.einsum("nc,ncf->nf", w, entries)
    if not need_backward:
        return feats, None, None
    return feats, indices, weights


def hash_encode_backward(grad_feats, indices, weights, table_shape):
    n_levels, table_size, n_feat = table_shape
    dtype = grad_feats.dtype
    grad = np.zeros(table_shape, dtype=dtype)
    for lvl in range(n_levels):
        g = grad_feats[:, lvl * n_feat:(lvl + 1) * n_feat]  # (N, F)
        idx = indices[:, lvl].ravel()
        w = weights[:, lvl]
        for f in range(n_feat):
            contrib = (w * g[:, f:f + 1]).ravel()
            grad[lvl, :, f] = np.bincount(idx, weights=contrib, minlength=table_size)
    return grad


def composite(sigma, delta, rgb):
    """Front-to-back alpha compositing of R rays with S samples each."""
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.empty_like(sigma)
    trans[:, 0] = 1.0
    np.cumprod(1.0 - alpha[:, :-1], axis=1, out=trans[:, 1:])
    weights = trans * alpha
    color = np.einsum("rs,rsc->rc", weights, rgb)
    opacity = weights.sum(axis=1)
    return color, opacity, weights, trans


def composite_backward(grad_color, grad_opacity, sigma, delta, rgb, weights, trans):
    """Gradients of compositing w.r.t. sigma and rgb.

    With tau_k = sigma_k * delta_k, dw_i/dtau_k is T_{k+1} for i == k and
    -w_i for i > k, so dL/dtau_k = g_k T_{k+1} - sum_{i>k} g_i w_i.
    """
    g = np.einsum("rc,rsc->rs", grad_color, rgb)
    if grad_opacity is not None:
        g = g + grad_opacity[:, None]
    gw = g * weights
    # suffix sum over i > k
    tail = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    trans_next = trans * np.exp(-sigma * delta)
    grad_tau = g * trans_next - tail
    grad_sigma = grad_tau * delta
    grad_rgb = weights[:, :, None] * grad_color[:, None, :]
    return grad_sigma, grad_rgb


# BT.601 limited range
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
_YS = 255.0 / 219.0
_CS = 255.0 / 224.0
V_TO_R = 2.0 * (1.0 - _KR) * _CS
U_TO_B = 2.0 * (1.0 - _KB) * _CS
U_TO_G = -2.0 * (1.0 - _KB) * _KB / _KG * _CS
V_TO_G = -2.0 * (1.0 - _KR) * _KR / _KG * _CS


def nv12_to_rgba(y_plane, uv_plane, width, height):
    y = np.frombuffer(y_plane, dtype=np.uint8).reshape(height, width).astype(np.float64)
    uv = np.frombuffer(uv_plane, dtype=np.uint8).reshape(height // 2, width // 2, 2).astype(np.float64)
    u = np.repeat(np.repeat(uv[..., 0], 2, axis=0), 2, axis=1) - 128.0
    v = np.repeat(np.repeat(uv[..., 1], 2, axis=0), 2, axis=1) - 128.0
    yy = _YS * (y - 16.0)
    out = np.empty((height, width, 4), dtype=np.uint8)
    for ch, val in enumerate((yy + V_TO_R * v, yy + U_TO_G * u + V_TO_G * v, yy + U_TO_B * u)):
        out[..., ch] = np.clip(np.floor(val + 0.5), 0, 255)
    out[..., 3] = 255
    return out


def rgba_to_nv12(rgba):
    height, width = rgba.shape[:2]
    rgb = rgba[..., :3].astype(np.float64)
    luma = _KR * rgb[..., 0] + _KG * rgb[..., 1] + _KB * rgb[..., 2]
    y = 16.0 + luma / _YS
    u = (rgb[..., 2] - luma) / (2.0 * (1.0 - _KB) * _CS)
    v = (rgb[..., 0] - luma) / (2.0 * (1.0 - _KR) * _CS)
    u = u.reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3)) + 128.0
    v = v.reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3)) + 128.0
    y_plane = np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)
    uv_plane = np.empty((height // 2, width // 2, 2), dtype=np.uint8)
    uv_plane[..., 0] = np.clip(np.floor(u + 0.5), 0, 255)
    uv_plane[..., 1] = np.clip(np.floor(v + 0.5), 0, 255)
    return y_plane.tobytes(), uv_plane.tobytes()
