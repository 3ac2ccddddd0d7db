"""Hot kernels behind conv1d/conv2d/maxpool1d and GELU.

Every kernel has a numba ``@njit`` version and a pure-numpy version. The window
kernels share one accumulation order, so both paths give bit-identical results;
GELU may differ in the last ulp because the two ``tanh`` implementations differ.
The numba path is used when numba imports cleanly and ``PSVIT_DISABLE_NUMBA`` is
unset (or ``0``). ``set_backend`` switches at runtime (tests and the benchmark use it).

Layouts are channel-last: 1D inputs are ``[B, L, C]``, 2D inputs ``[B, H, W, C]``.
All inputs arrive already padded.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_NJIT_OPTS = dict(cache=True, nogil=True, fastmath=False)


def _env_disabled():
    return os.environ.get("PSVIT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------


def _np_gather1d(xp, k, s, out_len):
    win = sliding_window_view(xp, k, axis=1)  # [B, Lp-k+1, C, k]
    win = win[:, : (out_len - 1) * s + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2))  # [B, out, k, C]


def _np_scatter1d(cols, s, padded_len):
    b, out_len, k, c = cols.shape
    dxp = np.zeros((b, padded_len, c))
    stop = (out_len - 1) * s + 1
    for j in range(k):
        dxp[:, j : j + stop : s] += cols[:, :, j]
    return dxp


def _np_gather2d(xp, k, s, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [B, H', W', C, k, k]
    win = win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # [B, ho, wo, k, k, C]


def _np_scatter2d(cols, s, hp, wp):
    b, ho, wo, k, _, c = cols.shape
    dxp = np.zeros((b, hp, wp, c))
    hs = (ho - 1) * s + 1
    ws = (wo - 1) * s + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + hs : s, j : j + ws : s] += cols[:, :, :, i, j]
    return dxp


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def _np_gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _np_gelu_bwd(g, x, t):
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _np_maxpool1d_fwd(xp, k, s, out_len):
    cols = _np_gather1d(xp, k, s, out_len)
    idx = np.argmax(cols, axis=2)  # first max wins
    out = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0]
    return out, idx.astype(np.int64)


def _np_maxpool1d_bwd(g, idx, k, s, padded_len):
    b, out_len, c = g.shape
    dxp = np.zeros((b, padded_len, c))
    stop = (out_len - 1) * s + 1
    for j in range(k):
        dxp[:, j : j + stop : s] += np.where(idx == j, g, 0.0)
    return dxp


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(**_NJIT_OPTS)
    def _nb_gather1d(xp, k, s, out_len):
        b, _, c = xp.shape
        cols = np.empty((b, out_len, k, c))
        for bi in range(b):
            for o in range(out_len):
                for j in range(k):
                    for ci in range(c):
                        cols[bi, o, j, ci] = xp[bi, o * s + j, ci]
        return cols

    @numba.njit(**_NJIT_OPTS)
    def _nb_scatter1d(cols, s, padded_len):
        b, out_len, k, c = cols.shape
        dxp = np.zeros((b, padded_len, c))
        # tap-major loop keeps the numpy path's summation order
        for j in range(k):
            for bi in range(b):
                for o in range(out_len):
                    for ci in range(c):
                        dxp[bi, o * s + j, ci] += cols[bi, o, j, ci]
        return dxp

    @numba.njit(**_NJIT_OPTS)
    def _nb_gather2d(xp, k, s, ho, wo):
        b = xp.shape[0]
        c = xp.shape[3]
        cols = np.empty((b, ho, wo, k, k, c))
        for bi in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    for i in range(k):
                        for j in range(k):
                            for ci in range(c):
                                cols[bi, oh, ow, i, j, ci] = xp[bi, oh * s + i, ow * s + j, ci]
        return cols

    @numba.njit(**_NJIT_OPTS)
    def _nb_scatter2d(cols, s, hp, wp):
        b, ho, wo, k, _, c = cols.shape
        dxp = np.zeros((b, hp, wp, c))
        for i in range(k):
            for j in range(k):
                for bi in range(b):
                    for oh in range(ho):
                        for ow in range(wo):
                            for ci in range(c):
                                dxp[bi, oh * s + i, ow * s + j, ci] += cols[bi, oh, ow, i, j, ci]
        return dxp

    @numba.njit(**_NJIT_OPTS)
    def _nb_gelu_fwd(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        t = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            th = np.tanh(_GELU_C * (v + _GELU_A * (v * v * v)))
            t[i] = th
            out[i] = 0.5 * v * (1.0 + th)
        return out.reshape(x.shape), t.reshape(x.shape)

    @numba.njit(**_NJIT_OPTS)
    def _nb_gelu_bwd(g, x, t):
        gf, xf, tf = g.ravel(), x.ravel(), t.ravel()
        out = np.empty_like(gf)
        for i in range(gf.size):
            v = xf[i]
            th = tf[i]
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * (v * v))
            out[i] = gf[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)
        return out.reshape(g.shape)

    @numba.njit(**_NJIT_OPTS)
    def _nb_maxpool1d_fwd(xp, k, s, out_len):
        b, _, c = xp.shape
        out = np.empty((b, out_len, c))
        idx = np.zeros((b, out_len, c), dtype=np.int64)
        for bi in range(b):
            for o in range(out_len):
                for ci in range(c):
                    best = xp[bi, o * s, ci]
                    arg = 0
                    for j in range(1, k):
                        v = xp[bi, o * s + j, ci]
                        if v > best:
                            best = v
                            arg = j
                    out[bi, o, ci] = best
                    idx[bi, o, ci] = arg
        return out, idx

    @numba.njit(**_NJIT_OPTS)
    def _nb_maxpool1d_bwd(g, idx, k, s, padded_len):
        b, out_len, c = g.shape
        dxp = np.zeros((b, padded_len, c))
        for j in range(k):
            for bi in range(b):
                for o in range(out_len):
                    for ci in range(c):
                        if idx[bi, o, ci] == j:
                            dxp[bi, o * s + j, ci] += g[bi, o, ci]
                        else:
                            dxp[bi, o * s + j, ci] += 0.0
        return dxp


_BACKENDS = {
    "numpy": dict(
        gather1d=_np_gather1d,
        scatter1d=_np_scatter1d,
        gather2d=_np_gather2d,
        scatter2d=_np_scatter2d,
        maxpool1d_fwd=_np_maxpool1d_fwd,
        maxpool1d_bwd=_np_maxpool1d_bwd,
        gelu_fwd=_np_gelu_fwd,
        gelu_bwd=_np_gelu_bwd,
    )
}
if numba is not None:
    _BACKENDS["numba"] = dict(
        gather1d=_nb_gather1d,
        scatter1d=_nb_scatter1d,
        gather2d=_nb_gather2d,
        scatter2d=_nb_scatter2d,
        maxpool1d_fwd=_nb_maxpool1d_fwd,
        maxpool1d_bwd=_nb_maxpool1d_bwd,
        gelu_fwd=_nb_gelu_fwd,
        gelu_bwd=_nb_gelu_bwd,
    )

_active = {}


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}")
    _active.clear()
    _active.update(_BACKENDS[name])
    _active["name"] = name


def get_backend():
    return _active["name"]


set_backend("numpy" if (numba is None or _env_disabled()) else "numba")


def gather1d(xp, k, s, out_len):
    return _active["gather1d"](np.ascontiguousarray(xp), k, s, out_len)


def scatter1d(cols, s, padded_len):
    return _active["scatter1d"](np.ascontiguousarray(cols), s, padded_len)


def gather2d(xp, k, s, ho, wo):
    return _active["gather2d"](np.ascontiguousarray(xp), k, s, ho, wo)


def scatter2d(cols, s, hp, wp):
    return _active["scatter2d"](np.ascontiguousarray(cols), s, hp, wp)


def maxpool1d_fwd(xp, k, s, out_len):
    return _active["maxpool1d_fwd"](np.ascontiguousarray(xp), k, s, out_len)


def maxpool1d_bwd(g, idx, k, s, padded_len):
    return _active["maxpool1d_bwd"](np.ascontiguousarray(g), np.ascontiguousarray(idx), k, s, padded_len)


def gelu_fwd(x):
    return _active["gelu_fwd"](np.ascontiguousarray(x))


def gelu_bwd(g, x, t):
    return _active["gelu_bwd"](np.ascontiguousarray(g), x, t)
