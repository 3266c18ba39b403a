"""Pure numpy GRU recurrence scans (fallback for the compiled kernel).

Gate layout along the last axis of the pre-activations and of ``U`` is
(update z, reset r, candidate c), each H wide.  The recurrence is

    z = sigmoid(xz + h_prev Uz)
    r = sigmoid(xr + h_prev Ur)
    c = tanh(xc + (r * h_prev) Uc)
    h = z * h_prev + (1 - z) * c

with h_prev = 0 at the first processed step.  ``reverse`` walks time
from the end; outputs stay at their original time positions.
"""

import numpy as np


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_forward_scan(xp, U, reverse=False):
    b, t, h3 = xp.shape
    h = h3 // 3
    dtype = xp.dtype
    hs = np.empty((b, t, h), dtype=dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cs = np.empty_like(hs)
    u_zr = U[:, :2 * h]
    u_c = U[:, 2 * h:]
    hprev = np.zeros((b, h), dtype=dtype)
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for s in steps:
        x = xp[:, s]
        a = x[:, :2 * h] + hprev @ u_zr
        z = _sig(a[:, :h])
        r = _sig(a[:, h:])
        c = np.tanh(x[:, 2 * h:] + (r * hprev) @ u_c)
        hprev = z * hprev + (1 - z) * c
        hs[:, s] = hprev
        zs[:, s] = z
        rs[:, s] = r
        cs[:, s] = c
    return hs, zs, rs, cs


def gru_backward_scan(dhs, U, hs, zs, rs, cs, reverse=False):
    """Given d(loss)/d(hs), return d(loss)/d(pre-activations) and d(loss)/dU."""
    b, t, h = hs.shape
    dtype = hs.dtype
    dxp = np.empty((b, t, 3 * h), dtype=dtype)
    dU = np.zeros((h, 3 * h), dtype=dtype)
    u_zr = U[:, :2 * h]
    u_c = U[:, 2 * h:]
    zero = np.zeros((b, h), dtype=dtype)
    dnext = np.zeros((b, h), dtype=dtype)
    steps = range(t) if reverse else range(t - 1, -1, -1)
    for s in steps:
        if reverse:
            hprev = hs[:, s + 1] if s + 1 < t else zero
        else:
            hprev = hs[:, s - 1] if s > 0 else zero
        z, r, c = zs[:, s], rs[:, s], cs[:, s]
        dh = dhs[:, s] + dnext
        dz = dh * (hprev - c)
        dc = dh * (1 - z)
        dhp = dh * z
        dac = dc * (1 - c * c)
        rh = r * hprev
        drh = dac @ u_c.T
        dU[:, 2 * h:] += rh.T @ dac
        dr = drh * hprev
        dhp += drh * r
        daz = dz * z * (1 - z)
        dar = dr * r * (1 - r)
        dazr = np.concatenate([daz, dar], axis=1)
        dhp += dazr @ u_zr.T
        dU[:, :2 * h] += hprev.T @ dazr
        dxp[:, s, :2 * h] = dazr
        dxp[:, s, 2 * h:] = dac
        dnext = dhp
    return dxp, dU
