"""Independent reference computations used by the tests."""

import numpy as np


def bound_by_grid(u, z, d, n_theta=4096):
    """Minimize ||z [u;1] - z' [v;1]|| over v on the circle (theta grid) and z' >= 0.

    For each theta the inner problem in z' is a 1D least-squares solve.
    Vectorized over leading dimensions of ``u`` (..., 2), ``z`` and ``d``.
    """
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)[..., None]
    d = np.asarray(d, dtype=np.float64)[..., None]
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    vx = u[..., 0:1] + d * np.cos(theta)
    vy = u[..., 1:2] + d * np.sin(theta)
    ux, uy = u[..., 0:1], u[..., 1:2]
    # target point p = z * [u;1]; generator direction g = [v;1]
    px, py, pz = z * ux, z * uy, z
    gg = vx * vx + vy * vy + 1.0
    zp = np.maximum((px * vx + py * vy + pz) / gg, 0.0)
    r2 = (px - zp * vx) ** 2 + (py - zp * vy) ** 2 + (pz - zp) ** 2
    return np.sqrt(r2.min(axis=-1))


def bruteforce_dt(mask):
    """All-pairs squared distance from every pixel to the nearest ``True`` pixel (int64)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    out = np.full((h, w), -1, dtype=np.int64)
    if len(rows) == 0:
        return out
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr[..., None] - rows) ** 2 + (cc[..., None] - cols) ** 2
    return d2.min(axis=-1).astype(np.int64)


def central_differences(fn, params, h=1e-6):
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``params`` (torch, in place)."""
    import torch

    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                fp = float(fn())
                flat[i] = old - h
                fm = float(fn())
                flat[i] = old
                gflat[i] = (fp - fm) / (2 * h)
            grads[name] = g
    return grads


def lstm_step_reference(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """Scalar-loop LSTM cell (gate order i, f, g, o)."""
    import math

    n = len(h)
    pre = []
    for r in range(4 * n):
        s = b_ih[r] + b_hh[r]
        for k in range(len(x)):
            s += w_ih[r][k] * x[k]
        for k in range(n):
            s += w_hh[r][k] * h[k]
        pre.append(s)
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    h_new, c_new = [], []
    for j in range(n):
        i_g = sig(pre[j])
        f_g = sig(pre[n + j])
        g_g = math.tanh(pre[2 * n + j])
        o_g = sig(pre[3 * n + j])
        cj = f_g * c[j] + i_g * g_g
        c_new.append(cj)
        h_new.append(o_g * math.tanh(cj))
    return h_new, c_new
