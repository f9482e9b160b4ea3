"""Blur-matched variational optical flow.

The energy combines brightness and gradient constancy between two images
that share the same compound blur with a robust smoothness prior, all under
the Lorentzian penalty ``phi(q) = log(1 + q / (2 eps^2))``. Each pyramid
level linearises the data term around the current flow and solves for an
increment with lagged robust weights (nested fixed point), the inner linear
system going to preconditioned conjugate gradients.
"""

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import sparse

from . import deconv
from .deconv import DeconvConfig
from .errors import DomainError
from .imgcore import (
    as_flow,
    as_image,
    bilinear_sample,
    build_pyramid,
    check_kernel,
    convolve,
    delta_kernel,
    derivative,
    kernel_side_for_scale,
    resample,
    resample_flow,
    resize_kernel,
    _sample_grid,
)
from .linalg import CGResult, LinearSystem, cg_solve

log = logging.getLogger(__name__)

DEBLUR_MODES = ("per_level", "independent", "off")

__all__ = [
    "FlowConfig",
    "LinearSystem",
    "cg_solve",
    "blur_match",
    "total_energy",
    "energy_gradient",
    "solve_increment",
    "estimate_flow",
]


@dataclass
class FlowConfig:
    """Hyperparameters of the flow solver and the deblurring it drives."""

    gamma: float = 20.0
    alpha: float = 0.9
    epsilon: float = 1e-2
    eta: float = 0.8
    min_side: int = 16
    outer_iters: int = 5
    cg_iters: int = 60
    cg_tol: float = 1e-6
    deblur_mode: str = "per_level"
    blur_match: bool = True
    line_search: bool = True
    deconv: DeconvConfig = field(default_factory=DeconvConfig)
    net: Optional[object] = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.eta < 1.0:
            raise DomainError(f"eta must lie in (0, 1), got {self.eta}")
        if self.min_side < 8:
            raise DomainError(f"min_side must be at least 8, got {self.min_side}")
        if self.outer_iters < 1 or self.cg_iters < 1:
            raise DomainError("outer_iters and cg_iters must be >= 1")
        if self.cg_tol < 0:
            raise DomainError("cg_tol must be non-negative")
        if self.deblur_mode not in DEBLUR_MODES:
            raise DomainError(f"deblur_mode must be one of {DEBLUR_MODES}, got {self.deblur_mode!r}")

    def network(self):
        if self.net is None:
            from .featurenet import default_params

            self.net = default_params()
        return self.net

    def as_dict(self):
        out = {}
        for f in fields(self):
            if f.name == "net":
                continue
            v = getattr(self, f.name)
            if f.name == "deconv":
                for g in fields(v):
                    out[f"deconv.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out


def lorentz(q, eps):
    return np.log1p(q / (2.0 * eps * eps))


def lorentz_prime(q, eps):
    return 1.0 / (2.0 * eps * eps + q)


def blur_match(I1, I2, k1, k2):
    """Cross-blur the frames so both carry ``k1 * k2``: ``(k2 * I1, k1 * I2)``."""
    I1 = as_image(I1, "I1")
    I2 = as_image(I2, "I2")
    if I1.shape != I2.shape:
        raise DomainError(f"frame shapes differ: {I1.shape} vs {I2.shape}")
    k1 = check_kernel(k1)
    k2 = check_kernel(k2)
    return convolve(I1, k2), convolve(I2, k1)


def _channels(img):
    img = as_image(img)
    return img[..., None] if img.ndim == 2 else img


def _check_pair(B1, B2, w):
    B1 = _channels(B1)
    B2 = _channels(B2)
    if B1.shape != B2.shape:
        raise DomainError(f"image shapes differ: {B1.shape} vs {B2.shape}")
    w = as_flow(w)
    if w.shape[:2] != B1.shape[:2]:
        raise DomainError(f"flow shape {w.shape[:2]} does not match image shape {B1.shape[:2]}")
    return B1, B2, w


def _sample_stack(planes, ys, xs, gradient):
    """Bilinearly sample a list of (H, W, C) images at shared positions."""
    vals, gys, gxs = [], [], []
    for img in planes:
        cols = [bilinear_sample(img[..., c], ys, xs, gradient) for c in range(img.shape[2])]
        if gradient:
            vals.append(np.stack([c[0] for c in cols], axis=-1))
            gys.append(np.stack([c[1] for c in cols], axis=-1))
            gxs.append(np.stack([c[2] for c in cols], axis=-1))
        else:
            vals.append(np.stack(cols, axis=-1))
    return (vals, gys, gxs) if gradient else vals


def _smooth_terms(u, v):
    """Per-pixel ``|grad u|^2 + |grad v|^2`` and the edge differences.

    Squared differences are averaged over the forward and backward edge of
    each pixel, so every edge counts half towards each endpoint; missing
    neighbours at the border contribute zero.
    """
    s = np.zeros(u.shape)
    diffs = []
    for f in (u, v):
        dh = np.diff(f, axis=1)  # (H, W-1), edge between (y, x) and (y, x+1)
        dv = np.diff(f, axis=0)  # (H-1, W)
        s[:, :-1] += 0.5 * dh**2
        s[:, 1:] += 0.5 * dh**2
        s[:-1, :] += 0.5 * dv**2
        s[1:, :] += 0.5 * dv**2
        diffs.append((dh, dv))
    return s, diffs


def _edge_weights(psi):
    """Half-grid weights: the mean of the endpoint weights of each edge."""
    return 0.5 * (psi[:, :-1] + psi[:, 1:]), 0.5 * (psi[:-1, :] + psi[1:, :])


def _data_residuals(B1, B2, w, gradient=False):
    h, wd = B1.shape[:2]
    ys, xs, mask = _sample_grid(h, wd, w)
    B1x, B1y = derivative(B1, "dx"), derivative(B1, "dy")
    B2x, B2y = derivative(B2, "dx"), derivative(B2, "dy")
    out = _sample_stack([B2, B2x, B2y], ys, xs, gradient)
    if gradient:
        (b2, b2x, b2y), gys, gxs = out
    else:
        b2, b2x, b2y = out
    rz = b2 - B1
    rx = b2x - B1x
    ry = b2y - B1y
    res = dict(mask=mask.astype(np.float64), rz=rz, rx=rx, ry=ry)
    if gradient:
        res.update(gys=gys, gxs=gxs)
    return res


def energy_terms(B1, B2, w, cfg):
    """``(data, smoothness)`` parts of the energy (smoothness not yet times gamma)."""
    B1, B2, w = _check_pair(B1, B2, w)
    r = _data_residuals(B1, B2, w)
    eps = cfg.epsilon
    q1 = (r["rz"] ** 2).sum(axis=-1)
    q2 = (r["rx"] ** 2 + r["ry"] ** 2).sum(axis=-1)
    data = float((r["mask"] * (lorentz(q1, eps) + cfg.alpha * lorentz(q2, eps))).sum())
    s, _ = _smooth_terms(w[..., 0], w[..., 1])
    return data, float(lorentz(s, eps).sum())


def total_energy(B1, B2, w, cfg):
    """``E_data + gamma * E_smooth`` with out-of-frame samples masked out."""
    data, smooth = energy_terms(B1, B2, w, cfg)
    return data + cfg.gamma * smooth


def energy_gradient(B1, B2, w, cfg):
    """Analytic gradient of :func:`total_energy` with respect to ``w``.

    The validity mask is treated as locally constant.
    """
    B1, B2, w = _check_pair(B1, B2, w)
    r = _data_residuals(B1, B2, w, gradient=True)
    eps = cfg.epsilon
    m = r["mask"]
    rz, rx, ry = r["rz"], r["rx"], r["ry"]
    p1 = m * lorentz_prime((rz**2).sum(axis=-1), eps)
    p2 = m * cfg.alpha * lorentz_prime((rx**2 + ry**2).sum(axis=-1), eps)
    gys, gxs = r["gys"], r["gxs"]
    g = np.zeros(w.shape)
    for comp, slopes in ((0, gxs), (1, gys)):
        s_z, s_x, s_y = slopes
        g[..., comp] = 2.0 * (
            p1 * (rz * s_z).sum(axis=-1) + p2 * (rx * s_x + ry * s_y).sum(axis=-1)
        )
    s, diffs = _smooth_terms(w[..., 0], w[..., 1])
    wh, wv = _edge_weights(lorentz_prime(s, eps))
    for comp, (dh, dv) in enumerate(diffs):
        gs = np.zeros(s.shape)
        # each edge term w_e * d_e^2 differentiates to +-2 w_e d_e at its ends
        gs[:, :-1] -= 2.0 * wh * dh
        gs[:, 1:] += 2.0 * wh * dh
        gs[:-1, :] -= 2.0 * wv * dv
        gs[1:, :] += 2.0 * wv * dv
        g[..., comp] += cfg.gamma * gs
    return g


def weighted_laplacian(wh, wv):
    """Sparse graph Laplacian ``L`` with ``x^T L x = sum_e w_e (x_i - x_j)^2``."""
    h, w = wv.shape[0] + 1, wh.shape[1] + 1
    n = h * w
    idx = np.arange(n).reshape(h, w)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    vals = np.concatenate([wh.ravel(), wv.ravel()])
    off = sparse.coo_matrix((-vals, (rows, cols)), shape=(n, n))
    off = off + off.T
    deg = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(deg)).tocsr()


@dataclass
class IncrementInfo:
    energies: list  # before the step, then after each outer iteration
    cg_residual: float
    cg_iterations: int
    step: float


class _Linearization:
    """Warped image terms the increment system is built from."""

    def __init__(self, B1, B2, w):
        h, wd = B1.shape[:2]
        ys, xs, mask = _sample_grid(h, wd, w)
        d2 = {k: derivative(B2, k) for k in ("dx", "dy", "dxx", "dxy", "dyy")}
        b2, bx, by, bxx, bxy, byy = _sample_stack([B2, d2["dx"], d2["dy"], d2["dxx"], d2["dxy"], d2["dyy"]], ys, xs, False)
        self.mask = mask.astype(np.float64)
        self.Bx, self.By = bx, by
        self.Bz = b2 - B1
        self.Bxx, self.Bxy, self.Byy = bxx, bxy, byy
        self.Bxz = bx - derivative(B1, "dx")
        self.Byz = by - derivative(B1, "dy")

    def robust_weights(self, du, dv, eps, alpha):
        d, e = du[..., None], dv[..., None]
        q1 = ((self.Bz + self.Bx * d + self.By * e) ** 2).sum(axis=-1)
        q2 = (
            (self.Bxz + self.Bxx * d + self.Bxy * e) ** 2 + (self.Byz + self.Bxy * d + self.Byy * e) ** 2
        ).sum(axis=-1)
        return self.mask * lorentz_prime(q1, eps), self.mask * alpha * lorentz_prime(q2, eps)

    def normal_terms(self, p1, p2):
        s = lambda a: a.sum(axis=-1)
        a11 = p1 * s(self.Bx**2) + p2 * s(self.Bxx**2 + self.Bxy**2)
        a12 = p1 * s(self.Bx * self.By) + p2 * s(self.Bxx * self.Bxy + self.Bxy * self.Byy)
        a22 = p1 * s(self.By**2) + p2 * s(self.Bxy**2 + self.Byy**2)
        b1 = p1 * s(self.Bx * self.Bz) + p2 * s(self.Bxx * self.Bxz + self.Bxy * self.Byz)
        b2 = p1 * s(self.By * self.Bz) + p2 * s(self.Bxy * self.Bxz + self.Byy * self.Byz)
        return a11, a12, a22, b1, b2


def assemble_system(lin, u, v, du, dv, cfg):
    """Increment system ``A [du; dv] = b`` at the lagged weights of ``(du, dv)``."""
    p1, p2 = lin.robust_weights(du, dv, cfg.epsilon, cfg.alpha)
    a11, a12, a22, b1, b2 = lin.normal_terms(p1, p2)
    s, _ = _smooth_terms(u + du, v + dv)
    wh, wv = _edge_weights(lorentz_prime(s, cfg.epsilon))
    L = cfg.gamma * weighted_laplacian(wh, wv)
    A = sparse.bmat(
        [[sparse.diags(a11.ravel()) + L, sparse.diags(a12.ravel())], [sparse.diags(a12.ravel()), sparse.diags(a22.ravel()) + L]],
        format="csr",
    )
    rhs = -np.concatenate([b1.ravel() + L @ u.ravel(), b2.ravel() + L @ v.ravel()])
    return LinearSystem(lambda x: A @ x, rhs, A.diagonal()), A


def _as_increment(x, shape):
    n = x.size // 2
    return np.stack([x[:n].reshape(shape), x[n:].reshape(shape)], axis=-1)


def solve_increment(B1, B2, w, cfg, return_info=False):
    """Flow increment from the lagged-nonlinearity fixed point.

    The outer loop refreshes the robust weights from the current increment,
    the inner loop solves the linearised Euler-Lagrange system with
    Jacobi-preconditioned CG. With ``cfg.line_search`` the increment is
    halved until the energy does not rise (zero if no step helps).
    """
    B1, B2, w = _check_pair(B1, B2, w)
    u, v = w[..., 0], w[..., 1]
    lin = _Linearization(B1, B2, w)
    n = u.size
    x = np.zeros(2 * n)
    res = CGResult(x, 0, 0.0)
    e0 = total_energy(B1, B2, w, cfg)
    energies = [e0]
    for _ in range(cfg.outer_iters):
        du, dv = x[:n].reshape(u.shape), x[n:].reshape(u.shape)
        system, _ = assemble_system(lin, u, v, du, dv, cfg)
        res = cg_solve(system, cfg.cg_iters, cfg.cg_tol, x0=x, precondition=True)
        x = res.x
        energies.append(total_energy(B1, B2, w + _as_increment(x, u.shape), cfg))
    dw = _as_increment(x, u.shape)
    step = 1.0
    if cfg.line_search:
        e = energies[-1]
        for _ in range(10):
            if e <= e0:
                break
            step *= 0.5
            e = total_energy(B1, B2, w + step * dw, cfg)
        else:
            step = 0.0
        dw = step * dw
    info = IncrementInfo(energies, res.residual, res.iterations, step)
    return (dw, info) if return_info else dw


@dataclass
class LevelRecord:
    level: int
    shape: tuple
    kernel_side: int
    energies: list
    cg_residual: float
    wall_time: float
    k1: np.ndarray = None
    k2: np.ndarray = None


def format_diagnostics(records):
    """One text record per level."""
    lines = []
    for r in records:
        en = ",".join(f"{e:.9g}" for e in r.energies)
        lines.append(
            f"level={r.level} size={r.shape[1]}x{r.shape[0]} kernel_side={r.kernel_side} "
            f"energies={en} cg_residual={r.cg_residual:.6g} wall_time={r.wall_time:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def _clip01(img):
    return np.clip(img, 0.0, 1.0)


def _deblur_level(img, latent, net, dcfg, side):
    """Per-level deblurring of one frame; returns ``(latent, kernel)``."""
    if latent is None:
        trace = deconv.deblur_trace(img, net, dcfg, side=side)
    else:
        first = min(1, net.iterations - 1, dcfg.iterations - 1)
        trace = deconv.deblur_trace(img, net, dcfg, latent=latent if first > 0 else None, first=first, side=side)
    return trace[-1]


def estimate_flow(I1, I2, cfg=None):
    """Coarse-to-fine flow between two blurred frames.

    Returns ``(w, diagnostics)``, diagnostics being a list of
    :class:`LevelRecord`, coarsest level first.
    """
    cfg = cfg or FlowConfig()
    I1 = as_image(I1, "I1")
    I2 = as_image(I2, "I2")
    if I1.shape != I2.shape:
        raise DomainError(f"frame shapes differ: {I1.shape} vs {I2.shape}")
    p1 = build_pyramid(I1, cfg.eta, cfg.min_side)
    p2 = build_pyramid(I2, cfg.eta, cfg.min_side)
    dcfg = cfg.deconv
    mode = cfg.deblur_mode
    net = cfg.network() if mode != "off" else None

    full_k = full_lat = None
    if mode == "independent":
        full_lat, full_k = zip(*(deconv.deblur_iterate(img, net, dcfg) for img in (I1, I2)))

    w = None
    lat = [None, None]
    records = []
    for level, (a, b, scale) in enumerate(zip(p1.levels, p2.levels, p1.scales)):
        t0 = time.perf_counter()
        shape = a.shape[:2]
        w = np.zeros(shape + (2,)) if w is None else resample_flow(w, shape=shape)
        side = kernel_side_for_scale(dcfg.kernel_side, scale)
        side = deconv.fitting_side(dcfg, shape, side)
        ks = [delta_kernel(1), delta_kernel(1)]
        frames = (a, b)
        if mode == "per_level":
            lat = [None if l is None else resample(l, shape=shape) for l in lat]
            out = [_deblur_level(img, l, net, dcfg, side) for img, l in zip(frames, lat)]
            lat = [o[0] for o in out]
            ks = [o[1] for o in out]
        elif mode == "independent":
            ks = [resize_kernel(k, side) for k in full_k]
            lat = [resample(l, shape=shape) for l in full_lat]
        if mode != "off" and not cfg.blur_match:
            B1, B2 = _clip01(lat[0]), _clip01(lat[1])
        else:
            B1, B2 = blur_match(a, b, ks[0], ks[1])
        dw, info = solve_increment(B1, B2, w, cfg, return_info=True)
        w = w + dw
        rec = LevelRecord(level, shape, ks[0].shape[0], info.energies, info.cg_residual, time.perf_counter() - t0, ks[0], ks[1])
        records.append(rec)
        log.debug("level %d %s energies %s", level, shape, info.energies)
    return w, records
