"""Kernel estimation, Tikhonov deconvolution and the iterative deblurring loop."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import DegenerateInputError, DomainError, SingularityError
from .imgcore import (
    as_image,
    bilinear_sample,
    check_kernel,
    delta_kernel,
    derivative,
    fft_convolve,
    kernel_centroid,
    luminance,
)
from .linalg import LinearSystem, cg_solve

log = logging.getLogger(__name__)

KERNEL_THRESHOLD = 0.05


@dataclass
class DeconvConfig:
    """Weights and sizes for kernel estimation and non-blind deconvolution.

    ``tau`` weights the derivative pairs (dx, dy, dxx, dyy, dxy) in that
    order.
    """

    tau: tuple = (1.0, 1.0, 0.5, 0.5, 0.25)
    beta_k: float = 1e-2
    beta_l: float = 2e-3
    kernel_side: int = 15
    iterations: int = 3
    inner_cg: int = 100
    recenter: bool = True

    def __post_init__(self):
        self.tau = tuple(float(t) for t in self.tau)
        if len(self.tau) != 5 or min(self.tau) < 0:
            raise DomainError("tau needs five non-negative weights")
        if self.beta_k < 0 or self.beta_l < 0:
            raise DomainError("regularisation weights must be non-negative")
        if self.kernel_side < 1 or self.kernel_side % 2 == 0:
            raise DomainError(f"kernel_side must be odd, got {self.kernel_side}")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.inner_cg < 1:
            raise DomainError("inner_cg must be >= 1")


def _stack(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3:
        raise DomainError(f"feature images must be (H, W) or (Q, H, W), got {f.shape}")
    return f


def derivative_pairs(I_hat, l_hat):
    """The five (blurred, sharp) derivative pairs used to fit the kernel."""
    pairs = []
    for a, b in zip(_stack(I_hat), _stack(l_hat)):
        pairs.append((derivative(a, "dx"), derivative(b, "dx")))
        pairs.append((derivative(a, "dy"), derivative(b, "dy")))
        pairs.append((derivative(a, "dxx"), derivative(b, "dxx")))
        pairs.append((derivative(a, "dyy"), derivative(b, "dyy")))
        mixed = 0.5 * (derivative(derivative(b, "dy"), "dx") + derivative(derivative(b, "dx"), "dy"))
        pairs.append((derivative(a, "dxy"), mixed))
    return pairs


class _KernelNormalOperator:
    """Normal equations of ``min_k sum_p tau_p ||A_p - k * L_p||^2 + beta ||k||^2``.

    Only output pixels whose kernel footprint lies inside the image enter
    the data term. Convolutions run through zero-padded FFTs, so nothing
    wraps around.
    """

    def __init__(self, pairs, weights, side, beta):
        h, w = pairs[0][0].shape
        self.side = side
        self.beta = beta
        self.shape = (sfft.next_fast_len(h + side - 1, real=True), sfft.next_fast_len(w + side - 1, real=True))
        r = side // 2
        # full linear convolution index n maps to centred output pixel n - r
        self.valid = (slice(side - 1, h), slice(side - 1, w))
        self.interior = (slice(r, h - r), slice(r, w - r))
        self.spectra = []
        rhs_f = 0.0
        for (a, l), t in zip(pairs, weights):
            if t == 0.0:
                continue
            lf = sfft.rfft2(l, self.shape)
            self.spectra.append((t, lf))
            rhs_f = rhs_f + t * self._adjoint_f(a[self.interior], lf)
        self.rhs = sfft.irfft2(rhs_f, self.shape)[:side, :side].ravel() if self.spectra else np.zeros(side * side)

    def _adjoint_f(self, e, lf):
        full = np.zeros(self.shape)
        full[self.valid] = e
        return sfft.rfft2(full) * np.conj(lf)

    def __call__(self, kvec):
        s = self.side
        kf = sfft.rfft2(kvec.reshape(s, s), self.shape)
        acc = 0.0
        for t, lf in self.spectra:
            y = sfft.irfft2(kf * lf, self.shape)[self.valid]
            acc = acc + t * self._adjoint_f(y, lf)
        return sfft.irfft2(acc, self.shape)[:s, :s].ravel() + self.beta * kvec


def cleanup_kernel(k, threshold=KERNEL_THRESHOLD):
    """Clamp negatives, drop taps under ``threshold * max`` and renormalise."""
    k = np.clip(k, 0.0, None)
    m = k.max()
    if not m > 0:
        log.warning("kernel estimate has no positive mass; falling back to a delta")
        return delta_kernel(k.shape[0])
    k = np.where(k < threshold * m, 0.0, k)
    return k / k.sum()


def solve_kernel(I_hat, l_hat, cfg, side=None):
    """Raw least-squares kernel (before cleanup) and the CG result."""
    side = cfg.kernel_side if side is None else side
    I_hat = _stack(I_hat)
    l_hat = _stack(l_hat)
    if I_hat.shape != l_hat.shape:
        raise DomainError(f"feature stacks differ in shape: {I_hat.shape} vs {l_hat.shape}")
    if side > min(I_hat.shape[1:]):
        raise DomainError(f"kernel side {side} exceeds feature size {I_hat.shape[1:]}")
    if not (np.any(I_hat) and np.any(l_hat)):
        raise DegenerateInputError("feature images are all zero")
    pairs = derivative_pairs(I_hat, l_hat)
    weights = list(cfg.tau) * I_hat.shape[0]
    op = _KernelNormalOperator(pairs, weights, side, cfg.beta_k)
    if not np.any(op.rhs):
        raise DegenerateInputError("feature derivatives carry no signal")
    res = cg_solve(LinearSystem(op, op.rhs), iters=cfg.inner_cg, tol=1e-10)
    return res.x.reshape(side, side), res


def estimate_kernel(I_hat, l_hat, cfg=None, side=None):
    """Fit a blur kernel relating blurred features to sharp features."""
    cfg = cfg or DeconvConfig()
    k, _ = solve_kernel(I_hat, l_hat, cfg, side)
    return cleanup_kernel(k)


def _psf_spectrum(k, shape):
    h, w = shape
    s = k.shape[0]
    r = s // 2
    kp = np.zeros((h, w))
    kp[:s, :s] = k
    kp = np.roll(kp, (-r, -r), axis=(0, 1))
    return np.fft.fft2(kp)


def gradient_spectrum(shape):
    """``|D_x|^2 + |D_y|^2`` for periodic forward differences."""
    h, w = shape
    wy = 2.0 * np.pi * np.fft.fftfreq(h)
    wx = 2.0 * np.pi * np.fft.fftfreq(w)
    return (4.0 * np.sin(wy / 2.0) ** 2)[:, None] + (4.0 * np.sin(wx / 2.0) ** 2)[None, :]


def tikhonov_solve_periodic(planes, k, beta):
    """Closed-form ``argmin_l sum_i ||P_i - k * l||^2 + beta ||grad l||^2``.

    All operators are periodic, so the normal equations diagonalise in the
    Fourier domain.
    """
    planes = _stack(planes)
    shape = planes.shape[1:]
    K = _psf_spectrum(k, shape)
    G = gradient_spectrum(shape)
    n = planes.shape[0]
    den = n * np.abs(K) ** 2 + beta * G
    if np.min(den) <= 1e-12 * max(np.max(den), 1.0):
        raise SingularityError("deconvolution is singular: kernel spectrum has zeros and beta_l is 0")
    num = np.conj(K) * np.fft.fft2(planes, axes=(1, 2)).sum(axis=0)
    return np.real(np.fft.ifft2(num / den))


def edge_taper(img, k):
    """Blend the image border into its blurred periodic version.

    The blend weight follows the normalised autocorrelation of the kernel's
    row and column projections, so the taper reaches exactly as far as the
    kernel does.
    """
    blurred = fft_convolve(img, k)
    alpha = _taper_weights(img.shape, k)
    return alpha * img + (1.0 - alpha) * blurred


BOUNDARY_ITERS = 10


def nonblind_deconv(I, k, beta_l=2e-3, boundary_iters=BOUNDARY_ITERS):
    """Tikhonov deconvolution ``argmin_l ||I - k * l||^2 + beta ||grad l||^2``.

    Each plane is replicate-padded by one kernel width and edge-tapered,
    then solved in closed form per frequency. The padding is unobserved, so
    ``boundary_iters`` further passes overwrite it with the re-blurred
    estimate and solve again; this suppresses the ringing that an
    inconsistent border otherwise spreads through the image. Multi-channel
    images are deconvolved per channel. Output is not clipped.
    """
    I = as_image(I)
    k = check_kernel(k)
    if beta_l < 0:
        raise DomainError("beta_l must be non-negative")
    if k.shape[0] > min(I.shape[:2]):
        raise DomainError(f"kernel side {k.shape[0]} exceeds image size {I.shape[:2]}")
    p = k.shape[0]

    def one(plane):
        ext = edge_taper(np.pad(plane, p, mode="edge"), k)
        inner = (slice(p, -p), slice(p, -p))
        out = tikhonov_solve_periodic(ext, k, beta_l)
        for _ in range(boundary_iters):
            ext = fft_convolve(out, k)
            ext[inner] = plane
            out = tikhonov_solve_periodic(ext, k, beta_l)
        return out[inner]

    if I.ndim == 2:
        return one(I)
    return np.stack([one(I[..., c]) for c in range(I.shape[2])], axis=-1)


def _fold_edge(g, p):
    """Adjoint of ``np.pad(x, p, mode='edge')`` for a 2-D array."""
    g = g.copy()
    g[p, :] += g[:p, :].sum(axis=0)
    g[-p - 1, :] += g[-p:, :].sum(axis=0)
    g = g[p:-p, :]
    g[:, p] += g[:, :p].sum(axis=1)
    g[:, -p - 1] += g[:, -p:].sum(axis=1)
    return g[:, p:-p]


def _taper_weights(shape, k):
    """Blend weights of :func:`edge_taper` (1 inside, 0 on the border)."""
    def ramp(proj, n):
        ac = np.correlate(proj, proj, mode="full")
        ac = ac / ac.max()
        half = len(ac) // 2
        prof = np.ones(n)
        m = min(half, n // 2)
        prof[:m] = 1.0 - ac[half + np.arange(m)]
        prof[n - m :] = prof[:m][::-1]
        return prof

    return np.outer(ramp(k.sum(axis=1), shape[0]), ramp(k.sum(axis=0), shape[1]))


def _periodic_correlate(img, k):
    """Adjoint of periodic convolution with ``k``."""
    return fft_convolve(img, k[::-1, ::-1])


def nonblind_deconv_adjoint(g, k, beta_l=2e-3, boundary_iters=BOUNDARY_ITERS):
    """Transpose of the linear map ``I -> nonblind_deconv(I, k, beta_l)``.

    Only single-plane inputs are supported.
    """
    g = np.asarray(g, dtype=np.float64)
    k = check_kernel(k)
    p = k.shape[0]
    h, w = g.shape
    shape = (h + 2 * p, w + 2 * p)
    K = _psf_spectrum(k, shape)
    den = np.abs(K) ** 2 + beta_l * gradient_spectrum(shape)
    if np.min(den) <= 1e-12 * max(np.max(den), 1.0):
        raise SingularityError("deconvolution is singular: kernel spectrum has zeros and beta_l is 0")

    def solve_t(y):
        return np.real(np.fft.ifft2(K / den * np.fft.fft2(y)))

    inner = (slice(p, -p), slice(p, -p))
    g_out = np.zeros(shape)
    g_out[inner] = g
    g_plane = np.zeros((h, w))
    for _ in range(boundary_iters):
        g_ext = solve_t(g_out)
        g_plane += g_ext[inner]
        g_ext[inner] = 0.0
        g_out = _periodic_correlate(g_ext, k)
    g_ext = solve_t(g_out)
    alpha = _taper_weights(shape, k)
    g_pad = alpha * g_ext + _periodic_correlate((1.0 - alpha) * g_ext, k)
    return g_plane + _fold_edge(g_pad, p)


def latent_from_features(I_hat, k, beta_l, offset=0.0, scale=1.0, boundary_iters=BOUNDARY_ITERS):
    """Latent image from blur features and a kernel.

    Deconvolving the mean feature plane minimises the summed feature
    residuals with the regulariser weight scaled by the feature count.
    ``offset`` and ``scale`` undo the network's input standardisation.
    """
    planes = _stack(I_hat)
    return offset + scale * nonblind_deconv(planes.mean(axis=0), k, beta_l, boundary_iters)


def latent_from_features_adjoint(g, k, beta_l, scale, count, boundary_iters=BOUNDARY_ITERS):
    gp = scale / count * nonblind_deconv_adjoint(g, k, beta_l, boundary_iters)
    return np.repeat(gp[None], count, axis=0)


def fitting_side(cfg, shape, side=None):
    """Kernel side actually fitted: the configured one, capped by the image."""
    side = cfg.kernel_side if side is None else side
    cap = min(shape[:2])
    if cap % 2 == 0:
        cap -= 1
    return max(1, min(side, cap))


def recenter_kernel(k):
    """Shift a kernel so its centre of mass sits on the centre tap.

    Blind estimates are only defined up to a translation traded against
    the latent image; pinning the centroid fixes that choice and stops it
    from drifting between iterations and pyramid levels. The shift is
    applied by bilinear resampling, then the kernel is renormalised.
    """
    k = check_kernel(k)
    cy, cx = kernel_centroid(k)
    if abs(cy) < 1e-12 and abs(cx) < 1e-12:
        return k
    s = k.shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    padded = np.pad(k, 1)
    out = bilinear_sample(padded, yy + cy + 1.0, xx + cx + 1.0)
    if not out.sum() > 0:
        return k
    return out / out.sum()


def deblur_step(I, latent, params, iteration, cfg, side=None):
    """One pass of the network-deconvolution loop on a single plane."""
    from . import featurenet

    x = I if latent is None else np.stack([I, latent])
    I_hat, l_hat = featurenet.forward(x, params, iteration)
    k = estimate_kernel(I_hat, l_hat, cfg, fitting_side(cfg, I.shape, side))
    if cfg.recenter:
        k = recenter_kernel(k)
    mu, sd = featurenet.input_stats(x if x.ndim == 3 else x[None], params.standardize)
    return latent_from_features(I_hat, k, cfg.beta_l, mu[0], sd[0]), k


def deblur_trace(I, params, cfg=None, latent=None, first=0, iterations=None, side=None):
    """Run the loop and return the per-iteration ``(latent, kernel)`` pairs.

    ``first`` is the network iteration to start from; a non-zero value
    needs a starting ``latent``. Colour input is reduced to luminance, so
    every latent in the trace is a single plane.
    """
    cfg = cfg or DeconvConfig()
    plane = luminance(as_image(I))
    n = cfg.iterations if iterations is None else iterations
    n = min(n, params.iterations)
    if first > 0 and latent is None:
        raise DomainError("starting past the first iteration needs a latent image")
    trace = []
    for it in range(first, n):
        latent, k = deblur_step(plane, latent, params, it, cfg, side)
        trace.append((latent, k))
    return trace


def deblur_iterate(I, params, cfg=None):
    """Blind deblurring: final ``(latent, kernel)`` after ``cfg.iterations``.

    For colour input the loop runs on luminance and the final kernel is
    then deconvolved from every channel.
    """
    cfg = cfg or DeconvConfig()
    I = as_image(I)
    trace = deblur_trace(I, params, cfg)
    if not trace:
        raise DomainError("no iterations were run")
    latent, k = trace[-1]
    if I.ndim == 3:
        latent = nonblind_deconv(I, k, cfg.beta_l)
    return latent, k
