"""Synthetic blurred flow benchmarks and evaluation metrics."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .imgcore import (
    as_flow,
    as_image,
    bilinear_sample,
    check_kernel,
    convolve,
    normalize_kernel,
    resize_kernel,
    warp_bilinear,
)

log = logging.getLogger(__name__)

NOISE_KINDS = ("none", "gaussian", "salt_pepper")
ROTATION_STEP = np.pi / 20
WARP_WARN = 1e-3


# kernels


def line_kernel(theta, length, side):
    """Uniform motion along ``(cos theta, sin theta)`` of ``length`` pixels."""
    from .dirfilter import _line_nodes, _unit, splat_line

    if side < 1 or side % 2 == 0:
        raise DomainError(f"kernel side must be odd and positive, got {side}")
    if not length > 0:
        raise DomainError(f"length must be positive, got {length}")
    r = (side - 1) / 2.0
    c, s = _unit(theta)
    t, wt = _line_nodes(c, s, r)
    half = min(length / 2.0, r)
    wt = np.where(np.abs(t) <= half, wt, 0.0)
    if not wt.sum() > 0:
        k = np.zeros((side, side))
        k[side // 2, side // 2] = 1.0
        return k
    return normalize_kernel(splat_line(side, t, wt, c, s))


def shake_kernel(side, rng, steps=64, inertia=0.7, extent=0.8):
    """Camera-shake kernel from a random walk with momentum.

    The trajectory is scaled to span ``extent`` of the support, splatted
    bilinearly and shifted so its centre of mass is on the centre tap.
    """
    if side < 3 or side % 2 == 0:
        raise DomainError(f"kernel side must be odd and >= 3, got {side}")
    vel = rng.standard_normal(2)
    pts = np.zeros((steps, 2))
    for i in range(1, steps):
        vel = inertia * vel + (1.0 - inertia) * rng.standard_normal(2)
        pts[i] = pts[i - 1] + vel
    pts -= pts.mean(axis=0)
    span = np.abs(pts).max()
    r = (side - 1) / 2.0
    pts *= extent * r / max(span, 1e-12)
    ys, xs = pts[:, 0] + r, pts[:, 1] + r
    k = np.zeros((side, side))
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = np.clip(y0 + dy, 0, side - 1)
        xi = np.clip(x0 + dx, 0, side - 1)
        np.add.at(k, (yi, xi), wgt)
    return center_kernel(normalize_kernel(k))


def center_kernel(k):
    """Shift a kernel by bilinear resampling so its centroid is the centre tap."""
    from .deconv import recenter_kernel

    return recenter_kernel(k)


def rotate_kernel(k, angle):
    """Rotate a kernel about its centre by bilinear resampling, renormalised."""
    k = np.asarray(k, dtype=np.float64)
    s = k.shape[0]
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) - c
    ca, sa = np.cos(angle), np.sin(angle)
    # inverse rotation maps each target tap back into the source
    xs = ca * xx + sa * yy + c
    ys = -sa * xx + ca * yy + c
    inside = (ys > -1.0) & (ys < s) & (xs > -1.0) & (xs < s)
    vals = bilinear_sample(np.pad(k, 1), ys + 1.0, xs + 1.0)
    out = np.where(inside, vals, 0.0)
    out[np.abs(out) < 1e-15] = 0.0
    return normalize_kernel(out)


@dataclass
class KernelBank:
    base: list
    variations: list = field(default_factory=list)
    provenance: list = field(default_factory=list)  # (base index, rotation index, side)

    def __len__(self):
        return len(self.variations)


def build_kernel_bank(base, rotations=10, sides=None, step=ROTATION_STEP):
    """Expand base kernels by ``n * step`` rotations and resizing to each side."""
    if rotations < 1:
        raise DomainError(f"rotations must be >= 1, got {rotations}")
    base = [check_kernel(k) for k in base]
    if not base:
        raise DomainError("kernel bank needs at least one base kernel")
    for s in sides or ():
        if s < 3 or s % 2 == 0:
            raise DomainError(f"kernel side must be odd and >= 3, got {s}")
    bank = KernelBank(base)
    for bi, k in enumerate(base):
        for n in range(rotations):
            rk = rotate_kernel(k, n * step) if n else k.copy()
            for s in sides or (k.shape[0],):
                bank.variations.append(resize_kernel(rk, s))
                bank.provenance.append((bi, n, s))
    return bank


# textures and pairs


def texture(shape, rng, kind="mosaic", scale=3.0):
    """Procedural sharp test image in [0, 1].

    ``mosaic`` thresholds low-pass noise into two-tone blobs with a faint
    grain; ``smooth`` rescales low-pass noise to the unit range.
    """
    h, w = shape
    x = ndimage.gaussian_filter(rng.standard_normal((h, w)), scale, mode="wrap")
    if kind == "mosaic":
        grain = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0, mode="wrap")
        return np.clip(np.where(x > 0, 0.8, 0.2) + 0.05 * grain / grain.std(), 0.0, 1.0)
    if kind == "smooth":
        return (x - x.min()) / (x.max() - x.min())
    raise DomainError(f"unknown texture kind {kind!r}")


def translation_pair(shape, flow, rng, kind="mosaic", scale=3.0):
    """Sharp frames related by an integer translation.

    Returns ``(sharp1, sharp2, gt)`` with ``sharp2(x + w) = sharp1(x)``.
    """
    du, dv = int(round(flow[0])), int(round(flow[1]))
    if (du, dv) != tuple(flow):
        raise DomainError(f"translation must be integral, got {flow}")
    h, w = shape
    m = max(abs(du), abs(dv)) + 1
    big = texture((h + 2 * m, w + 2 * m), rng, kind, scale)
    s1 = big[m : m + h, m : m + w]
    s2 = big[m - dv : m - dv + h, m - du : m - du + w]
    gt = np.zeros((h, w, 2))
    gt[..., 0] = du
    gt[..., 1] = dv
    return s1.copy(), s2.copy(), gt


def add_noise(img, kind="gaussian", level=0.01, seed=0):
    """Gaussian (std ``level``, clipped to [0, 1]) or salt-and-pepper noise."""
    img = as_image(img)
    if level < 0:
        raise DomainError(f"noise level must be non-negative, got {level}")
    if kind not in NOISE_KINDS:
        raise DomainError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if kind == "none" or level == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return np.clip(img + rng.normal(0.0, level, img.shape), 0.0, 1.0)
    if level > 1:
        raise DomainError(f"salt-and-pepper density must be <= 1, got {level}")
    out = img.copy()
    hit = rng.random(img.shape[:2]) < level
    salt = rng.random(img.shape[:2]) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


@dataclass
class GtCase:
    sharp1: np.ndarray
    sharp2: np.ndarray
    gt_flow: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    noise: tuple
    blurred1: np.ndarray
    blurred2: np.ndarray
    seed: int = 0
    provenance: dict = field(default_factory=dict)


def warp_error(sharp1, sharp2, gt_flow, band=None):
    """Max interior deviation of ``sharp2`` warped by the flow from ``sharp1``."""
    warped, mask = warp_bilinear(sharp2, gt_flow)
    if band is None:
        band = int(np.ceil(np.abs(gt_flow).max())) + 1
    err = np.abs(warped - sharp1)
    if err.ndim == 3:
        err = err.max(axis=2)
    h, w = mask.shape
    inner = mask[band : h - band, band : w - band]
    if inner.size == 0 or not inner.any():
        return 0.0
    return float(err[band : h - band, band : w - band][inner].max())


def synthesize_pair(sharp1, sharp2, gt_flow, k1, k2, noise=("none", 0.0), seed=0, provenance=None):
    """Blur each sharp frame with its kernel and add seeded noise."""
    sharp1 = as_image(sharp1, "sharp1")
    sharp2 = as_image(sharp2, "sharp2")
    gt_flow = as_flow(gt_flow, "gt_flow")
    if sharp1.shape != sharp2.shape or gt_flow.shape[:2] != sharp1.shape[:2]:
        raise DomainError(f"shape mismatch: {sharp1.shape}, {sharp2.shape}, flow {gt_flow.shape}")
    k1 = check_kernel(k1)
    k2 = check_kernel(k2)
    err = warp_error(sharp1, sharp2, gt_flow)
    if err > WARP_WARN:
        log.warning("sharp pair deviates from the ground-truth flow by %.3g in the interior", err)
    kind, level = noise
    b1 = add_noise(convolve(sharp1, k1), kind, level, seed)
    b2 = add_noise(convolve(sharp2, k2), kind, level, seed + 1)
    return GtCase(sharp1, sharp2, gt_flow, k1, k2, (kind, float(level)), b1, b2, seed, dict(provenance or {}))


def default_base_kernels(count=16, side=15, seed=0):
    """Procedural stand-ins for measured camera-shake kernels."""
    rng = np.random.default_rng(seed)
    return [shake_kernel(side, rng) for _ in range(count)]


def generate_suite(cases=10, shape=(64, 64), noise=("none", 0.0), seed=0, kernel_side=9, max_shift=3, kind="mosaic"):
    """Seeded list of blurred translation cases drawn from the kernel bank."""
    rng = np.random.default_rng(seed)
    bank = build_kernel_bank(default_base_kernels(16, 15, seed), rotations=10, sides=(kernel_side,))
    out = []
    for i in range(cases):
        flow = (int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1)))
        s1, s2, gt = translation_pair(shape, flow, rng, kind)
        i1, i2 = rng.choice(len(bank), size=2, replace=False)
        prov = dict(k1=bank.provenance[i1], k2=bank.provenance[i2], flow=flow)
        out.append(synthesize_pair(s1, s2, gt, bank.variations[i1], bank.variations[i2], noise, seed * 1000 + 2 * i, prov))
    return out


# metrics


def _pair(est, gt):
    est = as_flow(est, "estimate")
    gt = as_flow(gt, "ground truth")
    if est.shape != gt.shape:
        raise DomainError(f"flow shapes differ: {est.shape} vs {gt.shape}")
    return est, gt


def aee(est, gt):
    """Average endpoint error in pixels."""
    est, gt = _pair(est, gt)
    return float(np.mean(np.sqrt(((est - gt) ** 2).sum(axis=-1))))


def aae(est, gt):
    """Average angle between ``(u, v, 1)`` vectors, in degrees."""
    est, gt = _pair(est, gt)
    num = 1.0 + (est * gt).sum(axis=-1)
    den = np.sqrt(1.0 + (est**2).sum(axis=-1)) * np.sqrt(1.0 + (gt**2).sum(axis=-1))
    return float(np.degrees(np.mean(np.arccos(np.clip(num / den, -1.0, 1.0)))))


def psnr(est, ref, peak=1.0):
    mse = float(np.mean((np.asarray(est, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


@dataclass
class CaseResult:
    case_id: str
    aee: float
    aae: float
    runtime: float


def evaluate_case(case, cfg, case_id="case"):
    from .flowsolve import estimate_flow

    t0 = time.perf_counter()
    w, _ = estimate_flow(case.blurred1, case.blurred2, cfg)
    dt = time.perf_counter() - t0
    return CaseResult(case_id, aee(w, case.gt_flow), aae(w, case.gt_flow), dt), w


def format_report(results, timing=True):
    """One line per case plus aggregate means."""
    lines = ["# case_id aee aae runtime_s"]
    for r in results:
        rt = f"{r.runtime:.3f}" if timing else "0.000"
        lines.append(f"{r.case_id} {r.aee:.6f} {r.aae:.6f} {rt}")
    if results:
        m_rt = np.mean([r.runtime for r in results]) if timing else 0.0
        lines.append(
            f"mean {np.mean([r.aee for r in results]):.6f} {np.mean([r.aae for r in results]):.6f} {m_rt:.3f}"
        )
    return "\n".join(lines) + "\n"


def noise_ramp(levels, cfg, cases=10, shape=(64, 64), seed=0, kind="salt_pepper", **suite_kw):
    """Median AEE over a seeded suite for each noise level."""
    medians = []
    for lv in levels:
        suite = generate_suite(cases, shape, (kind, lv), seed, **suite_kw)
        medians.append(float(np.median([evaluate_case(c, cfg)[0].aee for c in suite])))
    return medians
