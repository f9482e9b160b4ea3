"""Image, kernel and flow primitives.

Images are float64 arrays of shape ``(H, W)`` or ``(H, W, C)`` with values
nominally in [0, 1]. Blur kernels are odd-sided, non-negative square arrays
summing to one. Flow fields are ``(H, W, 2)`` arrays holding ``(u, v)``
displacements in pixels, ``u`` along columns and ``v`` along rows.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError

FFT_CROSSOVER = 15
KERNEL_SUM_TOL = 1e-6


def as_image(img, name="image"):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim not in (2, 3) or a.shape[0] < 1 or a.shape[1] < 1:
        raise DomainError(f"{name} must be a non-empty (H, W) or (H, W, C) array, got shape {a.shape}")
    if a.ndim == 3 and a.shape[2] < 1:
        raise DomainError(f"{name} has no channels")
    return a


def as_flow(flow, name="flow"):
    w = np.asarray(flow, dtype=np.float64)
    if w.ndim != 3 or w.shape[2] != 2:
        raise DomainError(f"{name} must have shape (H, W, 2), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise DomainError(f"{name} contains non-finite values")
    return w


def check_kernel(k, tol=KERNEL_SUM_TOL):
    """Validate a blur kernel and return it as a float64 array."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DomainError(f"kernel must be square, got shape {k.shape}")
    if k.shape[0] % 2 == 0:
        raise DomainError(f"kernel side must be odd, got {k.shape[0]}")
    if not np.all(np.isfinite(k)) or np.any(k < 0):
        raise DomainError("kernel weights must be finite and non-negative")
    if abs(k.sum() - 1.0) > tol:
        raise DomainError(f"kernel must sum to 1, sums to {k.sum():.9g}")
    return k


def delta_kernel(side=1):
    if side < 1 or side % 2 == 0:
        raise DomainError(f"kernel side must be odd and positive, got {side}")
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return k


def normalize_kernel(k):
    """Clamp negatives and rescale to unit sum."""
    k = np.clip(np.asarray(k, dtype=np.float64), 0.0, None)
    s = k.sum()
    if not s > 0:
        raise DomainError("kernel has no positive mass")
    return k / s


def _per_channel(fn, img, *args, **kwargs):
    if img.ndim == 2:
        return fn(img, *args, **kwargs)
    return np.stack([fn(img[..., c], *args, **kwargs) for c in range(img.shape[2])], axis=-1)


def _fft_convolve_periodic(plane, k):
    h, w = plane.shape
    s = k.shape[0]
    r = s // 2
    kp = np.zeros((h, w))
    kp[:s, :s] = k
    kp = np.roll(kp, (-r, -r), axis=(0, 1))
    return np.fft.irfft2(np.fft.rfft2(plane) * np.fft.rfft2(kp), s=(h, w))


def convolve(img, k, boundary="replicate", crossover=FFT_CROSSOVER):
    """Convolve ``img`` with a centred odd kernel.

    ``boundary`` is ``"replicate"`` or ``"periodic"``. Periodic convolutions
    with kernels wider than ``crossover`` go through the FFT.
    """
    img = as_image(img)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise DomainError(f"kernel must be square with odd side, got shape {k.shape}")
    if k.shape[0] > min(img.shape[0], img.shape[1]):
        raise DomainError(f"kernel side {k.shape[0]} exceeds image size {img.shape[:2]}")
    if boundary == "replicate":
        return _per_channel(ndimage.convolve, img, k, mode="nearest")
    if boundary == "periodic":
        if k.shape[0] > crossover:
            return _per_channel(_fft_convolve_periodic, img, k)
        return _per_channel(ndimage.convolve, img, k, mode="wrap")
    raise DomainError(f"unknown boundary {boundary!r}")


def fft_convolve(img, k):
    """Periodic convolution through the FFT regardless of kernel size."""
    img = as_image(img)
    k = np.asarray(k, dtype=np.float64)
    if k.shape[0] > min(img.shape[0], img.shape[1]):
        raise DomainError(f"kernel side {k.shape[0]} exceeds image size {img.shape[:2]}")
    return _per_channel(_fft_convolve_periodic, img, k)


def _dx(a):
    p = np.pad(a, ((0, 0), (1, 1)), mode="edge")
    return 0.5 * (p[:, 2:] - p[:, :-2])


def _dy(a):
    p = np.pad(a, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (p[2:, :] - p[:-2, :])


def _dxx(a):
    p = np.pad(a, ((0, 0), (1, 1)), mode="edge")
    return p[:, 2:] - 2.0 * a + p[:, :-2]


def _dyy(a):
    p = np.pad(a, ((1, 1), (0, 0)), mode="edge")
    return p[2:, :] - 2.0 * a + p[:-2, :]


_DERIVATIVES = {
    "dx": _dx,
    "dy": _dy,
    "dxx": _dxx,
    "dyy": _dyy,
    "dxy": lambda a: _dx(_dy(a)),
}


def derivative(img, which):
    """Central-difference derivative with replicate boundary."""
    img = as_image(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise DomainError(f"derivative needs at least a 3x3 image, got {img.shape[:2]}")
    try:
        fn = _DERIVATIVES[which]
    except KeyError:
        raise DomainError(f"unknown derivative {which!r}") from None
    return _per_channel(fn, img)


def bilinear_sample(plane, ys, xs, gradient=False):
    """Sample a 2-D array at fractional positions, clamping to the border.

    With ``gradient=True`` also returns the partial derivatives of the
    interpolant with respect to ``ys`` and ``xs``.
    """
    h, w = plane.shape
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0
    a = plane[y0, x0]
    b = plane[y0, x1]
    c = plane[y1, x0]
    d = plane[y1, x1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    val = top + fy * (bot - top)
    if not gradient:
        return val
    gx = (1.0 - fy) * (b - a) + fy * (d - c)
    gy = bot - top
    # clamped coordinates do not move the sample
    gx = np.where((xs < 0.0) | (xs > w - 1.0), 0.0, gx)
    gy = np.where((ys < 0.0) | (ys > h - 1.0), 0.0, gy)
    return val, gy, gx


def _sample_grid(h, w, flow):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = yy + flow[..., 1]
    xs = xx + flow[..., 0]
    mask = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    return ys, xs, mask


def warp_bilinear(img, flow):
    """Backward-warp ``img`` by ``flow``: ``out(x) = img(x + w(x))``.

    Returns the warped image and a boolean mask that is False where the
    sample position left the image.
    """
    img = as_image(img)
    flow = as_flow(flow)
    if flow.shape[:2] != img.shape[:2]:
        raise DomainError(f"flow shape {flow.shape[:2]} does not match image shape {img.shape[:2]}")
    ys, xs, mask = _sample_grid(img.shape[0], img.shape[1], flow)
    out = _per_channel(bilinear_sample, img, ys, xs)
    return out, mask


def _target_shape(shape, scale, out_shape):
    if out_shape is not None:
        th, tw = int(out_shape[0]), int(out_shape[1])
    else:
        if not scale > 0:
            raise DomainError(f"scale must be positive, got {scale}")
        th, tw = int(round(shape[0] * scale)), int(round(shape[1] * scale))
    if th < 1 or tw < 1:
        raise DomainError(f"resampling {shape[:2]} gives degenerate size {(th, tw)}")
    return th, tw


def _resample_plane(plane, th, tw):
    h, w = plane.shape
    if (th, tw) == (h, w):
        return plane.copy()
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(plane, yy, xx)


def resample(img, scale=None, shape=None):
    """Bilinear resampling by ``scale`` or to an explicit ``(H, W)``."""
    img = as_image(img)
    th, tw = _target_shape(img.shape, scale, shape)
    return _per_channel(_resample_plane, img, th, tw)


def resample_flow(flow, scale=None, shape=None):
    """Resample a flow field and rescale its vectors to the target grid."""
    flow = as_flow(flow)
    th, tw = _target_shape(flow.shape, scale, shape)
    out = _per_channel(_resample_plane, flow, th, tw)
    out[..., 0] *= tw / flow.shape[1]
    out[..., 1] *= th / flow.shape[0]
    return out


def level_shapes(shape, eta, min_side):
    """Level sizes from finest to coarsest, ``round(size * eta**l)``."""
    if not 0.0 < eta < 1.0:
        raise DomainError(f"eta must lie in (0, 1), got {eta}")
    h, w = shape[:2]
    shapes = [(h, w)]
    l = 1
    while True:
        th, tw = int(round(h * eta**l)), int(round(w * eta**l))
        if min(th, tw) < min_side or (th, tw) == shapes[-1]:
            break
        shapes.append((th, tw))
        l += 1
    return shapes


@dataclass
class Pyramid:
    """Image pyramid stored coarsest level first."""

    levels: list
    eta: float
    scales: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [lv.shape[:2] for lv in self.levels]


def build_pyramid(img, eta=0.8, min_side=16):
    """Build a coarse-to-fine pyramid; the last level is ``img`` itself."""
    img = as_image(img)
    if not 0.0 < eta < 1.0:
        raise DomainError(f"eta must lie in (0, 1), got {eta}")
    if min_side < 8:
        raise DomainError(f"min_side must be at least 8, got {min_side}")
    shapes = level_shapes(img.shape, eta, min_side)
    levels = [img]
    for shp in shapes[1:]:
        levels.append(resample(levels[-1], shape=shp))
    levels.reverse()
    scales = [shp[1] / img.shape[1] for shp in reversed(shapes)]
    return Pyramid(levels=levels, eta=eta, scales=scales)


def kernel_side_for_scale(side, scale):
    """Kernel side at a pyramid scale: rounded, forced odd, at least 3."""
    s = int(round(side * scale))
    if s % 2 == 0:
        s += 1
    return max(3, s)


def resize_kernel(k, side):
    """Resample a kernel onto a ``side x side`` grid about its centre."""
    k = np.asarray(k, dtype=np.float64)
    if side < 1 or side % 2 == 0:
        raise DomainError(f"kernel side must be odd and positive, got {side}")
    n = k.shape[0]
    if side == n:
        return normalize_kernel(k)
    # map target taps onto source taps about the shared centre
    ratio = n / side
    c_src = (n - 1) / 2.0
    c_dst = (side - 1) / 2.0
    t = (np.arange(side) - c_dst) * ratio + c_src
    if side < n:
        # area-weighted downscaling keeps thin line kernels from vanishing
        edges = (np.arange(side + 1) - c_dst - 0.5) * ratio + c_src + 0.5
        wy = _overlap_weights(edges, n)
        out = wy @ k @ wy.T
        return normalize_kernel(out)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    inside = (yy >= -0.5) & (yy <= n - 0.5) & (xx >= -0.5) & (xx <= n - 0.5)
    vals = bilinear_sample(np.pad(k, 1), yy + 1.0, xx + 1.0)
    return normalize_kernel(np.where(inside, vals, 0.0))


def _overlap_weights(edges, n):
    """Fraction of each source cell [j, j+1) falling in each target bin."""
    m = len(edges) - 1
    wts = np.zeros((m, n))
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        for j in range(max(0, int(np.floor(lo))), min(n, int(np.ceil(hi)))):
            wts[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return wts


def kernel_centroid(k):
    k = np.asarray(k, dtype=np.float64)
    s = k.sum()
    yy, xx = np.mgrid[0 : k.shape[0], 0 : k.shape[1]]
    c = (k.shape[0] - 1) / 2.0
    return (yy * k).sum() / s - c, (xx * k).sum() / s - c


def luminance(img):
    img = as_image(img)
    if img.ndim == 2:
        return img
    if img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img.mean(axis=2)
