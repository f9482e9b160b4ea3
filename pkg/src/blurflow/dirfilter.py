"""Directional Gaussian filters and the directional-filtering layer."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .imgcore import as_image, convolve

GAUSS_ORDER = 3


def _line_nodes(c, s, r, order=GAUSS_ORDER):
    """Gauss-Legendre nodes on each stretch of the line between grid crossings.

    Between crossings the bilinear splat weights are polynomial in ``t``, so
    composite Gauss quadrature integrates the splatted Gaussian accurately.
    """
    breaks = [-r, r]
    for d in (c, s):
        if d != 0.0:
            ints = np.arange(np.ceil(r - r * abs(d)), np.floor(r + r * abs(d)) + 1)
            breaks.extend((ints - r) / d)
    breaks = np.unique(np.clip(breaks, -r, r))
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = breaks[:-1], breaks[1:]
    t = ((b - a)[:, None] * (x[None, :] + 1.0) / 2.0 + a[:, None]).ravel()
    wt = ((b - a)[:, None] / 2.0 * w[None, :]).ravel()
    return t, wt


def splat_line(support, t, weights, c, s):
    """Bilinearly splat weighted points ``centre + t * (c, s)`` onto a grid."""
    r = (support - 1) / 2.0
    xs = r + t * c
    ys = r + t * s
    x0 = np.clip(np.floor(xs).astype(int), 0, support - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, support - 1)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, support - 1)
    y1 = np.minimum(y0 + 1, support - 1)
    k = np.zeros((support, support))
    np.add.at(k, (y0, x0), weights * (1 - fx) * (1 - fy))
    np.add.at(k, (y0, x1), weights * fx * (1 - fy))
    np.add.at(k, (y1, x0), weights * (1 - fx) * fy)
    np.add.at(k, (y1, x1), weights * fx * fy)
    return k


def _unit(theta):
    c, s = np.cos(theta), np.sin(theta)
    # snap round-off so axis-aligned kernels stay on a single row or column
    return (0.0 if abs(c) < 1e-12 else c), (0.0 if abs(s) < 1e-12 else s)


def directional_kernel(theta, sigma=2.0, support=9):
    """Rasterise a 1-D Gaussian running along ``(cos theta, sin theta)``.

    The Gaussian line integral through the kernel centre is splatted
    bilinearly onto the ``support x support`` grid and normalised to one.
    ``theta`` is measured from the column axis towards increasing rows.
    """
    support = int(support)
    if support < 3 or support % 2 == 0:
        raise DomainError(f"support must be odd and >= 3, got {support}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    r = (support - 1) / 2.0
    c, s = _unit(theta)
    t, wt = _line_nodes(c, s, r)
    k = splat_line(support, t, wt * np.exp(-0.5 * (t / sigma) ** 2), c, s)
    return k / k.sum()


def default_directions(count=8):
    """``count`` angles evenly spaced over [0, pi)."""
    return np.arange(count) * (np.pi / count)


@dataclass
class DirectionalBank:
    """Directional filters with learnable per-direction strengths ``phi``."""

    directions: np.ndarray = field(default_factory=default_directions)
    sigma: float = 2.0
    support: int = 9
    phi: np.ndarray = None

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).ravel()
        if self.phi is None:
            self.phi = np.ones(len(self.directions))
        self.phi = np.asarray(self.phi, dtype=np.float64).ravel()
        self.validate()

    def validate(self):
        d = self.directions
        if len(d) < 1:
            raise DomainError("bank needs at least one direction")
        if np.any(d < 0) or np.any(d >= np.pi) or np.any(np.diff(d) <= 0):
            raise DomainError("directions must be strictly increasing within [0, pi)")
        if int(self.support) % 2 == 0 or self.support < 3:
            raise DomainError(f"support must be odd and >= 3, got {self.support}")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.phi.shape != d.shape or not np.all(np.isfinite(self.phi)):
            raise DomainError("phi must be finite with one entry per direction")

    def __len__(self):
        return len(self.directions)

    def kernels(self):
        return [directional_kernel(t, self.sigma, self.support) for t in self.directions]

    def copy(self):
        return DirectionalBank(self.directions.copy(), self.sigma, self.support, self.phi.copy())


def apply_df_layer(img, bank):
    """Filter ``img`` along every bank direction, scaled by ``phi``.

    Returns an array of shape ``(len(bank),) + img.shape``.
    """
    img = as_image(img)
    bank.validate()
    return np.stack([p * convolve(img, k) for p, k in zip(bank.phi, bank.kernels())])
