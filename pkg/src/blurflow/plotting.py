"""Flow colour coding and report figures."""

import numpy as np

from .imgcore import as_flow


def flow_to_color(w, max_mag=None):
    """Colour-code a flow field as an RGB image in [0, 1].

    Hue follows the flow direction ``atan2(v, u)``, saturation the magnitude
    relative to ``max_mag`` (default: 99th percentile of the magnitudes),
    value stays 1, so zero flow renders white.
    """
    from matplotlib.colors import hsv_to_rgb

    w = as_flow(w)
    u, v = w[..., 0], w[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99))
    if not max_mag > 0:
        max_mag = 1.0
    hue = np.mod(np.arctan2(v, u), 2.0 * np.pi) / (2.0 * np.pi)
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return hsv_to_rgb(hsv)


def _figure(**kw):
    from matplotlib.figure import Figure

    return Figure(**kw)


def report_figure(results):
    """Bar chart of per-case AEE and AAE."""
    fig = _figure(figsize=(7, 3.2))
    ax1, ax2 = fig.subplots(1, 2)
    ids = [r.case_id for r in results]
    x = np.arange(len(ids))
    ax1.bar(x, [r.aee for r in results], color="tab:blue")
    ax1.set_ylabel("AEE (px)")
    ax2.bar(x, [r.aae for r in results], color="tab:orange")
    ax2.set_ylabel("AAE (deg)")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=60, fontsize=7)
    fig.tight_layout()
    return fig


def case_figure(case, est, title=""):
    """Blurred frames, ground-truth and estimated flow side by side."""
    fig = _figure(figsize=(10, 2.8))
    axes = fig.subplots(1, 4)
    mag = float(np.percentile(np.hypot(case.gt_flow[..., 0], case.gt_flow[..., 1]), 99)) or None
    panels = [
        (case.blurred1, "frame 1", "gray"),
        (case.blurred2, "frame 2", "gray"),
        (flow_to_color(case.gt_flow, mag), "ground truth", None),
        (flow_to_color(est, mag), "estimate", None),
    ]
    for ax, (img, name, cmap) in zip(axes, panels):
        ax.imshow(img, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return fig
