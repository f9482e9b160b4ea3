"""Feature network mapping blurred inputs to blur and latent feature images.

Per network iteration the pipeline is

    DF layer -> shared conv filters -> tanh -> hidden combination -> tanh
    -> two linear heads (lambda for blur features, delta for latent ones)

Every directional map is convolved with every conv filter, so the hidden
combination weights have shape ``(P, J, M)`` with ``M = directions * depth``.
The first iteration sees the blurred image alone (depth 1); later ones see
the blurred image stacked with the previous latent estimate (depth 2).
"""

import copy
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from . import deconv
from .dirfilter import DirectionalBank, default_directions, directional_kernel
from .errors import DomainError, FormatError
from .imgcore import as_image, convolve, delta_kernel, luminance

log = logging.getLogger(__name__)

MAGIC = b"LMOF"
FORMAT_VERSION = 1
FAMILIES = ("phi", "conv", "hidden", "lam", "delta")

# default-init gains: small first-stage gain keeps the linear path linear,
# the binarising unit saturates on standardised input
FIRST_GAIN = 0.1
LINEAR_GAIN = 0.1
BINARY_GAIN = 3.0
INIT_NOISE = 0.01
# regulariser of the conv filters' inverse of the directional smoothing
INVERSE_REG = 0.1


@dataclass
class StageParams:
    """Trainable weights of one network iteration."""

    phi: np.ndarray  # (K,)
    conv: np.ndarray  # (J, c, c)
    hidden: np.ndarray  # (P, J, M)
    lam: np.ndarray  # (Q, P)
    delta: np.ndarray  # (Q, P)

    def copy(self):
        return StageParams(*(getattr(self, f).copy() for f in FAMILIES))

    def arrays(self):
        return [getattr(self, f) for f in FAMILIES]

    @classmethod
    def zeros_like(cls, other):
        return cls(*(np.zeros_like(a) for a in other.arrays()))


@dataclass
class NetParams:
    """Shared filter geometry plus one :class:`StageParams` per iteration.

    ``use_df=False`` swaps every directional filter for a delta (the
    ablation without directional filtering). ``standardize`` feeds each
    input channel to the network as ``(x - mean) / std``.
    """

    directions: np.ndarray = field(default_factory=default_directions)
    sigma: float = 2.0
    support: int = 9
    stages: list = field(default_factory=list)
    use_df: bool = True
    standardize: bool = True

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).ravel()
        self.validate()

    @property
    def iterations(self):
        return len(self.stages)

    @property
    def n_dirs(self):
        return len(self.directions)

    @property
    def n_conv(self):
        return self.stages[0].conv.shape[0]

    @property
    def n_hidden(self):
        return self.stages[0].hidden.shape[0]

    @property
    def n_out(self):
        return self.stages[0].lam.shape[0]

    @property
    def c_side(self):
        return self.stages[0].conv.shape[1]

    @staticmethod
    def depth(iteration):
        return 1 if iteration == 0 else 2

    def bank(self, iteration=0):
        return DirectionalBank(self.directions, self.sigma, self.support, self.stages[iteration].phi)

    def filters(self):
        if not self.use_df:
            return [delta_kernel(self.support)] * self.n_dirs
        return [directional_kernel(t, self.sigma, self.support) for t in self.directions]

    def validate(self):
        DirectionalBank(self.directions, self.sigma, self.support)
        if not self.stages:
            raise DomainError("NetParams needs at least one stage")
        k = self.n_dirs
        j, c, c2 = self.stages[0].conv.shape
        p = self.stages[0].hidden.shape[0]
        q = self.stages[0].lam.shape[0]
        if c != c2 or c % 2 == 0:
            raise DomainError(f"conv filters must be square with odd side, got {c}x{c2}")
        for i, st in enumerate(self.stages):
            want = {
                "phi": (k,),
                "conv": (j, c, c),
                "hidden": (p, j, k * self.depth(i)),
                "lam": (q, p),
                "delta": (q, p),
            }
            for name, shape in want.items():
                a = getattr(st, name)
                if a.shape != shape:
                    raise DomainError(f"stage {i} {name} has shape {a.shape}, expected {shape}")
                if not np.all(np.isfinite(a)):
                    raise DomainError(f"stage {i} {name} has non-finite entries")

    def copy(self):
        return copy.deepcopy(self)


def wiener_inverse_filters(filters, side, reg=1e-3):
    """Filters ``c_i`` with ``sum_i c_i * f_i ~ delta``, truncated to ``side``.

    Joint least-squares inverse of the filter bank: in frequency
    ``C_i = conj(F_i) / (sum |F|^2 + reg)``.
    """
    n = 64
    spectra = []
    for f in filters:
        s = f.shape[0]
        pad = np.zeros((n, n))
        pad[:s, :s] = f
        spectra.append(np.fft.fft2(np.roll(pad, (-(s // 2), -(s // 2)), axis=(0, 1))))
    power = sum(np.abs(F) ** 2 for F in spectra) + reg
    r = side // 2
    out = []
    for F in spectra:
        c = np.real(np.fft.ifft2(np.conj(F) / power))
        out.append(np.roll(c, (r, r), axis=(0, 1))[:side, :side])
    return np.array(out)


def default_params(
    iterations=3,
    n_dirs=8,
    n_conv=8,
    n_hidden=8,
    n_out=2,
    c_side=13,
    sigma=2.0,
    support=9,
    use_df=True,
    standardize=True,
    seed=0,
    inverse_reg=None,
):
    """Structured initialisation that already performs edge prediction.

    The conv filters jointly invert the directional smoothing, hidden unit 0
    passes the blurred channel through linearly (blur features) and unit 1
    binarises the sharpest available channel (latent features): the
    blurred image on the first iteration, the previous latent afterwards.
    Weights of the spare hidden units get small Gaussian noise.
    """
    if n_hidden < 2:
        raise DomainError("default initialisation needs at least 2 hidden units")
    rng = np.random.default_rng(seed)
    net = NetParams(default_directions(n_dirs), sigma, support, [_zero_stage(n_dirs, n_conv, n_hidden, n_out, c_side, 1)], use_df, standardize)
    inv = wiener_inverse_filters(net.filters(), c_side, INVERSE_REG if inverse_reg is None else inverse_reg)
    stages = []
    for it in range(iterations):
        depth = NetParams.depth(it)
        st = _zero_stage(n_dirs, n_conv, n_hidden, n_out, c_side, depth)
        # noise only on the spare units so the structured path stays exact
        st.hidden[2:] = INIT_NOISE * rng.standard_normal(st.hidden[2:].shape)
        st.lam[:, 2:] = INIT_NOISE * rng.standard_normal(st.lam[:, 2:].shape)
        st.delta[:, 2:] = INIT_NOISE * rng.standard_normal(st.delta[:, 2:].shape)
        st.phi[:] = 1.0
        used = min(n_conv, n_dirs)
        st.conv[:used] = FIRST_GAIN * inv[:used]
        if n_conv > used:
            st.conv[used:] = INIT_NOISE * rng.standard_normal(st.conv[used:].shape)
        # the inverse pairs conv j with direction j, so only those maps feed
        sharp_channel = 0 if depth == 1 else 1
        for jj in range(used):
            st.hidden[0, jj, jj] = LINEAR_GAIN / FIRST_GAIN
            st.hidden[1, jj, sharp_channel * n_dirs + jj] = BINARY_GAIN / FIRST_GAIN
        st.lam[:, 0] = 1.0 / LINEAR_GAIN
        st.delta[:, 1] = 1.0
        stages.append(st)
    net.stages = stages
    net.validate()
    return net


def _zero_stage(k, j, p, q, c, depth):
    return StageParams(
        np.zeros(k), np.zeros((j, c, c)), np.zeros((p, j, k * depth)), np.zeros((q, p)), np.zeros((q, p))
    )


def input_stats(x, standardize=True):
    """Per-channel (offset, scale) the network subtracts and divides by."""
    x = np.asarray(x, dtype=np.float64)
    if not standardize:
        return np.zeros(x.shape[0]), np.ones(x.shape[0])
    mu = x.mean(axis=(1, 2))
    sd = x.std(axis=(1, 2))
    return mu, np.where(sd > 1e-8, sd, 1.0)


def _as_stack(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DomainError(f"network input must be (H, W) or (D, H, W), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("network input has non-finite values")
    return x


class _ConvBank:
    """All-pairs replicate-boundary convolution of maps with small filters."""

    def __init__(self, shape, c):
        h, w = shape
        self.r = c // 2
        self.c = c
        self.fshape = (sfft.next_fast_len(h + 2 * c - 2, real=True), sfft.next_fast_len(w + 2 * c - 2, real=True))
        self.valid = (slice(c - 1, c - 1 + h), slice(c - 1, c - 1 + w))

    def pad(self, maps):
        r = self.r
        return np.pad(maps, ((0, 0), (r, r), (r, r)), mode="edge")

    def forward(self, padded, filters):
        pf = sfft.rfft2(padded, self.fshape)
        ff = sfft.rfft2(filters, self.fshape)
        full = sfft.irfft2(ff[:, None] * pf[None], self.fshape)
        return full[(Ellipsis,) + self.valid]


def _forward_cache(x, params, iteration):
    if not 0 <= iteration < params.iterations:
        raise DomainError(f"iteration {iteration} outside [0, {params.iterations})")
    x = _as_stack(x)
    depth = params.depth(iteration)
    if x.shape[0] != depth:
        raise DomainError(f"iteration {iteration} expects {depth} input channel(s), got {x.shape[0]}")
    st = params.stages[iteration]
    mu, sd = input_stats(x, params.standardize)
    xs = (x - mu[:, None, None]) / sd[:, None, None]
    # base[d, i] = f_i * x_d; maps are ordered channel-major: m = d * K + i
    base = np.stack([np.stack([convolve(xd, f) for f in params.filters()]) for xd in xs])
    K = params.n_dirs
    base = base.reshape(depth * K, *x.shape[1:])
    phi_m = np.tile(st.phi, depth)
    a = phi_m[:, None, None] * base
    cb = _ConvBank(x.shape[1:], st.conv.shape[1])
    apad = cb.pad(a)
    z = cb.forward(apad, st.conv)  # (J, M, H, W)
    t1 = np.tanh(z)
    h = np.einsum("pjm,jmyx->pyx", st.hidden, t1)
    t2 = np.tanh(h)
    I_hat = np.einsum("qp,pyx->qyx", st.lam, t2)
    l_hat = np.einsum("qp,pyx->qyx", st.delta, t2)
    cache = dict(base=base, apad=apad, cb=cb, t1=t1, t2=t2, stage=st, depth=depth)
    return I_hat, l_hat, cache


def forward(x, params, iteration=0):
    """Blur features ``I_hat`` and latent features ``l_hat``, each (Q, H, W).

    ``x`` is the blurred image on iteration 0 and the stack
    ``(blurred, latent)`` on later iterations.
    """
    I_hat, l_hat, _ = _forward_cache(x, params, iteration)
    return I_hat, l_hat


def _backward(cache, g_I, g_l):
    st = cache["stage"]
    t1, t2, cb = cache["t1"], cache["t2"], cache["cb"]
    grad = StageParams.zeros_like(st)
    grad.lam = np.einsum("qyx,pyx->qp", g_I, t2)
    grad.delta = np.einsum("qyx,pyx->qp", g_l, t2)
    g_t2 = np.einsum("qp,qyx->pyx", st.lam, g_I) + np.einsum("qp,qyx->pyx", st.delta, g_l)
    g_h = g_t2 * (1.0 - t2 ** 2)
    grad.hidden = np.einsum("pyx,jmyx->pjm", g_h, t1)
    g_z = np.einsum("pjm,pyx->jmyx", st.hidden, g_h) * (1.0 - t1 ** 2)
    apad = cache["apad"]
    J, M = g_z.shape[:2]
    c = cb.c
    # d conv_j = sum_m correlate(padded a_m, g_z[j, m])
    shape = (apad.shape[1] + g_z.shape[2] - 1, apad.shape[2] + g_z.shape[3] - 1)
    fs = (sfft.next_fast_len(shape[0], real=True), sfft.next_fast_len(shape[1], real=True))
    af = sfft.rfft2(apad, fs)
    gf = sfft.rfft2(g_z[:, :, ::-1, ::-1], fs)
    full = sfft.irfft2((gf * af[None]).sum(axis=1), fs)
    hz, wz = g_z.shape[2:]
    grad.conv = full[:, hz - 1 : hz - 1 + c, wz - 1 : wz - 1 + c][:, ::-1, ::-1]
    # d a_m = sum_j transposed conv of g_z[j, m] with conv_j, folded back over the edge padding
    cf = sfft.rfft2(st.conv[:, ::-1, ::-1], fs)
    gzf = sfft.rfft2(g_z, fs)
    ga_full = sfft.irfft2((gzf * cf[:, None]).sum(axis=0), fs)
    ga_pad = ga_full[:, : apad.shape[1], : apad.shape[2]]
    g_a = _fold_edge_pad(ga_pad, cb.r)
    K = st.phi.shape[0]
    per_map = np.einsum("myx,myx->m", g_a, cache["base"])
    grad.phi = per_map.reshape(cache["depth"], K).sum(axis=0)
    return grad


def _fold_edge_pad(g, r):
    """Adjoint of ``np.pad(..., mode='edge')`` along the last two axes."""
    if r == 0:
        return g
    g = g.copy()
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., -r - 1, :] += g[..., -r:, :].sum(axis=-2)
    g = g[..., r:-r, :]
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, -r - 1] += g[..., :, -r:].sum(axis=-1)
    return g[..., :, r:-r]


@dataclass
class TrainSample:
    blurred: np.ndarray
    sharp: np.ndarray
    kernel: np.ndarray = None

    def __post_init__(self):
        self.blurred = luminance(as_image(self.blurred, "blurred"))
        self.sharp = luminance(as_image(self.sharp, "sharp"))
        if self.blurred.shape != self.sharp.shape:
            raise DomainError(f"blurred {self.blurred.shape} and sharp {self.sharp.shape} differ in shape")


def _stage_input(sample, latent):
    return sample.blurred if latent is None else np.stack([sample.blurred, latent])


def prior_latents(batch, params, stage, cfg):
    """Latent images entering iteration ``stage`` (None for stage 0)."""
    out = []
    for s in batch:
        latent = None
        for it in range(stage):
            latent, _ = deconv.deblur_step(s.blurred, latent, params, it, cfg)
        out.append(latent)
    return out


def loss_and_gradient(batch, params, stage=0, mask=None, cfg=None, frozen_kernels=None, latents=None):
    """MSE between the stage-``stage`` latent estimate and the sharp images.

    The kernel estimate is held fixed during differentiation (pass
    ``frozen_kernels`` to pin it explicitly); gradients flow through the
    latent deconvolution and the network. ``mask`` maps family names to
    booleans (True = trainable); masked families get zero gradient.
    Returns ``(loss, grad)`` where ``grad`` is a :class:`StageParams`.
    """
    batch = list(batch)
    if not batch:
        raise DomainError("empty training batch")
    cfg = cfg or deconv.DeconvConfig()
    if not 0 <= stage < params.iterations:
        raise DomainError(f"stage {stage} outside [0, {params.iterations})")
    if latents is None:
        latents = prior_latents(batch, params, stage, cfg)
    total = 0.0
    grad = StageParams.zeros_like(params.stages[stage])
    n_pix = sum(s.sharp.size for s in batch)
    for i, (s, prev) in enumerate(zip(batch, latents)):
        x = _stage_input(s, prev)
        I_hat, l_hat, cache = _forward_cache(x, params, stage)
        k = frozen_kernels[i] if frozen_kernels is not None else deconv.estimate_kernel(I_hat, l_hat, cfg, deconv.fitting_side(cfg, s.blurred.shape))
        mu, sd = input_stats(x[None] if x.ndim == 2 else x, params.standardize)
        latent = deconv.latent_from_features(I_hat, k, cfg.beta_l, mu[0], sd[0])
        r = latent - s.sharp
        total += float((r * r).sum())
        g_lat = 2.0 * r / n_pix
        g_I = deconv.latent_from_features_adjoint(g_lat, k, cfg.beta_l, sd[0], I_hat.shape[0])
        g = _backward(cache, g_I, np.zeros_like(l_hat))
        for name in FAMILIES:
            setattr(grad, name, getattr(grad, name) + getattr(g, name))
    if mask is not None:
        for name in FAMILIES:
            if not mask.get(name, True):
                setattr(grad, name, np.zeros_like(getattr(grad, name)))
    return total / n_pix, grad


def train_stage(dataset, params, stage, lr=0.01, decay=0.95, steps=50, cfg=None, mask=None, callback=None):
    """Full-batch gradient descent on the weights of iteration ``stage``.

    The step size at step ``t`` is ``lr * decay**t``. Other iterations'
    weights are left untouched; a fresh :class:`NetParams` is returned.
    """
    dataset = list(dataset)
    if not 0 <= stage < params.iterations:
        raise DomainError(f"stage {stage} outside [0, {params.iterations})")
    if lr < 0 or not 0 < decay <= 1 or steps < 0:
        raise DomainError("need lr >= 0, 0 < decay <= 1 and steps >= 0")
    cfg = cfg or deconv.DeconvConfig()
    out = params.copy()
    latents = prior_latents(dataset, out, stage, cfg)
    st = out.stages[stage]
    for t in range(steps):
        loss, grad = loss_and_gradient(dataset, out, stage, mask, cfg, latents=latents)
        if callback is not None:
            callback(t, loss)
        step = lr * decay ** t
        if step == 0.0:
            continue
        for name in FAMILIES:
            setattr(st, name, getattr(st, name) - step * getattr(grad, name))
        log.debug("stage %d step %d loss %.6g", stage, t, loss)
    out.validate()
    return out


def _dims(params):
    flags = int(params.use_df) | (int(params.standardize) << 1)
    return (params.n_dirs, params.n_conv, params.n_hidden, params.n_out, params.c_side, params.iterations, params.support, flags)


def to_bytes(params):
    """Serialise to the versioned little-endian binary container."""
    params.validate()
    head = MAGIC + struct.pack("<I8I", FORMAT_VERSION, *_dims(params))
    values = [np.array([params.sigma]), params.directions]
    for st in params.stages:
        values.extend(st.arrays())
    body = np.concatenate([v.ravel() for v in values]).astype("<f8").tobytes()
    return head + body


def from_bytes(data, path=None):
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, expected 'LMOF'", offset=0, path=path)
    head = 4 + 4 * 9
    if len(data) < head:
        raise FormatError("truncated header", offset=len(data), path=path)
    version, K, J, P, Q, c, N, support, flags = struct.unpack("<I8I", data[4:head])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4, path=path)
    if min(K, J, P, Q, c, N, support) < 1:
        raise FormatError("non-positive architecture dimension", offset=8, path=path)
    sizes = [1, K]
    for it in range(N):
        M = K * NetParams.depth(it)
        sizes += [K, J * c * c, P * J * M, Q * P, Q * P]
    need = head + 8 * sum(sizes)
    if len(data) != need:
        raise FormatError(f"expected {need} bytes, found {len(data)}", offset=min(len(data), need), path=path)
    vals = np.frombuffer(data, dtype="<f8", offset=head).astype(np.float64)
    pos = 0

    def take(n, shape):
        nonlocal pos
        out = vals[pos : pos + n].reshape(shape)
        pos += n
        return out

    sigma = float(take(1, (1,))[0])
    directions = take(K, (K,))
    stages = []
    for it in range(N):
        M = K * NetParams.depth(it)
        stages.append(StageParams(take(K, (K,)), take(J * c * c, (J, c, c)), take(P * J * M, (P, J, M)), take(Q * P, (Q, P)), take(Q * P, (Q, P))))
    try:
        return NetParams(directions, sigma, support, stages, bool(flags & 1), bool(flags & 2))
    except DomainError as e:
        raise FormatError(f"invalid parameters: {e}", offset=head, path=path) from e


def export_text(params):
    """Human-readable dump of every weight."""
    lines = [
        f"# LMOF v{FORMAT_VERSION}",
        "directions " + " ".join(f"{d:.17g}" for d in params.directions),
        f"sigma {params.sigma:.17g}",
        f"support {params.support}",
        f"use_df {int(params.use_df)}",
        f"standardize {int(params.standardize)}",
    ]
    for i, st in enumerate(params.stages):
        for name in FAMILIES:
            a = getattr(st, name)
            lines.append(f"stage {i} {name} shape {' '.join(map(str, a.shape))}")
            lines.append(" ".join(f"{v:.17g}" for v in a.ravel()))
    return "\n".join(lines) + "\n"
