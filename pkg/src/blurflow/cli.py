"""Command-line interface and file formats.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""

import argparse
import logging
import os
import struct
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import bench, deconv, featurenet
from .deconv import DeconvConfig
from .errors import (
    BlurFlowError,
    DomainError,
    FormatError,
    NumericalBreakdownError,
    SingularityError,
)
from .flowsolve import DEBLUR_MODES, FlowConfig, estimate_flow, format_diagnostics
from .imgcore import as_flow, check_kernel
from .plotting import case_figure, flow_to_color, report_figure

log = logging.getLogger("blurflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FLO_TAG = 202021.25
THREADS_ENV = "BLURFLOW_THREADS"


class UsageError(Exception):
    pass


# file formats


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def flo_bytes(w):
    w = as_flow(w)
    if not np.all(np.isfinite(w)):
        raise DomainError("flow contains non-finite values")
    h, wd = w.shape[:2]
    return struct.pack("<fii", FLO_TAG, wd, h) + w.astype("<f4").tobytes()


def write_flo(path, w):
    """Write a flow field in the Middlebury ``.flo`` layout."""
    _atomic_write(path, flo_bytes(w))


def parse_flo(data, path=None):
    if len(data) < 4:
        raise FormatError("truncated tag", offset=len(data), path=path)
    if data[:4] != struct.pack("<f", FLO_TAG):
        raise FormatError("bad .flo tag", offset=0, path=path)
    if len(data) < 12:
        raise FormatError("truncated header", offset=len(data), path=path)
    wd, h = struct.unpack("<ii", data[4:12])
    if wd <= 0 or h <= 0:
        raise FormatError(f"non-positive dimensions {wd}x{h}", offset=4 if wd <= 0 else 8, path=path)
    need = 12 + 8 * wd * h
    if len(data) < need:
        raise FormatError(f"truncated flow data, expected {need} bytes", offset=len(data), path=path)
    if len(data) > need:
        raise FormatError(f"trailing bytes after {need}-byte flow", offset=need, path=path)
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, wd, 2).astype(np.float32)


def read_flo(path):
    """Read a ``.flo`` file into an ``(H, W, 2)`` float32 array."""
    with open(path, "rb") as f:
        return parse_flo(f.read(), path=str(path))


def parse_pnm(data, path=None):
    """Binary PGM/PPM (P5/P6) with any maxval, 8 or 16 bit, into [0, 1].

    Read directly because Pillow narrows 16-bit colour PPM to 8 bits.
    """
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", offset=pos, path=path)
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file", offset=0, path=path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError("non-numeric PNM header field", offset=pos, path=path) from e
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PNM header {w}x{h} maxval {maxval}", offset=pos, path=path)
    pos += 1  # single whitespace before the raster
    ch = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    need = pos + n * np.dtype(dtype).itemsize
    if len(data) < need:
        raise FormatError(f"truncated PNM raster, expected {need} bytes", offset=len(data), path=path)
    a = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float64) / maxval
    return a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)


def read_image(path):
    """Read PNG or PGM/PPM (8 or 16 bit) into floats in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        with open(path, "rb") as f:
            head = f.read(2)
            if head in (b"P5", b"P6"):
                return parse_pnm(head + f.read(), path=str(path))
    try:
        with Image.open(path) as im:
            mode = im.mode
            a = np.array(im)
    except UnidentifiedImageError as e:
        raise FormatError("unrecognised image format", offset=0, path=str(path)) from e
    if mode in ("1", "L", "RGB", "RGBA", "P"):
        if mode == "P":
            with Image.open(path) as im:
                a = np.array(im.convert("RGB"))
        if a.dtype == bool:
            return a.astype(np.float64)
        a = a.astype(np.float64) / 255.0
        return a[..., :3] if a.ndim == 3 else a
    if mode.startswith("I;16"):
        return a.astype(np.float64) / 65535.0
    if mode == "I":
        return a.astype(np.float64) / 65535.0
    raise FormatError(f"unsupported image mode {mode}", path=str(path))


IMAGE_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def _check_image_out(path, flag):
    if path and Path(path).suffix.lower() not in IMAGE_FORMATS:
        raise UsageError(f"{flag}: unsupported image extension {Path(path).suffix!r} (use .png, .pgm or .ppm)")


def image_bytes(img, suffix=".png"):
    """Encode an image: 16-bit for grey, 8-bit for colour."""
    import io

    from PIL import Image

    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    fmt = IMAGE_FORMATS.get(suffix.lower())
    if fmt is None:
        raise UsageError(f"unsupported image extension {suffix!r}")
    if a.ndim == 2:
        im = Image.fromarray(np.round(a * 65535.0).astype(np.uint16))
    else:
        im = Image.fromarray(np.round(a[..., :3] * 255.0).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    im.save(buf, format=fmt)
    return buf.getvalue()


def write_image(path, img):
    _atomic_write(path, image_bytes(img, Path(path).suffix))


def kernel_text(k):
    k = check_kernel(k)
    s = k.shape[0]
    rows = [" ".join(f"{v:.17g}" for v in row) for row in k]
    return f"{s} {s}\n" + "\n".join(rows) + "\n"


def parse_kernel_text(text, path=None):
    tokens = text.split()
    if len(tokens) < 2:
        raise FormatError("missing 'side side' header", offset=0, path=path)
    try:
        a, b = int(tokens[0]), int(tokens[1])
    except ValueError as e:
        raise FormatError("header must hold two integers", offset=0, path=path) from e
    if a != b or a < 1 or a % 2 == 0:
        raise FormatError(f"kernel must be square with odd side, got {a}x{b}", offset=0, path=path)
    if len(tokens) - 2 != a * b:
        raise FormatError(f"expected {a * b} weights, found {len(tokens) - 2}", offset=len(text.encode()), path=path)
    try:
        k = np.array([float(t) for t in tokens[2:]]).reshape(a, b)
    except ValueError as e:
        raise FormatError("non-numeric kernel weight", path=path) from e
    try:
        return check_kernel(k)
    except DomainError as e:
        raise FormatError(str(e), path=path) from e


def write_kernel(path, k):
    _atomic_write(path, kernel_text(k).encode())


def read_kernel(path):
    with open(path, "r") as f:
        return parse_kernel_text(f.read(), path=str(path))


def write_params(path, params):
    _atomic_write(path, featurenet.to_bytes(params))


def read_params(path):
    with open(path, "rb") as f:
        return featurenet.from_bytes(f.read(), path=str(path))


# bench case directories


CASE_FILES = ("sharp1.png", "sharp2.png", "blurred1.png", "blurred2.png", "gt.flo", "k1.txt", "k2.txt", "case.txt")


def case_files(case, case_id):
    """Serialised files of one benchmark case, name -> bytes."""
    manifest = [
        f"case_id={case_id}",
        f"seed={case.seed}",
        f"noise_kind={case.noise[0]}",
        f"noise_level={case.noise[1]:.17g}",
    ]
    for key in sorted(case.provenance):
        val = case.provenance[key]
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        manifest.append(f"{key}={val}")
    return {
        "sharp1.png": image_bytes(case.sharp1),
        "sharp2.png": image_bytes(case.sharp2),
        "blurred1.png": image_bytes(case.blurred1),
        "blurred2.png": image_bytes(case.blurred2),
        "gt.flo": flo_bytes(case.gt_flow),
        "k1.txt": kernel_text(case.k1).encode(),
        "k2.txt": kernel_text(case.k2).encode(),
        "case.txt": ("\n".join(manifest) + "\n").encode(),
    }


def read_manifest(path):
    out = {}
    with open(path) as f:
        for n, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"line {n + 1} is not key=value", path=str(path))
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_case(directory):
    d = Path(directory)
    for name in CASE_FILES:
        if not (d / name).exists():
            raise FormatError(f"case file {name} missing", path=str(d))
    man = read_manifest(d / "case.txt")
    gt = read_flo(d / "gt.flo").astype(np.float64)
    case = bench.GtCase(
        read_image(d / "sharp1.png"),
        read_image(d / "sharp2.png"),
        gt,
        read_kernel(d / "k1.txt"),
        read_kernel(d / "k2.txt"),
        (man.get("noise_kind", "none"), float(man.get("noise_level", 0.0))),
        read_image(d / "blurred1.png"),
        read_image(d / "blurred2.png"),
        int(man.get("seed", 0)),
        man,
    )
    return man.get("case_id", d.name), case


def list_cases(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FormatError("benchmark directory not found", path=str(d))
    cases = sorted(p for p in d.iterdir() if p.is_dir() and (p / "case.txt").exists())
    if not cases:
        raise FormatError("no case directories found", path=str(d))
    return cases


# configuration


FLOW_KEYS = {
    "gamma": float,
    "alpha": float,
    "epsilon": float,
    "eta": float,
    "min_side": int,
    "outer_iters": int,
    "cg_iters": int,
    "cg_tol": float,
    "deblur_mode": str,
    "blur_match": lambda s: _onoff(s),
    "line_search": lambda s: _onoff(s),
}
DECONV_KEYS = {
    "beta_k": float,
    "beta_l": float,
    "kernel_side": int,
    "iterations": int,
    "inner_cg": int,
    "recenter": lambda s: _onoff(s),
}


def _onoff(s):
    if isinstance(s, bool):
        return s
    t = str(s).strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {s!r}")


def read_config(path):
    """``key=value`` lines; deconvolution keys may carry a ``deconv.`` prefix."""
    try:
        raw = read_manifest(path)
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e.strerror}") from e
    out = {}
    for k, v in raw.items():
        key = k.replace("-", "_")
        if key.startswith("deconv."):
            key = key[len("deconv.") :]
        if key == "tau":
            out[key] = tuple(float(t) for t in v.strip("()").replace(",", " ").split())
        elif key in FLOW_KEYS:
            out[key] = FLOW_KEYS[key](v)
        elif key in DECONV_KEYS:
            out[key] = DECONV_KEYS[key](v)
        else:
            raise UsageError(f"unknown config key {k!r} in {path}")
    return out


def _merged(args):
    """Flag > config file > built-in default."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in list(FLOW_KEYS) + list(DECONV_KEYS):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = FLOW_KEYS.get(key, DECONV_KEYS.get(key))(v)
    return values


def build_configs(args):
    values = _merged(args)
    try:
        dkw = {k: values[k] for k in list(DECONV_KEYS) + ["tau"] if k in values}
        dcfg = DeconvConfig(**dkw)
        fkw = {k: values[k] for k in FLOW_KEYS if k in values}
        fcfg = FlowConfig(deconv=dcfg, **fkw)
    except DomainError as e:
        raise UsageError(str(e)) from e
    return fcfg


def dump_config(cfg):
    lines = []
    for k, v in cfg.as_dict().items():
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, tuple):
            v = ",".join(repr(t) for t in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


# commands


def _load_net(args, cfg=None):
    if getattr(args, "params", None):
        return read_params(args.params)
    return featurenet.default_params(iterations=max(3, cfg.deconv.iterations if cfg else 3))


def _need_file(path, flag):
    if not Path(path).is_file():
        raise FormatError(f"{flag}: file not found", path=str(path))


def cmd_flow(args):
    cfg = build_configs(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if not (args.frame1 and args.frame2 and args.out):
        raise UsageError("flow needs --frame1, --frame2 and --out")
    _check_image_out(args.viz, "--viz")
    _need_file(args.frame1, "--frame1")
    _need_file(args.frame2, "--frame2")
    a = read_image(args.frame1)
    b = read_image(args.frame2)
    if a.shape != b.shape:
        raise FormatError(f"--frame2 shape {b.shape} differs from --frame1 shape {a.shape}", path=args.frame2)
    cfg.net = _load_net(args, cfg) if cfg.deblur_mode != "off" else None
    w, diag = estimate_flow(a, b, cfg)
    write_flo(args.out, w)
    if args.diag:
        _atomic_write(args.diag, format_diagnostics(diag).encode())
    if args.viz:
        write_image(args.viz, flow_to_color(w))
    return EXIT_OK


def cmd_deblur(args):
    cfg = build_configs(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if not (args.input and args.out_latent and args.out_kernel):
        raise UsageError("deblur needs --input, --out-latent and --out-kernel")
    _check_image_out(args.out_latent, "--out-latent")
    _need_file(args.input, "--input")
    img = read_image(args.input)
    net = _load_net(args, cfg)
    latent, k = deconv.deblur_iterate(img, net, cfg.deconv)
    write_image(args.out_latent, np.clip(latent, 0.0, 1.0))
    write_kernel(args.out_kernel, k)
    return EXIT_OK


def _parse_noise(text):
    if text in (None, "", "none"):
        return ("none", 0.0)
    kind, _, level = text.partition(":")
    if kind not in bench.NOISE_KINDS:
        raise UsageError(f"--noise: unknown kind {kind!r}")
    try:
        lv = float(level) if level else 0.0
    except ValueError as e:
        raise UsageError(f"--noise: bad level {level!r}") from e
    if lv < 0:
        raise UsageError("--noise: level must be non-negative")
    return (kind, lv)


def cmd_bench_gen(args):
    noise = _parse_noise(args.noise)
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    if args.size < 16:
        raise UsageError("--size must be >= 16")
    if args.kernel_side < 3 or args.kernel_side % 2 == 0:
        raise UsageError("--kernel-side must be odd and >= 3")
    suite = bench.generate_suite(args.cases, (args.size, args.size), noise, args.seed, args.kernel_side, args.max_shift)
    out = Path(args.out_dir)
    for i, case in enumerate(suite):
        cid = f"case{i:03d}"
        for name, data in case_files(case, cid).items():
            _atomic_write(out / cid / name, data)
    return EXIT_OK


def _eval_one(job):
    path, cfg = job
    cid, case = read_case(path)
    res, w = bench.evaluate_case(case, cfg, cid)
    return res, w, case


def _workers():
    v = os.environ.get(THREADS_ENV)
    if not v:
        return os.cpu_count() or 1
    try:
        n = int(v)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {v!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def cmd_bench_eval(args):
    cfg = build_configs(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if not args.dir:
        raise UsageError("bench-eval needs --dir")
    timing = _onoff(args.timing)
    workers = _workers()
    paths = list_cases(args.dir)
    cfg.net = _load_net(args, cfg) if cfg.deblur_mode != "off" else None
    jobs = [(p, cfg) for p in paths]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            outs = list(ex.map(_eval_one, jobs))
    else:
        outs = [_eval_one(j) for j in jobs]
    results = [o[0] for o in outs]
    report = bench.format_report(results, timing)
    sys.stdout.write(report)
    report_path = Path(args.report) if args.report else Path(args.dir) / "report.txt"
    _atomic_write(report_path, report.encode())
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        report_figure(results).savefig(fig_dir / "metrics.png", dpi=100)
        for res, w, case in outs:
            case_figure(case, w, f"{res.case_id}  AEE {res.aee:.3f}").savefig(fig_dir / f"{res.case_id}.png", dpi=100)
    return EXIT_OK


def training_samples(directory):
    out = []
    for p in list_cases(directory):
        _, case = read_case(p)
        out.append(featurenet.TrainSample(case.blurred1, case.sharp1, case.k1))
        out.append(featurenet.TrainSample(case.blurred2, case.sharp2, case.k2))
    return out


def cmd_train(args):
    cfg = build_configs(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if not (args.data and args.out):
        raise UsageError("train needs --data and --out")
    if args.stages < 1:
        raise UsageError("--stages must be >= 1")
    if args.lr < 0 or not 0 < args.decay <= 1 or args.steps < 0:
        raise UsageError("need --lr >= 0, 0 < --decay <= 1 and --steps >= 0")
    data = training_samples(args.data)
    net = read_params(args.params) if args.params else featurenet.default_params(iterations=args.stages, seed=args.seed)
    if args.stages > net.iterations:
        raise UsageError(f"--stages {args.stages} exceeds the network's {net.iterations} iterations")
    for stage in range(args.stages):
        net = train_logged(data, net, stage, args, cfg.deconv)
    write_params(args.out, net)
    return EXIT_OK


def train_logged(data, net, stage, args, dcfg):
    def report(t, loss):
        log.info("stage %d step %d loss %.6g", stage, t, loss)

    return featurenet.train_stage(data, net, stage, args.lr, args.decay, args.steps, dcfg, callback=report)


def cmd_viz(args):
    if not (args.flo and args.out):
        raise UsageError("viz needs --flo and --out")
    if args.max_mag is not None and not args.max_mag > 0:
        raise UsageError("--max-mag must be positive")
    _check_image_out(args.out, "--out")
    _need_file(args.flo, "--flo")
    w = read_flo(args.flo).astype(np.float64)
    if not np.all(np.isfinite(w)):
        raise FormatError("flow contains non-finite values", path=args.flo)
    write_image(args.out, flow_to_color(w, args.max_mag))
    return EXIT_OK


# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _method_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--config", help="key=value file; flags override it")
    g.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    g.add_argument("--params", help="network parameter file (.lmof)")
    g.add_argument("--gamma", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--eta", type=float, help="pyramid factor (default 0.8)")
    g.add_argument("--min-side", dest="min_side", type=int)
    g.add_argument("--outer-iters", dest="outer_iters", type=int)
    g.add_argument("--cg-iters", dest="cg_iters", type=int, help="CG iterations (default 60)")
    g.add_argument("--cg-tol", dest="cg_tol", type=float)
    g.add_argument("--deblur", dest="deblur_mode", choices=DEBLUR_MODES)
    g.add_argument("--blur-match", dest="blur_match", choices=("on", "off"))
    g.add_argument("--line-search", dest="line_search", choices=("on", "off"))
    _deconv_flags(g)


def _deconv_flags(g):
    g.add_argument("--kernel-side", dest="kernel_side", type=int)
    g.add_argument("--iterations", type=int, help="network iterations (default 3)")
    g.add_argument("--beta-k", dest="beta_k", type=float)
    g.add_argument("--beta-l", dest="beta_l", type=float)
    g.add_argument("--inner-cg", dest="inner_cg", type=int)
    g.add_argument("--recenter", choices=("on", "off"))


def build_parser():
    p = _Parser(prog="blurflow", description="Optical flow for blurred image pairs.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("flow", help="estimate flow between two frames")
    f.add_argument("--frame1")
    f.add_argument("--frame2")
    f.add_argument("--out", help="output .flo")
    f.add_argument("--diag", help="per-level diagnostics text file")
    f.add_argument("--viz", help="also write a colour-coded PNG")
    _method_flags(f)
    f.set_defaults(func=cmd_flow)

    d = sub.add_parser("deblur", help="blind deblurring of one image")
    d.add_argument("--input")
    d.add_argument("--out-latent", dest="out_latent")
    d.add_argument("--out-kernel", dest="out_kernel")
    g = d.add_argument_group("deconvolution")
    g.add_argument("--config")
    g.add_argument("--dump-config", action="store_true")
    g.add_argument("--params")
    _deconv_flags(g)
    d.set_defaults(func=cmd_deblur)

    bg = sub.add_parser("bench-gen", help="generate synthetic benchmark cases")
    bg.add_argument("--out-dir", dest="out_dir", required=True)
    bg.add_argument("--cases", type=int, default=10)
    bg.add_argument("--noise", default="none", help="kind:level, e.g. gaussian:0.01 or salt_pepper:0.15")
    bg.add_argument("--seed", type=int, default=0)
    bg.add_argument("--size", type=int, default=64)
    bg.add_argument("--kernel-side", dest="kernel_side", type=int, default=9)
    bg.add_argument("--max-shift", dest="max_shift", type=int, default=3)
    bg.set_defaults(func=cmd_bench_gen)

    be = sub.add_parser("bench-eval", help="evaluate flow on benchmark cases")
    be.add_argument("--dir")
    be.add_argument("--report", help="report path (default DIR/report.txt)")
    be.add_argument("--figures", help="directory for metric and flow figures")
    be.add_argument("--timing", choices=("on", "off"), default="on", help="off writes zero runtimes for byte-stable reports")
    _method_flags(be)
    be.set_defaults(func=cmd_bench_eval)

    t = sub.add_parser("train", help="stage-wise training of the feature network")
    t.add_argument("--data", help="benchmark directory used as training pairs")
    t.add_argument("--stages", type=int, default=3)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--decay", type=float, default=0.95)
    t.add_argument("--steps", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    g = t.add_argument_group("deconvolution")
    g.add_argument("--config")
    g.add_argument("--dump-config", action="store_true")
    g.add_argument("--params", help="initial parameters (default: built-in init)")
    _deconv_flags(g)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("viz", help="colour-code a .flo file")
    v.add_argument("--flo")
    v.add_argument("--out")
    v.add_argument("--max-mag", dest="max_mag", type=float)
    v.set_defaults(func=cmd_viz)
    return p


@contextmanager
def _fft_workers():
    from scipy import fft as sfft

    with sfft.set_workers(_workers()):
        yield


def run(argv=None):
    """Parse ``argv`` and run the command; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (flow, deblur, bench-gen, bench-eval, train, viz)")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        with _fft_workers():
            return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DomainError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalBreakdownError, SingularityError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except BlurFlowError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
