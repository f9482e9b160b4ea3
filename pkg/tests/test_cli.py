import colorsys
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from blurflow import cli
from blurflow import featurenet as fn
from blurflow.bench import texture
from blurflow.errors import DomainError, FormatError, NumericalBreakdownError
from blurflow.plotting import flow_to_color


def test_flo_round_trip_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    for i in range(100):
        h, w = r.integers(1, 12, size=2)
        flow = r.uniform(-1e4, 1e4, (h, w, 2)).astype(np.float32)
        if i % 3 == 0:
            flow[0, 0] = [1e4, -1e4]
        path = tmp_path / f"f{i}.flo"
        cli.write_flo(path, flow)
        back = cli.read_flo(path)
        assert back.dtype == np.float32
        assert back.tobytes() == flow.tobytes()


def test_flo_layout(tmp_path):
    path = tmp_path / "one.flo"
    cli.write_flo(path, np.array([[[1.0, 2.0]]]))
    data = path.read_bytes()
    assert len(data) == 20
    assert struct.unpack("<fiiff", data) == (202021.25, 1, 1, 1.0, 2.0)


def test_flo_row_major_interleaved(tmp_path):
    flow = np.zeros((2, 3, 2), dtype=np.float32)
    flow[..., 0] = np.arange(6).reshape(2, 3)
    flow[..., 1] = -np.arange(6).reshape(2, 3)
    data = cli.flo_bytes(flow)
    assert struct.unpack("<ii", data[4:12]) == (3, 2)
    vals = np.frombuffer(data[12:], "<f4")
    assert list(vals[:6]) == [0, 0, 1, -1, 2, -2]


def test_flo_errors(tmp_path):
    good = cli.flo_bytes(np.zeros((2, 2, 2)))
    with pytest.raises(FormatError) as e:
        cli.parse_flo(b"HEIP" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        cli.parse_flo(good[:-3])
    assert e.value.offset == len(good) - 3
    with pytest.raises(FormatError) as e:
        cli.parse_flo(good[:4] + struct.pack("<ii", 0, 2) + good[12:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        cli.parse_flo(good[:4] + struct.pack("<ii", 2, -1) + good[12:])
    assert e.value.offset == 8
    with pytest.raises(FormatError):
        cli.parse_flo(good[:7])
    with pytest.raises(FormatError):
        cli.parse_flo(good + b"\0")
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        cli.write_flo(tmp_path / "nan.flo", bad)
    assert not (tmp_path / "nan.flo").exists()


def hue_deg(rgb):
    return 360.0 * colorsys.rgb_to_hsv(*rgb)[0]


def test_color_zero_flow_is_white():
    assert np.allclose(flow_to_color(np.zeros((4, 5, 2))), 1.0)


@given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 2**31))
def test_color_scale_invariance(scale, seed):
    w = np.random.default_rng(seed).standard_normal((6, 6, 2))
    assert np.allclose(flow_to_color(w), flow_to_color(scale * w), atol=1e-9)


def test_opposite_flows_have_opposite_hues():
    a = np.zeros((1, 1, 2))
    a[..., 0] = 1
    ha = hue_deg(flow_to_color(a, 1.0)[0, 0])
    hb = hue_deg(flow_to_color(-a, 1.0)[0, 0])
    assert abs(((ha - hb) % 360.0) - 180.0) < 1e-6


def test_png_16bit_round_trip(tmp_path, rng):
    img = rng.random((9, 11))
    cli.write_image(tmp_path / "a.png", img)
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode.startswith("I")
    back = cli.read_image(tmp_path / "a.png")
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-12


def test_colour_png(tmp_path, rng):
    img = rng.random((5, 6, 3))
    cli.write_image(tmp_path / "c.png", img)
    back = cli.read_image(tmp_path / "c.png")
    assert back.shape == (5, 6, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_write_read(tmp_path, rng):
    img = rng.random((4, 5))
    cli.write_image(tmp_path / "w.pgm", img)
    assert np.max(np.abs(cli.read_image(tmp_path / "w.pgm") - img)) <= 0.5 / 65535 + 1e-12


def test_pgm_maxval_scaling(tmp_path):
    path = tmp_path / "g.pgm"
    path.write_bytes(b"P5\n# comment\n2 1\n1000\n" + struct.pack(">HH", 0, 500))
    assert np.allclose(cli.read_image(path), [[0.0, 0.5]])
    rgb = tmp_path / "c.ppm"
    rgb.write_bytes(b"P6 1 1 1000\n" + struct.pack(">HHH", 0, 500, 1000))
    assert np.allclose(cli.read_image(rgb), [[[0.0, 0.5, 1.0]]])
    with pytest.raises(FormatError):
        cli.parse_pnm(b"P5 2 2 255\n" + bytes(3))
    path8 = tmp_path / "g8.pgm"
    path8.write_bytes(b"P5 2 1 255\n" + bytes([0, 255]))
    assert np.allclose(cli.read_image(path8), [[0.0, 1.0]])


def test_unreadable_image(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"not an image")
    with pytest.raises(FormatError):
        cli.read_image(p)


def test_kernel_text_round_trip(tmp_path, rng):
    k = rng.random((5, 5))
    k /= k.sum()
    cli.write_kernel(tmp_path / "k.txt", k)
    text = (tmp_path / "k.txt").read_text()
    assert text.splitlines()[0] == "5 5"
    assert np.array_equal(cli.read_kernel(tmp_path / "k.txt"), k)


@pytest.mark.parametrize(
    "text",
    ["", "3 3\n1 0 0", "4 4\n" + " ".join(["0.0625"] * 16), "3 5\n" + " ".join(["0.1"] * 15), "1 1\nx", "1 1\n2"],
)
def test_kernel_text_errors(text):
    with pytest.raises(FormatError):
        cli.parse_kernel_text(text)


def test_params_file_round_trip(tmp_path):
    params = fn.default_params(iterations=2, n_dirs=4, n_conv=4, n_hidden=4, c_side=5)
    cli.write_params(tmp_path / "n.lmof", params)
    back = cli.read_params(tmp_path / "n.lmof")
    assert fn.to_bytes(back) == fn.to_bytes(params)


def dump(args, capsys):
    assert cli.run(args + ["--dump-config"]) == 0
    out = capsys.readouterr().out
    return dict(line.split("=", 1) for line in out.splitlines())


def test_config_precedence(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("gamma=5\ndeconv.beta_l=0.01\nblur_match=off\n")
    assert dump(["flow"], capsys)["gamma"] == "20.0"
    d = dump(["flow", "--config", str(conf)], capsys)
    assert d["gamma"] == "5.0" and d["deconv.beta_l"] == "0.01" and d["blur_match"] == "off"
    d = dump(["flow", "--config", str(conf), "--gamma", "7", "--blur-match", "on"], capsys)
    assert d["gamma"] == "7.0" and d["blur_match"] == "on"


def test_dumped_config_reloads(tmp_path, capsys):
    d = dump(["flow", "--epsilon", "0.05", "--deblur", "independent"], capsys)
    conf = tmp_path / "dumped.txt"
    conf.write_text("".join(f"{k}={v}\n" for k, v in d.items()))
    assert dump(["flow", "--config", str(conf)], capsys) == d


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("gama=5\n")
    assert cli.run(["flow", "--config", str(conf), "--dump-config"]) == cli.EXIT_USAGE


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["flow", "--no-such-flag"]) == 1
    assert cli.run(["nonsense"]) == 1
    assert cli.run(["flow", "--gamma", "abc"]) == 1
    err = capsys.readouterr().err
    assert "--gamma" in err


def test_usage_error_writes_nothing(tmp_path):
    img = tmp_path / "a.png"
    cli.write_image(img, np.zeros((20, 20)))
    out = tmp_path / "w.flo"
    rc = cli.run(["flow", "--frame1", str(img), "--frame2", str(img), "--out", str(out), "--gamma", "-1"])
    assert rc == 1 and not out.exists()
    rc = cli.run(["bench-gen", "--out-dir", str(tmp_path / "b"), "--noise", "speckle:0.1"])
    assert rc == 1 and not (tmp_path / "b").exists()
    rc = cli.run(["viz", "--flo", str(out), "--out", str(tmp_path / "v.png"), "--max-mag", "0"])
    assert rc == 1 and not (tmp_path / "v.png").exists()
    rc = cli.run(["flow", "--frame1", str(img), "--frame2", str(img), "--out", str(out), "--viz", str(tmp_path / "v.bmp")])
    assert rc == 1 and not out.exists()


def test_data_errors_exit_two(tmp_path, capsys):
    out = tmp_path / "w.flo"
    assert cli.run(["flow", "--frame1", str(tmp_path / "none.png"), "--frame2", "x", "--out", str(out)]) == 2
    assert "--frame1" in capsys.readouterr().err
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"garbage!")
    assert cli.run(["viz", "--flo", str(bad), "--out", str(tmp_path / "v.png")]) == 2
    assert "bad.flo" in capsys.readouterr().err
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    cli.write_image(a, np.zeros((20, 20)))
    cli.write_image(b, np.zeros((20, 24)))
    assert cli.run(["flow", "--frame1", str(a), "--frame2", str(b), "--out", str(out)]) == 2
    assert not out.exists()


def test_numerical_failure_exit_three(tmp_path, monkeypatch):
    img = tmp_path / "a.png"
    cli.write_image(img, texture((24, 24), np.random.default_rng(0)))

    def boom(*args, **kwargs):
        raise NumericalBreakdownError("non-finite residual")

    monkeypatch.setattr(cli, "estimate_flow", boom)
    rc = cli.run(["flow", "--frame1", str(img), "--frame2", str(img), "--out", str(tmp_path / "w.flo")])
    assert rc == 3


def test_bad_thread_variable(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.run(["viz", "--flo", "x", "--out", "y"]) == 1


def test_flow_identical_frames(tmp_path):
    img = tmp_path / "a.png"
    cli.write_image(img, texture((40, 40), np.random.default_rng(1)))
    out = tmp_path / "w.flo"
    diag = tmp_path / "d.txt"
    viz = tmp_path / "w.png"
    rc = cli.run(["flow", "--frame1", str(img), "--frame2", str(img), "--out", str(out), "--deblur", "off", "--diag", str(diag), "--viz", str(viz)])
    assert rc == 0
    w = cli.read_flo(out)
    assert np.mean(np.hypot(w[..., 0], w[..., 1])) <= 0.05
    lines = diag.read_text().splitlines()
    assert lines[-1].startswith("level=") and "size=40x40" in lines[-1]
    assert viz.exists()


def test_deblur_command(tmp_path):
    img = tmp_path / "a.png"
    cli.write_image(img, texture((32, 32), np.random.default_rng(2)))
    rc = cli.run(["deblur", "--input", str(img), "--out-latent", str(tmp_path / "l.png"), "--out-kernel", str(tmp_path / "k.txt"), "--kernel-side", "7", "--iterations", "2"])
    assert rc == 0
    assert cli.read_kernel(tmp_path / "k.txt").shape == (7, 7)
    assert cli.read_image(tmp_path / "l.png").shape == (32, 32)


def run_bench(tmp_path, name, threads, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, str(threads))
    d = tmp_path / name
    assert cli.run(["bench-gen", "--out-dir", str(d), "--cases", "5", "--seed", "3", "--size", "32", "--noise", "gaussian:0.01"]) == 0
    assert cli.run(["bench-eval", "--dir", str(d), "--timing", "off", "--kernel-side", "9"]) == 0
    return d


def test_bench_deterministic(tmp_path, monkeypatch, capsys):
    a = run_bench(tmp_path, "a", 1, monkeypatch)
    b = run_bench(tmp_path, "b", 2, monkeypatch)
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert len(names) == 5 * len(cli.CASE_FILES) + 1
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    report = (a / "report.txt").read_text().splitlines()
    assert report[0] == "# case_id aee aae runtime_s"
    assert [line.split()[0] for line in report[1:]] == [f"case{i:03d}" for i in range(5)] + ["mean"]
    manifest = cli.read_manifest(a / "case000" / "case.txt")
    assert manifest["noise_kind"] == "gaussian" and "k1" in manifest and "seed" in manifest
    _, case = cli.read_case(a / "case000")
    assert case.blurred1.shape == (32, 32)


def test_bench_eval_figures(tmp_path):
    d = tmp_path / "b"
    assert cli.run(["bench-gen", "--out-dir", str(d), "--cases", "1", "--size", "24"]) == 0
    figs = tmp_path / "figs"
    assert cli.run(["bench-eval", "--dir", str(d), "--deblur", "off", "--figures", str(figs)]) == 0
    assert (figs / "metrics.png").exists() and (figs / "case000.png").exists()


def test_bench_eval_missing_dir(tmp_path):
    assert cli.run(["bench-eval", "--dir", str(tmp_path / "nope")]) == 2


def test_train_command(tmp_path):
    d = tmp_path / "b"
    assert cli.run(["bench-gen", "--out-dir", str(d), "--cases", "1", "--size", "24", "--kernel-side", "5"]) == 0
    out = tmp_path / "net.lmof"
    rc = cli.run(["train", "--data", str(d), "--stages", "1", "--steps", "1", "--kernel-side", "5", "--out", str(out)])
    assert rc == 0
    net = cli.read_params(out)
    assert net.iterations == 1
    rc = cli.run(["flow", "--frame1", str(d / "case000" / "blurred1.png"), "--frame2", str(d / "case000" / "blurred2.png"),
                  "--params", str(out), "--iterations", "1", "--kernel-side", "5", "--out", str(tmp_path / "w.flo")])
    assert rc == 0


def test_viz_command(tmp_path):
    flo = tmp_path / "w.flo"
    cli.write_flo(flo, np.ones((6, 7, 2)))
    assert cli.run(["viz", "--flo", str(flo), "--out", str(tmp_path / "v.png")]) == 0
    back = cli.read_image(tmp_path / "v.png")
    assert back.shape == (6, 7, 3)
