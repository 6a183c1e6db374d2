"""Experiment loop, config plumbing, oracle suite, and plot tests."""

import time
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packetlab import attacks, data, nn, runner, synthdata, uncertainty
from packetlab.cli import main as cli_main


@pytest.fixture(scope="module")
def digits_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    synthdata.make_digits_dataset(out, n_train=400, n_test=120, seed=0)
    return out


def _small_config(digits_dir, outdir, **kw):
    base = dict(
        data_dir=str(digits_dir), model="mlp2", epochs=1, train_size=256,
        test_size=120, eval_subset=80, n_dims=3, outdir=str(outdir), seed=2,
        train=nn.TrainConfig(lr=0.05, batch_size=64),
        attack=attacks.AttackConfig(kind="pgd", epsilon=0.1, alpha=0.025,
                                    steps=2),
        quad=uncertainty.QuadratureConfig(n=256))
    base.update(kw)
    return runner.ExperimentConfig(**base)


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        runner.ExperimentConfig(dataset="imagenet")
    with pytest.raises(ValueError):
        runner.ExperimentConfig(mode="latent")
    with pytest.raises(ValueError):
        runner.ExperimentConfig(epochs=10, stride=3)
    with pytest.raises(ValueError):
        runner.ExperimentConfig(label_mode="argmax")


def test_smoke_experiment(digits_dir, tmp_path):
    cfg = _small_config(digits_dir, tmp_path / "run")
    records = runner.run_experiment(cfg)
    assert len(records) == 1
    rec = records[0]
    assert 0.0 <= rec.clean_acc <= 1.0
    assert 0.0 <= rec.robust_acc <= 1.0
    for value in (rec.train_loss, rec.dx, rec.dp, rec.dx_se, rec.dp_se):
        assert np.isfinite(value)
    csv_path = tmp_path / "run" / "results.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == runner.CSV_HEADER
    assert len(lines) == 2
    model = nn.load_model(tmp_path / "run" / "model.upkt")
    assert model.arch == "mlp2"
    manifest = (tmp_path / "run" / "run-manifest.txt").read_text()
    assert "seed = 2" in manifest


def test_experiment_is_deterministic_apart_from_timing(digits_dir, tmp_path):
    rows = []
    for name in ("a", "b"):
        cfg = _small_config(digits_dir, tmp_path / name)
        runner.run_experiment(cfg)
        text = (tmp_path / name / "results.csv").read_text().splitlines()
        # drop the wall-clock column, the only nondeterministic field
        rows.append([line.rsplit(",", 1)[0] for line in text])
    assert rows[0] == rows[1]


def test_feature_mode_smoke(digits_dir, tmp_path):
    cfg = _small_config(digits_dir, tmp_path / "feat", mode="feature")
    records = runner.run_feature_mode(cfg)
    assert len(records) == 1
    manifest = (tmp_path / "feat" / "run-manifest.txt").read_text()
    assert "resolved.feature_dim = 128" in manifest


def test_identity_extractor_collapses_to_pixel_measurement(digits_dir):
    """With a split at layer 0 the 'features' are the pixels themselves, so
    feature-space measurement must reproduce pixel-space measurement."""
    ds = data.subset(data.load_mnist(digits_dir, "train"), 128, seed=0)
    model = nn.build_model("mlp2", seed=0)
    nn.train(model, ds, nn.TrainConfig(lr=0.05, epochs=2, seed=0))
    model.split_index = 0
    ext, head = nn.split(model)
    x_base = data.compute_baseline(ds).x_base
    quad = uncertainty.QuadratureConfig(n=512, seed=7)
    dims = [10, 200, 405]
    pixel_stats, _ = uncertainty.measure_dimensions(
        model, 8, x_base, dims, quad, domain=(0.0, 1.0))
    feat_stats, _ = uncertainty.measure_dimensions(
        head, 8, x_base.reshape(-1), dims, quad, domain=(0.0, 1.0))
    for a, b in zip(pixel_stats, feat_stats):
        assert a.sx == pytest.approx(b.sx, abs=3 * (a.se_sx + b.se_sx) + 1e-12)
        assert a.sp == pytest.approx(b.sp, abs=3 * (a.se_sp + b.se_sp) + 1e-12)


def test_verify_oracles_passes_quickly():
    t0 = time.perf_counter()
    ok, lines = runner.verify_oracles()
    assert time.perf_counter() - t0 < 60
    assert ok
    assert all(line.startswith("PASS") for line in lines)
    assert all("measured=" in line and "expected=" in line and "tol=" in line
               for line in lines)


def test_verify_oracles_catches_sign_bug(monkeypatch):
    from packetlab import packet

    original = packet.AnalyticPacket.dpsi

    def flipped(self, t):
        return -original(self, t)

    monkeypatch.setattr(packet.AnalyticPacket, "dpsi", flipped)
    ok, lines = runner.verify_oracles()
    assert not ok
    assert any(line.startswith("FAIL") for line in lines)


def _write_csv(path, rows):
    lines = [runner.CSV_HEADER]
    for k, row in enumerate(rows, 1):
        lines.append(f"{k}," + ",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def test_emit_plots_produces_valid_svg(tmp_path):
    csv_path = tmp_path / "results.csv"
    rng = np.random.default_rng(0)
    _write_csv(csv_path, [[0.5, 0.9, 0.4, 1.0 + 0.01 * k, 5.0 - 0.1 * k,
                           0.01, 0.1, 1.0] for k in range(10)])
    acc, unc = runner.emit_plots(csv_path, outdir=tmp_path)
    for path in (acc, unc):
        assert path.exists()
        ET.parse(path)          # well-formed XML


def test_emit_plots_rejects_bad_input(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError):
        runner.emit_plots(empty)
    headers_only = tmp_path / "h.csv"
    headers_only.write_text(runner.CSV_HEADER + "\n")
    with pytest.raises(ValueError):
        runner.emit_plots(headers_only)
    wrong = tmp_path / "w.csv"
    wrong.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        runner.emit_plots(wrong)
    assert not (tmp_path / "accuracy.svg").exists()


def test_padded_limits_cover_data_with_margin():
    lo, hi = runner.padded_limits([0.2, 0.8])
    assert lo == pytest.approx(0.2 - 0.05 * 0.6)
    assert hi == pytest.approx(0.8 + 0.05 * 0.6)
    lo, hi = runner.padded_limits([3.0, 3.0])
    assert lo < 3.0 < hi


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(min_value=-1e6, max_value=1e6),
                       min_size=1, max_size=20))
def test_padded_limits_always_cover_the_data(values):
    lo, hi = runner.padded_limits(values)
    assert lo <= min(values) and hi >= max(values)
    assert lo < hi


def test_config_file_round_trip(tmp_path):
    cfg = runner.ExperimentConfig(
        epochs=4, stride=2, n_dims=5, seed=11, outdir="x",
        attack=attacks.AttackConfig(kind="fgsm", epsilon=8 / 255, signed=False))
    mapping = runner.config_to_mapping(cfg)
    text = "\n".join(f"{k} = {v}" for k, v in mapping.items())
    path = tmp_path / "run.cfg"
    path.write_text(text + "\n# trailing comment\n")
    parsed = runner.parse_config_file(path)
    rebuilt = runner.config_from_mapping(parsed)
    assert rebuilt == cfg


def test_config_unknown_key_rejected():
    with pytest.raises(KeyError):
        runner.config_from_mapping({"learning_rate": "0.1"})
    with pytest.raises(KeyError):
        runner.config_from_mapping({"attack.norm": "l2"})


def test_config_bool_and_alias():
    cfg = runner.config_from_mapping({"attack.signed": "false",
                                      "attack.eps": "0.03"})
    assert cfg.attack.signed is False
    assert cfg.attack.epsilon == pytest.approx(0.03)
    with pytest.raises(ValueError):
        runner.config_from_mapping({"attack.signed": "maybe"})


def test_config_file_syntax_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("this line has no equals sign\n")
    with pytest.raises(ValueError):
        runner.parse_config_file(path)


def test_cli_verify_oracles_and_plot(tmp_path, capsys):
    assert cli_main(["verify-oracles"]) == 0
    out = capsys.readouterr().out
    assert "all oracles passed" in out
    csv_path = tmp_path / "results.csv"
    _write_csv(csv_path, [[0.5, 0.9, 0.4, 1.0, 5.0, 0.01, 0.1, 1.0]
                          for _ in range(3)])
    assert cli_main(["plot", str(csv_path), "--outdir", str(tmp_path)]) == 0
    assert (tmp_path / "accuracy.svg").exists()


def test_cli_experiment(digits_dir, tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        f"data_dir = {digits_dir}\nmodel = mlp2\nepochs = 1\n"
        "train_size = 200\ntest_size = 100\neval_subset = 60\nn_dims = 2\n"
        f"outdir = {tmp_path / 'out'}\nseed = 1\nquad.n = 200\n"
        "attack.steps = 2\n")
    assert cli_main(["experiment", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "results.csv").exists()
