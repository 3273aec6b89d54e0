import numpy as np
import pytest
from PIL import Image

from nextframe import bench, cli
from nextframe.bench import check_run, parse_experiment, read_rows, run_experiment, timestep_sweep
from nextframe.model import ConfigError
from nextframe.training import TrainingDiverged

BASE = """
synthetic = moving_square
frames = 12
epochs = 2
timestep = 3
resolution = 8
timesteps = 3..4
"""

VARIANTS = """
[variant]
architecture = stack_lstm
units = 6,6,6

[variant]
architecture = cnn_lstm
units = 6,6
cnn_filters = 2
loss_kind = rmse

[variant]
architecture = conv_lstm
units = 2,2,2
"""


def write_config(tmp_path, text=BASE + VARIANTS):
    path = tmp_path / "exp.txt"
    path.write_text(text)
    return path


def test_parse_globals_become_defaults(tmp_path):
    exp = parse_experiment(BASE + VARIANTS, tmp_path)
    assert [v.architecture for v in exp.variants] == ["stack_lstm", "cnn_lstm", "conv_lstm"]
    assert all(v.epochs == 2 and v.resolution == 8 for v in exp.variants)
    assert exp.variants[1].loss_kind == "rmse" and exp.variants[0].loss_kind == "mae"
    assert exp.timesteps == (3, 4)
    assert exp.names[0] == "00_stack_lstm_r8_mae_t3"


@pytest.mark.parametrize("text, path", [
    (BASE + "\n[variant]\narchitecture = stack_lstm\n[variant]\narchitecture = conv_lstm\nepochs = 0\n",
     "variant[1].epochs"),
    (BASE + "\n[variant]\narchitecture = gru\n", "variant[0].architecture"),
    (BASE + "\n[variant]\narchitecture = stack_lstm\nbogus = 1\n", "variant[0].bogus"),
    (BASE + "\n[variant]\narchitecture = cnn_lstm\nunits = 4,4,4\n", "variant[0].units"),
    (BASE + "\n[variant]\narchitecture = stack_lstm\nlearning_rate = fast\n", "variant[0].learning_rate"),
    (BASE.replace("3..4", "4,3") + "\n[variant]\narchitecture = stack_lstm\n", "timesteps"),
    (BASE.replace("moving_square", "spiral") + "\n[variant]\narchitecture = stack_lstm\n", "synthetic"),
    (BASE, "variant"),
    (BASE + "\n[variants]\n", "[variants]"),
])
def test_config_errors_carry_field_path(tmp_path, text, path):
    with pytest.raises(ConfigError) as info:
        parse_experiment(text, tmp_path)
    assert info.value.field == path
    assert path in str(info.value)


def test_duplicate_variant_names(tmp_path):
    text = BASE + "\n[variant]\nname = a\narchitecture = stack_lstm\n[variant]\nname = a\narchitecture = stack_lstm\n"
    with pytest.raises(ConfigError, match="variant\\[1\\].name"):
        parse_experiment(text, tmp_path)


def test_run_check_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    first = run_experiment(cfg, tmp_path / "a")
    second = run_experiment(cfg, tmp_path / "b")
    assert first.failed == 0 and len(first.rows) == 3
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    assert check_run(tmp_path / "a") == []
    for row in read_rows(tmp_path / "a" / "summary.csv"):
        vdir = tmp_path / "a" / "variants" / row["variant"]
        assert len(read_rows(vdir / "loss_curve.csv")) == 2
        with open(vdir / "pred_000.pgm", "rb") as fh:
            assert fh.read(2) == b"P5"
    manifest = (tmp_path / "a" / "run_manifest.txt").read_text()
    assert "seed = 0" in manifest and "summary.csv" in manifest
    assert second.rows == first.rows


def test_check_detects_tampering(tmp_path):
    run_experiment(write_config(tmp_path), tmp_path / "run")
    run = tmp_path / "run"
    vdir = run / "variants" / "00_stack_lstm_r8_mae_t3"
    curve = (vdir / "loss_curve.csv").read_text().splitlines()
    curve[-1] = curve[-1].rsplit(",", 1)[0] + ",0.123"
    (vdir / "loss_curve.csv").write_text("\n".join(curve) + "\n")
    problems = check_run(run)
    assert any("checksum" in p for p in problems)
    assert any("last loss-curve row" in p for p in problems)


def test_check_detects_pgm_mismatch_even_with_fresh_manifest(tmp_path):
    run = tmp_path / "run"
    run_experiment(write_config(tmp_path), run)
    pgm = run / "variants" / "02_conv_lstm_r8_mae_t3" / "pred_000.pgm"
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(pgm, format="PPM")
    bench.write_manifest(run, parse_experiment(BASE + VARIANTS, tmp_path), "run", 0)
    problems = check_run(run)
    assert problems and all("pred_000.pgm" in p for p in problems)


def test_failed_variant_is_isolated(tmp_path, monkeypatch):
    real_fit = bench.fit

    def flaky_fit(m, train, valid, cfg, callback=None):
        if cfg.architecture == "cnn_lstm":
            if callback:
                callback(1, 0.5, 0.5)
            raise TrainingDiverged(2, float("nan"))
        return real_fit(m, train, valid, cfg, callback)

    monkeypatch.setattr(bench, "fit", flaky_fit)
    result = run_experiment(write_config(tmp_path), tmp_path / "run")
    assert result.failed == 1
    statuses = [r["status"] for r in read_rows(tmp_path / "run" / "summary.csv")]
    assert statuses[0] == "ok" and statuses[2] == "ok" and statuses[1].startswith("failed")
    assert check_run(tmp_path / "run") == []
    assert cli.main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "cli")]) == cli.EXIT_FAILED


def test_sweep_statistics(tmp_path):
    result = timestep_sweep(write_config(tmp_path), tmp_path / "sw")
    assert len(result.final) == 3 * 2
    assert check_run(tmp_path / "sw") == []
    name = "00_stack_lstm_r8_mae_t3"
    curves = [bench._read_curve(tmp_path / "sw" / "sweep" / name / f"t{t:02d}_loss_curve.csv") for t in (3, 4)]
    stats = read_rows(tmp_path / "sw" / "sweep" / name / "sweep_stats.csv")
    for e, row in enumerate(stats):
        train = [c[e][1] for c in curves]
        assert float(row["train_mean"]) == pytest.approx(np.mean(train), rel=1e-12)
        assert float(row["train_std"]) == pytest.approx(np.std(train), rel=1e-12, abs=1e-15)
        assert int(row["runs"]) == 2


def test_single_timestep_sweep_has_zero_std(tmp_path):
    text = BASE.replace("3..4", "3") + "\n[variant]\narchitecture = stack_lstm\nunits = 4,4,4\n"
    result = timestep_sweep(write_config(tmp_path, text), tmp_path / "sw")
    assert all(row["train_std"] == 0 and row["valid_std"] == 0 for row in next(iter(result.stats.values())))


def test_output_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(bench.OUTPUT_ENV, str(tmp_path / "env_out"))
    text = BASE + "\n[variant]\narchitecture = stack_lstm\nunits = 4,4,4\n"
    assert cli.main(["run", str(write_config(tmp_path, text))]) == cli.EXIT_OK
    assert (tmp_path / "env_out" / "summary.csv").exists()
    assert cli.main(["check", str(tmp_path / "env_out")]) == cli.EXIT_OK


def test_manifest_source_and_predict(tmp_path, capsys):
    frames = [np.zeros((10, 10), np.uint8) for _ in range(9)]
    for k, f in enumerate(frames):
        f[k:k + 2, 2:4] = 255
        Image.fromarray(f).save(tmp_path / f"img{k}.pgm", format="PPM")
    (tmp_path / "frames.txt").write_text("\n".join(f"img{k}.pgm" for k in range(9)) + "\n")
    text = "manifest = frames.txt\nepochs = 2\ntimestep = 3\nresolution = 8\n[variant]\narchitecture = conv_lstm\nunits = 2,2,2\n"
    cfg = write_config(tmp_path, text)
    assert cli.main(["--deterministic", "run", str(cfg), "--out", str(tmp_path / "run")]) == cli.EXIT_OK
    ckpt = tmp_path / "run" / "variants" / "00_conv_lstm_r8_mae_t3" / "checkpoint"
    assert cli.main(["predict", str(ckpt), str(tmp_path / "frames.txt"), "--out", str(tmp_path / "pred")]) == 0
    with Image.open(tmp_path / "pred" / "prediction.pgm") as img:
        assert img.size == (8, 8)


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, BASE + "\n[variant]\narchitecture = gru\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "variant[0].architecture" in capsys.readouterr().err
    missing = write_config(tmp_path, "manifest = nowhere.txt\n[variant]\narchitecture = stack_lstm\n")
    assert cli.main(["run", str(missing)]) == cli.EXIT_DATA
    short = write_config(tmp_path, BASE.replace("frames = 12", "frames = 3") + VARIANTS)
    assert cli.main(["run", str(short), "--out", str(tmp_path / "x")]) == cli.EXIT_DATA
    assert not (tmp_path / "x").exists()
    assert cli.main(["run", str(tmp_path / "absent.txt")]) == cli.EXIT_CONFIG
    assert cli.main(["check", str(tmp_path / "absent")]) == cli.EXIT_DATA
    assert cli.main(["predict", str(tmp_path / "absent"), str(tmp_path / "absent.txt")]) == cli.EXIT_DATA


def test_cli_gradcheck_smoke(capsys):
    assert cli.main(["gradcheck", "--instances", "2", "--e2e-instances", "1"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 12
