import csv
import subprocess
import sys

import numpy as np
import pytest

from splineflow.cli import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY,
    RunConfig,
    grid_log_density,
    main,
    parse_config,
    verify_flow,
)
from splineflow.data import checkerboard_allowed
from splineflow.errors import ConfigError
from splineflow.transforms import FlowSpec, build_flow, load_flow, save_flow

SMALL = """\
# tiny run
dataset = mixture
n_train = 2000
flow_steps = 1
bins = 4
hidden = 8
blocks = 1
train_steps = 20
batch_size = 32
eval_every = 5
checkpoint_every = 10
seed = 3
"""


def write_config(tmp_path, text=SMALL, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def identity_checkpoint(tmp_path, features=2, flow="coupling"):
    path = tmp_path / "identity.npz"
    save_flow(build_flow(FlowSpec(features=features, flow=flow, steps=2, hidden=8), seed=0), path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = out / "run.cfg"
    cfg.write_text(SMALL)
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


class TestConfig:
    def test_defaults_documented(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.flow_steps == 10 and cfg.bins == 8 and cfg.tail_bound == 3.0
        assert cfg.train_steps == 5000 and cfg.batch_size == 256 and cfg.lr == 5e-4

    def test_types_and_comments(self):
        cfg = parse_config("lr = 1e-3  # faster\nfinal_linear = yes\nbins=16\ndataset = grid\n")
        assert cfg.lr == 1e-3 and cfg.final_linear is True and cfg.bins == 16 and cfg.dataset == "grid"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="hidden_units"):
            parse_config("hidden_units = 5\n")

    @pytest.mark.parametrize(
        "text", ["bins = many", "final_linear = maybe", "no equals sign", "dataset = mnist", "dataset = csv"]
    )
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_dump_round_trip(self):
        cfg = parse_config("flow = autoregressive\nlr = 0.00123\nfinal_linear = true\nout_dir = /x y\n")
        assert parse_config(cfg.dump()) == cfg


class TestTrainCommand:
    def test_artifacts(self, trained):
        assert (trained / "checkpoint.npz").exists()
        assert (trained / "best.npz").exists()
        assert (trained / "config.resolved").exists()
        with open(trained / "metrics.csv") as fh:
            assert len(list(csv.reader(fh))) == 21

    def test_resolved_config_reproduces_run(self, trained, tmp_path):
        resolved = trained / "config.resolved"
        assert main(["train", "--config", str(resolved), "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_seed_flag_changes_run(self, trained, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "4"]) == EXIT_OK
        assert (tmp_path / "o" / "metrics.csv").read_bytes() != (trained / "metrics.csv").read_bytes()

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMALL + "colour = blue\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE
        assert "colour" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE
        assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_output_dir(self, tmp_path):
        assert main(["train", "--config", write_config(tmp_path)]) == EXIT_USAGE

    def test_invalid_architecture(self, tmp_path):
        cfg = write_config(tmp_path, SMALL + "dropout = 1.5\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE

    def test_numerical_failure(self, tmp_path):
        data = tmp_path / "bad.csv"
        rows = np.random.default_rng(0).normal(size=(200, 2))
        rows[::2] *= 1e200
        np.savetxt(data, rows, delimiter=",")
        cfg = write_config(tmp_path, SMALL.replace("dataset = mixture", f"dataset = csv\ndata_path = {data}\nstandardize = false"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL

    def test_csv_dataset(self, tmp_path):
        data = tmp_path / "d.csv"
        np.savetxt(data, np.random.default_rng(1).normal(size=(300, 3)) * 5, delimiter=",", header="a,b,c", comments="")
        cfg = write_config(tmp_path, SMALL.replace("dataset = mixture", f"dataset = csv\ndata_path = {data}"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
        flow, _ = load_flow(tmp_path / "o" / "checkpoint.npz")
        assert flow.features == 3

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "splineflow", "train", "--config", write_config(tmp_path), "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr


class TestSampleCommand:
    def test_rows_and_determinism(self, trained, tmp_path):
        ckpt = str(trained / "checkpoint.npz")
        for name in ("a", "b"):
            assert main(["sample", "--checkpoint", ckpt, "--n", "50", "--seed", "9", "--out", str(tmp_path / name)]) == EXIT_OK
        a = (tmp_path / "a" / "samples.csv").read_bytes()
        assert a == (tmp_path / "b" / "samples.csv").read_bytes()
        rows = list(csv.reader(a.decode().splitlines()))
        assert rows[0] == ["x1", "x2"] and len(rows) == 51

    @pytest.mark.parametrize("n", ["0", "-3"])
    def test_bad_n(self, trained, tmp_path, n):
        assert main(["sample", "--checkpoint", str(trained / "checkpoint.npz"), "--n", n, "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_n(self, trained, tmp_path):
        assert main(["sample", "--checkpoint", str(trained / "checkpoint.npz"), "--out", str(tmp_path)]) == EXIT_USAGE


class TestDensityCommand:
    def test_identity_flow_grid(self, tmp_path):
        ckpt = identity_checkpoint(tmp_path)
        assert main(["density", "--checkpoint", ckpt, "--grid", "-3,3,-3,3,64", "--out", str(tmp_path)]) == EXIT_OK
        with open(tmp_path / "density.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y", "log_prob"] and len(rows) == 64 * 64 + 1
        values = np.array(rows[1:], dtype=float)
        peak = values[np.argmax(values[:, 2])]
        assert np.all(np.abs(peak[:2]) <= 3.0 / 64 + 1e-12)

    def test_pgm_dimensions(self, tmp_path):
        ckpt = identity_checkpoint(tmp_path)
        assert main(["density", "--checkpoint", ckpt, "--grid", "-2,2,-1,1,17", "--out", str(tmp_path)]) == EXIT_OK
        tokens = (tmp_path / "density.pgm").read_text().split()
        assert tokens[:4] == ["P2", "17", "17", "255"]
        pixels = np.array(tokens[4:], dtype=int)
        assert pixels.size == 17 * 17 and pixels.max() == 255 and pixels.min() >= 0

    def test_window_mass(self, tmp_path):
        flow, _ = load_flow(identity_checkpoint(tmp_path))
        _, _, lp = grid_log_density(flow, (-6, 6, -6, 6, 200))
        mass = np.exp(lp).sum() * (12 / 200) ** 2
        assert 0.98 < mass < 1.0

    def test_requires_two_dims(self, tmp_path):
        ckpt = identity_checkpoint(tmp_path, features=3)
        assert main(["density", "--checkpoint", ckpt, "--out", str(tmp_path)]) == EXIT_USAGE

    @pytest.mark.parametrize("grid", ["1,2,3", "1,0,0,1,10", "-1,1,-1,1,0", "a,b,c,d,e"])
    def test_bad_grid(self, tmp_path, grid):
        ckpt = identity_checkpoint(tmp_path)
        assert main(["density", "--checkpoint", ckpt, "--grid", grid, "--out", str(tmp_path)]) == EXIT_USAGE


class TestCheckCommand:
    @pytest.mark.parametrize("flow", ["coupling", "autoregressive"])
    def test_identity_flow(self, tmp_path, flow):
        report = verify_flow(load_flow(identity_checkpoint(tmp_path, flow=flow))[0], n=200)
        assert report["max_roundtrip_error"] < 1e-14
        assert report["max_logdet_fd_error"] < 1e-8

    def test_trained_flow_passes(self, trained, capsys):
        assert main(["check", "--checkpoint", str(trained / "checkpoint.npz"), "--n", "500"]) == EXIT_OK
        assert "OK" in capsys.readouterr().out

    def test_corrupted_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes((trained / "checkpoint.npz").read_bytes()[:100])
        assert main(["check", "--checkpoint", str(bad)]) == EXIT_USAGE
        assert main(["check"]) == EXIT_USAGE

    def test_verification_failure(self, tmp_path, monkeypatch, capsys):
        import splineflow.cli as cli

        def broken(flow, n, seed):
            return {
                "max_roundtrip_error": 1e-3,
                "worst_index": 7,
                "worst_point": np.array([0.5, -0.25]),
                "max_logdet_symmetry_error": 0.0,
                "max_logdet_fd_error": 0.0,
            }

        monkeypatch.setattr(cli, "verify_flow", broken)
        assert main(["check", "--checkpoint", identity_checkpoint(tmp_path)]) == EXIT_VERIFY
        assert "[0.5, -0.25]" in capsys.readouterr().out


class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_subcommand(self):
        assert main(["fit"]) == EXIT_USAGE
