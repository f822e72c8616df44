"""Command-line interface: ``splineflow {train,sample,density,check}``.

Exit codes: 0 ok, 2 usage/config error, 3 numerical failure during training,
4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import data as datasets
from .errors import ConfigError, InvalidParameter, NumericalError, ParseError
from .training import TrainConfig, train
from .transforms import FlowSpec, build_flow, load_flow, save_flow

log = logging.getLogger("splineflow")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4
DATASETS = ("checkerboard", "mixture", "grid", "csv")


@dataclass
class RunConfig:
    # data
    dataset: str = "checkerboard"
    data_path: str = ""
    standardize: bool = True
    n_train: int = 100_000
    # architecture
    flow: str = "coupling"
    transform: str = "rq-spline"
    flow_steps: int = 10
    bins: int = 8
    tail_bound: float = 3.0
    hidden: int = 64
    blocks: int = 2
    dropout: float = 0.0
    final_linear: bool = False
    split_index: int = 0
    # optimisation
    batch_size: int = 256
    train_steps: int = 5000
    lr: float = 5e-4
    clip: float = 5.0
    clip_mode: str = "value"
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 250
    checkpoint_every: int = 1000
    out_dir: str = ""

    def flow_spec(self, features) -> FlowSpec:
        return FlowSpec(
            features=features,
            flow=self.flow,
            transform=self.transform,
            steps=self.flow_steps,
            num_bins=self.bins,
            tail_bound=self.tail_bound,
            hidden=self.hidden,
            blocks=self.blocks,
            dropout=self.dropout,
            final_linear=self.final_linear,
            split_index=self.split_index or None,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.train_steps,
            lr=self.lr,
            clip=self.clip,
            clip_mode=self.clip_mode,
            seed=self.seed,
            val_fraction=self.val_fraction,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
        )

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _convert(name, kind, text):
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from None
    return text


def parse_config(text, source="<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are fatal."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, types[key], value)
    cfg = RunConfig(**values)
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got {cfg.dataset!r}")
    if cfg.dataset == "csv" and not cfg.data_path:
        raise ConfigError("dataset = csv requires data_path")
    if cfg.n_train < 2:
        raise ConfigError("n_train must be at least 2")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def make_dataset(cfg: RunConfig):
    if cfg.dataset == "checkerboard":
        return datasets.gen_checkerboard(cfg.n_train, cfg.seed)
    if cfg.dataset == "mixture":
        return datasets.gen_gaussian_mixture(cfg.n_train, datasets.FOUR_MODE_CENTERS, 0.5, cfg.seed)
    if cfg.dataset == "grid":
        return datasets.gen_grid_gaussians(cfg.n_train, cfg.seed)
    ds, _ = datasets.load_csv(cfg.data_path, cfg.standardize)
    return ds


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir")
    cfg.out_dir = out
    ds = make_dataset(cfg)
    spec = cfg.flow_spec(ds.dim)
    try:
        spec.validate()
        tcfg = cfg.train_config()
        tcfg.validate()
    except InvalidParameter as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dump())
    flow = build_flow(spec, seed=cfg.seed)
    result = train(flow, ds.data, tcfg, out_dir=out)
    if cfg.train_steps == 0:
        save_flow(flow, os.path.join(out, "checkpoint.npz"), {"step": 0})
    print(f"trained {cfg.train_steps} steps; final val NLL {result.final_val_nll:.4f}")
    return EXIT_OK


def _parse_grid(text):
    try:
        parts = [p.strip() for p in text.split(",")]
        xmin, xmax, ymin, ymax = (float(p) for p in parts[:4])
        res = int(parts[4])
    except (ValueError, IndexError):
        raise ConfigError(f"--grid must be xmin,xmax,ymin,ymax,resolution; got {text!r}") from None
    if len(parts) != 5 or res < 1 or not (xmin < xmax and ymin < ymax):
        raise ConfigError(f"invalid grid {text!r}")
    return xmin, xmax, ymin, ymax, res


def grid_log_density(flow, grid):
    """Evaluate ``flow`` at cell centres; returns ``(xs, ys, log_prob[res_y, res_x])``."""
    xmin, xmax, ymin, ymax, res = grid
    xs = xmin + (np.arange(res) + 0.5) * (xmax - xmin) / res
    ys = ymin + (np.arange(res) + 0.5) * (ymax - ymin) / res
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    lp = np.concatenate([flow.log_prob(pts[i : i + 8192]) for i in range(0, len(pts), 8192)])
    return xs, ys, lp.reshape(res, res)


def write_pgm(path, image):
    """Plain (P2) 8-bit PGM; ``image`` rows are written top to bottom."""
    h, w = image.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in image:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def _load_checkpoint(path):
    if not path:
        raise ConfigError("--checkpoint is required")
    flow, _ = load_flow(path)
    return flow


def _out_dir(args):
    if not args.out:
        raise ConfigError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_density(args) -> int:
    flow = _load_checkpoint(args.checkpoint)
    if flow.features != 2:
        raise ConfigError(f"density grids need a 2D flow, checkpoint has D={flow.features}")
    grid = _parse_grid(args.grid or "-3,3,-3,3,256")
    out = _out_dir(args)
    xs, ys, lp = grid_log_density(flow, grid)
    with open(os.path.join(out, "density.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "log_prob"])
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(lp[j, i]))])
    dens = np.exp(lp - lp.max())
    write_pgm(os.path.join(out, "density.pgm"), np.rint(255 * dens[::-1]).astype(int))
    print(f"wrote density grid {grid[4]}x{grid[4]} to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n is None or args.n <= 0:
        raise ConfigError("--n must be a positive integer")
    flow = _load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    samples = flow.sample(args.n, args.seed if args.seed is not None else 0)
    with open(os.path.join(out, "samples.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(flow.features)])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def verify_flow(flow, n=1000, seed=0, n_jacobian=20, h=1e-6):
    """Round-trip and log-det diagnostics; returns a dict of worst-case figures."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, flow.features))
    x, ld_fwd = (t.value for t in flow.forward(u))
    u_back, ld_inv = (t.value for t in flow.inverse(x))
    err_u = np.max(np.abs(u_back - u), axis=1)
    x_back = flow.forward(u_back)[0].value
    err_x = np.max(np.abs(x_back - x), axis=1)
    err = np.maximum(err_u, err_x)
    worst = int(np.argmax(err))

    ld_err = 0.0
    for i in range(min(n_jacobian, n)):
        jac = np.empty((flow.features, flow.features))
        for j in range(flow.features):
            e = np.zeros((2, flow.features))
            e[0, j], e[1, j] = h, -h
            out = flow.forward(u[i] + e)[0].value
            jac[:, j] = (out[0] - out[1]) / (2 * h)
        ld_err = max(ld_err, abs(np.linalg.slogdet(jac)[1] - ld_fwd[i]))
    return {
        "max_roundtrip_error": float(err[worst]),
        "worst_index": worst,
        "worst_point": u[worst],
        "max_logdet_symmetry_error": float(np.max(np.abs(ld_fwd + ld_inv))),
        "max_logdet_fd_error": float(ld_err),
    }


def cmd_check(args) -> int:
    flow = _load_checkpoint(args.checkpoint)
    n = args.n if args.n is not None else 1000
    if n <= 0:
        raise ConfigError("--n must be a positive integer")
    report = verify_flow(flow, n, args.seed if args.seed is not None else 0)
    print(f"max round-trip error      {report['max_roundtrip_error']:.3e}")
    print(f"max log-det symmetry err  {report['max_logdet_symmetry_error']:.3e}")
    print(f"max log-det vs FD error   {report['max_logdet_fd_error']:.3e}")
    if not report["max_roundtrip_error"] < 1e-8:
        print(
            f"FAIL: round-trip error {report['max_roundtrip_error']:.3e} >= 1e-8 at "
            f"noise point {report['worst_point'].tolist()}"
        )
        return EXIT_VERIFY
    print("OK")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "density": cmd_density, "check": cmd_check}


def build_parser():
    parser = argparse.ArgumentParser(prog="splineflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--grid")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    # a grid such as "-3,3,-3,3,64" would otherwise be read as an option
    args_in = iter(sys.argv[1:] if argv is None else argv)
    argv = [f"--grid={next(args_in, '')}" if a == "--grid" else a for a in args_in]
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "train" and not args.config:
        print("error: train needs --config", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError, InvalidParameter) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
