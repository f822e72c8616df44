"""Maximum-likelihood training: NLL objective, Adam, cosine annealing, clipping."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidParameter, NumericalError
from .transforms import Flow, save_flow

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "lr", "grad_norm", "val_nll")


@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 5000
    lr: float = 5e-4
    clip: float = 5.0
    clip_mode: str = "value"
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 250
    checkpoint_every: int = 1000

    def validate(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0 or self.clip <= 0:
            raise InvalidParameter("batch_size, lr and clip must be positive, steps >= 0")
        if self.clip_mode not in ("value", "norm"):
            raise InvalidParameter(f"clip_mode must be 'value' or 'norm', got {self.clip_mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidParameter("val_fraction must lie in [0, 1)")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise InvalidParameter("eval_every and checkpoint_every must be positive")


@dataclass
class Schedule:
    lr0: float
    total_steps: int


def cosine_lr(schedule: Schedule, t) -> float:
    """``lr0 * (1 + cos(pi t / T)) / 2``, and 0 past the end."""
    if t >= schedule.total_steps:
        return 0.0
    return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        values = [np.asarray(getattr(p, "value", p)) for p in params]
        return cls([np.zeros_like(v) for v in values], [np.zeros_like(v) for v in values], **kw)


def adam_step(state: OptimizerState, params, grads, lr):
    """One bias-corrected Adam update; returns the new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidParameter("parameter, gradient and state lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, bound, mode="value"):
    """Clamp each component to ``[-bound, bound]``, or rescale to global norm ``bound``."""
    if bound <= 0:
        raise InvalidParameter("clip bound must be positive")
    if mode == "value":
        return [np.clip(g, -bound, bound) for g in grads]
    norm = global_norm(grads)
    if norm <= bound:
        return list(grads)
    return [g * (bound / norm) for g in grads]


def _check_log_prob(log_prob):
    bad = ~np.isfinite(log_prob)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite log-probability at batch index {idx}", index=idx)


def nll_tensor(flow: Flow, batch):
    """Mean negative log-likelihood as a tape tensor."""
    # overflow is detected explicitly below, with the offending row
    with np.errstate(over="ignore", invalid="ignore"):
        log_prob = flow.log_prob(ad.Tensor(batch))
    _check_log_prob(log_prob.value)
    return ad.mul(ad.mean(log_prob), -1.0)


def nll_loss(flow: Flow, batch, chunk=4096) -> float:
    """Mean of ``-log p(x)`` over the rows of ``batch``."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    total = 0.0
    for start in range(0, batch.shape[0], chunk):
        with np.errstate(over="ignore", invalid="ignore"):
            lp = flow.log_prob(batch[start : start + chunk])
        try:
            _check_log_prob(lp)
        except NumericalError as exc:
            idx = start + exc.index
            raise NumericalError(f"non-finite log-probability at row {idx}", index=idx) from None
        total -= float(np.sum(lp))
    return total / batch.shape[0]


def split_validation(data, fraction, rng):
    n = data.shape[0]
    n_val = int(round(n * fraction))
    if n_val == 0:
        return data, None
    order = rng.permutation(n)
    return data[order[n_val:]], data[order[:n_val]]


@dataclass
class TrainResult:
    flow: Flow
    metrics: list = field(default_factory=list)
    best_val_nll: float = math.inf
    final_val_nll: float = math.nan


class _MetricsWriter:
    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8") if path else None
        if self.fh:
            self.writer = csv.writer(self.fh, lineterminator="\n")
            self.writer.writerow(METRIC_COLUMNS)

    def write(self, row):
        if self.fh:
            self.writer.writerow(_format_row(row))
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _format_row(row):
    out = []
    for key in METRIC_COLUMNS:
        value = row[key]
        if value is None:
            out.append("")
        elif isinstance(value, float):
            out.append(repr(value))
        else:
            out.append(str(value))
    return out


def train(flow: Flow, data, config: TrainConfig, val_data=None, out_dir=None) -> TrainResult:
    """Fit ``flow`` to the rows of ``data`` by maximum likelihood.

    When ``out_dir`` is given, ``metrics.csv``, ``checkpoint.npz`` (every
    ``checkpoint_every`` steps and at the end) and ``best.npz`` (lowest
    validation NLL) are written there.  On a numerical failure the
    parameters from the last finite step are saved to ``checkpoint.npz``
    before :class:`NumericalError` propagates.
    """
    config.validate()
    data = np.atleast_2d(np.asarray(getattr(data, "data", data), dtype=np.float64))
    if data.shape[1] != flow.features:
        raise InvalidParameter(f"data has {data.shape[1]} columns, flow expects {flow.features}")
    rng = np.random.default_rng(config.seed)
    if val_data is None:
        data, val_data = split_validation(data, config.val_fraction, rng)
    result = TrainResult(flow)
    if config.steps == 0:
        return result

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    params = flow.parameters()
    state = OptimizerState.for_params(params)
    schedule = Schedule(config.lr, config.steps)
    ckpt = os.path.join(out_dir, "checkpoint.npz") if out_dir else None
    best_path = os.path.join(out_dir, "best.npz") if out_dir else None
    writer = _MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    try:
        for step in range(config.steps):
            lr = cosine_lr(schedule, step)
            batch = data[rng.integers(0, data.shape[0], config.batch_size)]
            flow.train(True, rng)
            try:
                with ad.Tape() as tape:
                    loss = nll_tensor(flow, batch)
                grads = tape.backward(loss, params)
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise NumericalError(f"non-finite gradient at step {step}")
            except (NumericalError, InvalidParameter, FloatingPointError) as exc:
                flow.eval()
                if ckpt:
                    save_flow(flow, ckpt, {"step": step, "aborted": True})
                raise NumericalError(f"training aborted at step {step}: {exc}") from exc
            finally:
                flow.eval()

            norm = global_norm(grads)
            grads = clip_gradients(grads, config.clip, config.clip_mode)
            new_values = adam_step(state, [p.value for p in params], grads, lr)
            for p, v in zip(params, new_values):
                p.value = v

            last = step == config.steps - 1
            val_nll = None
            if val_data is not None and ((step + 1) % config.eval_every == 0 or last):
                val_nll = nll_loss(flow, val_data)
                if val_nll < result.best_val_nll:
                    result.best_val_nll = val_nll
                    if best_path:
                        save_flow(flow, best_path, {"step": step + 1, "val_nll": val_nll})
                result.final_val_nll = val_nll
            row = {
                "step": step,
                "loss": float(loss.value),
                "lr": lr,
                "grad_norm": norm,
                "val_nll": val_nll,
            }
            result.metrics.append(row)
            writer.write(row)
            if ckpt and ((step + 1) % config.checkpoint_every == 0 or last):
                save_flow(flow, ckpt, {"step": step + 1})
            if (step + 1) % 1000 == 0:
                log.info("step %d loss %.4f val %s", step + 1, row["loss"], val_nll)
    finally:
        writer.close()
    return result
