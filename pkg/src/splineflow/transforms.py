"""Invertible layers and their composition into a flow.

Every step maps ``forward`` in the sampling direction (noise to data) and
``inverse`` in the density direction, each returning ``(output, log_abs_det)``
with one log-determinant per batch row.  Steps operate on tape tensors so
that training can differentiate through them; the ``*_forward`` /
``*_inverse`` functions at the bottom of the module are array conveniences.
"""
from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import InvalidParameter, ParseError, ShapeError
from .nets import MaskedResidualMLP, Module, ResidualMLP
from .rq_spline import DEFAULT_TAIL_BOUND, param_length

TRANSFORM_KINDS = ("rq-spline", "affine")
FLOW_KINDS = ("coupling", "autoregressive")
LOG_2PI = math.log(2.0 * math.pi)


def params_per_dim(kind, num_bins):
    if kind == "rq-spline":
        return param_length(num_bins)
    if kind == "affine":
        return 2
    raise InvalidParameter(f"unknown transform kind {kind!r}")


def elementwise(x, theta, kind, tail_bound=DEFAULT_TAIL_BOUND, inverse=False):
    """Apply a monotone elementwise map to ``x`` with per-element ``theta``.

    Returns ``(output, log_abs_det)`` both shaped like ``x``.
    """
    x = ad.as_tensor(x)
    if kind == "rq-spline":
        return ad.rq_spline(x, theta, tail_bound, inverse=inverse)
    raw_scale, shift = theta[..., 0], theta[..., 1]
    ones = np.ones(x.shape)
    if inverse:
        out = ad.mul(ad.sub(x, shift), ad.exp(ad.mul(raw_scale, -1.0)))
        return out, ad.mul(ad.mul(raw_scale, -1.0), ones)
    out = ad.add(ad.mul(x, ad.exp(raw_scale)), shift)
    return out, ad.mul(raw_scale, ones)


def _rows(x):
    x = ad.as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a (batch, features) array, got shape {x.shape}")
    return x


class CouplingLayer(Module):
    """Coupling transform on ``features`` dimensions split at 1-based index ``d``.

    Dimensions ``1 .. d-1`` pass through splines (or affine maps) with directly
    trained parameters; dimensions ``d .. D`` use parameters emitted by a
    residual network of ``x[1 .. d-1]``.
    """

    def __init__(
        self,
        features,
        split_index=None,
        kind="rq-spline",
        num_bins=8,
        tail_bound=DEFAULT_TAIL_BOUND,
        hidden=64,
        blocks=2,
        dropout=0.0,
        rng=None,
    ):
        if split_index is None:
            split_index = min(math.ceil(features / 2) + 1, features)
        if not 1 <= split_index <= features:
            raise InvalidParameter(f"split index {split_index} outside 1..{features}")
        self.features = features
        self.split_index = split_index
        self.kind = kind
        self.num_bins = num_bins
        self.tail_bound = tail_bound
        self.n_identity = split_index - 1
        self.n_transformed = features - self.n_identity
        self.n_params = params_per_dim(kind, num_bins)
        self.identity_params = Parameter(np.zeros((self.n_identity, self.n_params)))
        self.conditioner = ResidualMLP(
            self.n_identity,
            self.n_transformed * self.n_params,
            hidden,
            blocks,
            dropout,
            rng,
        )
        self.conditioner_calls = 0

    def _condition(self, xa):
        self.conditioner_calls += 1
        theta = self.conditioner(xa)
        return ad.reshape(theta, (xa.shape[0], self.n_transformed, self.n_params))

    def _apply(self, x, inverse):
        x = _rows(x)
        if x.shape[1] != self.features:
            raise ShapeError(f"expected {self.features} features, got {x.shape[1]}")
        k = self.n_identity
        xa, xb = ad.getitem(x, (slice(None), slice(None, k))), ad.getitem(x, (slice(None), slice(k, None)))
        ya, lda = elementwise(xa, self.identity_params, self.kind, self.tail_bound, inverse)
        # conditioner input is the untransformed half in both directions
        cond_in = ya if inverse else xa
        theta = self._condition(cond_in)
        yb, ldb = elementwise(xb, theta, self.kind, self.tail_bound, inverse)
        y = ad.concat([ya, yb], axis=1)
        return y, ad.add(ad.sum_(lda, axis=1), ad.sum_(ldb, axis=1))

    def forward(self, x):
        return self._apply(x, inverse=False)

    def inverse(self, y):
        return self._apply(y, inverse=True)


class AutoregressiveLayer(Module):
    """Autoregressive transform: parameters of dimension ``i`` depend on ``x[:i]``.

    ``forward`` takes one conditioner pass; ``inverse`` takes ``D`` passes.
    """

    def __init__(
        self,
        features,
        kind="rq-spline",
        num_bins=8,
        tail_bound=DEFAULT_TAIL_BOUND,
        hidden=64,
        blocks=2,
        dropout=0.0,
        rng=None,
    ):
        self.features = features
        self.kind = kind
        self.num_bins = num_bins
        self.tail_bound = tail_bound
        self.n_params = params_per_dim(kind, num_bins)
        self.conditioner = MaskedResidualMLP(features, self.n_params, hidden, blocks, dropout, rng)
        self.conditioner_calls = 0

    def _condition(self, x):
        self.conditioner_calls += 1
        theta = self.conditioner(x)
        return ad.reshape(theta, (x.shape[0], self.features, self.n_params))

    def forward(self, x):
        x = _rows(x)
        theta = self._condition(x)
        y, ld = elementwise(x, theta, self.kind, self.tail_bound)
        return y, ad.sum_(ld, axis=1)

    def inverse(self, y):
        y = _rows(y)
        n, dim = y.shape
        recovered, logdets = [], []
        for i in range(dim):
            current = ad.concat(recovered + [np.zeros((n, dim - i))], axis=1)
            theta = self._condition(current)
            xi, ldi = elementwise(
                ad.getitem(y, (slice(None), slice(i, i + 1))),
                ad.getitem(theta, (slice(None), slice(i, i + 1))),
                self.kind,
                self.tail_bound,
                inverse=True,
            )
            recovered.append(xi)
            logdets.append(ldi)
        return ad.concat(recovered, axis=1), ad.sum_(ad.concat(logdets, axis=1), axis=1)


class LULinear(Module):
    """Invertible linear map ``W = P L U`` with unit-lower ``L`` and ``diag(U) = exp(.)``.

    ``perm`` encodes ``P`` through ``(P v)[i] = v[perm[i]]``.
    """

    def __init__(self, features, rng=None, perm=None):
        rng = np.random.default_rng(rng)
        self.features = features
        self.perm = np.asarray(rng.permutation(features) if perm is None else perm, dtype=np.intp)
        if sorted(self.perm.tolist()) != list(range(features)):
            raise InvalidParameter(f"not a permutation of {features} indices: {self.perm}")
        n_off = features * (features - 1) // 2
        self.lower_entries = Parameter(np.zeros(n_off))
        self.upper_entries = Parameter(np.zeros(n_off))
        self.log_diag = Parameter(np.zeros(features))

    @property
    def inv_perm(self):
        return np.argsort(self.perm)

    def _lower(self, transpose=False):
        rows, cols = np.tril_indices(self.features, -1)
        idx = (cols, rows) if transpose else (rows, cols)
        return ad.scatter(self.lower_entries, (self.features,) * 2, idx)

    def _upper(self, transpose=False):
        rows, cols = np.triu_indices(self.features, 1)
        idx = (cols, rows) if transpose else (rows, cols)
        diag = np.diag_indices(self.features)
        off = ad.scatter(self.upper_entries, (self.features,) * 2, idx)
        return ad.add(off, ad.scatter(ad.exp(self.log_diag), (self.features,) * 2, diag))

    def matrices(self):
        """``(P, L, U)`` as plain arrays."""
        d = self.features
        p = np.zeros((d, d))
        p[np.arange(d), self.perm] = 1.0
        lower = self._lower().value + np.eye(d)
        return p, lower, self._upper().value

    def weight(self):
        p, lower, upper = self.matrices()
        return p @ lower @ upper

    def _logdet(self, n, sign):
        return ad.mul(ad.sum_(self.log_diag), sign * np.ones(n))

    def forward(self, x):
        x = _rows(x)
        z = ad.matmul(x, self._upper(transpose=True))
        z = ad.add(z, ad.matmul(z, self._lower(transpose=True)))
        return ad.getitem(z, (slice(None), self.perm)), self._logdet(x.shape[0], 1.0)

    def inverse(self, y):
        y = _rows(y)
        v = ad.getitem(y, (slice(None), self.inv_perm))
        z = ad.tri_solve(self._lower(), v, lower=True, unit_diagonal=True)
        x = ad.tri_solve(self._upper(), z, lower=False)
        return x, self._logdet(y.shape[0], -1.0)


class ElementwiseAffine(Module):
    """Per-dimension ``y = exp(a) x + b`` with trainable ``(a, b)``."""

    def __init__(self, features):
        self.features = features
        self.params = Parameter(np.zeros((features, 2)))

    def forward(self, x):
        y, ld = elementwise(_rows(x), self.params, "affine")
        return y, ad.sum_(ld, axis=1)

    def inverse(self, y):
        x, ld = elementwise(_rows(y), self.params, "affine", inverse=True)
        return x, ad.sum_(ld, axis=1)


class Inverted(Module):
    """A step with its directions swapped."""

    def __init__(self, step):
        self.step = step

    def forward(self, x):
        return self.step.inverse(x)

    def inverse(self, y):
        return self.step.forward(y)


@dataclass
class FlowSpec:
    """Architecture description; enough to rebuild a flow (with stored permutations)."""

    features: int
    flow: str = "coupling"
    transform: str = "rq-spline"
    steps: int = 10
    num_bins: int = 8
    tail_bound: float = DEFAULT_TAIL_BOUND
    hidden: int = 64
    blocks: int = 2
    dropout: float = 0.0
    final_linear: bool = False
    split_index: int | None = None

    def validate(self):
        if self.features < 1:
            raise InvalidParameter("features must be >= 1")
        if self.flow not in FLOW_KINDS:
            raise InvalidParameter(f"flow must be one of {FLOW_KINDS}, got {self.flow!r}")
        if self.transform not in TRANSFORM_KINDS:
            raise InvalidParameter(f"transform must be one of {TRANSFORM_KINDS}, got {self.transform!r}")
        if self.steps < 0 or self.num_bins < 1 or self.hidden < 1 or self.blocks < 0:
            raise InvalidParameter("steps, bins, hidden and blocks must be positive")
        if not self.tail_bound > 0:
            raise InvalidParameter("tail_bound must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParameter("dropout must lie in [0, 1)")


class Flow(Module):
    """A sequence of steps on top of a standard-normal base density."""

    def __init__(self, steps, features, spec: FlowSpec | None = None):
        self.features = features
        self.steps = list(steps)
        self.spec = spec
        for step in self.steps:
            dim = getattr(step, "features", None) or getattr(getattr(step, "step", None), "features", None)
            if dim is not None and dim != features:
                raise ShapeError(f"step dimension {dim} does not match flow dimension {features}")

    def forward(self, u):
        x = _rows(u)
        total = ad.Tensor(np.zeros(x.shape[0]))
        for step in self.steps:
            x, ld = step.forward(x)
            total = ad.add(total, ld)
        return x, total

    def inverse(self, x):
        u = _rows(x)
        total = ad.Tensor(np.zeros(u.shape[0]))
        for step in reversed(self.steps):
            u, ld = step.inverse(u)
            total = ad.add(total, ld)
        return u, total

    @staticmethod
    def base_log_prob(u):
        u = ad.as_tensor(u)
        quad = ad.sum_(ad.square(u), axis=1)
        return ad.add(ad.mul(quad, -0.5), -0.5 * u.shape[1] * LOG_2PI)

    def log_prob(self, x):
        """Log-density of rows of ``x``; arrays in, arrays out, tensors in, tensors out."""
        as_array = not isinstance(x, Tensor)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64)) if as_array else x
        u, logdet = self.inverse(x)
        out = ad.add(self.base_log_prob(u), logdet)
        return out.value if as_array else out

    def sample(self, n, seed=None):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n, self.features))
        return self.forward(u)[0].value


def build_flow(spec: FlowSpec, seed=None) -> Flow:
    """Create a flow of ``spec.steps`` (LU-linear, transform) pairs."""
    spec.validate()
    rng = np.random.default_rng(seed)
    d = spec.features
    steps = []
    for _ in range(spec.steps):
        steps.append(LULinear(d, rng))
        if spec.flow == "coupling":
            steps.append(
                CouplingLayer(
                    d, spec.split_index, spec.transform, spec.num_bins, spec.tail_bound,
                    spec.hidden, spec.blocks, spec.dropout, rng,
                )
            )
        else:
            # density evaluation runs the one-pass direction (MAF-style)
            steps.append(
                Inverted(
                    AutoregressiveLayer(
                        d, spec.transform, spec.num_bins, spec.tail_bound,
                        spec.hidden, spec.blocks, spec.dropout, rng,
                    )
                )
            )
    if spec.final_linear:
        steps.append(LULinear(d, rng))
    return Flow(steps, d, spec)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "splineflow-checkpoint"
CHECKPOINT_VERSION = 1


def _lu_layers(flow):
    return [m for m in flow.modules() if isinstance(m, LULinear)]


def save_flow(flow: Flow, path, extra=None):
    """Write ``flow`` to an ``.npz`` container (see README for the layout)."""
    if flow.spec is None:
        raise InvalidParameter("only flows created by build_flow can be saved")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": asdict(flow.spec),
        "permutations": [lu.perm.tolist() for lu in _lu_layers(flow)],
        "extra": extra or {},
    }
    arrays = {f"param/{name}": p.value for name, p in flow.named_parameters()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_flow(path):
    """Read a checkpoint written by :func:`save_flow`; returns ``(flow, extra)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["meta"].tobytes().decode("utf-8"))
            arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError, EOFError, UnicodeDecodeError, zipfile.BadZipFile) as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {meta.get('version')}")
    try:
        known = {f.name for f in fields(FlowSpec)}
        spec = FlowSpec(**{k: v for k, v in meta["spec"].items() if k in known})
        flow = build_flow(spec, seed=0)
    except (TypeError, InvalidParameter) as exc:
        raise ParseError(f"bad architecture in checkpoint: {exc}") from exc
    lus = _lu_layers(flow)
    perms = meta.get("permutations", [])
    if len(perms) != len(lus):
        raise ParseError("permutation count does not match architecture")
    for lu, perm in zip(lus, perms):
        if sorted(perm) != list(range(lu.features)):
            raise ParseError(f"invalid permutation {perm}")
        lu.perm = np.asarray(perm, dtype=np.intp)
    named = dict(flow.named_parameters())
    if set(named) != set(arrays):
        missing = sorted(set(named) ^ set(arrays))
        raise ParseError(f"checkpoint parameters do not match architecture: {missing[:5]}")
    for name, p in named.items():
        value = arrays[name]
        if value.shape != p.value.shape or not np.all(np.isfinite(value)):
            raise ParseError(f"parameter {name} has wrong shape or non-finite values")
        p.value = np.array(value, dtype=np.float64)
    return flow, meta.get("extra", {})


# -- array conveniences ------------------------------------------------------


def _run(fn, x):
    y, ld = fn(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return y.value, ld.value


def coupling_forward(layer: CouplingLayer, x):
    return _run(layer.forward, x)


def coupling_inverse(layer: CouplingLayer, y):
    return _run(layer.inverse, y)


def autoregressive_forward(layer: AutoregressiveLayer, x):
    return _run(layer.forward, x)


def autoregressive_inverse(layer: AutoregressiveLayer, y):
    return _run(layer.inverse, y)


def lu_forward(layer: LULinear, x):
    return _run(layer.forward, x)


def lu_inverse(layer: LULinear, y):
    return _run(layer.inverse, y)


def flow_log_prob(flow: Flow, x):
    return flow.log_prob(x)


def flow_sample(flow: Flow, n, rng_seed=None):
    return flow.sample(n, rng_seed)
