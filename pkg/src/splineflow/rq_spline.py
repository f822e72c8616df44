"""Monotonic rational-quadratic splines with linear tails.

The spline maps ``[-B, B]`` onto itself through ``K`` bins, each holding a
monotone quotient of two quadratics (the Gregory-Delbourgo construction).
Outside ``[-B, B]`` the map is the identity.  Boundary derivatives are pinned
to 1 so the transform is continuously differentiable everywhere.

All functions broadcast over leading batch dimensions: knot arrays carry the
bin axis last, shape ``(..., K + 1)``, and query points have shape ``(...)``.
Everything is computed in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameter, NumericalError

MIN_BIN = 1e-3
SOFTPLUS_BIAS = math.log(math.e - 1.0)
DISC_TOL = 1e-9
DEFAULT_TAIL_BOUND = 3.0
TAIL = -1


def param_length(num_bins: int) -> int:
    """Length of the unconstrained parameter vector for ``num_bins`` bins."""
    return 3 * num_bins - 1


def num_bins_from_length(length: int) -> int:
    if length < 2 or (length + 1) % 3:
        raise InvalidParameter(f"parameter length {length} is not of the form 3K-1")
    return (length + 1) // 3


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


class ParamVector(NamedTuple):
    """Unconstrained spline parameters ``[theta_w, theta_h, theta_d]``."""

    theta_w: np.ndarray
    theta_h: np.ndarray
    theta_d: np.ndarray

    @classmethod
    def from_array(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=np.float64)
        k = num_bins_from_length(theta.shape[-1])
        return cls(theta[..., :k], theta[..., k : 2 * k], theta[..., 2 * k :])

    @classmethod
    def zeros(cls, num_bins: int) -> "ParamVector":
        return cls.from_array(np.zeros(param_length(num_bins)))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.theta_w, self.theta_h, self.theta_d], axis=-1)

    @property
    def num_bins(self) -> int:
        return np.shape(self.theta_w)[-1]


@dataclass(frozen=True)
class RQSpline:
    """A fully materialized spline: knots, knot derivatives and tail bound."""

    knots_x: np.ndarray
    knots_y: np.ndarray
    derivs: np.ndarray
    tail_bound: float = DEFAULT_TAIL_BOUND

    @property
    def num_bins(self) -> int:
        return self.knots_x.shape[-1] - 1

    def validate(self, min_bin: float = 0.0) -> None:
        """Raise ``InvalidParameter`` unless every spline invariant holds."""
        b = self.tail_bound
        for name, knots in (("knots_x", self.knots_x), ("knots_y", self.knots_y)):
            if not np.all(np.isfinite(knots)):
                raise InvalidParameter(f"{name} contains non-finite values")
            if np.any(knots[..., 0] != -b) or np.any(knots[..., -1] != b):
                raise InvalidParameter(f"{name} must start at -B and end at B")
            if np.any(np.diff(knots, axis=-1) <= min_bin * 2 * b * (1 - 1e-9)):
                raise InvalidParameter(f"{name} is not strictly increasing")
        if not np.all(self.derivs > 0) or not np.all(np.isfinite(self.derivs)):
            raise InvalidParameter("derivatives must be finite and positive")
        if np.any(self.derivs[..., 0] != 1) or np.any(self.derivs[..., -1] != 1):
            raise InvalidParameter("boundary derivatives must equal 1")

    @classmethod
    def identity(cls, num_bins: int, tail_bound: float = DEFAULT_TAIL_BOUND) -> "RQSpline":
        knots = np.linspace(-tail_bound, tail_bound, num_bins + 1)
        return cls(knots, knots.copy(), np.ones(num_bins + 1), float(tail_bound))


class SplineEval(NamedTuple):
    output: np.ndarray
    log_abs_det: np.ndarray
    bin_index: np.ndarray


class _Normalized(NamedTuple):
    # intermediates of the softmax/softplus parameterization, kept for gradients
    spline: RQSpline
    width_probs: np.ndarray
    height_probs: np.ndarray
    deriv_slopes: np.ndarray


def _bins_from_logits(logits, tail_bound, min_bin):
    k = logits.shape[-1]
    if min_bin * k >= 1.0:
        raise InvalidParameter(f"MIN_BIN * K must be < 1, got {min_bin * k}")
    probs = _softmax(logits)
    sizes = 2.0 * tail_bound * (min_bin + (1.0 - min_bin * k) * probs)
    knots = np.empty(logits.shape[:-1] + (k + 1,))
    knots[..., 0] = 0.0
    np.cumsum(sizes, axis=-1, out=knots[..., 1:])
    knots -= tail_bound
    knots[..., 0] = -tail_bound
    knots[..., -1] = tail_bound
    return knots, probs


def _normalize(params, tail_bound, num_bins, min_bin) -> _Normalized:
    if isinstance(params, ParamVector):
        params = params.to_array()
    theta = np.asarray(params, dtype=np.float64)
    if num_bins is None:
        num_bins = num_bins_from_length(theta.shape[-1])
    if num_bins < 1:
        raise InvalidParameter("need at least one bin")
    if theta.shape[-1] != param_length(num_bins):
        raise InvalidParameter(
            f"expected {param_length(num_bins)} parameters for K={num_bins}, "
            f"got {theta.shape[-1]}"
        )
    if not tail_bound > 0:
        raise InvalidParameter(f"tail bound must be positive, got {tail_bound}")
    if not np.all(np.isfinite(theta)):
        raise InvalidParameter("spline parameters contain non-finite values")

    k = num_bins
    knots_x, pw = _bins_from_logits(theta[..., :k], tail_bound, min_bin)
    knots_y, ph = _bins_from_logits(theta[..., k : 2 * k], tail_bound, min_bin)
    raw_d = theta[..., 2 * k :] + SOFTPLUS_BIAS
    derivs = np.ones(theta.shape[:-1] + (k + 1,))
    derivs[..., 1:-1] = softplus(raw_d)
    spline = RQSpline(knots_x, knots_y, derivs, float(tail_bound))
    return _Normalized(spline, pw, ph, _sigmoid(raw_d))


def parameterize(
    params,
    tail_bound: float = DEFAULT_TAIL_BOUND,
    num_bins: int | None = None,
    min_bin: float = MIN_BIN,
) -> RQSpline:
    """Build a spline from a raw ``3K - 1`` parameter vector (or a batch of them).

    Widths and heights are ``2B * (m + (1 - K m) * softmax(theta))`` with
    ``m = min_bin``, so every bin spans at least a fraction ``m`` of the
    interval and the total is exactly ``2B``.  Internal derivatives are
    ``softplus(theta_d + SOFTPLUS_BIAS)``, which equals 1 at ``theta_d = 0``.
    """
    return _normalize(params, tail_bound, num_bins, min_bin).spline


def _locate(knots, v):
    """Binary search for the bin ``k`` with ``knots[k] <= v < knots[k+1]``.

    ``v`` equal to the last knot is assigned to the last bin.
    """
    num_bins = knots.shape[-1] - 1
    shape = np.broadcast_shapes(knots.shape[:-1], np.shape(v))
    knots = np.broadcast_to(knots, shape + knots.shape[-1:])
    lo = np.zeros(shape, dtype=np.intp)
    hi = np.full(shape, num_bins - 1, dtype=np.intp)
    for _ in range(max(1, math.ceil(math.log2(num_bins)) + 1)):
        mid = (lo + hi + 1) // 2
        go_right = np.take_along_axis(knots, mid[..., None], axis=-1)[..., 0] <= v
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid - 1)
    return lo


def _gather(arr, idx):
    arr = np.broadcast_to(arr, idx.shape + arr.shape[-1:])
    return np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]


class _Bin(NamedTuple):
    index: np.ndarray
    x_left: np.ndarray
    width: np.ndarray
    y_left: np.ndarray
    height: np.ndarray
    d_left: np.ndarray
    d_right: np.ndarray


def _bin_of(spline: RQSpline, idx) -> _Bin:
    kx, ky, dv = spline.knots_x, spline.knots_y, spline.derivs
    x_left = _gather(kx, idx)
    y_left = _gather(ky, idx)
    return _Bin(
        idx,
        x_left,
        _gather(kx, idx + 1) - x_left,
        y_left,
        _gather(ky, idx + 1) - y_left,
        _gather(dv, idx),
        _gather(dv, idx + 1),
    )


def _check_finite(v, what):
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidParameter(f"{what} must be finite")
    return v


def _rq_value(bn: _Bin, xi):
    s = bn.height / bn.width
    t = xi * (1.0 - xi)
    num = bn.height * (s * xi * xi + bn.d_left * t)
    den = s + (bn.d_right + bn.d_left - 2.0 * s) * t
    return bn.y_left + num / den


def _rq_log_slope(bn: _Bin, xi):
    s = bn.height / bn.width
    t = xi * (1.0 - xi)
    den = s + (bn.d_right + bn.d_left - 2.0 * s) * t
    dnum = bn.d_right * xi * xi + 2.0 * s * t + bn.d_left * (1.0 - xi) ** 2
    return 2.0 * np.log(s) + np.log(dnum) - 2.0 * np.log(den)


def spline_forward(spline: RQSpline, x) -> SplineEval:
    """Evaluate the spline and its log-derivative at ``x``."""
    x = _check_finite(x, "spline input")
    b = spline.tail_bound
    inside = np.abs(x) <= b
    xs = np.where(inside, x, 0.0)
    idx = _locate(spline.knots_x, xs)
    bn = _bin_of(spline, idx)
    xi = np.clip((xs - bn.x_left) / bn.width, 0.0, 1.0)
    y = np.clip(_rq_value(bn, xi), -b, b)
    logdet = _rq_log_slope(bn, xi)
    return SplineEval(
        np.where(inside, y, x),
        np.where(inside, logdet, 0.0),
        np.where(inside, idx, TAIL),
    )


def spline_derivative(spline: RQSpline, x):
    """Derivative of the spline at ``x`` (1 in the tails)."""
    return np.exp(spline_forward(spline, x).log_abs_det)


def _inverse_xi(bn: _Bin, y):
    s = bn.height / bn.width
    dy = y - bn.y_left
    curv = bn.d_right + bn.d_left - 2.0 * s
    a = bn.height * (s - bn.d_left) + dy * curv
    b = bn.height * bn.d_left - dy * curv
    c = -s * dy
    disc = b * b - 4.0 * a * c
    if np.any(disc < -DISC_TOL):
        raise NumericalError(
            f"negative discriminant {disc.min():.3e} in spline inverse",
            index=int(np.argmin(disc)),
        )
    disc = np.maximum(disc, 0.0)
    return np.clip(2.0 * c / (-b - np.sqrt(disc)), 0.0, 1.0)


def spline_inverse(spline: RQSpline, y) -> SplineEval:
    """Invert the spline at ``y``; ``log_abs_det`` is that of the inverse map."""
    y = _check_finite(y, "spline input")
    b = spline.tail_bound
    inside = np.abs(y) <= b
    ys = np.where(inside, y, 0.0)
    idx = _locate(spline.knots_y, ys)
    bn = _bin_of(spline, idx)
    xi = _inverse_xi(bn, ys)
    x = np.clip(bn.x_left + xi * bn.width, -b, b)
    logdet = -_rq_log_slope(bn, xi)
    return SplineEval(
        np.where(inside, x, y),
        np.where(inside, logdet, 0.0),
        np.where(inside, idx, TAIL),
    )


# ---------------------------------------------------------------------------
# Gradients with respect to the raw parameters, chained through parameterize.


class SplineCache(NamedTuple):
    norm: _Normalized
    bin: _Bin
    inside: np.ndarray
    # per-element partials of output / log-derivative w.r.t. bin quantities
    dout: dict
    dlog: dict
    log_slope: np.ndarray


def _partials(bn: _Bin, xi):
    w, h, d0, d1 = bn.width, bn.height, bn.d_left, bn.d_right
    s = h / w
    t = xi * (1.0 - xi)
    one_m = 1.0 - xi
    curv = d1 + d0 - 2.0 * s
    den = s + curv * t
    num = h * (s * xi * xi + d0 * t)
    r = num / den
    dnum = d1 * xi * xi + 2.0 * s * t + d0 * one_m * one_m

    # holding (xi, s, h, d0, d1) independent
    r_h = (s * xi * xi + d0 * t) / den
    r_s = (h * xi * xi - r * (1.0 - 2.0 * t)) / den
    r_d0 = (h * t - r * t) / den
    r_d1 = -r * t / den
    r_xi = (h * (2.0 * s * xi + d0 * (1.0 - 2.0 * xi)) - r * curv * (1.0 - 2.0 * xi)) / den

    l_s = 2.0 / s + 2.0 * t / dnum - 2.0 * (1.0 - 2.0 * t) / den
    l_d0 = one_m * one_m / dnum - 2.0 * t / den
    l_d1 = xi * xi / dnum - 2.0 * t / den
    l_xi = (2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * one_m) / dnum - (
        2.0 * curv * (1.0 - 2.0 * xi) / den
    )

    def chain(f_h, f_s, f_d0, f_d1, f_xi):
        # s = h / w and xi = (x - x_left) / w
        return {
            "x": f_xi / w,
            "x_left": -f_xi / w,
            "width": -(f_s * s + f_xi * xi) / w,
            "height": f_h + f_s / w,
            "d_left": f_d0,
            "d_right": f_d1,
        }

    return chain(r_h, r_s, r_d0, r_d1, r_xi), chain(0.0, l_s, l_d0, l_d1, l_xi)


def _spline_cache(norm: _Normalized, bn: _Bin, xi, inside, log_slope) -> SplineCache:
    dout, dlog = _partials(bn, xi)
    return SplineCache(norm, bn, inside, dout, dlog, log_slope)


def _bins_vjp(probs, tail_bound, min_bin, g_left, g_size, idx):
    # knot k is -B + sum_{j<k} size_j; bin size k is size_k
    k = probs.shape[-1]
    j = np.arange(k)
    sel = idx[..., None]
    g_sizes = g_left[..., None] * (j < sel) + g_size[..., None] * (j == sel)
    g_probs = 2.0 * tail_bound * (1.0 - min_bin * k) * g_sizes
    return probs * (g_probs - np.sum(g_probs * probs, axis=-1, keepdims=True))


def _cache_vjp(cache: SplineCache, g_out, g_log, min_bin=MIN_BIN):
    """Pull ``(g_out, g_log)`` back to ``(g_x, g_theta)``."""
    bn, inside = cache.bin, cache.inside
    g_out = np.where(inside, g_out, 0.0)
    g_log = np.where(inside, g_log, 0.0)
    tot = {key: g_out * cache.dout[key] + g_log * cache.dlog[key] for key in cache.dout}
    norm = cache.norm
    b = norm.spline.tail_bound
    k = norm.width_probs.shape[-1]
    idx = bn.index

    g_w = _bins_vjp(norm.width_probs, b, min_bin, tot["x_left"], tot["width"], idx)
    g_h = _bins_vjp(norm.height_probs, b, min_bin, g_out, tot["height"], idx)
    g_derivs = np.zeros(idx.shape + (k + 1,))
    np.put_along_axis(g_derivs, idx[..., None], tot["d_left"][..., None], axis=-1)
    right = np.take_along_axis(g_derivs, idx[..., None] + 1, axis=-1)
    np.put_along_axis(g_derivs, idx[..., None] + 1, right + tot["d_right"][..., None], axis=-1)
    g_d = g_derivs[..., 1:-1] * norm.deriv_slopes
    g_theta = np.concatenate([g_w, g_h, g_d], axis=-1)
    return tot["x"], g_theta


def rq_transform(x, theta, tail_bound=DEFAULT_TAIL_BOUND, min_bin=MIN_BIN):
    """Batched forward pass from raw parameters, returning a gradient cache.

    ``x`` has shape ``(...)`` and ``theta`` shape ``(..., 3K - 1)``; the two are
    broadcast together.  Returns ``(y, log_abs_det, cache)``.
    """
    x = _check_finite(x, "spline input")
    theta = np.asarray(theta, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, theta.shape[:-1])
    x = np.broadcast_to(x, shape)
    theta = np.broadcast_to(theta, shape + theta.shape[-1:])
    norm = _normalize(theta, tail_bound, None, min_bin)
    spline = norm.spline
    inside = np.abs(x) <= tail_bound
    xs = np.where(inside, x, 0.0)
    bn = _bin_of(spline, _locate(spline.knots_x, xs))
    xi = np.clip((xs - bn.x_left) / bn.width, 0.0, 1.0)
    y = np.clip(_rq_value(bn, xi), -tail_bound, tail_bound)
    logdet = _rq_log_slope(bn, xi)
    cache = _spline_cache(norm, bn, xi, inside, logdet)
    return np.where(inside, y, x), np.where(inside, logdet, 0.0), cache


def rq_transform_vjp(cache: SplineCache, g_y, g_logdet, min_bin=MIN_BIN):
    """Gradients ``(g_x, g_theta)`` of a :func:`rq_transform` call."""
    g_x, g_theta = _cache_vjp(cache, g_y, g_logdet, min_bin)
    return np.where(cache.inside, g_x, g_y), g_theta


def rq_transform_inverse(y, theta, tail_bound=DEFAULT_TAIL_BOUND, min_bin=MIN_BIN):
    """Batched inverse from raw parameters; returns ``(x, log_abs_det, cache)``.

    ``log_abs_det`` is that of the inverse map.  The cache holds the forward
    partials at the recovered point, from which the implicit-function gradient
    is formed.
    """
    y = _check_finite(y, "spline input")
    theta = np.asarray(theta, dtype=np.float64)
    shape = np.broadcast_shapes(y.shape, theta.shape[:-1])
    y = np.broadcast_to(y, shape)
    theta = np.broadcast_to(theta, shape + theta.shape[-1:])
    norm = _normalize(theta, tail_bound, None, min_bin)
    spline = norm.spline
    inside = np.abs(y) <= tail_bound
    ys = np.where(inside, y, 0.0)
    bn = _bin_of(spline, _locate(spline.knots_y, ys))
    xi = _inverse_xi(bn, ys)
    x = np.clip(bn.x_left + xi * bn.width, -tail_bound, tail_bound)
    log_slope = _rq_log_slope(bn, xi)
    cache = _spline_cache(norm, bn, xi, inside, log_slope)
    return np.where(inside, x, y), np.where(inside, -log_slope, 0.0), cache


def rq_transform_inverse_vjp(cache: SplineCache, g_x, g_logdet, min_bin=MIN_BIN):
    """Gradients ``(g_y, g_theta)`` of a :func:`rq_transform_inverse` call.

    With ``F`` the forward map and ``L = log F'``, the inverse ``x(y, theta)``
    satisfies ``dx/dy = 1/F'`` and ``dx/dtheta = -F_theta / F'``.
    """
    a = (g_x - g_logdet * cache.dlog["x"]) / np.exp(cache.log_slope)
    a = np.where(cache.inside, a, g_x)
    _, g_theta = _cache_vjp(cache, -a, -g_logdet, min_bin)
    return a, g_theta


def spline_param_gradients(
    params,
    x,
    upstream=(1.0, 0.0),
    tail_bound: float = DEFAULT_TAIL_BOUND,
    min_bin: float = MIN_BIN,
):
    """Gradients of ``upstream . (output, log_abs_det)`` w.r.t. params and ``x``.

    Returns ``(ParamVector, g_x)``.
    """
    if isinstance(params, ParamVector):
        params = params.to_array()
    _, _, cache = rq_transform(x, params, tail_bound, min_bin)
    g_out, g_log = upstream
    g_x, g_theta = rq_transform_vjp(cache, np.asarray(g_out, float), np.asarray(g_log, float), min_bin)
    return ParamVector.from_array(g_theta), g_x
