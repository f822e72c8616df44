"""Acceptance suite: each test is tagged with the criterion it checks and the
terminal summary prints one PASS/FAIL line per criterion."""
import math
import time

import numpy as np
import pytest

from splineflow import autodiff as ad
from splineflow.cli import main
from splineflow.data import (
    FOUR_MODE_CENTERS,
    checkerboard_allowed,
    entropy_mc,
    gen_checkerboard,
    gen_gaussian_mixture,
    mixture_log_density,
)
from splineflow.nets import masked_forward
from splineflow.rq_spline import param_length, parameterize, rq_transform, rq_transform_inverse
from splineflow.training import TrainConfig, nll_tensor, train
from splineflow.transforms import (
    LOG_2PI,
    AutoregressiveLayer,
    CouplingLayer,
    FlowSpec,
    LULinear,
    build_flow,
)

from oracles import cofactor_det, fd_jacobian, gauss_solve, grid_mass, parameter_gradients, rel_error

criterion = pytest.mark.criterion

# desk-scale 2D fits
FIT_STEPS = 5000
FIT_TRAIN, FIT_VAL = 100_000, 10_000
CHECKER_SPEC = dict(features=2, steps=2, num_bins=16, hidden=128, blocks=2)
CHECKER_CONFIG = dict(steps=FIT_STEPS, batch_size=256, lr=5e-4, eval_every=1000, seed=0)
MIXTURE_SCALE = 0.5
MIXTURE_SPEC = dict(features=2, steps=2, num_bins=8, hidden=64, blocks=2)


def perturb(module, rng, scale):
    for name, p in module.named_parameters():
        s = scale / math.sqrt(p.value.shape[0]) if name.endswith("final.weight") else scale
        p.value = p.value + rng.normal(scale=s, size=p.value.shape)
    return module


def five_point_derivative(f, x, h=1e-5):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


@pytest.fixture(scope="module")
def checkerboard_fits():
    data = gen_checkerboard(FIT_TRAIN, seed=1).data
    val = gen_checkerboard(FIT_VAL, seed=2).data
    fits = {}
    start = time.perf_counter()
    for transform in ("rq-spline", "affine"):
        spec = dict(CHECKER_SPEC, transform=transform)
        if transform == "affine":
            spec.pop("num_bins")
        flow = build_flow(FlowSpec(**spec), seed=0)
        result = train(flow, data, TrainConfig(**CHECKER_CONFIG), val_data=val)
        fits[transform] = (flow, result.final_val_nll)
    fits["seconds"] = time.perf_counter() - start
    return fits


@criterion(1, "spline round trip, monotonicity, interpolation, tails")
def test_c1_spline_exactness(record_property):
    rng = np.random.default_rng(100)
    start = time.perf_counter()
    worst = 0.0
    bins = (2, 5, 8, 16, 64)
    n = 100_000 // len(bins)
    for k in bins:
        theta = rng.normal(size=(n, param_length(k)))
        x = rng.uniform(-3.5, 3.5, n)
        y, ld, _ = rq_transform(x, theta)
        x_back, ld_back, _ = rq_transform_inverse(y, theta)
        worst = max(worst, float(np.max(np.abs(x_back - x))))
        assert np.max(np.abs(ld + ld_back)) < 1e-8

        # monotone: a second point to the right maps further right
        x2 = x + rng.uniform(1e-6, 1.0, n)
        assert np.all(rq_transform(x2, theta)[0] > y)
        assert np.all(np.isfinite(ld))

        spline = parameterize(theta, 3.0)
        rows, j = np.arange(n), rng.integers(0, k + 1, n)
        out = rq_transform(spline.knots_x[rows, j], theta)[0]
        assert np.max(np.abs(out - spline.knots_y[rows, j])) < 1e-12

        tails = np.where(rng.random(n) < 0.5, -1, 1) * rng.uniform(3.0 + 1e-12, 50, n)
        t_out, t_ld, _ = rq_transform(tails, theta)
        np.testing.assert_array_equal(t_out, tails)
        np.testing.assert_array_equal(t_ld, 0.0)
        np.testing.assert_array_equal(rq_transform_inverse(tails, theta)[0], tails)
    seconds = time.perf_counter() - start
    record_property("max_roundtrip", f"{worst:.2e}")
    record_property("seconds", f"{seconds:.1f}")
    assert worst < 1e-10
    assert seconds < 10


@criterion(2, "derivative and layer log-dets against finite differences")
def test_c2_spline_derivative(record_property):
    rng = np.random.default_rng(200)
    n = 10_000
    theta = rng.normal(size=(n, param_length(8)))
    x = rng.uniform(-3, 3, n)
    deriv = np.exp(rq_transform(x, theta)[1])
    fd = five_point_derivative(lambda v: rq_transform(v, theta)[0], x)
    worst = float(np.max(np.abs(deriv - fd) / np.abs(deriv)))
    record_property("spline_rel", f"{worst:.1e}")
    assert worst < 1e-6


@criterion(2, "derivative and layer log-dets against finite differences")
@pytest.mark.parametrize("kind", ["coupling", "autoregressive", "lu"])
def test_c2_layer_log_dets(kind, record_property):
    rng = np.random.default_rng(201)
    worst = 0.0
    for d in range(1, 6):
        if kind == "coupling":
            layer = CouplingLayer(d, num_bins=8, hidden=16, rng=rng)
        elif kind == "autoregressive":
            layer = AutoregressiveLayer(d, num_bins=8, hidden=16, rng=rng)
        else:
            layer = LULinear(d, rng)
        perturb(layer, rng, 0.3)
        for _ in range(10):
            x = rng.normal(size=d)
            for direction in (layer.forward, layer.inverse):
                jac = fd_jacobian(lambda v: direction(v[None, :])[0].value[0], x, h=1e-5, five_point=True)
                ref = np.linalg.slogdet(jac)[1]
                got = direction(x[None, :])[1].value[0]
                # a log-det difference is the relative error of the determinant
                worst = max(worst, abs(got - ref))
    record_property(f"{kind}_logdet", f"{worst:.1e}")
    assert worst < 1e-5


@criterion(3, "full-flow NLL gradients against finite differences")
def test_c3_flow_gradients(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(300)
    flow = build_flow(FlowSpec(features=2, steps=2, num_bins=8, hidden=16, blocks=2), seed=3)
    perturb(flow, rng, 0.2)
    batch = gen_checkerboard(16, seed=4).data
    params = flow.parameters()
    with ad.Tape() as tape:
        loss = nll_tensor(flow, batch)
    analytic = tape.backward(loss, params)
    numeric = parameter_gradients(lambda: nll_tensor(flow, batch).value, params)
    worst = max(float(np.max(rel_error(a, b))) for a, b in zip(analytic, numeric))
    seconds = time.perf_counter() - start
    count = sum(p.value.size for p in params)
    record_property("params", count)
    record_property("max_rel", f"{worst:.1e}")
    record_property("seconds", f"{seconds:.1f}")
    assert worst < 1e-4
    assert seconds < 60


@criterion(4, "autoregressive Jacobians triangular, masks exact")
def test_c4_autoregressive_structure():
    rng = np.random.default_rng(400)
    d = 4
    flow = build_flow(FlowSpec(features=d, flow="autoregressive", steps=3, hidden=24), seed=4)
    perturb(flow, rng, 0.3)
    layers = [m for m in flow.modules() if isinstance(m, AutoregressiveLayer)]
    assert len(layers) == 3
    for layer in layers:
        for _ in range(5):
            x = rng.normal(size=d)
            jac = fd_jacobian(lambda v: layer.forward(v[None, :])[0].value[0], x)
            assert np.all(np.triu(jac, 1) == 0.0)
            assert np.all(np.diag(jac) > 0)
        per = layer.n_params
        x = rng.normal(size=(16, d))
        base = masked_forward(layer.conditioner, x)
        for j in range(d):
            moved = x.copy()
            moved[:, j] = rng.normal(size=16) * 5
            out = masked_forward(layer.conditioner, moved)
            for i in range(j + 1):
                np.testing.assert_array_equal(out[:, i * per : (i + 1) * per], base[:, i * per : (i + 1) * per])


@criterion(5, "zero-initialized flow equals the base density")
@pytest.mark.parametrize("kind", ["coupling", "autoregressive"])
def test_c5_identity_initialization(kind, record_property):
    d = 3
    flow = build_flow(FlowSpec(features=d, flow=kind, steps=4), seed=5)
    x = np.random.default_rng(500).normal(size=(100, d)) * 2
    base = -0.5 * np.sum(x**2, axis=1) - 0.5 * d * LOG_2PI
    err = float(np.max(np.abs(flow.log_prob(x) - base)))
    record_property(f"{kind}_max_err", f"{err:.1e}")
    assert err < 1e-12

    data = np.random.default_rng(501).normal(size=(1000, d)) * 1.7
    cfg = TrainConfig(steps=1, batch_size=128, val_fraction=0.0, seed=9)
    batch = data[np.random.default_rng(cfg.seed).integers(0, len(data), cfg.batch_size)]
    result = train(flow, data, cfg)
    step0 = result.metrics[0]["loss"]
    assert abs(step0 - np.mean(0.5 * np.sum(batch**2, axis=1) + 0.5 * d * LOG_2PI)) < 1e-12


@criterion(6, "densities integrate to one over [-6,6]^2")
def test_c6_normalization(checkerboard_fits, record_property):
    rng = np.random.default_rng(600)
    untrained = build_flow(FlowSpec(features=2, steps=2, hidden=32), seed=6)
    random_flow = perturb(build_flow(FlowSpec(features=2, steps=2, hidden=32), seed=7), rng, 0.1)
    masses = {
        "untrained": grid_mass(untrained.log_prob, -6, 6, 512),
        "random": grid_mass(random_flow.log_prob, -6, 6, 512),
        "trained": grid_mass(checkerboard_fits["rq-spline"][0].log_prob, -6, 6, 512),
    }
    for name, mass in masses.items():
        record_property(name, f"{mass:.4f}")
    for mass in masses.values():
        assert abs(mass - 1.0) < 1e-2


@criterion(7, "checkerboard: >=95% in allowed squares, >=0.3 nats over affine")
def test_c7_checkerboard_fit(checkerboard_fits, record_property):
    flow, rq_nll = checkerboard_fits["rq-spline"]
    _, affine_nll = checkerboard_fits["affine"]
    inside = float(np.mean(checkerboard_allowed(flow.sample(10_000, seed=7))))
    record_property("in_squares", f"{inside:.4f}")
    record_property("rq_val_nll", f"{rq_nll:.4f}")
    record_property("affine_val_nll", f"{affine_nll:.4f}")
    record_property("gap", f"{affine_nll - rq_nll:.4f}")
    record_property("seconds", f"{checkerboard_fits['seconds']:.0f}")
    assert inside >= 0.95
    assert affine_nll - rq_nll >= 0.3
    assert checkerboard_fits["seconds"] < 30 * 60


@criterion(8, "four-mode mixture: validation NLL within 0.1 nats of entropy")
def test_c8_known_entropy(record_property):
    def sampler(n, seed):
        return gen_gaussian_mixture(n, FOUR_MODE_CENTERS, MIXTURE_SCALE, seed)

    log_density = mixture_log_density(FOUR_MODE_CENTERS, MIXTURE_SCALE)
    entropy, stderr = entropy_mc(sampler, log_density, 10**6, seed=3)
    flow = build_flow(FlowSpec(**MIXTURE_SPEC), seed=0)
    cfg = TrainConfig(steps=FIT_STEPS, batch_size=256, lr=5e-4, eval_every=1000, seed=0)
    result = train(flow, sampler(FIT_TRAIN, 1).data, cfg, val_data=sampler(FIT_VAL, 2).data)
    record_property("entropy", f"{entropy:.4f}+-{stderr:.4f}")
    record_property("val_nll", f"{result.final_val_nll:.4f}")
    assert abs(result.final_val_nll - entropy) < 0.1


@criterion(9, "LU layer against brute-force determinant and solve")
def test_c9_lu_layer(record_property):
    rng = np.random.default_rng(900)
    det_err = solve_err = 0.0
    for d in range(1, 7):
        for _ in range(5):
            layer = perturb(LULinear(d, rng), rng, 0.5)
            w = layer.weight()
            ld = layer.forward(np.zeros((1, d)))[1].value[0]
            ref = math.log(abs(cofactor_det(w)))
            det_err = max(det_err, abs(ld - ref) / max(1.0, abs(ref)))
            y = rng.normal(size=(4, d))
            x = layer.inverse(y)[0].value
            for row_x, row_y in zip(x, y):
                solve_err = max(solve_err, float(np.max(np.abs(row_x - gauss_solve(w, row_y)))))
        perm_only = LULinear(d, rng)
        assert perm_only.forward(np.ones((1, d)))[1].value[0] == 0.0
        assert abs(abs(cofactor_det(perm_only.weight())) - 1.0) < 1e-15
    record_property("logdet_rel", f"{det_err:.1e}")
    record_property("solve_abs", f"{solve_err:.1e}")
    assert det_err < 1e-10
    assert solve_err < 1e-9


@criterion(10, "CLI training reproduces metrics bit-exactly")
def test_c10_determinism(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text(
        "dataset = checkerboard\nn_train = 5000\nflow_steps = 2\nbins = 8\nhidden = 32\n"
        "dropout = 0.1\ntrain_steps = 200\nbatch_size = 64\neval_every = 50\nseed = 11\n"
    )
    for name in ("first", "second"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    first = (tmp_path / "first" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "second" / "metrics.csv").read_bytes()
    assert len(first.splitlines()) == 201
