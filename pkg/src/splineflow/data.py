"""Synthetic 2D datasets with known densities, and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParameter, ParseError

CHECKER_CELLS = 4
CHECKER_BOUND = 3.0


@dataclass
class Dataset:
    data: np.ndarray
    name: str = "data"
    log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.shape[1] < 1:
            raise InvalidParameter("dataset needs at least one column")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameter("dataset contains non-finite values")

    @property
    def dim(self):
        return self.data.shape[1]

    def __len__(self):
        return self.data.shape[0]


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    @property
    def log_density_correction(self) -> float:
        """Add to a log-density in standardized units to get raw units."""
        return -float(np.sum(np.log(self.std)))


def _checker_cell_size():
    return 2.0 * CHECKER_BOUND / CHECKER_CELLS


def checkerboard_allowed(points) -> np.ndarray:
    """True where a point lies in an allowed (even-parity) square of the board."""
    points = np.atleast_2d(points)
    size = _checker_cell_size()
    inside = np.all(np.abs(points) <= CHECKER_BOUND, axis=1)
    cells = np.clip(np.floor((points + CHECKER_BOUND) / size), 0, CHECKER_CELLS - 1).astype(int)
    return inside & ((cells[:, 0] + cells[:, 1]) % 2 == 0)


def checkerboard_log_density(points):
    n_allowed = CHECKER_CELLS * CHECKER_CELLS // 2
    log_p = -math.log(n_allowed * _checker_cell_size() ** 2)
    return np.where(checkerboard_allowed(points), log_p, -np.inf)


def gen_checkerboard(n, seed=None) -> Dataset:
    """Uniform points on the even-parity squares of a 4x4 board covering [-3, 3]^2."""
    if n <= 0:
        raise InvalidParameter("n must be positive")
    rng = np.random.default_rng(seed)
    size = _checker_cell_size()
    cells = np.array(
        [(i, j) for i in range(CHECKER_CELLS) for j in range(CHECKER_CELLS) if (i + j) % 2 == 0]
    )
    pick = cells[rng.integers(0, len(cells), n)]
    pts = (pick + rng.random((n, 2))) * size - CHECKER_BOUND
    return Dataset(pts, "checkerboard", checkerboard_log_density)


def mixture_log_density(centers, scale):
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    k, d = centers.shape

    def log_density(points):
        points = np.atleast_2d(points)
        sq = np.sum((points[:, None, :] - centers[None]) ** 2, axis=-1)
        comp = -0.5 * sq / scale**2 - d * math.log(scale) - 0.5 * d * math.log(2 * math.pi)
        return logsumexp(comp, axis=1) - math.log(k)

    return log_density


def gen_gaussian_mixture(n, centers, scale, seed=None) -> Dataset:
    """Equal-weight isotropic Gaussian mixture with a common ``scale``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] == 0:
        raise InvalidParameter("need at least one center")
    if n <= 0 or scale <= 0:
        raise InvalidParameter("n and scale must be positive")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, centers.shape[0], n)
    pts = centers[pick] + scale * rng.standard_normal((n, centers.shape[1]))
    return Dataset(pts, "gaussian_mixture", mixture_log_density(centers, scale))


FOUR_MODE_CENTERS = [(-1.5, -1.5), (-1.5, 1.5), (1.5, -1.5), (1.5, 1.5)]


def grid_centers(per_side=10, bound=2.7):
    ticks = np.linspace(-bound, bound, per_side)
    return np.array([(a, b) for a in ticks for b in ticks])


def gen_grid_gaussians(n, seed=None, per_side=10, scale=0.08) -> Dataset:
    """A 10x10 grid of narrow Gaussians, a many-mode stand-in image density."""
    ds = gen_gaussian_mixture(n, grid_centers(per_side), scale, seed)
    ds.name = "grid"
    return ds


def entropy_mc(dataset_or_sampler, log_density, n=10**6, seed=0) -> tuple[float, float]:
    """Monte-Carlo differential entropy ``-E[log p]`` and its standard error."""
    samples = dataset_or_sampler(n, seed) if callable(dataset_or_sampler) else dataset_or_sampler
    samples = getattr(samples, "data", samples)
    lp = log_density(samples)
    return float(-np.mean(lp)), float(np.std(lp) / math.sqrt(len(lp)))


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, standardize=True):
    """Read a rectangular numeric CSV; returns ``(Dataset, StandardizationStats | None)``.

    A first line containing any non-numeric cell is treated as a header.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
        first_line = 2
    else:
        first_line = 1
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(
                f"{path}: line {i + first_line} has {len(row)} fields, expected {width}"
            )
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: line {i + first_line}, column {j + 1}: not a number: {cell!r}"
                ) from None
    if not np.all(np.isfinite(values)):
        raise ParseError(f"{path}: contains non-finite values")
    name = str(path)
    if not standardize:
        return Dataset(values, name), None
    std = values.std(axis=0)
    constant = np.flatnonzero(std == 0)
    if constant.size:
        raise ParseError(f"{path}: constant column(s) {[int(c) + 1 for c in constant]} cannot be standardized")
    stats = StandardizationStats(values.mean(axis=0), std)
    return Dataset(stats.apply(values), name), stats
