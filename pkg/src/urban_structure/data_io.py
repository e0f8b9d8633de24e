"""Zone tables, cost-matrix construction, synthetic instances and file output."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import kappa_from_K
from .errors import DimensionError, InvalidParameterError, ParseError
from .model import HyperParams, SpatialSystem, Theta

COST_TOTAL = 7e5
# Per-element cost of a 625 x 49 system normalised to COST_TOTAL.
REFERENCE_COST_MEAN = COST_TOTAL / (625 * 49)

_HEADER = ["id", "lon", "lat", "quantity"]


@dataclass(frozen=True, eq=False)
class ZoneTable:
    """Zone identifiers, raw (lon, lat) coordinates and a positive quantity."""

    ids: tuple
    lon: np.ndarray
    lat: np.ndarray
    quantity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        for name in ("lon", "lat", "quantity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = len(self.ids)
        if not (self.lon.size == self.lat.size == self.quantity.size == n):
            raise DimensionError("zone table columns differ in length")
        if len(set(self.ids)) != n:
            dup = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise InvalidParameterError(f"duplicate zone ids: {dup[:5]}")
        if not (np.all(np.isfinite(self.lon)) and np.all(np.isfinite(self.lat))):
            raise InvalidParameterError("zone coordinates must be finite")
        if not np.all(self.quantity > 0) or not np.all(np.isfinite(self.quantity)):
            raise InvalidParameterError("zone quantities must be positive and finite")

    def __len__(self):
        return len(self.ids)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def equals(self, other: "ZoneTable") -> bool:
        return (self.ids == other.ids
                and np.array_equal(self.lon, other.lon)
                and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.quantity, other.quantity))


def parse_zone_csv(text: str) -> ZoneTable:
    """Parse ``id,lon,lat,quantity`` text; errors name the offending line."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != _HEADER:
        raise ParseError(f"line 1: expected header {','.join(_HEADER)}")
    ids, lon, lat, qty = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            a, b, q = (float(v) for v in row[1:])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if not (np.isfinite(a) and np.isfinite(b)):
            raise ParseError(f"line {lineno}: coordinates must be finite")
        if not (q > 0 and np.isfinite(q)):
            raise ParseError(f"line {lineno}: quantity must be positive, got {row[3]}")
        if row[0] in ids:
            raise ParseError(f"line {lineno}: duplicate id {row[0]!r}")
        ids.append(row[0])
        lon.append(a)
        lat.append(b)
        qty.append(q)
    return ZoneTable(ids, lon, lat, qty)


def format_zone_csv(table: ZoneTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_HEADER)
    for i, a, b, q in zip(table.ids, table.lon, table.lat, table.quantity):
        writer.writerow([i, repr(float(a)), repr(float(b)), repr(float(q))])
    return buf.getvalue()


def load_csv(path) -> ZoneTable:
    return parse_zone_csv(Path(path).read_text(encoding="utf-8"))


def atomic_write(path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_csv(table: ZoneTable, path) -> None:
    atomic_write(path, format_zone_csv(table))


def save_matrix(path, matrix) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    atomic_write(path, "".join(",".join(repr(float(v)) for v in row) + "\n" for row in matrix))


def load_matrix(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return np.empty((0, 0))
    return np.array([[float(v) for v in line.split(",")] for line in text.splitlines()])


def file_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


@dataclass
class NormalizationReport:
    cost_target: float
    cost_achieved: float
    origin_total_before: float
    origin_total_after: float
    K: float
    delta: float
    kappa: float


def euclidean_cost(origin_xy, dest_xy) -> np.ndarray:
    origin_xy = np.asarray(origin_xy, dtype=float)
    dest_xy = np.asarray(dest_xy, dtype=float)
    return np.linalg.norm(origin_xy[:, None, :] - dest_xy[None, :, :], axis=-1)


def build_system(origins: ZoneTable, dests: ZoneTable, K: float = 1.0, delta: float | None = None,
                 cost_total: float = COST_TOTAL) -> tuple[SpatialSystem, np.ndarray, NormalizationReport]:
    """Normalised system and observed sizes from raw zone tables.

    Costs are Euclidean distances on raw (lon, lat), scaled to sum to
    ``cost_total``. Origins are scaled to sum to 1 and destination sizes to
    sum to ``K``. ``delta`` defaults to the smallest observed size and
    kappa makes the deterministic equilibrium total equal ``K``.
    """
    if len(origins) == 0 or len(dests) == 0:
        raise InvalidParameterError("zone tables must be nonempty")
    if not K > 0:
        raise InvalidParameterError("K must be positive")
    cost = euclidean_cost(origins.coords, dests.coords)
    total = cost.sum()
    if not total > 0:
        raise InvalidParameterError("all zones coincide; cost matrix is zero")
    cost = cost * (cost_total / total)
    o_before = origins.quantity.sum()
    origin = origins.quantity / o_before
    y = dests.quantity * (K / dests.quantity.sum())
    delta = float(y.min()) if delta is None else float(delta)
    if not delta > 0:
        raise InvalidParameterError("delta must be positive")
    kappa = kappa_from_K(origin.sum(), delta, len(dests), K)
    report = NormalizationReport(cost_total, float(cost.sum()), float(o_before), float(origin.sum()),
                                 K, delta, kappa)
    return SpatialSystem(origin, cost), y, report


@dataclass
class SyntheticInstance:
    system: SpatialSystem
    y: np.ndarray
    x_true: np.ndarray
    theta_true: Theta
    hyper: HyperParams
    origin_xy: np.ndarray = field(repr=False)
    dest_xy: np.ndarray = field(repr=False)


def gen_synthetic(M: int, N: int, theta_true: Theta, hyper: HyperParams, seed: int,
                  pt_levels: int = 5, pt_len: int = 2000,
                  obs_noise: float | None = None) -> SyntheticInstance:
    """Draw an instance from the model itself.

    Zones are uniform on the unit square and costs are Euclidean distances
    rescaled to the per-element cost of the reference 625 x 49 system.
    Origins follow a symmetric Dirichlet(5). X is the final cold state of a
    parallel-tempering run targeting exp(-gamma V) and
    y = exp(X + lam * xi). ``obs_noise`` replaces ``hyper.lam`` in that
    last step (0 gives y = exp(X)); the noise draw is consumed either way,
    so X does not depend on it.
    """
    from .samplers import parallel_tempering_sample

    if M < 1 or N < 1:
        raise DimensionError("M and N must be positive")
    noise = hyper.lam if obs_noise is None else float(obs_noise)
    if not (noise >= 0 and np.isfinite(noise)):
        raise InvalidParameterError("obs_noise must be finite and nonnegative")
    rng = np.random.default_rng(seed)
    origin_xy = rng.random((N, 2))
    dest_xy = rng.random((M, 2))
    cost = euclidean_cost(origin_xy, dest_xy)
    if cost.mean() > 0:
        cost *= REFERENCE_COST_MEAN / cost.mean()
    origin = rng.dirichlet(np.full(N, 5.0))
    system = SpatialSystem(origin, cost)
    states = parallel_tempering_sample(system, theta_true, hyper, n_levels=pt_levels,
                                       chain_len=pt_len, rng=rng)
    x = states[-1].copy()
    y = np.exp(x + noise * rng.standard_normal(M))
    return SyntheticInstance(system, y, x, theta_true, hyper, origin_xy, dest_xy)
