"""Origin-destination demand: matrices, movement volumes, similarity and arrivals.

Approaches are named by the compass side a vehicle enters FROM, so a vehicle
entering at the west edge travels eastbound.  Right turns are not modelled and
their O-D cells must be zero, as must the diagonal (no U-turns).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

APPROACHES = ("E", "W", "N", "S")
MOVEMENTS = ("EBL", "EBT", "WBL", "WBT", "NBL", "NBT", "SBL", "SBT")

# movement -> (origin, destination)
MOVEMENT_CELLS = {
    "EBT": ("W", "E"),
    "EBL": ("W", "N"),
    "WBT": ("E", "W"),
    "WBL": ("E", "S"),
    "NBT": ("S", "N"),
    "NBL": ("S", "W"),
    "SBT": ("N", "S"),
    "SBL": ("N", "E"),
}

RIGHT_TURN_CELLS = (("W", "S"), ("E", "N"), ("S", "E"), ("N", "W"))

# movements served by each phase (ring 1: 1-4, ring 2: 5-8)
PHASE_MOVEMENT = {
    1: "WBL", 2: "EBT", 3: "SBL", 4: "NBT",
    5: "EBL", 6: "WBT", 7: "NBL", 8: "SBT",
}

DEFAULT_LANES = {
    "EBL": 1, "EBT": 2, "WBL": 1, "WBT": 2,
    "NBL": 1, "NBT": 1, "SBL": 1, "SBT": 1,
}

REFERENCE_CYCLE = 120.0
TOTAL_LOST_TIME = 16.0


class InvalidMatrixError(ValueError):
    """Raised when an O-D matrix violates the demand invariants."""


class DegenerateInputError(ValueError):
    """Raised when a similarity is requested between two all-zero matrices."""


def _idx(approach: str) -> int:
    return APPROACHES.index(approach)


@dataclass(frozen=True)
class OdMatrix:
    """Hourly flows (veh/h); rows are origins, columns destinations, order E, W, N, S."""

    entries: np.ndarray
    label: str = ""

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float)
        if arr.shape != (4, 4):
            raise InvalidMatrixError(f"O-D matrix must be 4x4, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidMatrixError("O-D entries must be finite")
        if np.any(arr < 0):
            raise InvalidMatrixError("O-D entries must be nonnegative")
        if np.any(np.diag(arr) != 0):
            raise InvalidMatrixError("diagonal (U-turn) cells must be zero")
        for o, d in RIGHT_TURN_CELLS:
            if arr[_idx(o), _idx(d)] != 0:
                raise InvalidMatrixError(f"right-turn cell {o}->{d} must be zero")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @classmethod
    def from_movements(cls, volumes: Mapping[str, float], label: str = "") -> "OdMatrix":
        arr = np.zeros((4, 4))
        for mv, vol in volumes.items():
            o, d = MOVEMENT_CELLS[mv]
            arr[_idx(o), _idx(d)] = vol
        return cls(arr, label)

    def total(self) -> float:
        return float(self.entries.sum())

    def cells(self) -> np.ndarray:
        """The eight movement cells in ``MOVEMENTS`` order."""
        return np.array([self.entries[_idx(o), _idx(d)] for o, d in
                         (MOVEMENT_CELLS[m] for m in MOVEMENTS)])

    def scaled(self, factor: float, label: str | None = None) -> "OdMatrix":
        return OdMatrix(self.entries * factor, self.label if label is None else label)

    def to_json(self) -> dict:
        return {"label": self.label, "entries": self.entries.tolist(),
                "origins": list(APPROACHES)}


@dataclass(frozen=True)
class MovementVolumes:
    volumes: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.volumes) != set(MOVEMENTS):
            raise ValueError("exactly the 8 movements are required")
        if any(v < 0 for v in self.volumes.values()):
            raise ValueError("movement volumes must be nonnegative")

    def __getitem__(self, movement: str) -> float:
        return self.volumes[movement]

    def as_array(self) -> np.ndarray:
        return np.array([self.volumes[m] for m in MOVEMENTS], dtype=float)

    def total(self) -> float:
        return float(sum(self.volumes.values()))


@dataclass(frozen=True)
class ArrivalStream:
    """Time-sorted vehicle arrivals; ``movements`` holds indices into MOVEMENTS."""

    times: np.ndarray
    movements: np.ndarray
    horizon: float
    seed: int

    def __len__(self) -> int:
        return len(self.times)

    def events(self) -> list[tuple[float, str]]:
        return [(float(t), MOVEMENTS[m]) for t, m in zip(self.times, self.movements)]

    def count(self, movement: str) -> int:
        return int(np.sum(self.movements == MOVEMENTS.index(movement)))


def od_to_movements(m: OdMatrix) -> MovementVolumes:
    # OdMatrix construction already enforces the zero-cell invariants
    return MovementVolumes({mv: float(c) for mv, c in zip(MOVEMENTS, m.cells())})


def ssim(a: OdMatrix, b: OdMatrix) -> float:
    """Global single-window SSIM over the eight movement cells."""
    x = a.cells()
    y = b.cells()
    peak = max(x.max(), y.max())
    if peak <= 0:
        raise DegenerateInputError("SSIM undefined for two all-zero matrices")
    # the index is scale-invariant; rescale so tiny volumes cannot underflow
    x = x / peak
    y = y / peak
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def dissimilarity(a: OdMatrix, b: OdMatrix) -> float:
    return 1.0 - ssim(a, b)


def dissimilarity_matrix(patterns: Sequence[OdMatrix]) -> np.ndarray:
    n = len(patterns)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = dissimilarity(patterns[i], patterns[j])
    return out


def write_dissimilarity_csv(patterns: Sequence[OdMatrix], path, digits: int = 3) -> np.ndarray:
    mat = dissimilarity_matrix(patterns)
    labels = [p.label or str(i) for i, p in enumerate(patterns)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + labels)
        for lab, row in zip(labels, mat):
            w.writerow([lab] + [f"{v:.{digits}f}" for v in row])
    return mat


def volume_capacity_ratio(v: MovementVolumes, lanes: Mapping[str, int] | None = None,
                          sat_flow: float = 1900.0) -> float:
    """Critical-movement v/c over the two barrier sides of the dual ring."""
    lanes = DEFAULT_LANES if lanes is None else lanes
    if sat_flow <= 0:
        raise ValueError("sat_flow must be positive")
    if any(lanes[m] < 1 for m in MOVEMENTS):
        raise ValueError("every movement needs at least one lane")

    def y(phase):
        mv = PHASE_MOVEMENT[phase]
        return v[mv] / (sat_flow * lanes[mv])

    side1 = max(y(1) + y(2), y(5) + y(6))
    side2 = max(y(3) + y(4), y(7) + y(8))
    return (side1 + side2) * REFERENCE_CYCLE / (REFERENCE_CYCLE - TOTAL_LOST_TIME)


def generate_arrivals(m: OdMatrix, horizon: float, seed: int) -> ArrivalStream:
    """Independent stationary Poisson arrivals per movement, merged in time order."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    times, moves = [], []
    for k, rate_h in enumerate(m.cells()):
        rate = rate_h / 3600.0
        if rate <= 0:
            continue
        # draw in chunks until the horizon is passed
        t = 0.0
        chunk = max(16, int(rate * horizon * 1.2) + 16)
        parts = []
        while t <= horizon:
            gaps = rng.exponential(1.0 / rate, size=chunk)
            arr = t + np.cumsum(gaps)
            parts.append(arr)
            t = arr[-1]
        arr = np.concatenate(parts)
        arr = arr[arr <= horizon]
        times.append(arr)
        moves.append(np.full(len(arr), k, dtype=np.int64))
    if not times:
        return ArrivalStream(np.zeros(0), np.zeros(0, dtype=np.int64), float(horizon), seed)
    t_all = np.concatenate(times)
    m_all = np.concatenate(moves)
    order = np.lexsort((m_all, t_all))
    return ArrivalStream(t_all[order], m_all[order], float(horizon), seed)


def sample_matrix(rng: np.random.Generator, vc_band: tuple[float, float] = (0.5, 1.05),
                  lanes: Mapping[str, int] | None = None, sat_flow: float = 1900.0,
                  label: str = "", max_tries: int = 10_000) -> OdMatrix:
    """Rejection-sample a random O-D matrix whose v/c lies inside ``vc_band``."""
    lanes = DEFAULT_LANES if lanes is None else lanes
    lo, hi = vc_band
    for _ in range(max_tries):
        vols = {}
        for mv in MOVEMENTS:
            per_lane = rng.uniform(50, 700) if mv.endswith("T") else rng.uniform(20, 350)
            vols[mv] = round(per_lane * lanes[mv])
        m = OdMatrix.from_movements(vols, label)
        vc = volume_capacity_ratio(od_to_movements(m), lanes, sat_flow)
        if lo <= vc <= hi:
            return m
    raise RuntimeError(f"no matrix inside v/c band {vc_band} after {max_tries} draws")


def load_matrix(path) -> OdMatrix:
    with open(path) as fh:
        doc = json.load(fh)
    return matrix_from_json(doc)


def matrix_from_json(doc: Mapping) -> OdMatrix:
    try:
        entries = np.asarray(doc["entries"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidMatrixError(f"bad O-D document: {exc}") from exc
    origins = list(doc.get("origins", APPROACHES))
    if sorted(origins) != sorted(APPROACHES):
        raise InvalidMatrixError(f"origins must be a permutation of {APPROACHES}")
    if entries.shape != (4, 4):
        raise InvalidMatrixError(f"O-D matrix must be 4x4, got {entries.shape}")
    perm = [origins.index(a) for a in APPROACHES]
    return OdMatrix(entries[np.ix_(perm, perm)], str(doc.get("label", "")))


def save_matrix(m: OdMatrix, path) -> None:
    Path(path).write_text(json.dumps(m.to_json(), indent=2) + "\n")


_PATTERN_DIR = Path(__file__).parent / "data" / "patterns"


def builtin_pattern(label: str) -> OdMatrix:
    path = _PATTERN_DIR / f"{label.upper()}.json"
    if not path.exists():
        raise KeyError(f"no built-in pattern {label!r}")
    return load_matrix(path)


def builtin_patterns(labels: Iterable[str] = "ABCDEF") -> list[OdMatrix]:
    return [builtin_pattern(x) for x in labels]


def resolve_scenario(ref: str) -> OdMatrix:
    """A file path, or the label of a shipped pattern."""
    p = Path(ref)
    if p.exists():
        return load_matrix(p)
    if len(ref) == 1:
        return builtin_pattern(ref)
    raise FileNotFoundError(ref)


def poisson_band(rate_per_hour: float, horizon: float, k: float = 3.0) -> tuple[float, float]:
    mean = rate_per_hour * horizon / 3600.0
    return mean - k * math.sqrt(mean), mean + k * math.sqrt(mean)
