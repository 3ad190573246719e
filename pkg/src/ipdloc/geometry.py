"""Microphone array geometry, far-field propagation delays and candidate grids.

Conventions used throughout the package:

* Coordinates are meters in a right-handed array frame.
* Azimuth is measured in the horizontal (x-y) plane from the +x axis,
  counterclockwise, in degrees [0, 360).  Elevation is degrees in [-90, 90],
  positive toward +z.
* ``pair_tdoa`` returns tau = (p_m - p_r) . u / c where u is the unit vector
  of the source direction.  The complex direct-path phase ratio of the pair
  is exp(-j 2 pi v tau); the renderer, targets and templates all share this
  sign convention, and for a two-microphone pair with spacing d it reduces
  to the classic d*cos(theta)/c.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

SOUND_SPEED = 343.0

# Inter-microphone distance range (meters) used when *generating* training
# arrays.  Arbitrary geometries are accepted at inference time.
TRAIN_PAIR_DISTANCE = (0.03, 0.25)


def _cos_deg(deg: float) -> float:
    """Cosine of an angle in degrees, exact at multiples of 90."""
    r = deg % 360.0
    if r == 0.0:
        return 1.0
    if r == 90.0 or r == 270.0:
        return 0.0
    if r == 180.0:
        return -1.0
    return math.cos(math.radians(r))


def _sin_deg(deg: float) -> float:
    """Sine of an angle in degrees, exact at multiples of 90."""
    r = deg % 360.0
    if r == 0.0 or r == 180.0:
        return 0.0
    if r == 90.0:
        return 1.0
    if r == 270.0:
        return -1.0
    return math.sin(math.radians(r))


@dataclass(frozen=True)
class Direction:
    """A direction of arrival: azimuth [0, 360) and elevation [-90, 90] degrees."""

    azimuth_deg: float
    elevation_deg: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.elevation_deg <= 90.0):
            raise ValueError(f"elevation {self.elevation_deg} out of [-90, 90]")
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)

    def unit_vector(self) -> np.ndarray:
        """Unit vector pointing from the array toward the source."""
        ce = _cos_deg(self.elevation_deg)
        return np.array(
            [
                ce * _cos_deg(self.azimuth_deg),
                ce * _sin_deg(self.azimuth_deg),
                _sin_deg(self.elevation_deg),
            ]
        )


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions plus the designated reference channel.

    ``positions`` is an (M, 3) arrangement of microphone coordinates in
    meters, M >= 2.  ``reference_index`` selects the reference microphone r;
    every other microphone m forms the ordered pair (r, m).
    """

    positions: tuple = field()
    reference_index: int = 0
    sound_speed: float = SOUND_SPEED

    def __post_init__(self):
        pos = tuple(tuple(float(c) for c in p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        m = len(pos)
        if m < 2:
            raise ValueError(f"need at least 2 microphones, got {m}")
        if any(len(p) != 3 for p in pos):
            raise ValueError("each microphone position must have 3 coordinates")
        if not 0 <= self.reference_index < m:
            raise ValueError(f"reference index {self.reference_index} out of range for M={m}")
        if self.sound_speed <= 0:
            raise ValueError("sound speed must be positive")
        arr = np.asarray(pos)
        for i in range(m):
            for j in range(i + 1, m):
                if np.linalg.norm(arr[i] - arr[j]) <= 0.0:
                    raise ValueError(f"microphones {i} and {j} are collocated")

    @property
    def num_mics(self) -> int:
        return len(self.positions)

    @property
    def pair_channels(self) -> tuple:
        """Non-reference channel indices in microphone order."""
        return tuple(i for i in range(self.num_mics) if i != self.reference_index)

    def position_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.float64)

    def pair_distance(self, m: int) -> float:
        """Distance between the reference microphone and microphone m."""
        self._check_pair(m)
        p = self.position_array()
        return float(np.linalg.norm(p[m] - p[self.reference_index]))

    def _check_pair(self, m: int):
        if not 0 <= m < self.num_mics:
            raise ValueError(f"microphone index {m} out of range for M={self.num_mics}")
        if m == self.reference_index:
            raise ValueError(f"microphone {m} is the reference channel")

    def validate_training_distances(self):
        """Check reference-to-microphone distances against the training range."""
        lo, hi = TRAIN_PAIR_DISTANCE
        for m in self.pair_channels:
            d = self.pair_distance(m)
            if not lo <= d <= hi:
                raise ValueError(
                    f"pair (r={self.reference_index}, m={m}) distance {d:.4f} m "
                    f"outside training range [{lo}, {hi}] m"
                )


def pair_tdoa(geometry: ArrayGeometry, m: int, direction: Direction) -> float:
    """Far-field TDOA (seconds) of microphone m relative to the reference.

    tau = (p_m - p_r) . u(direction) / c.  Antisymmetric under swapping the
    two microphones of the pair; |tau| <= pair distance / c.
    """
    geometry._check_pair(m)
    p = geometry.position_array()
    delta = p[m] - p[geometry.reference_index]
    return float(np.dot(delta, direction.unit_vector()) / geometry.sound_speed)


@dataclass(frozen=True)
class CandidateGrid:
    """Ordered list of candidate directions with a uniform angular resolution."""

    directions: tuple
    resolution_deg: float
    kind: str = "azimuth"

    def __post_init__(self):
        if len(self.directions) != len(set(self.directions)):
            raise ValueError("candidate directions must be unique")

    def __len__(self) -> int:
        return len(self.directions)

    def azimuths(self) -> np.ndarray:
        return np.array([d.azimuth_deg for d in self.directions])

    def elevations(self) -> np.ndarray:
        return np.array([d.elevation_deg for d in self.directions])


def make_grid(
    kind: str = "azimuth",
    resolution_deg: float = 1.0,
    azimuth_span_deg: float = 360.0,
    elevation_range_deg: tuple = (-90.0, 90.0),
) -> CandidateGrid:
    """Build a candidate-direction grid.

    ``kind`` is "azimuth" (elevation fixed at 0) or "joint".  An azimuth span
    of 360 excludes the duplicate endpoint; a partial span (e.g. 180 for a
    linear array) includes both ends.  The resolution must divide the spans.
    """
    if kind not in ("azimuth", "joint"):
        raise ValueError(f"unknown grid kind {kind!r}")
    if resolution_deg <= 0:
        raise ValueError("resolution must be positive")

    def steps(span: float) -> int:
        n = span / resolution_deg
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"resolution {resolution_deg} does not divide span {span}")
        return int(round(n))

    n_az = steps(azimuth_span_deg)
    full_circle = abs(azimuth_span_deg - 360.0) < 1e-9
    azimuths = [i * resolution_deg for i in range(n_az if full_circle else n_az + 1)]

    if kind == "azimuth":
        dirs = tuple(Direction(a, 0.0) for a in azimuths)
    else:
        lo, hi = elevation_range_deg
        n_el = steps(hi - lo)
        elevations = [lo + i * resolution_deg for i in range(n_el + 1)]
        dirs = tuple(Direction(a, e) for a in azimuths for e in elevations)
    return CandidateGrid(directions=dirs, resolution_deg=resolution_deg, kind=kind)


def angular_error(a: Direction, b: Direction, joint: bool = False) -> float:
    """Angular error in degrees: circular azimuth difference, or the
    great-circle angle between unit vectors when ``joint`` is set."""
    if joint:
        dot = float(np.dot(a.unit_vector(), b.unit_vector()))
        return math.degrees(math.acos(min(1.0, max(-1.0, dot))))
    d = abs(a.azimuth_deg - b.azimuth_deg) % 360.0
    return min(d, 360.0 - d)


# ---------------------------------------------------------------------------
# Geometry file format: plain text with M, reference index, sound speed and
# one "x y z" row per microphone.


def format_geometry(geometry: ArrayGeometry) -> str:
    lines = [
        f"mics {geometry.num_mics}",
        f"reference {geometry.reference_index}",
        f"sound_speed {geometry.sound_speed!r}",
    ]
    for p in geometry.positions:
        lines.append(" ".join(repr(c) for c in p))
    return "\n".join(lines) + "\n"


def save_geometry(path, geometry: ArrayGeometry):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_geometry(geometry))


def load_geometry(path) -> ArrayGeometry:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        m = int(lines[0].split()[1])
        ref = int(lines[1].split()[1])
        c = float(lines[2].split()[1])
        rows = [tuple(float(v) for v in ln.split()) for ln in lines[3 : 3 + m]]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed geometry file {path}: {exc}") from exc
    if len(rows) != m:
        raise ValueError(f"geometry file {path} declares {m} microphones, found {len(rows)} rows")
    return ArrayGeometry(positions=tuple(rows), reference_index=ref, sound_speed=c)


def geometry_fingerprint(geometry: ArrayGeometry) -> str:
    """Stable content hash used to bind datasets, templates and checkpoints."""
    return hashlib.sha256(format_geometry(geometry).encode("ascii")).hexdigest()
