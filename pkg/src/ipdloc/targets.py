"""Direct-path IPD learning targets, the Bessel non-source target, candidate
templates, and per-frame multi-track training targets.

A DP-IPD vector for one microphone pair packs the complex direct-path phase
ratio over the retained bins as 2F reals: F cosines followed by F negated
sines of 2 pi v_f tau.  Source vectors live on the per-bin unit-modulus
manifold; the non-source vector is the mean of that manifold over a uniform
horizontal sweep of directions, which for a pair at distance d has real part
J0(2 pi v_f d / c) and zero imaginary part.  All components fall in [-1, 1],
matching the tanh output head of the estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import StftConfig
from .geometry import ArrayGeometry, CandidateGrid, Direction, pair_tdoa

OUTPUT_STRIDE = 12
ASYMPTOTIC_SWITCH = 12.0


def _j0_series(x: np.ndarray) -> np.ndarray:
    # Ascending series sum_j (-1)^j (x/2)^(2j) / (j!)^2 via a term ratio of
    # -(x/2)^2 / j^2.  Forty terms leave truncation below 1e-30 at the switch
    # point (small terms underflow harmlessly for small arguments).
    q = 0.25 * x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    for j in range(1, 41):
        term *= -q / (j * j)
        total += term
    return total


def _j0_asymptotic(x: np.ndarray) -> np.ndarray:
    # Hankel expansion J0(x) = sqrt(2/(pi x)) [P(x) cos chi - Q(x) sin chi],
    # chi = x - pi/4, with coefficient magnitudes b_m = ((2m-1)!!)^2/(m! 8^m)
    # built by the ratio b_m / b_{m-1} = (2m-1)^2 / (8m).  Sixteen terms
    # still shrink at the switch point and leave ~2e-11 there, less beyond.
    p = np.ones_like(x)
    q = np.zeros_like(x)
    b = 1.0
    xp = np.ones_like(x)
    for m in range(1, 17):
        b *= (2 * m - 1) ** 2 / (8.0 * m)
        xp /= x
        t = b * xp
        if m % 2 == 1:
            q += t if ((m + 1) // 2) % 2 == 0 else -t
        else:
            p += t if (m // 2) % 2 == 0 else -t
    chi = x - 0.25 * math.pi
    return np.sqrt(2.0 / (math.pi * x)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j0(x):
    """Zero-order Bessel function of the first kind, scalar or elementwise."""
    v = np.abs(np.asarray(x, dtype=np.float64))
    out = np.empty_like(v)
    small = v < ASYMPTOTIC_SWITCH
    if small.any():
        out[small] = _j0_series(v[small])
    if not small.all():
        out[~small] = _j0_asymptotic(v[~small])
    if np.ndim(x) == 0:
        return float(out[()])
    return out


def dp_ipd_vector(
    geometry: ArrayGeometry,
    m: int,
    direction: Direction,
    frequencies: np.ndarray = None,
) -> np.ndarray:
    """Pack exp(-j 2 pi v tau) over bins as [cos parts, -sin parts] (2F,)."""
    if frequencies is None:
        frequencies = StftConfig().frequencies()
    tau = pair_tdoa(geometry, m, direction)
    phase = 2.0 * np.pi * frequencies * tau
    return np.concatenate([np.cos(phase), -np.sin(phase)])


def non_source_vector(
    geometry: ArrayGeometry,
    m: int,
    frequencies: np.ndarray = None,
    mode: str = "bessel",
) -> np.ndarray:
    """Target for an inactive track on pair (r, m).

    "bessel" places J0(2 pi v d / c) in the real half (the mean of the
    source manifold over horizontal directions; its imaginary mean is zero).
    "zero" is the legacy all-zero vector.
    """
    if frequencies is None:
        frequencies = StftConfig().frequencies()
    geometry._check_pair(m)
    if mode == "zero":
        return np.zeros(2 * len(frequencies))
    if mode != "bessel":
        raise ValueError(f"unknown non-source mode {mode!r}")
    d = geometry.pair_distance(m)
    args = 2.0 * np.pi * np.asarray(frequencies) * d / geometry.sound_speed
    return np.concatenate([bessel_j0(args), np.zeros(len(frequencies))])


@dataclass(frozen=True)
class TemplateBank:
    """DP-IPD vectors of every (pair, candidate direction): values is
    (P, I, 2F) with pairs ordered by microphone index."""

    geometry: ArrayGeometry
    grid: CandidateGrid
    values: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.values.shape[0]


def build_templates(
    geometry: ArrayGeometry,
    grid: CandidateGrid,
    frequencies: np.ndarray = None,
) -> TemplateBank:
    """Deterministic template bank for matching estimates to directions."""
    if frequencies is None:
        frequencies = StftConfig().frequencies()
    pairs = geometry.pair_channels
    values = np.empty((len(pairs), len(grid), 2 * len(frequencies)))
    for pi, m in enumerate(pairs):
        for gi, direction in enumerate(grid.directions):
            values[pi, gi] = dp_ipd_vector(geometry, m, direction, frequencies)
    return TemplateBank(geometry=geometry, grid=grid, values=values)


def save_templates(path: str, bank: TemplateBank):
    """Cache a template bank (float32, one tensor per pair)."""
    from . import container

    tensors = {
        f"template/pair{m}/grid": bank.values[pi]
        for pi, m in enumerate(bank.geometry.pair_channels)
    }
    container.save_tensors(path, tensors)


def load_templates(path: str, geometry: ArrayGeometry, grid: CandidateGrid) -> TemplateBank:
    """Load a cached bank; validates pair count and grid size."""
    from . import container

    tensors = container.load_tensors(path)
    values = []
    for m in geometry.pair_channels:
        name = f"template/pair{m}/grid"
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        values.append(tensors[name])
    bank_values = np.stack(values)
    if bank_values.shape[1] != len(grid):
        raise ValueError(
            f"{path}: {bank_values.shape[1]} grid entries but the grid has {len(grid)}"
        )
    return TemplateBank(geometry=geometry, grid=grid, values=bank_values)


@dataclass(frozen=True)
class FrameTruth:
    """Ground truth for one output frame: per-source activity and direction."""

    active: tuple
    directions: tuple

    def active_directions(self) -> tuple:
        return tuple(d for a, d in zip(self.active, self.directions) if a)


def output_frame_count(num_input_frames: int, stride: int = OUTPUT_STRIDE) -> int:
    return -(-num_input_frames // stride)


def group_center_frame(group: int, num_input_frames: int, stride: int = OUTPUT_STRIDE) -> int:
    """Input-frame index representing output frame ``group``.

    Groups tile the input frames in runs of ``stride``; the representative is
    the center of the run (left of center for even lengths), clipped to the
    possibly short final group.
    """
    start = group * stride
    length = min(stride, num_input_frames - start)
    if length <= 0:
        raise ValueError(f"group {group} beyond {num_input_frames} input frames")
    return start + (length - 1) // 2


@dataclass(frozen=True)
class MultiTrackTarget:
    """Training target: values (N_out, K, P, 2F) and activity (N_out, K)."""

    values: np.ndarray
    activity: np.ndarray
    non_source_mode: str

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def assemble_training_target(
    frame_truth: list,
    geometry: ArrayGeometry,
    num_tracks: int = 2,
    frequencies: np.ndarray = None,
    non_source_mode: str = "bessel",
) -> MultiTrackTarget:
    """Build per-output-frame track targets from ground truth.

    ``frame_truth`` holds one :class:`FrameTruth` per output frame.  Active
    sources occupy the lowest free tracks (the order is immaterial: training
    re-permutes tracks per frame); inactive tracks carry the non-source
    vector of their pair.  More than ``num_tracks`` simultaneously active
    sources is an error.
    """
    if frequencies is None:
        frequencies = StftConfig().frequencies()
    pairs = geometry.pair_channels
    two_f = 2 * len(frequencies)
    idle = np.stack(
        [non_source_vector(geometry, m, frequencies, non_source_mode) for m in pairs]
    )
    values = np.empty((len(frame_truth), num_tracks, len(pairs), two_f))
    activity = np.zeros((len(frame_truth), num_tracks), dtype=bool)
    for n, truth in enumerate(frame_truth):
        active = truth.active_directions()
        if len(active) > num_tracks:
            raise ValueError(
                f"frame {n}: {len(active)} active sources exceed {num_tracks} tracks"
            )
        values[n] = idle
        for k, direction in enumerate(active):
            for pi, m in enumerate(pairs):
                values[n, k, pi] = dp_ipd_vector(geometry, m, direction, frequencies)
            activity[n, k] = True
    return MultiTrackTarget(values=values, activity=activity, non_source_mode=non_source_mode)
