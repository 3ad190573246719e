"""Template-matching localization and MDR/FAR/MAE scoring.

The spatial spectrum of a track is the pair-averaged inner product of its
estimated DP-IPD vector with every candidate template, divided by F so an
exact on-manifold match scores 1.0 (per-bin unit modulus makes a template's
self-product equal F).  That normalization makes the 0.5 detection
threshold scale-free.  Scoring is restricted to voice-active frames;
detections are matched to active sources by the assignment minimizing total
angular error, a match counts as a success when its error is within the
tolerance (inclusive), MDR counts unmatched sources and FAR counts surplus
detections, both against the active source-frame count by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .geometry import Direction, angular_error
from .targets import TemplateBank

DETECTION_THRESHOLD = 0.5


def spatial_spectrum(estimate: np.ndarray, bank: TemplateBank) -> np.ndarray:
    """Per-track spectra over the grid: estimate (K, P, 2F) -> (K, I).

    Linear in the estimate, so positive scaling never moves the argmax.
    """
    if estimate.ndim == 2:
        estimate = estimate[None]
    p, two_f = bank.values.shape[0], bank.values.shape[2]
    if estimate.shape[1] != p or estimate.shape[2] != two_f:
        raise ValueError(
            f"estimate {estimate.shape} does not match bank pairs {p} x {two_f}"
        )
    return np.einsum("kpc,pic->ki", estimate, bank.values) / (p * (two_f // 2))


@dataclass(frozen=True)
class Detection:
    direction: Direction
    peak: float
    track: int


def detect(spectra: np.ndarray, bank: TemplateBank,
           threshold: float = DETECTION_THRESHOLD) -> list:
    """Thresholded per-track argmax; strict inequality, ties to the lower
    grid index.  Returns a list of Detections (at most one per track)."""
    out = []
    for k, row in enumerate(spectra):
        i = int(np.argmax(row))
        if row[i] > threshold:
            out.append(Detection(direction=bank.grid.directions[i], peak=float(row[i]), track=k))
    return out


@dataclass(frozen=True)
class FrameResult:
    """Detections plus ground-truth active directions for one output frame."""

    detections: tuple
    truth: tuple

    @property
    def num_active(self) -> int:
        return len(self.truth)


def localize_frames(estimates: np.ndarray, bank: TemplateBank,
                    frame_truth: list = None,
                    threshold: float = DETECTION_THRESHOLD) -> list:
    """Decode (N, K, P, 2F) estimates; pairs with truth when given."""
    results = []
    for n in range(estimates.shape[0]):
        spectra = spatial_spectrum(estimates[n], bank)
        dets = detect(spectra, bank, threshold)
        truth: tuple = ()
        if frame_truth is not None:
            truth = frame_truth[n].active_directions()
        results.append(FrameResult(detections=tuple(dets), truth=truth))
    return results


@dataclass(frozen=True)
class Metrics:
    mdr: float
    far: float
    mae: float
    tolerance_deg: float
    active_count: int
    miss_count: int
    false_alarm_count: int
    match_count: int

    def report(self) -> str:
        lines = [
            f"tolerance_deg {self.tolerance_deg}",
            f"mdr_percent {self.mdr:.4f}",
            f"far_percent {self.far:.4f}",
            f"mae_deg {self.mae:.4f}",
            f"active_source_frames {self.active_count}",
            f"misses {self.miss_count}",
            f"false_alarms {self.false_alarm_count}",
            f"matches {self.match_count}",
        ]
        if self.match_count == 0:
            lines.append("note mae undefined (no matches); reported as 0")
        return "\n".join(lines)


def _best_assignment(detections: tuple, truth: tuple, joint: bool) -> list:
    """Pairs (det index, truth index, error) minimizing total angular error,
    matching as many pairs as the smaller set allows; exhaustive (K <= 2)."""
    nd, nt = len(detections), len(truth)
    if nd == 0 or nt == 0:
        return []
    errors = np.array(
        [[angular_error(d.direction, t, joint) for t in truth] for d in detections]
    )
    best, best_total = None, None
    if nd <= nt:
        for perm in permutations(range(nt), nd):
            total = sum(errors[i, perm[i]] for i in range(nd))
            if best_total is None or total < best_total:
                best_total = total
                best = [(i, perm[i], errors[i, perm[i]]) for i in range(nd)]
    else:
        for perm in permutations(range(nd), nt):
            total = sum(errors[perm[j], j] for j in range(nt))
            if best_total is None or total < best_total:
                best_total = total
                best = [(perm[j], j, errors[perm[j], j]) for j in range(nt)]
    return best


def score(results: list, tolerance_deg: float = 10.0, joint: bool = False,
          far_denominator: str = "active") -> Metrics:
    """MDR/FAR/MAE over voice-active frames.

    ``far_denominator`` is "active" (active source-frames, symmetric with
    MDR, the default) or "frames" (all voice-active frames).
    """
    if far_denominator not in ("active", "frames"):
        raise ValueError(f"unknown far denominator {far_denominator!r}")
    active_total = 0
    frame_total = 0
    misses = 0
    false_alarms = 0
    matched_errors = []
    for frame in results:
        if frame.num_active == 0:
            continue
        frame_total += 1
        active_total += frame.num_active
        pairs = _best_assignment(frame.detections, frame.truth, joint)
        successes = [e for (_, _, e) in pairs if e <= tolerance_deg]
        misses += frame.num_active - len(successes)
        false_alarms += len(frame.detections) - len(successes)
        matched_errors.extend(successes)
    denom = active_total if far_denominator == "active" else frame_total
    mdr = 100.0 * misses / active_total if active_total else 0.0
    far = 100.0 * false_alarms / denom if denom else 0.0
    mae = float(np.mean(matched_errors)) if matched_errors else 0.0
    return Metrics(
        mdr=mdr,
        far=far,
        mae=mae,
        tolerance_deg=tolerance_deg,
        active_count=active_total,
        miss_count=misses,
        false_alarm_count=false_alarms,
        match_count=len(matched_errors),
    )


def results_csv_rows(results: list) -> list:
    """Flatten FrameResults for the per-utterance CSV: one row per detection
    (frame, track, azimuth, elevation, peak, matched, error)."""
    rows = []
    for n, frame in enumerate(results):
        pairs = _best_assignment(frame.detections, frame.truth, joint=False)
        matched = {i: e for (i, _, e) in pairs}
        for i, det in enumerate(frame.detections):
            err = matched.get(i)
            rows.append(
                [
                    n,
                    det.track,
                    det.direction.azimuth_deg,
                    det.direction.elevation_deg,
                    f"{det.peak:.6f}",
                    int(err is not None),
                    "" if err is None else f"{err:.3f}",
                ]
            )
    return rows
