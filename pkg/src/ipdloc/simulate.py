"""Multichannel scene simulation with per-frame ground truth.

Rendering conventions (shared with the geometry/targets modules): for a
source in direction u at distance ``dist`` from the array center, the
direct path reaches microphone m at dist/c + (p_m - center) . u / c with
gain 1/dist, so the rendered pair phases reproduce pair_tdoa exactly in
the far field.  Reverberation places an effective point source at
center - dist * u (the position whose far-field expansion matches that
convention) and mirrors it through the room walls, low order only, with a
single Sabine-derived reflection coefficient.  Directions are rendered
with a 32-tap windowed-sinc fractional delay; moving sources are rendered
in 8 ms blocks with 50%-overlap Hann windows (constant-overlap-add).

Diffuse noise is synthesized in the frequency domain by mixing independent
spectra through the Cholesky factor of the cylindrically isotropic
coherence matrix J0(2 pi f d / c) per bin.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dsp import SAMPLE_RATE, StftConfig, read_wav, stft, write_wav
from .geometry import (
    ArrayGeometry,
    Direction,
    geometry_fingerprint,
    load_geometry,
)
from .targets import (
    OUTPUT_STRIDE,
    FrameTruth,
    bessel_j0,
    group_center_frame,
    output_frame_count,
)

DELAY_TAPS = 32
BLOCK_HOP = 128  # 8 ms at 16 kHz
ACTIVITY_THRESHOLD = 0.001
RT60_RANGE = (0.2, 1.3)
SNR_RANGE = (-5.0, 15.0)
MAX_SOURCE_SPEED = 1.0  # m/s
ROOM_DIM_RANGES = ((6.0, 10.0), (6.0, 8.0), (2.5, 6.0))


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear direction path; angles interpolate linearly in the
    given (possibly unwrapped) azimuth numbers."""

    times: tuple
    azimuths: tuple
    elevations: tuple

    def __post_init__(self):
        if not (len(self.times) == len(self.azimuths) == len(self.elevations)):
            raise ValueError("trajectory knot lists must share length")
        if len(self.times) < 1:
            raise ValueError("trajectory needs at least one knot")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must increase")

    @staticmethod
    def static(direction: Direction) -> "Trajectory":
        return Trajectory((0.0,), (direction.azimuth_deg,), (direction.elevation_deg,))

    @property
    def is_static(self) -> bool:
        return len(self.times) == 1 or (
            len(set(self.azimuths)) == 1 and len(set(self.elevations)) == 1
        )

    def direction_at(self, t: float) -> Direction:
        az = float(np.interp(t, self.times, self.azimuths))
        el = float(np.interp(t, self.times, self.elevations))
        return Direction(az, el)

    def max_angular_speed(self) -> float:
        """Degrees/second upper bound over the knots (great-circle rate is
        bounded by the rate of the interpolated angles)."""
        worst = 0.0
        for i in range(len(self.times) - 1):
            dt = self.times[i + 1] - self.times[i]
            rate = max(
                abs(self.azimuths[i + 1] - self.azimuths[i]),
                abs(self.elevations[i + 1] - self.elevations[i]),
            ) / dt
            worst = max(worst, rate)
        return worst


@dataclass(frozen=True)
class SourceSpec:
    waveform: np.ndarray
    trajectory: Trajectory
    onset: float = 0.0
    distance: float = 1.5

    @property
    def offset(self) -> float:
        return self.onset + len(self.waveform) / SAMPLE_RATE


@dataclass(frozen=True)
class RoomSpec:
    enabled: bool = False
    dimensions: tuple = (8.0, 7.0, 4.0)
    rt60: float = 0.5
    max_order: int = 2
    array_center: tuple = None  # defaults to the room center

    def __post_init__(self):
        if self.enabled:
            if any(d <= 0 for d in self.dimensions):
                raise ValueError("room dimensions must be positive")
            lo, hi = RT60_RANGE
            if not lo <= self.rt60 <= hi:
                raise ValueError(f"rt60 {self.rt60} outside [{lo}, {hi}] s")
            if self.max_order < 1:
                raise ValueError("max_order must be >= 1")

    def center(self) -> np.ndarray:
        if self.array_center is not None:
            return np.asarray(self.array_center, dtype=np.float64)
        return np.asarray(self.dimensions, dtype=np.float64) / 2.0


@dataclass(frozen=True)
class SceneSpec:
    geometry: ArrayGeometry
    sources: tuple
    duration: float
    snr_db: float = None
    room: RoomSpec = field(default_factory=RoomSpec)
    seed: int = 0
    max_simultaneous: int = 2

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.duration * SAMPLE_RATE < StftConfig().window_size:
            raise ValueError("duration shorter than one analysis window")
        if self.snr_db is not None:
            lo, hi = SNR_RANGE
            if not lo <= self.snr_db <= hi:
                raise ValueError(f"snr {self.snr_db} dB outside [{lo}, {hi}]")
        radius = self._array_radius()
        for i, src in enumerate(self.sources):
            if src.distance < max(0.5, 4.0 * radius):
                raise ValueError(
                    f"source {i} distance {src.distance} m too close for the "
                    f"far-field model (array radius {radius:.3f} m)"
                )
            speed = src.trajectory.max_angular_speed() * np.pi / 180.0 * src.distance
            if speed > MAX_SOURCE_SPEED + 1e-9:
                raise ValueError(f"source {i} moves at {speed:.2f} m/s (max 1)")
        self._check_overlap()

    def _array_radius(self) -> float:
        p = self.geometry.position_array()
        return float(np.max(np.linalg.norm(p - p.mean(axis=0), axis=1)))

    def _check_overlap(self):
        events = []
        for src in self.sources:
            events.append((src.onset, 1))
            events.append((src.offset, -1))
        live = 0
        for _, delta in sorted(events, key=lambda e: (e[0], e[1])):
            live += delta
            if live > self.max_simultaneous:
                raise ValueError(
                    f"more than {self.max_simultaneous} sources active at once"
                )


@dataclass(frozen=True)
class SceneAudio:
    mixture: np.ndarray
    direct_refs: np.ndarray
    frame_truth: list
    activity: np.ndarray  # (num sources, input frames) ratio values
    snr_db: float = None


# ---------------------------------------------------------------------------
# Fractional delay


def delay_kernel(fractional: float, taps: int = DELAY_TAPS) -> np.ndarray:
    """Windowed-sinc interpolation kernel for a delay of ``fractional``
    samples, taps/2 - 1 <= fractional < taps/2."""
    i = np.arange(taps, dtype=np.float64)
    t = i - fractional
    kernel = np.sinc(t)
    kernel *= 0.5 * (1.0 + np.cos(np.pi * t / (taps / 2))) * (np.abs(t) <= taps / 2)
    return kernel


def apply_delay(out: np.ndarray, signal: np.ndarray, delay_samples: float,
                gain: float, start: int = 0):
    """Accumulate ``gain * signal`` delayed by ``delay_samples`` into ``out``,
    where ``signal`` nominally begins at sample ``start`` of the timeline."""
    taps = DELAY_TAPS
    shift = int(np.floor(delay_samples)) - (taps // 2 - 1)
    if shift + start + taps // 2 < 0:
        raise ValueError(f"delay {delay_samples} samples puts energy before time zero")
    frac = delay_samples - shift
    kernel = delay_kernel(frac) * gain
    conv = np.convolve(signal, kernel)
    lo = start + shift
    hi = min(lo + len(conv), len(out))
    src_lo = 0
    if lo < 0:
        src_lo = -lo
        lo = 0
    if hi > lo:
        out[lo:hi] += conv[src_lo : src_lo + hi - lo]


# ---------------------------------------------------------------------------
# Source rendering


def _sabine_beta(room: RoomSpec) -> float:
    lx, ly, lz = room.dimensions
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 0.161 * volume / (surface * room.rt60)
    return float(np.sqrt(max(0.0, 1.0 - alpha)))


def _axis_images(coord: float, length: float, max_order: int) -> list:
    """(position, reflection count) along one axis, walls at 0 and length."""
    out = []
    span = max_order // 2 + 1
    for n in range(-span, span + 1):
        for q in (0, 1):
            refl = abs(2 * n - q)
            if refl <= max_order:
                pos = 2 * n * length + (coord if q == 0 else -coord)
                out.append((pos, refl))
    return out


def _image_sources(source_abs: np.ndarray, room: RoomSpec) -> list:
    """Reflected images (position, order), direct path (order 0) excluded."""
    axes = [
        _axis_images(source_abs[d], room.dimensions[d], room.max_order)
        for d in range(3)
    ]
    images = []
    for px, rx in axes[0]:
        for py, ry in axes[1]:
            for pz, rz in axes[2]:
                order = rx + ry + rz
                if 0 < order <= room.max_order:
                    images.append((np.array([px, py, pz]), order))
    return images


def _render_segment(direct: np.ndarray, reverb: np.ndarray, segment: np.ndarray,
                    start: int, direction: Direction, spec: SceneSpec,
                    src: SourceSpec, beta: float):
    """Accumulate one (block-)static segment into per-mic direct/reverb."""
    geometry = spec.geometry
    positions = geometry.position_array()
    center = positions.mean(axis=0)
    u = direction.unit_vector()
    c = geometry.sound_speed
    base = src.distance / c
    for m in range(geometry.num_mics):
        arrival = base + float(np.dot(positions[m] - center, u)) / c
        apply_delay(direct[:, m], segment, arrival * SAMPLE_RATE, 1.0 / src.distance, start)
    if spec.room.enabled:
        room_center = spec.room.center()
        source_abs = room_center + (center - src.distance * u)
        _validate_inside(source_abs, spec.room)
        for image_pos, order in _image_sources(source_abs, spec.room):
            gain = beta**order
            for m in range(geometry.num_mics):
                mic_abs = room_center + positions[m]
                dist = float(np.linalg.norm(image_pos - mic_abs))
                apply_delay(
                    reverb[:, m], segment, dist / c * SAMPLE_RATE, gain / dist, start
                )


def _validate_inside(point: np.ndarray, room: RoomSpec, margin: float = 0.05):
    for d in range(3):
        if not margin <= point[d] <= room.dimensions[d] - margin:
            raise ValueError(
                f"source position {point.tolist()} leaves the room {room.dimensions}"
            )


def render_source(spec: SceneSpec, src: SourceSpec) -> tuple:
    """-> (direct, reverb) multichannel waveforms for one source."""
    num_samples = round(spec.duration * SAMPLE_RATE)
    m = spec.geometry.num_mics
    direct = np.zeros((num_samples, m))
    reverb = np.zeros((num_samples, m))
    beta = _sabine_beta(spec.room) if spec.room.enabled else 0.0
    onset_idx = round(src.onset * SAMPLE_RATE)
    timeline = np.asarray(src.waveform, dtype=np.float64)
    if onset_idx + len(timeline) > num_samples:
        timeline = timeline[: max(0, num_samples - onset_idx)]
    if src.trajectory.is_static:
        direction = src.trajectory.direction_at(src.onset)
        _render_segment(direct, reverb, timeline, onset_idx, direction, spec, src, beta)
    else:
        win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(2 * BLOCK_HOP) / (2 * BLOCK_HOP))
        for start in range(-BLOCK_HOP, len(timeline), BLOCK_HOP):
            stop = start + 2 * BLOCK_HOP
            seg = np.zeros(2 * BLOCK_HOP)
            lo, hi = max(start, 0), min(stop, len(timeline))
            if hi <= lo:
                continue
            seg[lo - start : hi - start] = timeline[lo:hi]
            seg *= win
            t_center = (onset_idx + start + BLOCK_HOP) / SAMPLE_RATE
            direction = src.trajectory.direction_at(t_center)
            _render_segment(direct, reverb, seg, onset_idx + start, direction, spec, src, beta)
    return direct, reverb


# ---------------------------------------------------------------------------
# Diffuse noise


def diffuse_noise(geometry: ArrayGeometry, duration: float, seed: int,
                  sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Cylindrically isotropic diffuse noise, (T, M), unit overall RMS.

    Independent Gaussian spectra are mixed per frequency bin through the
    Cholesky factor of the target coherence matrix J0(2 pi f d_ij / c),
    diagonally regularized by 1e-6.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    num_samples = round(duration * sample_rate)
    m = geometry.num_mics
    freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    if m == 1:
        noise = rng.standard_normal(num_samples)[:, None]
        return noise / np.std(noise)
    positions = geometry.position_array()
    coherence = np.empty((len(freqs), m, m))
    coherence[:] = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            d = np.linalg.norm(positions[i] - positions[j])
            gamma = bessel_j0(2.0 * np.pi * freqs * d / geometry.sound_speed)
            coherence[:, i, j] = gamma
            coherence[:, j, i] = gamma
    coherence += 1e-6 * np.eye(m)
    chol = np.linalg.cholesky(coherence)
    white = rng.standard_normal((len(freqs), m)) + 1j * rng.standard_normal((len(freqs), m))
    mixed = np.einsum("fij,fj->fi", chol, white)
    mixed[0] = mixed[0].real
    if num_samples % 2 == 0:
        mixed[-1] = mixed[-1].real
    noise = np.fft.irfft(mixed, n=num_samples, axis=0)
    return noise / np.std(noise)


# ---------------------------------------------------------------------------
# Activity


def activity_ratio(direct_spec: np.ndarray, mixture_spec: np.ndarray) -> np.ndarray:
    """Per-frame mean over bins of |direct| / |mixture| ((N, F) inputs);
    bins where the mixture is exactly zero contribute zero."""
    if direct_spec.shape != mixture_spec.shape:
        raise ValueError(
            f"shape mismatch: direct {direct_spec.shape} vs mixture {mixture_spec.shape}"
        )
    num = np.abs(direct_spec)
    den = np.abs(mixture_spec)
    ratio = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return ratio.mean(axis=1)


# ---------------------------------------------------------------------------
# Scene assembly


def render_scene(spec: SceneSpec, stft_config: StftConfig = StftConfig(),
                 stride: int = None,
                 activity_threshold: float = ACTIVITY_THRESHOLD) -> SceneAudio:
    """Render sources + reverberation + diffuse noise with frame truth.

    Deterministic in ``spec`` (including the seed).  The SNR scales the
    diffuse noise against the summed direct-path power at the reference
    microphone; a silent scene leaves the noise at unit RMS.  ``stride``
    sets how many input frames one truth entry covers (default 12, the
    temporal pooling of the estimator).
    """
    num_samples = round(spec.duration * SAMPLE_RATE)
    ref = spec.geometry.reference_index
    mixture = np.zeros((num_samples, spec.geometry.num_mics))
    direct_refs = np.zeros((len(spec.sources), num_samples))
    for si, src in enumerate(spec.sources):
        direct, reverb = render_source(spec, src)
        mixture += direct + reverb
        direct_refs[si] = direct[:, ref]
    if spec.snr_db is not None:
        noise = diffuse_noise(spec.geometry, spec.duration, spec.seed)[:num_samples]
        speech_power = float(np.mean(np.sum(direct_refs, axis=0) ** 2))
        if speech_power > 0.0:
            noise_power = float(np.mean(noise[:, ref] ** 2))
            target = speech_power / 10.0 ** (spec.snr_db / 10.0)
            noise = noise * np.sqrt(target / noise_power)
        mixture = mixture + noise

    mix_spec = stft(mixture[:, ref], stft_config)[:, :, 0]
    num_frames = mix_spec.shape[0]
    activity = np.zeros((len(spec.sources), num_frames))
    for si in range(len(spec.sources)):
        dspec = stft(direct_refs[si], stft_config)[:, :, 0]
        activity[si] = activity_ratio(dspec, mix_spec)

    if stride is None:
        stride = OUTPUT_STRIDE
    truth = []
    for g in range(output_frame_count(num_frames, stride)):
        n_c = group_center_frame(g, num_frames, stride)
        t_c = (n_c * stft_config.hop_size + stft_config.window_size / 2) / SAMPLE_RATE
        active = tuple(bool(activity[si, n_c] > activity_threshold) for si in range(len(spec.sources)))
        dirs = tuple(src.trajectory.direction_at(t_c) for src in spec.sources)
        truth.append(FrameTruth(active=active, directions=dirs))
    return SceneAudio(
        mixture=mixture,
        direct_refs=direct_refs,
        frame_truth=truth,
        activity=activity,
        snr_db=spec.snr_db,
    )


# ---------------------------------------------------------------------------
# Synthetic source material


def burst_waveform(rng: np.random.Generator, duration: float,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Amplitude-modulated noise burst with raised-cosine edges, a stand-in
    for speech when no corpus directory is supplied."""
    n = round(duration * sample_rate)
    x = rng.standard_normal(n)
    t = np.arange(n) / sample_rate
    rate = rng.uniform(0.8, 3.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    x *= 0.65 + 0.35 * np.sin(2.0 * np.pi * rate * t + phase)
    ramp = min(round(0.02 * sample_rate), n // 2)
    if ramp > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        x[:ramp] *= edge
        x[-ramp:] *= edge[::-1]
    return x


# ---------------------------------------------------------------------------
# Scene sampling


@dataclass(frozen=True)
class RoomRanges:
    """Sampling ranges for reverberant rooms (disabled by default)."""

    enabled: bool = False
    x: tuple = ROOM_DIM_RANGES[0]
    y: tuple = ROOM_DIM_RANGES[1]
    z: tuple = ROOM_DIM_RANGES[2]
    rt60: tuple = RT60_RANGE
    max_order: int = 2


@dataclass(frozen=True)
class SimulateRanges:
    """Sampling ranges for random scenes; ``snr_db = None`` disables noise."""

    duration: tuple = (0.5, 0.6)
    snr_db: tuple = (5.0, 15.0)
    num_sources: tuple = (1, 1)
    source_distance: tuple = (1.2, 2.0)
    active_fraction: tuple = (0.4, 0.9)
    # linear arrays cannot separate front from back; restrict to (0, 180)
    # to reproduce half-plane protocols
    azimuth_deg: tuple = (0.0, 360.0)
    elevation_deg: tuple = (0.0, 0.0)
    moving_fraction: float = 0.0
    max_speed: float = 0.5
    room: RoomRanges = field(default_factory=RoomRanges)


def sample_scene(geometry: ArrayGeometry, ranges: SimulateRanges, seed: int,
                 index: int) -> SceneSpec:
    """Draw one random SceneSpec; deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    duration = rng.uniform(*ranges.duration)
    count = int(rng.integers(ranges.num_sources[0], ranges.num_sources[1] + 1))
    sources = []
    for _ in range(count):
        fraction = rng.uniform(*ranges.active_fraction)
        length = max(fraction * duration, 2 * StftConfig().window_size / SAMPLE_RATE)
        length = min(length, duration)
        onset = rng.uniform(0.0, duration - length)
        waveform = burst_waveform(rng, length)
        azimuth = rng.uniform(*ranges.azimuth_deg)
        elevation = rng.uniform(*ranges.elevation_deg)
        distance = rng.uniform(*ranges.source_distance)
        if rng.uniform() < ranges.moving_fraction:
            cap = ranges.max_speed / distance * 180.0 / np.pi  # deg/s
            rate = rng.uniform(0.2, 1.0) * cap * (1.0 if rng.uniform() < 0.5 else -1.0)
            trajectory = Trajectory(
                times=(0.0, duration),
                azimuths=(azimuth, azimuth + rate * duration),
                elevations=(elevation, elevation),
            )
        else:
            trajectory = Trajectory.static(Direction(azimuth, elevation))
        sources.append(
            SourceSpec(waveform=waveform, trajectory=trajectory,
                       onset=onset, distance=distance)
        )
    if ranges.room.enabled:
        room = RoomSpec(
            enabled=True,
            dimensions=(
                rng.uniform(*ranges.room.x),
                rng.uniform(*ranges.room.y),
                rng.uniform(*ranges.room.z),
            ),
            rt60=rng.uniform(*ranges.room.rt60),
            max_order=ranges.room.max_order,
        )
    else:
        room = RoomSpec()
    snr = float(rng.uniform(*ranges.snr_db)) if ranges.snr_db is not None else None
    scene_seed = int(rng.integers(2**31))
    return SceneSpec(
        geometry=geometry,
        sources=tuple(sources),
        duration=duration,
        snr_db=snr,
        room=room,
        seed=scene_seed,
    )


def generate_dataset(root: str, geometry: ArrayGeometry, ranges: SimulateRanges,
                     count: int, seed: int, log=None, stride: int = OUTPUT_STRIDE,
                     activity_threshold: float = ACTIVITY_THRESHOLD) -> list:
    """Write ``count`` sampled utterance directories plus a manifest."""
    os.makedirs(root, exist_ok=True)
    names = []
    for i in range(count):
        spec = sample_scene(geometry, ranges, seed, i)
        audio = render_scene(spec, stride=stride, activity_threshold=activity_threshold)
        name = f"utt{i:05d}"
        write_utterance(os.path.join(root, name), spec, audio)
        names.append(name)
        if log is not None and (i + 1) % 100 == 0:
            log(f"rendered {i + 1}/{count}")
    write_manifest(root, names, geometry,
                   {"seed": seed, "count": count, "stride": stride,
                    "activity_threshold": activity_threshold})
    return names


# ---------------------------------------------------------------------------
# Dataset directories


def _truth_to_json(frame_truth: list) -> list:
    return [
        {
            "active": [bool(a) for a in ft.active],
            "azimuth": [d.azimuth_deg for d in ft.directions],
            "elevation": [d.elevation_deg for d in ft.directions],
        }
        for ft in frame_truth
    ]


def _truth_from_json(rows: list) -> list:
    return [
        FrameTruth(
            active=tuple(row["active"]),
            directions=tuple(
                Direction(a, e) for a, e in zip(row["azimuth"], row["elevation"])
            ),
        )
        for row in rows
    ]


def write_utterance(path: str, spec: SceneSpec, audio: SceneAudio):
    os.makedirs(path, exist_ok=True)
    write_wav(os.path.join(path, "mixture.wav"), audio.mixture)
    for si in range(audio.direct_refs.shape[0]):
        write_wav(os.path.join(path, f"source{si}.wav"), audio.direct_refs[si])
    meta = {
        "seed": spec.seed,
        "duration": spec.duration,
        "snr_db": spec.snr_db,
        "geometry": {
            "positions": [list(p) for p in spec.geometry.positions],
            "reference_index": spec.geometry.reference_index,
            "sound_speed": spec.geometry.sound_speed,
        },
        "geometry_fingerprint": geometry_fingerprint(spec.geometry),
        "room": {
            "enabled": spec.room.enabled,
            "dimensions": list(spec.room.dimensions),
            "rt60": spec.room.rt60,
        },
        "sources": [
            {
                "onset": src.onset,
                "offset": src.offset,
                "distance": src.distance,
                "times": list(src.trajectory.times),
                "azimuths": list(src.trajectory.azimuths),
                "elevations": list(src.trajectory.elevations),
            }
            for src in spec.sources
        ],
        "frame_truth": _truth_to_json(audio.frame_truth),
    }
    tmp = os.path.join(path, "meta.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    os.replace(tmp, os.path.join(path, "meta.json"))


def load_utterance(path: str) -> tuple:
    """-> (mixture (T, M), geometry, frame_truth, meta dict)."""
    with open(os.path.join(path, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    g = meta["geometry"]
    geometry = ArrayGeometry(
        positions=tuple(tuple(p) for p in g["positions"]),
        reference_index=g["reference_index"],
        sound_speed=g["sound_speed"],
    )
    mixture = read_wav(os.path.join(path, "mixture.wav"))
    if mixture.ndim == 1:
        mixture = mixture[:, None]
    return mixture, geometry, _truth_from_json(meta["frame_truth"]), meta


def write_manifest(root: str, names: list, geometry: ArrayGeometry, extra: dict = None):
    manifest = {
        "geometry_fingerprint": geometry_fingerprint(geometry),
        "utterances": list(names),
    }
    manifest.update(extra or {})
    tmp = os.path.join(root, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(root, "manifest.json"))


def load_manifest(root: str) -> dict:
    with open(os.path.join(root, "manifest.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)
