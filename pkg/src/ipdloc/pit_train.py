"""Permutation-invariant regression training for the IPD estimators.

The frame loss is the minimum over track permutations of the MSE between
estimated and target DP-IPD vectors, averaged over tracks, pairs and vector
components; all pairs share one permutation, and the utterance loss averages
the per-frame minima.  Because every frame has the same component count,
that equals one global mean over the permutation-aligned arrays, which is
how the training graph computes it: permutations are chosen numerically per
frame, the targets are gathered accordingly, and a single MSE node provides
the gradient.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict
from itertools import permutations

import numpy as np

from . import container
from .autodiff import Adam, Tensor, no_grad
from .dsp import StftConfig, normalize_offline, normalize_online, stft
from .geometry import ArrayGeometry, geometry_fingerprint
from .model import (
    ModelConfig,
    build_model,
    input_features_fixed,
    input_features_variable,
)
from .targets import FrameTruth, assemble_training_target, output_frame_count


def pit_frame_loss(estimate: np.ndarray, target: np.ndarray) -> tuple:
    """Minimum-permutation MSE for one frame.

    ``estimate`` and ``target`` are (K, P, 2F); returns (loss, permutation)
    where target track permutation[k] is matched to estimate track k.  Ties
    keep the first permutation in lexicographic order.
    """
    if estimate.shape != target.shape:
        raise ValueError(f"shape mismatch: estimate {estimate.shape} vs target {target.shape}")
    k = estimate.shape[0]
    best_loss, best_perm = None, None
    for perm in permutations(range(k)):
        diff = estimate - target[list(perm)]
        loss = np.mean(diff * diff)
        if best_loss is None or loss < best_loss:
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def batch_pit_loss(estimates: Tensor, targets: np.ndarray) -> tuple:
    """Graph loss over a batch: estimates (B, N, K, P, 2F) Tensor, targets
    same-shaped array.  Returns (scalar Tensor, (B, N) permutation indices).
    """
    est = estimates.data
    if est.shape != targets.shape:
        raise ValueError(f"shape mismatch: estimates {est.shape} vs targets {targets.shape}")
    k = est.shape[2]
    perms = list(permutations(range(k)))
    losses = np.stack(
        [np.mean((est - targets[:, :, list(p)]) ** 2, axis=(2, 3, 4)) for p in perms]
    )
    choice = np.argmin(losses, axis=0)
    aligned = np.empty_like(targets)
    for pi, p in enumerate(perms):
        mask = choice == pi
        aligned[mask] = targets[:, :, list(p)][mask]
    diff = estimates - Tensor(aligned.astype(est.dtype))
    return (diff * diff).mean(), choice


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.975
    batch_size: int = 16
    clip_seconds: float = 4.5
    epochs: int = 30
    seed: int = 0
    non_source_mode: str = "bessel"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.clip_seconds <= 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr decay {self.lr_decay} outside (0, 1]")
        if self.non_source_mode not in ("bessel", "zero"):
            raise ValueError(f"unknown non-source mode {self.non_source_mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass(frozen=True)
class Example:
    """One training utterance: network-ready features and aligned targets."""

    features: np.ndarray
    target: np.ndarray
    activity: np.ndarray
    name: str = ""


def compute_features(
    samples: np.ndarray,
    geometry: ArrayGeometry,
    model_config: ModelConfig,
    stft_config: StftConfig = StftConfig(),
) -> np.ndarray:
    """Waveform (T, M) -> network input features for the configured variant.

    Normalization follows the model mode: a single global scalar offline,
    the causal recursive mean online, matching what inference will see.
    """
    spec = stft(samples, stft_config)
    if model_config.mode == "online":
        spec = normalize_online(spec)
    else:
        spec = normalize_offline(spec)
    if model_config.variant == "fixed":
        if spec.shape[2] != model_config.num_channels:
            raise ValueError(
                f"{spec.shape[2]} channels but model expects {model_config.num_channels}"
            )
        return input_features_fixed(spec)
    return input_features_variable(spec, geometry.reference_index, geometry.pair_channels)


def prepare_example(
    samples: np.ndarray,
    frame_truth: list,
    geometry: ArrayGeometry,
    model_config: ModelConfig,
    non_source_mode: str = "bessel",
    name: str = "",
    stft_config: StftConfig = StftConfig(),
) -> Example:
    """Waveform (T, M) + per-output-frame truth -> features and targets."""
    feats = compute_features(samples, geometry, model_config, stft_config)
    num_frames = feats.shape[0] if model_config.variant == "fixed" else feats.shape[1]
    n_out = output_frame_count(num_frames, model_config.output_stride)
    if len(frame_truth) != n_out:
        raise ValueError(f"{len(frame_truth)} truth frames but expected {n_out}")
    target = assemble_training_target(
        frame_truth,
        geometry,
        num_tracks=model_config.max_sources,
        frequencies=stft_config.frequencies(),
        non_source_mode=non_source_mode,
    )
    return Example(
        features=feats.astype(np.float32),
        target=target.values.astype(np.float32),
        activity=target.activity,
        name=name,
    )


def stack_batch(batch, stride: int):
    """Stack examples of unequal length by cropping to the batch minimum.

    Training clips are nominally equal but random durations differ by a few
    frames; the tail beyond the shortest clip in the batch is dropped from
    both features and targets.  Returns (features, targets, activity).
    """
    frame_axis = 0 if batch[0].features.ndim == 3 else 1
    n = min(ex.features.shape[frame_axis] for ex in batch)
    n_out = -(-n // stride)
    if frame_axis == 0:
        feats = np.stack([ex.features[:n] for ex in batch])
    else:
        feats = np.stack([ex.features[:, :n] for ex in batch])
    targets = np.stack([ex.target[:n_out] for ex in batch])
    activity = np.stack([ex.activity[:n_out] for ex in batch])
    return feats, targets, activity


def evaluate_loss(network, examples, batch_size: int = 16) -> float:
    """Mean PIT loss over a held-out set (no gradients)."""
    total, count = 0.0, 0
    stride = network.config.output_stride
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        feats, targets, _ = stack_batch(batch, stride)
        with no_grad():
            est = network.forward(feats)
        loss, _ = batch_pit_loss(est, targets.astype(est.dtype))
        total += loss.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


def onset_source_loss(network, examples, batch_size: int = 16) -> float:
    """Mean per-source MSE at source-onset output frames.

    An onset is a (frame, track) where a target track turns active.  After
    aligning tracks with the full-frame PIT permutation, only the matched
    estimate's error against the (non-source-mode-independent) source vector
    is measured, so the value is comparable across non-source target modes.
    """
    total, count = 0.0, 0
    stride = network.config.output_stride
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        feats, targets, activity = stack_batch(batch, stride)
        with no_grad():
            est = network.forward(feats).data
        for bi in range(len(batch)):
            act = activity[bi]
            for n in range(act.shape[0]):
                for k in range(act.shape[1]):
                    if not act[n, k] or (n > 0 and act[n - 1, k]):
                        continue
                    _, perm = pit_frame_loss(
                        est[bi, n].astype(np.float64), targets[bi, n].astype(np.float64)
                    )
                    track = perm.index(k)
                    diff = est[bi, n, track].astype(np.float64) - targets[bi, n, k]
                    total += float(np.mean(diff * diff))
                    count += 1
    return total / max(count, 1)


@dataclass
class TrainResult:
    history: list
    best_valid: float
    best_epoch: int


def save_checkpoint(path: str, network, model_config: ModelConfig, extra: dict = None,
                    optimizer: Adam = None):
    """Write a checkpoint directory (weights, config, optional train state)."""
    os.makedirs(path, exist_ok=True)
    container.save_tensors(os.path.join(path, "weights.ipdw"), network.export_arrays())
    _atomic_write(os.path.join(path, "config.json"), model_config.to_json())
    state = dict(extra or {})
    if optimizer is not None:
        container.save_tensors(os.path.join(path, "adam.ipdw"), {
            k: np.asarray(v, dtype=np.float32) for k, v in optimizer.state_tensors().items()
        })
        state["adam_step"] = optimizer.step_count
        state["lr"] = optimizer.lr
    _atomic_write(os.path.join(path, "state.json"), json.dumps(state, indent=1))


def load_checkpoint(path: str):
    """-> (network, model config, state dict)."""
    with open(os.path.join(path, "config.json"), "r", encoding="utf-8") as fh:
        config = ModelConfig.from_json(fh.read())
    network = build_model(config)
    network.load_arrays(container.load_tensors(os.path.join(path, "weights.ipdw")))
    state_path = os.path.join(path, "state.json")
    state = {}
    if os.path.exists(state_path):
        with open(state_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
    return network, config, state


def _atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def train(
    network,
    train_examples,
    valid_examples,
    config: TrainConfig,
    out_dir: str = None,
    log=None,
    extra_state: dict = None,
) -> TrainResult:
    """Seeded single-threaded training loop.

    Shuffles per epoch, decays the learning rate per epoch, logs one CSV row
    per epoch (epoch, train_loss, valid_loss), and keeps both the last and
    the best-validation checkpoints when ``out_dir`` is given.
    ``extra_state`` entries (e.g. the geometry fingerprint) are merged into
    every checkpoint's state file.
    """
    if not train_examples:
        raise ValueError("no training examples")
    extra_state = dict(extra_state or {})
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(network.params, lr=config.lr)
    history = []
    best_valid, best_epoch = np.inf, -1
    csv_path = os.path.join(out_dir, "loss.csv") if out_dir else None
    if csv_path:
        os.makedirs(out_dir, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["epoch", "train_loss", "valid_loss"])
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_examples))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [train_examples[i] for i in idx]
            feats, targets, _ = stack_batch(batch, network.config.output_stride)
            est = network.forward(feats)
            loss, _ = batch_pit_loss(est, targets)
            value = loss.item()
            if not np.isfinite(value):
                names = ", ".join(ex.name or "?" for ex in batch)
                raise FloatingPointError(f"non-finite loss on batch [{names}]")
            optimizer.zero_grad()
            loss.backward(free_graph=True)
            optimizer.step()
            epoch_loss += value * len(batch)
            seen += len(batch)
        train_loss = epoch_loss / seen
        valid_loss = (
            evaluate_loss(network, valid_examples, config.batch_size)
            if valid_examples
            else train_loss
        )
        history.append((epoch, train_loss, valid_loss))
        if log:
            log(f"epoch {epoch}: train {train_loss:.6f} valid {valid_loss:.6f} lr {optimizer.lr:.2e}")
        if csv_path:
            with open(csv_path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([epoch, f"{train_loss:.8f}", f"{valid_loss:.8f}"])
        progress = {"epoch": epoch, "train_loss": train_loss, "valid_loss": valid_loss}
        progress.update(extra_state)
        if out_dir:
            save_checkpoint(
                os.path.join(out_dir, "last"), network, network.config,
                progress, optimizer,
            )
        if valid_loss < best_valid:
            best_valid, best_epoch = valid_loss, epoch
            if out_dir:
                save_checkpoint(
                    os.path.join(out_dir, "best"), network, network.config, progress
                )
        optimizer.lr *= config.lr_decay
    return TrainResult(history=history, best_valid=best_valid, best_epoch=best_epoch)
