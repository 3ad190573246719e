"""Batch command-line entry points.

Subcommands: simulate (render a dataset), train, infer (decode direction
estimates), eval (MDR/FAR/MAE report), plot (loss curves, spatial spectra,
trajectory views).  Every command is reproducible from its config, seed and
input artifacts; an output directory is owned exclusively through a lock
file while a command writes into it.  Exit codes: 0 success, 1 invalid
configuration or arguments, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import multiprocessing
import os
import shutil
import sys

import numpy as np

from . import container, localize, pit_train, simulate
from .dsp import SAMPLE_RATE, StftConfig, stft
from .geometry import geometry_fingerprint, make_grid, save_geometry
from .model import StreamingSession, build_model
from .pit_train import compute_features, load_checkpoint
from .runconfig import ConfigError, load_run_config
from .targets import OUTPUT_STRIDE, build_templates, output_frame_count


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


@contextlib.contextmanager
def output_lock(path: str):
    """Exclusive ownership of an output directory via a lock file."""
    os.makedirs(path, exist_ok=True)
    lock = os.path.join(path, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{path} is locked by another run (remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.remove(lock)


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(task):
    root, geometry, ranges, seed, index, stride, threshold = task
    spec = simulate.sample_scene(geometry, ranges, seed, index)
    audio = simulate.render_scene(spec, stride=stride, activity_threshold=threshold)
    name = f"utt{index:05d}"
    simulate.write_utterance(os.path.join(root, name), spec, audio)
    return name


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    with output_lock(args.out):
        if args.jobs <= 1:
            simulate.generate_dataset(
                args.out, cfg.geometry, cfg.simulate, args.count, seed,
                log=print, stride=args.stride,
                activity_threshold=args.activity_threshold,
            )
        else:
            tasks = [
                (args.out, cfg.geometry, cfg.simulate, seed, i, args.stride,
                 args.activity_threshold)
                for i in range(args.count)
            ]
            with multiprocessing.Pool(args.jobs) as pool:
                names = pool.map(_simulate_one, tasks)
            simulate.write_manifest(
                args.out, names, cfg.geometry,
                {"seed": seed, "count": args.count, "stride": args.stride,
                 "activity_threshold": args.activity_threshold},
            )
    print(f"wrote {args.count} utterances to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _clip_example(samples, truth, clip_seconds, stride, stft_config=StftConfig()):
    limit = round(clip_seconds * SAMPLE_RATE)
    if len(samples) <= limit:
        return samples, truth
    samples = samples[:limit]
    n_out = output_frame_count(stft_config.num_frames(len(samples)), stride)
    return samples, truth[:n_out]


def _load_examples(data_dir, names, model_config, non_source_mode, clip_seconds):
    examples = []
    for name in names:
        samples, geometry, truth, _ = simulate.load_utterance(
            os.path.join(data_dir, name)
        )
        samples, truth = _clip_example(
            samples, truth, clip_seconds, model_config.output_stride
        )
        examples.append(
            pit_train.prepare_example(
                samples, truth, geometry, model_config,
                non_source_mode=non_source_mode, name=name,
            )
        )
    return examples


def _check_fingerprint(expected: str, actual: str, what: str):
    if expected is not None and expected != actual:
        raise ConfigError(
            f"geometry mismatch: {what} carries fingerprint {actual[:12]}..., "
            f"expected {expected[:12]}..."
        )


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = args.data or cfg.paths.get("dataset")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set paths.dataset")
    manifest = simulate.load_manifest(data_dir)
    fingerprint = geometry_fingerprint(cfg.geometry)
    _check_fingerprint(fingerprint, manifest["geometry_fingerprint"], data_dir)
    names = manifest["utterances"]
    if not names:
        raise ConfigError(f"{data_dir}: empty dataset")
    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    with output_lock(args.out):
        shutil.copyfile(args.config, os.path.join(args.out, "config-used.json"))
        save_geometry(os.path.join(args.out, "geometry.txt"), cfg.geometry)
        examples = _load_examples(
            data_dir, names, cfg.model, train_cfg.non_source_mode,
            train_cfg.clip_seconds,
        )
        rng = np.random.default_rng(train_cfg.seed)
        order = rng.permutation(len(examples))
        n_valid = round(args.valid_fraction * len(examples))
        valid = [examples[i] for i in order[:n_valid]]
        training = [examples[i] for i in order[n_valid:]]
        network = build_model(cfg.model, seed=cfg.seed)
        print(f"{network.num_parameters()} parameters, "
              f"{len(training)} train / {len(valid)} valid utterances")
        result = pit_train.train(
            network, training, valid, train_cfg, out_dir=args.out, log=print,
            extra_state={"geometry_fingerprint": fingerprint},
        )
    print(f"best valid loss {result.best_valid:.6f} at epoch {result.best_epoch}")
    return 0


# ---------------------------------------------------------------------------
# infer


def _streaming_estimate(network, samples, geometry):
    session = StreamingSession(
        network,
        reference_index=geometry.reference_index,
        pair_channels=geometry.pair_channels,
    )
    frames = stft(samples)
    return session.push(frames)


def cmd_infer(args) -> int:
    network, model_config, state = load_checkpoint(args.checkpoint)
    if args.streaming and model_config.mode != "online":
        raise ConfigError("--streaming requires an online-mode checkpoint")
    manifest = simulate.load_manifest(args.data)
    _check_fingerprint(
        state.get("geometry_fingerprint"), manifest["geometry_fingerprint"],
        args.data,
    )
    names = manifest["utterances"]
    bank = None
    with output_lock(args.out):
        for name in names:
            samples, geometry, truth, _ = simulate.load_utterance(
                os.path.join(args.data, name)
            )
            if bank is None:
                grid = make_grid(args.grid_kind, args.grid_resolution,
                                 azimuth_span_deg=args.grid_span)
                bank = build_templates(geometry, grid)
            if args.streaming:
                est = _streaming_estimate(network, samples, geometry)
            else:
                feats = compute_features(samples, geometry, model_config)
                est = network.estimate(feats).values
            results = localize.localize_frames(
                est, bank, truth[: est.shape[0]], args.detection_threshold
            )
            utt_dir = os.path.join(args.out, name)
            os.makedirs(utt_dir, exist_ok=True)
            container.save_tensors(
                os.path.join(utt_dir, "estimate.ipdw"),
                {"estimate": est.astype(np.float32)},
            )
            with open(os.path.join(utt_dir, "results.csv"), "w", newline="",
                      encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["frame", "track", "azimuth", "elevation", "peak",
                     "matched", "error"]
                )
                writer.writerows(localize.results_csv_rows(results))
            print(f"{name}: {est.shape[0]} output frames")
        summary = {
            "checkpoint": os.path.abspath(args.checkpoint),
            "geometry_fingerprint": manifest["geometry_fingerprint"],
            "grid_kind": args.grid_kind,
            "grid_resolution_deg": args.grid_resolution,
            "azimuth_span_deg": args.grid_span,
            "detection_threshold": args.detection_threshold,
            "streaming": bool(args.streaming),
            "utterances": list(names),
        }
        with open(os.path.join(args.out, "summary.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1)
    return 0


# ---------------------------------------------------------------------------
# eval


def _decode_run(infer_dir, data_dir, threshold=None):
    """-> (summary, all FrameResults, bank) decoded from stored estimates."""
    with open(os.path.join(infer_dir, "summary.json"), "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    manifest = simulate.load_manifest(data_dir)
    _check_fingerprint(
        summary["geometry_fingerprint"], manifest["geometry_fingerprint"], data_dir
    )
    if threshold is None:
        threshold = summary["detection_threshold"]
    bank = None
    per_utterance = {}
    for name in summary["utterances"]:
        samples_dir = os.path.join(data_dir, name)
        _, geometry, truth, _ = simulate.load_utterance(samples_dir)
        if bank is None:
            grid = make_grid(summary["grid_kind"], summary["grid_resolution_deg"],
                             azimuth_span_deg=summary.get("azimuth_span_deg", 360.0))
            bank = build_templates(geometry, grid)
        tensors = container.load_tensors(
            os.path.join(infer_dir, name, "estimate.ipdw")
        )
        est = tensors["estimate"].astype(np.float64)
        frames = min(est.shape[0], len(truth))
        per_utterance[name] = localize.localize_frames(
            est[:frames], bank, truth[:frames], threshold
        )
    return summary, per_utterance, bank


def cmd_eval(args) -> int:
    summary, per_utterance, _ = _decode_run(
        args.infer, args.data, args.detection_threshold
    )
    results = [fr for name in summary["utterances"] for fr in per_utterance[name]]
    joint = summary["grid_kind"] == "joint"
    metrics = localize.score(
        results, tolerance_deg=args.tolerance, joint=joint,
        far_denominator=args.far_denominator,
    )
    print(metrics.report())
    if args.out:
        with output_lock(args.out):
            with open(os.path.join(args.out, "metrics.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(
                    {
                        "mdr": metrics.mdr,
                        "far": metrics.far,
                        "mae": metrics.mae,
                        "tolerance_deg": metrics.tolerance_deg,
                        "active_count": metrics.active_count,
                        "miss_count": metrics.miss_count,
                        "false_alarm_count": metrics.false_alarm_count,
                        "match_count": metrics.match_count,
                        "far_denominator": args.far_denominator,
                    },
                    fh, indent=1,
                )
            with open(os.path.join(args.out, "report.txt"), "w",
                      encoding="utf-8") as fh:
                fh.write(metrics.report() + "\n")
    return 0


# ---------------------------------------------------------------------------
# plot


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_loss(args) -> int:
    plt = _plt()
    path = os.path.join(args.run, "loss.csv")
    epochs, train_loss, valid_loss = [], [], []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            train_loss.append(float(row["train_loss"]))
            valid_loss.append(float(row["valid_loss"]))
    if not epochs:
        raise ConfigError(f"{path}: no rows to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train_loss, label="train")
    ax.plot(epochs, valid_loss, label="valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    out = args.out or os.path.join(args.run, "loss.png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)
    return 0


def _frame_times(count: int) -> np.ndarray:
    hop = StftConfig().hop_size
    return (np.arange(count) * OUTPUT_STRIDE + OUTPUT_STRIDE / 2) * hop / SAMPLE_RATE


def _plot_spectrum(args) -> int:
    plt = _plt()
    with open(os.path.join(args.infer, "summary.json"), "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    _, geometry, _, _ = simulate.load_utterance(os.path.join(args.data, args.utt))
    grid = make_grid(summary["grid_kind"], summary["grid_resolution_deg"],
                     azimuth_span_deg=summary.get("azimuth_span_deg", 360.0))
    bank = build_templates(geometry, grid)
    est = container.load_tensors(
        os.path.join(args.infer, args.utt, "estimate.ipdw")
    )["estimate"].astype(np.float64)
    spectra = np.stack(
        [localize.spatial_spectrum(est[n], bank) for n in range(est.shape[0])]
    )  # (N, K, I)
    tracks = spectra.shape[1]
    fig, axes = plt.subplots(tracks, 1, figsize=(7, 2.6 * tracks), squeeze=False)
    for k in range(tracks):
        ax = axes[k, 0]
        im = ax.imshow(
            spectra[:, k, :].T, aspect="auto", origin="lower",
            extent=[0, spectra.shape[0], 0, len(grid)], cmap="viridis",
            vmin=-1.0, vmax=1.0,
        )
        ax.set_ylabel(f"track {k}\ngrid index")
        fig.colorbar(im, ax=ax)
    axes[-1, 0].set_xlabel("output frame")
    out = args.out or os.path.join(args.infer, args.utt, "spectrum.png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)
    return 0


def _plot_trajectory(args) -> int:
    plt = _plt()
    summary, per_utterance, _ = _decode_run(args.infer, args.data)
    if args.utt not in per_utterance:
        raise ConfigError(f"{args.utt} not in {args.infer}")
    results = per_utterance[args.utt]
    _, _, truth, meta = simulate.load_utterance(os.path.join(args.data, args.utt))
    joint = summary["grid_kind"] == "joint"
    rows = 2 if joint else 1
    fig, axes = plt.subplots(rows, 1, figsize=(7, 3.2 * rows), squeeze=False)
    times = _frame_times(len(results))
    for si in range(len(meta["sources"])):
        t_active, az, el = [], [], []
        for n, ft in enumerate(truth[: len(results)]):
            if ft.active[si]:
                t_active.append(times[n])
                az.append(ft.directions[si].azimuth_deg)
                el.append(ft.directions[si].elevation_deg)
        axes[0, 0].plot(t_active, az, "-", lw=2, alpha=0.6, label=f"true src {si}")
        if joint:
            axes[1, 0].plot(t_active, el, "-", lw=2, alpha=0.6, label=f"true src {si}")
    det_t = [times[n] for n, fr in enumerate(results) for _ in fr.detections]
    det_az = [d.direction.azimuth_deg for fr in results for d in fr.detections]
    axes[0, 0].plot(det_t, det_az, "k.", ms=4, label="estimate")
    axes[0, 0].set_ylabel("azimuth (deg)")
    axes[0, 0].legend(loc="best", fontsize=8)
    axes[0, 0].grid(True, alpha=0.3)
    if joint:
        det_el = [d.direction.elevation_deg for fr in results for d in fr.detections]
        axes[1, 0].plot(det_t, det_el, "k.", ms=4, label="estimate")
        axes[1, 0].set_ylabel("elevation (deg)")
        axes[1, 0].grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("time (s)")
    out = args.out or os.path.join(args.infer, args.utt, "trajectory.png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)
    return 0


def cmd_plot(args) -> int:
    if args.what == "loss":
        if not args.run:
            raise ConfigError("plot loss needs --run <train output dir>")
        return _plot_loss(args)
    if not (args.infer and args.data and args.utt):
        raise ConfigError(f"plot {args.what} needs --infer, --data and --utt")
    if args.what == "spectrum":
        return _plot_spectrum(args)
    return _plot_trajectory(args)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ipdloc",
        description="Direction-of-arrival estimation from inter-channel "
        "phase differences: dataset simulation, training, inference, "
        "evaluation, and plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a random dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stride", type=int, default=OUTPUT_STRIDE,
                   help="input frames per truth entry (default 12)")
    p.add_argument("--activity-threshold", type=float, default=0.001)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a simulated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decode direction estimates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--streaming", action="store_true")
    p.add_argument("--detection-threshold", type=float, default=0.5)
    p.add_argument("--grid-kind", choices=("azimuth", "joint"), default="azimuth")
    p.add_argument("--grid-resolution", type=float, default=1.0)
    p.add_argument("--grid-span", type=float, default=360.0,
                   help="candidate azimuth span in degrees (180 for linear arrays)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score stored estimates against truth")
    p.add_argument("--infer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--tolerance", type=float, default=10.0)
    p.add_argument("--detection-threshold", type=float, default=None)
    p.add_argument("--far-denominator", choices=("active", "frames"),
                   default="active")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="loss curves, spatial spectra, trajectories")
    p.add_argument("--what", choices=("loss", "spectrum", "trajectory"),
                   required=True)
    p.add_argument("--run", default=None)
    p.add_argument("--infer", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--utt", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ArithmeticError, RuntimeError, KeyError) as exc:
        print(f"runtime error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
