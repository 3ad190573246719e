"""Full-band/narrow-band fusion estimators for direct-path IPD vectors.

Two variants share one block structure:

* fixed-array: all channels enter one network; the conv head emits
  2 * (M - 1) * K values per time-frequency bin.
* variable-array: each (reference, other) pair runs through weight-shared
  blocks; after every recurrent layer the across-pair mean of hidden states
  is concatenated back onto each pair and projected 2D -> D, and a shared
  per-pair conv head emits 2K values per bin.

A block is one full-band BLSTM (sequence along frequency, frames
independent) followed by one narrow-band (B)LSTM (sequence along time,
frequencies independent), each preceded by concatenating the raw input
features onto the hidden features (skip connections) and followed by a
projection back to width D.  Online mode makes the narrow-band layer
unidirectional and the conv head causal; offline mode uses BLSTM and
centered conv padding.  The head is conv-relu-pool(3)-conv-relu-pool(4)-
conv-tanh with 3x3 kernels and channels D -> D/2 -> D/4 -> output, so one
output frame covers 12 input frames.

Estimate layout: (frame, track k, pair, 2F) with pairs ordered by
microphone index; the conv head's channel axis is pair-major, then track,
then a real/imag pair per bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dsp import OnlineNormalizer

KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "fixed"
    mode: str = "online"
    num_channels: int = 2
    max_sources: int = 2
    num_freqs: int = 256
    hidden: int = 128
    num_blocks: int = 2
    pool_factors: tuple = (3, 4)
    use_fullband: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("fixed", "variable"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in ("online", "offline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.num_channels < 2:
            raise ValueError("need at least 2 channels")
        if self.max_sources < 1:
            raise ValueError("need at least 1 track")
        if self.hidden % 4 != 0:
            raise ValueError("hidden width must be divisible by 4 (BLSTM halves, conv quarters)")
        if self.num_blocks < 1:
            raise ValueError("need at least 1 block")
        object.__setattr__(self, "pool_factors", tuple(self.pool_factors))

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.pool_factors))

    @property
    def raw_width(self) -> int:
        return 2 * self.num_channels if self.variant == "fixed" else 4

    @property
    def num_pairs(self) -> int:
        return self.num_channels - 1

    @property
    def head_out(self) -> int:
        if self.variant == "fixed":
            return 2 * self.num_pairs * self.max_sources
        return 2 * self.max_sources

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        fields = json.loads(text)
        return ModelConfig(**fields)


def default_hidden(variant: str, num_channels: int) -> int:
    """Published hidden widths: 128 except 256 for larger fixed arrays."""
    if variant == "fixed" and num_channels >= 4:
        return 256
    return 128


@dataclass(frozen=True)
class TrackedEstimate:
    """Estimated DP-IPD vectors: values (N_out, K, P, 2F), components in (-1, 1)."""

    values: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def input_features_fixed(spec: np.ndarray) -> np.ndarray:
    """(N, F, M) complex STFT -> (N, F, 2M) reals, [Re, Im] per channel."""
    n, f, m = spec.shape
    out = np.empty((n, f, 2 * m))
    out[:, :, 0::2] = spec.real
    out[:, :, 1::2] = spec.imag
    return out


def input_features_variable(spec: np.ndarray, reference_index: int, pair_channels) -> np.ndarray:
    """(N, F, M) complex STFT -> (P, N, F, 4): [Re r, Im r, Re m, Im m] per pair."""
    n, f, _ = spec.shape
    out = np.empty((len(pair_channels), n, f, 4))
    ref = spec[:, :, reference_index]
    for pi, m in enumerate(pair_channels):
        out[pi, :, :, 0] = ref.real
        out[pi, :, :, 1] = ref.imag
        out[pi, :, :, 2] = spec[:, :, m].real
        out[pi, :, :, 3] = spec[:, :, m].imag
    return out


class _Network:
    """Shared machinery: parameter store, recurrent layers, conv head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = {}
        self._build(np.random.default_rng(seed))

    # -- parameter construction ---------------------------------------------

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=self.config.np_dtype), requires_grad=True)
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = t
        return t

    def _add_lstm(self, rng, name: str, input_size: int, hidden: int):
        wih, whh, bias = ad.lstm_init(rng, input_size, hidden)
        self._param(f"{name}/wih", wih)
        self._param(f"{name}/whh", whh)
        self._param(f"{name}/bias", bias)

    def _add_linear(self, rng, name: str, out_dim: int, in_dim: int):
        self._param(f"{name}/weight", ad.uniform_fan_in(rng, out_dim, in_dim))
        self._param(f"{name}/bias", np.zeros(out_dim))

    def _add_conv(self, rng, name: str, in_ch: int, out_ch: int):
        fan_in = KERNEL * KERNEL * in_ch
        limit = 1.0 / np.sqrt(fan_in)
        self._param(f"{name}/weight", rng.uniform(-limit, limit, size=(KERNEL, KERNEL, in_ch, out_ch)))
        self._param(f"{name}/bias", np.zeros(out_ch))

    def _build(self, rng):
        cfg = self.config
        d = cfg.hidden
        width = cfg.raw_width
        for i in range(cfg.num_blocks):
            if cfg.use_fullband:
                self._add_lstm(rng, f"block{i}/fullband/fw", width + cfg.raw_width, d // 2)
                self._add_lstm(rng, f"block{i}/fullband/bw", width + cfg.raw_width, d // 2)
                self._add_linear(rng, f"block{i}/fullband/{self._mix_name}", d, self._mix_in(d))
                width = d
            nb_hidden = d // 2 if cfg.mode == "offline" else d
            self._add_lstm(rng, f"block{i}/narrowband/fw", width + cfg.raw_width, nb_hidden)
            if cfg.mode == "offline":
                self._add_lstm(rng, f"block{i}/narrowband/bw", width + cfg.raw_width, nb_hidden)
            self._add_linear(rng, f"block{i}/narrowband/{self._mix_name}", d, self._mix_in(d))
            width = d
        self._add_conv(rng, "head/conv1", d, d // 2)
        self._add_conv(rng, "head/conv2", d // 2, d // 4)
        self._add_conv(rng, "head/conv3", d // 4, cfg.head_out)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def describe(self) -> dict:
        return {
            "params": {k: tuple(v.shape) for k, v in self.params.items()},
            "narrowband_directions": 2 if self.config.mode == "offline" else 1,
            "conv_time_padding": "centered" if self.config.mode == "offline" else "causal",
        }

    def load_arrays(self, tensors: dict):
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(tensors[name], dtype=self.config.np_dtype)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {p.shape}")
            p.data = arr
        extra = set(tensors) - set(self.params)
        if extra:
            raise ValueError(f"checkpoint has unknown parameters: {sorted(extra)}")

    def export_arrays(self) -> dict:
        return {name: np.asarray(p.data, dtype=np.float32) for name, p in self.params.items()}

    # -- layers ---------------------------------------------------------------

    def _lstm_over(self, x: Tensor, name: str, reverse: bool, state=None, sink=None) -> Tensor:
        return ad.lstm_sequence(
            x,
            self.params[f"{name}/wih"],
            self.params[f"{name}/whh"],
            self.params[f"{name}/bias"],
            reverse=reverse,
            initial_state=state,
            final_state_sink=sink,
        )

    def _fullband(self, block: int, x: Tensor) -> Tensor:
        """BLSTM along frequency; x (B, N, F, W) -> (B, N, F, D)."""
        b, n, f, w = x.shape
        seq = x.transpose((2, 0, 1, 3)).reshape(f, b * n, w)
        name = f"block{block}/fullband"
        fw = self._lstm_over(seq, f"{name}/fw", reverse=False)
        bw = self._lstm_over(seq, f"{name}/bw", reverse=True)
        cat = Tensor.concat([fw, bw], axis=2)
        return cat.reshape(f, b, n, self.config.hidden).transpose((1, 2, 0, 3))

    def _narrowband(self, block: int, x: Tensor, state=None, sink=None) -> Tensor:
        """(B)LSTM along time; x (B, N, F, W) -> (B, N, F, D)."""
        b, n, f, w = x.shape
        seq = x.transpose((1, 0, 2, 3)).reshape(n, b * f, w)
        name = f"block{block}/narrowband"
        if self.config.mode == "offline":
            fw = self._lstm_over(seq, f"{name}/fw", reverse=False)
            bw = self._lstm_over(seq, f"{name}/bw", reverse=True)
            out = Tensor.concat([fw, bw], axis=2)
        else:
            out = self._lstm_over(seq, f"{name}/fw", reverse=False, state=state, sink=sink)
        return out.reshape(n, b, f, self.config.hidden).transpose((1, 0, 2, 3))

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{name}/weight"], self.params[f"{name}/bias"])

    def _head(self, h: Tensor, histories: list = None) -> Tensor:
        """Conv head; h (B, N, F, D) -> (B, ceil(N/12), F, head_out).

        ``histories`` (streaming only) holds per-conv-layer past input
        frames; each conv then runs unpadded in time on [history, x] and the
        history is updated in place.
        """
        pad = "centered" if self.config.mode == "offline" else "causal"
        x = h
        for j, (act, pool) in enumerate(
            [("relu", self.config.pool_factors[0]), ("relu", self.config.pool_factors[1]), ("tanh", None)]
        ):
            w = self.params[f"head/conv{j + 1}/weight"]
            b = self.params[f"head/conv{j + 1}/bias"]
            if histories is None:
                x = ad.conv2d(x, w, b, pad)
            else:
                ext = Tensor.concat([Tensor(histories[j].astype(x.dtype)), x], axis=1)
                histories[j] = ext.data[:, -(KERNEL - 1) :].copy()
                x = ad.conv2d(ext, w, b, "none")
            x = x.relu() if act == "relu" else x.tanh()
            if pool is not None:
                x = x.avg_pool_time(pool, axis=1)
        return x


class FixedArrayModel(_Network):
    """All-channel estimator; input features (B, N, F, 2M)."""

    _mix_name = "proj"

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.variant != "fixed":
            raise ValueError("config.variant must be 'fixed'")
        super().__init__(config, seed)

    @staticmethod
    def _mix_in(d: int) -> int:
        return d

    def forward(self, features: np.ndarray, _stream=None) -> Tensor:
        """-> estimates (B, N_out, K, P, 2F), tanh-bounded."""
        cfg = self.config
        if features.ndim != 4 or features.shape[-1] != cfg.raw_width:
            raise ValueError(
                f"expected (B, N, F, {cfg.raw_width}) features, got {features.shape}"
            )
        raw = Tensor(np.asarray(features, dtype=cfg.np_dtype))
        h = raw
        for i in range(cfg.num_blocks):
            if cfg.use_fullband:
                y = self._fullband(i, Tensor.concat([h, raw], axis=3))
                h = self._linear(f"block{i}/fullband/proj", y)
            if _stream is None:
                y = self._narrowband(i, Tensor.concat([h, raw], axis=3))
            else:
                sink = []
                y = self._narrowband(
                    i,
                    Tensor.concat([h, raw], axis=3),
                    state=_stream.nb_states.get(i),
                    sink=sink,
                )
                _stream.nb_states[i] = sink[0]
            h = self._linear(f"block{i}/narrowband/proj", y)
        conv = self._head(h, None if _stream is None else _stream.conv_hist)
        return _reshape_fixed(conv, cfg)

    def estimate(self, features: np.ndarray) -> TrackedEstimate:
        """Single-utterance inference: features (N, F, 2M)."""
        with no_grad():
            out = self.forward(features[None])
        return TrackedEstimate(values=out.data[0])


def _reshape_fixed(conv: Tensor, cfg: ModelConfig) -> Tensor:
    b, n_out, f, o = conv.shape
    p, k = cfg.num_pairs, cfg.max_sources
    x = conv.transpose((0, 1, 3, 2)).reshape(b, n_out, p, k, 2, f)
    return x.transpose((0, 1, 3, 2, 4, 5)).reshape(b, n_out, k, p, 2 * f)


def _reshape_pair(conv: Tensor, cfg: ModelConfig) -> Tensor:
    b, n_out, f, o = conv.shape
    k = cfg.max_sources
    return conv.transpose((0, 1, 3, 2)).reshape(b, n_out, k, 2 * f)


class VariableArrayModel(_Network):
    """Pair-shared estimator; input features (B, P, N, F, 4) for any P >= 1."""

    _mix_name = "comm"

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.variant != "variable":
            raise ValueError("config.variant must be 'variable'")
        super().__init__(config, seed)

    @staticmethod
    def _mix_in(d: int) -> int:
        return 2 * d

    def _communicate(self, name: str, ys: list) -> list:
        # order-invariant mean: bit-equal under any permutation of the pairs
        mean = Tensor.stack(ys).mean(axis=0, order_invariant=True)
        return [self._linear(name, Tensor.concat([y, mean], axis=3)) for y in ys]

    def forward(self, features: np.ndarray, _stream=None) -> Tensor:
        """-> estimates (B, N_out, K, P, 2F)."""
        cfg = self.config
        if features.ndim != 5 or features.shape[-1] != 4:
            raise ValueError(f"expected (B, P, N, F, 4) features, got {features.shape}")
        num_pairs = features.shape[1]
        feats = np.asarray(features, dtype=cfg.np_dtype)
        raws = [Tensor(feats[:, pi]) for pi in range(num_pairs)]
        hs = list(raws)
        for i in range(cfg.num_blocks):
            if cfg.use_fullband:
                ys = [
                    self._fullband(i, Tensor.concat([h, raw], axis=3))
                    for h, raw in zip(hs, raws)
                ]
                hs = self._communicate(f"block{i}/fullband/comm", ys)
            ys = []
            for pi, (h, raw) in enumerate(zip(hs, raws)):
                if _stream is None:
                    ys.append(self._narrowband(i, Tensor.concat([h, raw], axis=3)))
                else:
                    sink = []
                    ys.append(
                        self._narrowband(
                            i,
                            Tensor.concat([h, raw], axis=3),
                            state=_stream.nb_states.get((i, pi)),
                            sink=sink,
                        )
                    )
                    _stream.nb_states[(i, pi)] = sink[0]
            hs = self._communicate(f"block{i}/narrowband/comm", ys)
        outs = []
        for pi, h in enumerate(hs):
            hist = None if _stream is None else _stream.pair_conv_hist(pi)
            outs.append(_reshape_pair(self._head(h, hist), cfg))
        stacked = Tensor.stack(outs)
        return stacked.transpose((1, 2, 3, 0, 4))

    def estimate(self, features: np.ndarray) -> TrackedEstimate:
        """Single-utterance inference: features (P, N, F, 4)."""
        with no_grad():
            out = self.forward(features[None])
        return TrackedEstimate(values=out.data[0])


class StreamingSession:
    """Causal chunked inference for an online-mode model.

    Accepts raw complex STFT frames, applies the online normalizer, and
    emits estimates for every completed group of ``output_stride`` frames.
    Emitted frames never change as more audio arrives: recurrent state is
    carried across chunks, causal convs see an explicit history buffer, and
    pooling windows tile each group exactly.
    """

    def __init__(self, network: _Network, reference_index: int = 0, pair_channels=None):
        if network.config.mode != "online":
            raise ValueError("streaming requires an online-mode model")
        self.network = network
        self.reference_index = reference_index
        self.pair_channels = pair_channels
        self.normalizer = OnlineNormalizer()
        self.pending = []
        self.nb_states = {}
        self._conv_hists = {}
        self._active_pair = None
        self.frames_emitted = 0

    @property
    def conv_hist(self):
        return self._hist_for(self._active_pair)

    def pair_conv_hist(self, pair: int):
        self._active_pair = pair
        return self._hist_for(pair)

    def _hist_for(self, key):
        if key not in self._conv_hists:
            cfg = self.network.config
            d = cfg.hidden
            widths = (d, d // 2, d // 4)
            f = cfg.num_freqs
            self._conv_hists[key] = [
                np.zeros((1, KERNEL - 1, f, w), dtype=cfg.np_dtype) for w in widths
            ]
        return self._conv_hists[key]

    def push(self, frames: np.ndarray) -> np.ndarray:
        """Feed (n, F, M) complex STFT frames; returns (g, K, P, 2F) newly
        completed output frames (possibly g = 0)."""
        cfg = self.network.config
        for frame in frames:
            self.pending.append(self.normalizer.process_frame(frame))
        stride = cfg.output_stride
        outs = []
        while len(self.pending) >= stride:
            group = np.stack(self.pending[:stride])
            del self.pending[:stride]
            if cfg.variant == "fixed":
                feats = input_features_fixed(group)[None]
            else:
                pairs = self.pair_channels
                if pairs is None:
                    pairs = [c for c in range(group.shape[2]) if c != self.reference_index]
                feats = input_features_variable(group, self.reference_index, pairs)[None]
            with no_grad():
                est = self.network.forward(feats, _stream=self)
            outs.append(est.data[0])
            self.frames_emitted += 1
        if not outs:
            k, p = cfg.max_sources, cfg.num_pairs
            return np.zeros((0, k, p, 2 * cfg.num_freqs), dtype=cfg.np_dtype)
        return np.concatenate(outs, axis=0)


def build_model(config: ModelConfig, seed: int = 0) -> _Network:
    if config.variant == "fixed":
        return FixedArrayModel(config, seed)
    return VariableArrayModel(config, seed)


def config_for_ablation(config: ModelConfig) -> ModelConfig:
    """The same model with the full-band layers removed."""
    return replace(config, use_fullband=False)
