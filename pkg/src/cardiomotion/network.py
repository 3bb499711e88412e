"""Two-branch architecture: shared multi-scale encoder, recurrent motion
head emitting flow sequences, and a segmentation head emitting class logits.

The encoder is a 4-block stack of 3x3 convolutions with ReLU, one tap per
block at scales 1, 1/2, 1/4, 1/8. Both Siamese streams (target and source
frames) run the same parameter set; sharing is structural, there is a
single stored copy of the encoder weights. Downsampling between blocks is
a strided convolution realized as stride-1 convolution plus decimation so
every op keeps an exact output size.

Both heads fuse the taps the same way: one 3x3 convolution per tap down to
a common width, ReLU, bilinear upsampling back to full resolution, and
channel concatenation. The motion head runs the fused pair through a
convolutional simple RNN with tanh and a linear 3x3 flow convolution (2
output channels, pixel units, no squashing). The segmentation head applies
a linear 3x3 classifier convolution to its fused single-frame features.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Prng, Tensor
from .warp import warp_probabilities


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64)
    fusion_channels: int = 16
    hidden_channels: int = 32
    num_classes: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder must have 4 blocks")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @staticmethod
    def from_json(d: dict) -> "NetConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return NetConfig(**d)


def config_hash(cfg_json: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_json, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None


# (out_of_block_stride, ...) per encoder conv; stride 2 decimates after the conv
_ENC_STRIDES = (1, 1, 2, 1, 2, 1, 2, 1)


@dataclass
class EncoderParameters:
    convs: list[ConvParams]


@dataclass
class MotionHeadParameters:
    fusion: list[ConvParams]
    rnn_in: ConvParams
    rnn_hidden: ConvParams
    flow: ConvParams


@dataclass
class SegHeadParameters:
    fusion: list[ConvParams]
    classify: ConvParams


@dataclass
class RnnState:
    hidden: Tensor

    @staticmethod
    def initial(n: int, channels: int, h: int, w: int, dtype=np.float32) -> "RnnState":
        return RnnState(Tensor(np.zeros((n, channels, h, w), dtype=dtype)))


@dataclass
class ModelParameters:
    config: NetConfig
    encoder: EncoderParameters
    motion: MotionHeadParameters
    seg: SegHeadParameters
    seed: int | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []

        def conv(prefix: str, cp: ConvParams):
            out.append((f"{prefix}.weight", cp.weight))
            if cp.bias is not None:
                out.append((f"{prefix}.bias", cp.bias))

        for i, cp in enumerate(self.encoder.convs):
            conv(f"encoder.conv{i}", cp)
        for i, cp in enumerate(self.motion.fusion):
            conv(f"motion.fusion{i}", cp)
        conv("motion.rnn_in", self.motion.rnn_in)
        conv("motion.rnn_hidden", self.motion.rnn_hidden)
        conv("motion.flow", self.motion.flow)
        for i, cp in enumerate(self.seg.fusion):
            conv(f"seg.fusion{i}", cp)
        conv("seg.classify", self.seg.classify)
        return out

    def parameters(self, prefixes: tuple[str, ...] = ()) -> list[Tensor]:
        """Parameters whose name starts with any prefix (all when empty)."""
        named = self.named_parameters()
        if not prefixes:
            return [t for _, t in named]
        return [t for n, t in named if n.startswith(prefixes)]

    def count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def set_trainable(self, prefixes: tuple[str, ...]) -> None:
        """Mark only parameters under the given prefixes as trainable."""
        for name, t in self.named_parameters():
            t.requires_grad = name.startswith(prefixes) if prefixes else True


def _init_conv(prng: Prng, c_out: int, c_in: int, k: int, dtype, bias: bool = True) -> ConvParams:
    # normal draws with std = sqrt(2 / fan_in), zero biases
    std = math.sqrt(2.0 / (c_in * k * k))
    w = ad.init_normal((c_out, c_in, k, k), std, prng, dtype=dtype)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(w, b)


def init_model(seed: int, config: NetConfig = NetConfig()) -> ModelParameters:
    """Deterministic parameter initialization from a single seed."""
    prng = Prng(seed).spawn("model-init")
    dt = config.np_dtype
    ec = config.encoder_channels
    fc = config.fusion_channels
    hc = config.hidden_channels

    conv_io = [(ec[0], config.in_channels), (ec[0], ec[0]),
               (ec[1], ec[0]), (ec[1], ec[1]),
               (ec[2], ec[1]), (ec[2], ec[2]),
               (ec[3], ec[2]), (ec[3], ec[3])]
    encoder = EncoderParameters([_init_conv(prng, o, i, 3, dt) for o, i in conv_io])
    motion = MotionHeadParameters(
        fusion=[_init_conv(prng, fc, c, 3, dt) for c in ec],
        rnn_in=_init_conv(prng, hc, 8 * fc, 1, dt),
        rnn_hidden=_init_conv(prng, hc, hc, 3, dt, bias=False),
        flow=_init_conv(prng, 2, hc, 3, dt),
    )
    seg = SegHeadParameters(
        fusion=[_init_conv(prng, fc, c, 3, dt) for c in ec],
        classify=_init_conv(prng, config.num_classes, 4 * fc, 3, dt),
    )
    return ModelParameters(config, encoder, motion, seg, seed=seed)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encode(frame: Tensor, enc: EncoderParameters) -> list[Tensor]:
    """Run the shared encoder; returns the 4 per-scale taps."""
    if frame.data.ndim != 4:
        raise ValueError("frame must be NxCxHxW")
    h, w = frame.shape[2], frame.shape[3]
    if h % 8 or w % 8:
        raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")
    taps = []
    x = frame
    for i, (cp, stride) in enumerate(zip(enc.convs, _ENC_STRIDES)):
        x = ad.relu(ad.conv2d(x, cp.weight, cp.bias, stride=1, padding=1))
        if stride == 2:
            x = ad.subsample(x, 2)
        if i % 2 == 1:
            taps.append(x)
    return taps


def _fused_stream(taps: list[Tensor], fusion: list[ConvParams]) -> list[Tensor]:
    # per-tap fusion convolution, ReLU, bilinear upsample back to full resolution
    maps = []
    for i, (tap, cp) in enumerate(zip(taps, fusion)):
        t = ad.relu(ad.conv2d(tap, cp.weight, cp.bias, stride=1, padding=1))
        maps.append(ad.upsample_bilinear(t, 2 ** i))
    return maps


def fuse_multiscale(target_taps: list[Tensor], source_taps: list[Tensor],
                    mh: MotionHeadParameters) -> Tensor:
    """Fuse both streams' taps into one full-resolution feature stack.

    Concatenation order is target stream then source stream, coarse taps
    last; the order is significant and fixed.
    """
    if len(target_taps) != 4 or len(source_taps) != 4:
        raise ValueError("expected 4 taps per stream")
    for a, b in zip(target_taps, source_taps):
        if a.shape != b.shape:
            raise ValueError(f"tap shape mismatch: {a.shape} vs {b.shape}")
    maps = _fused_stream(target_taps, mh.fusion) + _fused_stream(source_taps, mh.fusion)
    return ad.concat(maps, axis=1)


def rnn_step(fused: Tensor, state: RnnState, mh: MotionHeadParameters) -> tuple[RnnState, Tensor]:
    """h' = tanh(conv(fused) + conv(h) + bias); flow = linear conv of h'."""
    if state.hidden.shape[2:] != fused.shape[2:] or state.hidden.shape[0] != fused.shape[0]:
        raise ValueError(f"state {state.hidden.shape} does not match fused {fused.shape}")
    pre = ad.add(
        ad.conv2d(fused, mh.rnn_in.weight, mh.rnn_in.bias, stride=1, padding=0),
        ad.conv2d(state.hidden, mh.rnn_hidden.weight, None, stride=1, padding=1),
    )
    h = ad.tanh(pre)
    flow = ad.conv2d(h, mh.flow.weight, mh.flow.bias, stride=1, padding=1)
    return RnnState(h), flow


def motion_forward(target: Tensor, sources: list[Tensor], enc: EncoderParameters,
                   mh: MotionHeadParameters) -> list[Tensor]:
    """Estimate one flow field per source frame, threading the RNN state.

    The target frame is encoded (and fused) once and reused across all
    steps; the hidden state starts at zeros and evolves along the sequence.
    """
    if len(sources) < 1:
        raise ValueError("need at least one source frame")
    target_taps = encode(target, enc)
    target_maps = _fused_stream(target_taps, mh.fusion)
    n, _, h, w = target.shape
    state = RnnState.initial(n, mh.rnn_hidden.weight.shape[0], h, w, dtype=target.dtype)
    flows = []
    for src in sources:
        if src.shape != target.shape:
            raise ValueError(f"source shape {src.shape} != target shape {target.shape}")
        src_maps = _fused_stream(encode(src, enc), mh.fusion)
        fused = ad.concat(target_maps + src_maps, axis=1)
        state, flow = rnn_step(fused, state, mh)
        flows.append(flow)
    return flows


def seg_forward(frame: Tensor, enc: EncoderParameters, sh: SegHeadParameters) -> Tensor:
    """Per-pixel class logits (softmax is applied downstream in the loss)."""
    taps = encode(frame, enc)
    fused = ad.concat(_fused_stream(taps, sh.fusion), axis=1)
    return ad.conv2d(fused, sh.classify.weight, sh.classify.bias, stride=1, padding=1)


def seg_forward_warped(frame: Tensor, flow: Tensor, enc: EncoderParameters,
                       sh: SegHeadParameters) -> Tensor:
    """Softmax probabilities of the segmentation, warped to the target grid."""
    probs = ad.softmax(seg_forward(frame, enc, sh), axis=1)
    return warp_probabilities(probs, flow)


# ---------------------------------------------------------------------------
# parameter serialization
# ---------------------------------------------------------------------------


def save_params(params: ModelParameters, path) -> None:
    entries = {name: t.data for name, t in params.named_parameters()}
    cfg = params.config.to_json()
    meta = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "precision": params.config.dtype,
        "seed": params.seed,
    }
    container.write(path, "model-params", entries, meta)


def load_params(path) -> ModelParameters:
    entries, meta = container.read(path, expected_kind="model-params")
    cfg = NetConfig.from_json(meta["config"])
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise container.ContainerError(f"{path}: config hash mismatch")
    model = init_model(0, cfg)
    model.seed = meta.get("seed")
    expected = {name for name, _ in model.named_parameters()}
    got = set(entries)
    if expected != got:
        missing = expected - got
        extra = got - expected
        raise container.ContainerError(
            f"{path}: parameter manifest mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, t in model.named_parameters():
        arr = entries[name]
        if tuple(arr.shape) != t.shape:
            raise container.ContainerError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(cfg.np_dtype, copy=False)
    return model
