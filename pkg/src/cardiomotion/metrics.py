"""Evaluation: overlap and contour metrics, label propagation by estimated
flow, endpoint error against synthetic ground truth, volume curves, and
inference timing.

Conventions fixed here (the numbers are only comparable within this
artifact):
  * Contours are inner boundaries under 4-connectivity: mask pixels with at
    least one 4-neighbor outside the mask or lying on the image border.
  * Distances are Euclidean between contour pixel centers, in pixels,
    scaled by `spacing` (mm per pixel) when given.
  * Empty-vs-empty masks have Dice 1.0; contour metrics on an empty
    contour raise instead of returning 0.
  * Label propagation pushes the target frame's labels out to each frame
    by sampling at p - flow(p) with nearest neighbor: negating a
    backward-warp field is its first-order inverse, so propagated labels
    move with the anatomy. The differentiable (pull) path lives in `warp`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import Tensor
from .data import ImageSequence, NUM_CLASSES


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def extract_contour(mask: np.ndarray) -> np.ndarray:
    """Inner-boundary pixels as an (n, 2) array of (x, y), scan order."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                            & m[1:-1, :-2] & m[1:-1, 2:])
    ys, xs = np.nonzero(m & ~interior)
    return np.stack([xs, ys], axis=1).astype(np.float64) if len(xs) else np.zeros((0, 2))


def _nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # for each point of a, distance to the nearest point of b
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return np.sqrt((dx * dx + dy * dy).min(axis=1))


def _check_contours(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("contour metrics need non-empty contours")


def mcd(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """Symmetric mean contour distance."""
    _check_contours(a, b)
    return 0.5 * (_nearest_distances(a, b).mean() + _nearest_distances(b, a).mean()) * spacing


def hausdorff(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """Symmetric Hausdorff distance."""
    _check_contours(a, b)
    return max(_nearest_distances(a, b).max(), _nearest_distances(b, a).max()) * spacing


def endpoint_error(flow: np.ndarray, gt_flow: np.ndarray, mask: np.ndarray) -> float:
    """Mean Euclidean displacement error over masked pixels, in pixels."""
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    if flow.shape != gt.shape or flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flows must both be 2xHxW, got {flow.shape} vs {gt.shape}")
    m = np.asarray(mask).astype(bool)
    if m.shape != flow.shape[1:]:
        raise ValueError("mask shape mismatch")
    if not m.any():
        raise ValueError("empty mask")
    d = flow - gt
    err = np.sqrt(d[0] * d[0] + d[1] * d[1])
    return float(err[m].mean())


def propagate_labels(seg_target: np.ndarray, flows: list[np.ndarray]) -> list[np.ndarray]:
    """Push the target frame's hard labels out to each frame.

    `flows` are backward-warp fields estimated with the labeled frame as
    target; each output map k lives on frame k's grid and is sampled at
    p - flow_k(p) by nearest neighbor (no fractional labels).
    """
    lab = np.asarray(seg_target)
    if lab.ndim != 2:
        raise ValueError("seg_target must be HxW")
    h, w = lab.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    px, py = np.meshgrid(xs, ys, indexing="xy")
    out = []
    for flow in flows:
        flow = np.asarray(flow)
        if flow.shape != (2, h, w):
            raise ValueError(f"flow must be 2x{h}x{w}, got {flow.shape}")
        qx = np.clip(np.floor(px - flow[0] + 0.5).astype(np.int64), 0, w - 1)
        qy = np.clip(np.floor(py - flow[1] + 0.5).astype(np.int64), 0, h - 1)
        out.append(lab[qy, qx])
    return out


def warp_labels_to_target(labels_src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Pull a source frame's hard labels onto the target grid (ES to ED).

    Nearest-neighbor sampling at p + flow(p); this is the evaluation analog
    of the differentiable probability warp.
    """
    lab = np.asarray(labels_src)
    h, w = lab.shape
    flow = np.asarray(flow)
    if flow.shape != (2, h, w):
        raise ValueError(f"flow must be 2x{h}x{w}, got {flow.shape}")
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    px, py = np.meshgrid(xs, ys, indexing="xy")
    qx = np.clip(np.floor(px + flow[0] + 0.5).astype(np.int64), 0, w - 1)
    qy = np.clip(np.floor(py + flow[1] + 0.5).astype(np.int64), 0, h - 1)
    return lab[qy, qx]


def volume_curve(seg_ed: np.ndarray, flows: list[np.ndarray], spacing: float = 1.0,
                 structure: int = 1) -> list[float]:
    """Area (mm^2 when spacing given, else px) of a propagated structure per frame.

    Frame 0 is the labeled frame itself; the remaining entries follow the
    propagated maps, one per flow field.
    """
    if not (np.asarray(seg_ed) == structure).any():
        raise ValueError(f"structure {structure} missing from the labeled frame")
    area = spacing * spacing
    curve = [float((seg_ed == structure).sum()) * area]
    for lab in propagate_labels(seg_ed, flows):
        curve.append(float((lab == structure).sum()) * area)
    return curve


def dice_per_structure(pred_labels: np.ndarray, gt_labels: np.ndarray,
                       structures: tuple[int, ...] = (1, 2, 3)) -> dict[int, float]:
    return {s: dice(pred_labels == s, gt_labels == s) for s in structures}


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_sequence(params: net.ModelParameters, seq: ImageSequence
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flows (target = frame 0), per-frame class probabilities and labels."""
    dt = params.config.np_dtype
    target = Tensor(seq.frames[0][None].astype(dt))
    sources = [Tensor(seq.frames[k][None].astype(dt)) for k in range(1, seq.num_frames)]
    flows = net.motion_forward(target, sources, params.encoder, params.motion)
    flow_arr = np.stack([f.data[0] for f in flows]).astype(np.float32)
    probs = []
    for k in range(seq.num_frames):
        logits = net.seg_forward(Tensor(seq.frames[k][None].astype(dt)), params.encoder, params.seg)
        probs.append(ad.softmax(logits, axis=1).data[0])
    prob_arr = np.stack(probs).astype(np.float32)
    labels = prob_arr.argmax(axis=1).astype(np.uint8)
    return flow_arr, prob_arr, labels


@dataclass
class TimingReport:
    per_frame_ms: list[float]
    total_ms: float
    setup_ms: float

    def to_json(self) -> dict:
        return {"per_frame_ms": self.per_frame_ms, "total_ms": self.total_ms,
                "setup_ms": self.setup_ms, "frames": len(self.per_frame_ms)}


def time_inference(params: net.ModelParameters, seq: ImageSequence) -> TimingReport:
    """Wall-clock timing of the motion forward pass, one entry per source frame.

    Measures only the network computation: the target encoding is timed as
    setup, each per-frame entry covers encode + fuse + RNN step + flow for
    that source. Data preparation stays outside the timers.
    """
    dt = params.config.np_dtype
    target = Tensor(seq.frames[0][None].astype(dt))
    sources = [Tensor(seq.frames[k][None].astype(dt)) for k in range(1, seq.num_frames)]
    t0 = time.perf_counter()
    target_maps = net._fused_stream(net.encode(target, params.encoder), params.motion.fusion)
    setup_ms = (time.perf_counter() - t0) * 1000.0
    n, _, h, w = target.shape
    state = net.RnnState.initial(n, params.motion.rnn_hidden.weight.shape[0], h, w, dtype=dt)
    per_frame = []
    for src in sources:
        t0 = time.perf_counter()
        src_maps = net._fused_stream(net.encode(src, params.encoder), params.motion.fusion)
        fused = ad.concat(target_maps + src_maps, axis=1)
        state, _flow = net.rnn_step(fused, state, params.motion)
        per_frame.append((time.perf_counter() - t0) * 1000.0)
    return TimingReport(per_frame, setup_ms + sum(per_frame), setup_ms)
