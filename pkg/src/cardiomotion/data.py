"""Synthetic cardiac-like sequences with exact ground truth, preprocessing,
augmentation, dataset partitioning, and file I/O.

The generator renders a bright disk (LV cavity) inside an annulus (Myo)
with a crescent (RV) hugging its left side, over a darker background, plus
a smooth per-sequence texture field so the photometric loss has gradients
away from boundaries. The whole scene moves through a similarity transform
per frame k:

    Phi_k(x) = c + s_k * (x - c) + t_k

with a periodic contraction s_k = 1 - A * sin^2(pi k / F) (ES at
mid-cycle) and a rigid drift t_k (cyclic component plus optional constant
velocity). Frames are evaluated analytically at Phi_k^-1(pixel), so the
ground-truth backward flow

    gt_flow_k(x) = Phi_k(x) - x

is exact: warping frame k by gt_flow_k reproduces frame 0 up to
interpolation error and pixel noise.

Labels exist for every frame (the generator's hidden truth, used only by
evaluation) but are exposed for training on exactly two frames per
sequence, cycle start and mid-cycle, mimicking ED/ES-only annotation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .autodiff import Prng, Tensor

NUM_CLASSES = 4  # background, LV cavity, myocardium, RV cavity
CLASS_NAMES = ("background", "LV", "Myo", "RV")


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class ImageSequence:
    """One target frame plus following frames, optional labels and flows.

    frames: (F, 1, H, W) float32 intensities in [0, 1].
    labels: (F, H, W) uint8 class ids, or None; full per-frame maps exist
        only for synthetic data, training may use only `labeled_frames`.
    labeled_frames: indices whose annotations are exposed to training.
    gt_flows: (F-1, 2, H, W) float32, entry k warps frame k+1 back to
        frame 0 (backward-warp convention), or None.
    spacing: mm per pixel, for metric reporting.
    """

    frames: np.ndarray
    labels: np.ndarray | None = None
    labeled_frames: tuple[int, ...] = ()
    gt_flows: np.ndarray | None = None
    spacing: float = 1.0
    seq_id: str = "seq"

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def validate(self) -> None:
        f = self.frames
        if f.ndim != 4 or f.shape[1] != 1:
            raise ValueError(f"frames must be Fx1xHxW, got {f.shape}")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        if self.labels is not None:
            if self.labels.shape != (f.shape[0], f.shape[2], f.shape[3]):
                raise ValueError("labels must be FxHxW")
            if not np.isin(self.labels, np.arange(NUM_CLASSES)).all():
                raise ValueError("label classes must be 0..3")
        for i in self.labeled_frames:
            if not 0 <= i < f.shape[0]:
                raise ValueError(f"labeled frame {i} out of range")
            if self.labels is None:
                raise ValueError("labeled_frames set but no labels present")
        if self.gt_flows is not None:
            expect = (f.shape[0] - 1, 2, f.shape[2], f.shape[3])
            if self.gt_flows.shape != expect:
                raise ValueError(f"gt_flows must be {expect}, got {self.gt_flows.shape}")

    def exposed_label(self, frame: int) -> np.ndarray:
        if frame not in self.labeled_frames:
            raise KeyError(f"frame {frame} of {self.seq_id} has no exposed annotation")
        return self.labels[frame]


@dataclass(frozen=True)
class SyntheticConfig:
    """Geometry, motion and rendering parameters; ranges are per-sequence
    uniform draws, lengths given as fractions of the image size unless
    stated otherwise."""

    image_size: int = 64
    num_sequences: int = 20
    frames_per_sequence: int = 20
    seed: int = 0
    spacing_mm: float = 1.5
    lv_radius: tuple[float, float] = (0.12, 0.16)
    myo_thickness: tuple[float, float] = (0.04, 0.06)
    rv_radius: tuple[float, float] = (0.07, 0.095)
    rv_gap: float = 0.01
    center_jitter: float = 0.02
    contraction: tuple[float, float] = (0.08, 0.14)
    drift_amplitude: tuple[float, float] = (0.03, 0.07)
    drift_velocity: tuple[float, float] = (0.0, 0.0)  # px/frame, constant
    texture_amplitude: float = 0.12
    texture_waves: int = 8
    texture_wavelength: tuple[float, float] = (0.08, 0.25)
    noise_std: float = 0.003
    edge_width: float = 1.2  # px

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "SyntheticConfig":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return SyntheticConfig(**d)


# intensity of each class in the rendered scene
_CLASS_INTENSITY = (0.15, 0.85, 0.45, 0.65)


def _smootherstep(d: np.ndarray, edge: float) -> np.ndarray:
    # 0 -> 1 ramp of width 2*edge centered on d = 0, C1-smooth
    t = np.clip((d + edge) / (2.0 * edge), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class _SceneParams:
    center: np.ndarray
    r_lv: float
    r_myo: float
    rv_center: np.ndarray
    r_rv: float
    rv_clear: float
    contraction: float
    drift_dir: np.ndarray
    drift_amp: float
    velocity: np.ndarray
    waves: list[tuple[float, float, float, float]]  # (kx, ky, phase, amplitude)


def _draw_scene(cfg: SyntheticConfig, prng: Prng) -> _SceneParams:
    size = cfg.image_size
    u = lambda lo, hi: float(prng.uniform(lo, hi))
    r_lv = u(*cfg.lv_radius) * size
    r_myo = r_lv + u(*cfg.myo_thickness) * size
    r_rv = u(*cfg.rv_radius) * size
    jitter = cfg.center_jitter * size
    center = np.array([(size - 1) / 2.0 + u(-jitter, jitter),
                       (size - 1) / 2.0 + u(-jitter, jitter)])
    rv_angle = math.pi + u(-0.35, 0.35)  # hugging the left side
    rv_clear = r_myo + cfg.rv_gap * size
    rv_offset = rv_clear + 0.55 * r_rv
    rv_center = center + rv_offset * np.array([math.cos(rv_angle), math.sin(rv_angle)])
    theta = u(0, 2 * math.pi)
    waves = []
    for _ in range(cfg.texture_waves):
        lam = u(*cfg.texture_wavelength) * size
        ang = u(0, 2 * math.pi)
        waves.append((math.cos(ang) / lam, math.sin(ang) / lam,
                      u(0, 2 * math.pi),
                      cfg.texture_amplitude / math.sqrt(cfg.texture_waves)))
    return _SceneParams(
        center=center, r_lv=r_lv, r_myo=r_myo, rv_center=rv_center, r_rv=r_rv,
        rv_clear=rv_clear,
        contraction=u(*cfg.contraction),
        drift_dir=np.array([math.cos(theta), math.sin(theta)]),
        drift_amp=u(*cfg.drift_amplitude) * size,
        velocity=np.asarray(cfg.drift_velocity, dtype=np.float64),
        waves=waves,
    )


def _check_bounds(cfg: SyntheticConfig, scene: _SceneParams) -> None:
    f = cfg.frames_per_sequence
    reach = np.linalg.norm(scene.rv_center - scene.center) + scene.r_rv
    reach = max(reach, scene.r_myo) + cfg.edge_width
    max_shift = scene.drift_amp + np.linalg.norm(scene.velocity) * (f - 1)
    margin = 1.0
    lo = min(scene.center) - reach - max_shift
    hi = max(scene.center) + reach + max_shift
    if lo < margin or hi > cfg.image_size - 1 - margin:
        raise ValueError(
            f"anatomy leaves the frame over the cycle (extent [{lo:.1f}, {hi:.1f}] "
            f"for image size {cfg.image_size})")


def _motion_at(scene: _SceneParams, k: int, f: int) -> tuple[float, np.ndarray]:
    s = 1.0 - scene.contraction * math.sin(math.pi * k / f) ** 2
    t = scene.drift_amp * math.sin(2.0 * math.pi * k / f) * scene.drift_dir \
        + scene.velocity * k
    return s, t


def _render(scene: _SceneParams, cfg: SyntheticConfig, s: float, t: np.ndarray
            ) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate intensities and hard labels on the pixel grid of one frame."""
    size = cfg.image_size
    xs = np.arange(size, dtype=np.float64)
    px, py = np.meshgrid(xs, xs, indexing="xy")
    # reference coordinates: Phi^-1(p) = c + (p - c - t) / s
    rx = scene.center[0] + (px - scene.center[0] - t[0]) / s
    ry = scene.center[1] + (py - scene.center[1] - t[1]) / s
    d_c = np.hypot(rx - scene.center[0], ry - scene.center[1])
    d_rv = np.hypot(rx - scene.rv_center[0], ry - scene.rv_center[1])

    e = cfg.edge_width
    m_lv = _smootherstep(scene.r_lv - d_c, e)
    m_in2 = _smootherstep(scene.r_myo - d_c, e)
    m_myo = m_in2 - m_lv
    m_rv = _smootherstep(scene.r_rv - d_rv, e) * (1.0 - _smootherstep(scene.rv_clear - d_c, e))

    bg, lv, myo, rv = _CLASS_INTENSITY
    img = np.full((size, size), bg)
    img += (rv - bg) * m_rv
    img += (myo - bg) * m_myo
    img += (lv - bg) * m_lv
    tex = np.zeros_like(img)
    for kx, ky, phase, amp in scene.waves:
        tex += amp * np.sin(2.0 * math.pi * (kx * rx + ky * ry) + phase)
    img = np.clip(img + tex, 0.0, 1.0)

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[(d_rv <= scene.r_rv) & (d_c > scene.rv_clear)] = 3
    labels[d_c <= scene.r_myo] = 2
    labels[d_c <= scene.r_lv] = 1
    return img, labels


def generate_synthetic(cfg: SyntheticConfig) -> list[ImageSequence]:
    """Render sequences with analytic ground-truth flows and hidden labels."""
    master = Prng(cfg.seed).spawn("synthetic")
    size = cfg.image_size
    f = cfg.frames_per_sequence
    xs = np.arange(size, dtype=np.float64)
    px, py = np.meshgrid(xs, xs, indexing="xy")
    sequences = []
    for idx in range(cfg.num_sequences):
        prng = master.spawn(f"seq{idx}")
        scene = _draw_scene(cfg, prng)
        _check_bounds(cfg, scene)
        frames = np.empty((f, 1, size, size), dtype=np.float32)
        labels = np.empty((f, size, size), dtype=np.uint8)
        flows = np.empty((f - 1, 2, size, size), dtype=np.float32)
        for k in range(f):
            s, t = _motion_at(scene, k, f)
            img, lab = _render(scene, cfg, s, t)
            if cfg.noise_std > 0:
                img = np.clip(img + prng.normal((size, size), cfg.noise_std, dtype=np.float64), 0.0, 1.0)
            frames[k, 0] = img.astype(np.float32)
            labels[k] = lab
            if k > 0:
                # gt_flow(x) = Phi_k(x) - x, exact for the similarity motion
                flows[k - 1, 0] = ((s - 1.0) * (px - scene.center[0]) + t[0]).astype(np.float32)
                flows[k - 1, 1] = ((s - 1.0) * (py - scene.center[1]) + t[1]).astype(np.float32)
        seq = ImageSequence(
            frames=frames, labels=labels,
            labeled_frames=(0, f // 2) if f > 1 else (0,),
            gt_flows=flows if f > 1 else None,
            spacing=cfg.spacing_mm, seq_id=f"seq_{idx:03d}",
        )
        seq.validate()
        sequences.append(seq)
    return sequences


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------


def center_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Center crop of the trailing two axes; offsets are floor((src-dst)/2)."""
    h, w = image.shape[-2], image.shape[-1]
    if h < height or w < width:
        raise ValueError(f"image {h}x{w} smaller than crop {height}x{width}")
    oy = (h - height) // 2
    ox = (w - width) // 2
    return image[..., oy:oy + height, ox:ox + width]


def minmax_normalize(frames: np.ndarray) -> np.ndarray:
    """Scale a whole sequence to [0, 1]; a constant sequence maps to zeros."""
    lo = float(frames.min())
    hi = float(frames.max())
    if hi <= lo:
        return np.zeros_like(frames, dtype=np.float32)
    return ((frames - lo) / (hi - lo)).astype(np.float32)


def preprocess(frames: np.ndarray, size: int) -> np.ndarray:
    """Center-crop each frame to size x size, then min-max normalize the sequence."""
    return minmax_normalize(center_crop(np.asarray(frames, dtype=np.float64), size, size))


def _sample_bilinear_clamped(img: np.ndarray, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    qx = np.clip(qx, 0.0, w - 1.0)
    qy = np.clip(qy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(qx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(qy).astype(np.int64), max(h - 2, 0))
    fx = qx - x0
    fy = qy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_nearest_clamped(img: np.ndarray, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ix = np.clip(np.floor(qx + 0.5).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(qy + 0.5).astype(np.int64), 0, h - 1)
    return img[iy, ix]


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 30.0
    translation_px: float = 8.0
    scale: tuple[float, float] = (0.9, 1.1)


def augment(seq: ImageSequence, prng: Prng, cfg: AugmentConfig = AugmentConfig()) -> ImageSequence:
    """One rigid+scale transform per sequence, applied identically to all frames.

    Intensities are resampled bilinearly, labels by nearest neighbor, both
    with border clamping. Ground-truth flows are no longer valid for the
    transformed frames and are dropped.
    """
    theta = math.radians(float(prng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    tx = float(prng.uniform(-cfg.translation_px, cfg.translation_px))
    ty = float(prng.uniform(-cfg.translation_px, cfg.translation_px))
    sigma = float(prng.uniform(*cfg.scale))
    h, w = seq.image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    px, py = np.meshgrid(xs, ys, indexing="xy")
    # inverse map of A(x) = R sigma (x - m) + m + t
    dx = px - cx - tx
    dy = py - cy - ty
    cos_t, sin_t = math.cos(-theta), math.sin(-theta)
    qx = (cos_t * dx - sin_t * dy) / sigma + cx
    qy = (sin_t * dx + cos_t * dy) / sigma + cy

    frames = np.empty_like(seq.frames)
    for k in range(seq.num_frames):
        frames[k, 0] = _sample_bilinear_clamped(seq.frames[k, 0].astype(np.float64), qx, qy).astype(np.float32)
    labels = None
    if seq.labels is not None:
        labels = np.empty_like(seq.labels)
        for k in range(seq.labels.shape[0]):
            labels[k] = _sample_nearest_clamped(seq.labels[k], qx, qy)
    return replace(seq, frames=frames, labels=labels, gt_flows=None)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_tensor(arr: np.ndarray, path) -> None:
    container.write(path, "tensor", {"data": np.asarray(arr)})


def load_tensor(path) -> np.ndarray:
    entries, _ = container.read(path, expected_kind="tensor")
    return entries["data"]


def read_tensor_header(path) -> dict:
    """Shapes and dtypes without loading the payload."""
    return container.read_header(path)


def save_sequence(seq: ImageSequence, path) -> None:
    seq.validate()
    entries = {"frames": seq.frames}
    if seq.labels is not None:
        entries["labels"] = seq.labels
        entries["labeled_frames"] = np.asarray(seq.labeled_frames, dtype=np.int64)
    if seq.gt_flows is not None:
        entries["gt_flows"] = seq.gt_flows
    container.write(path, "image-sequence", entries,
                    {"spacing": seq.spacing, "seq_id": seq.seq_id})


def load_sequence(path) -> ImageSequence:
    entries, meta = container.read(path, expected_kind="image-sequence")
    seq = ImageSequence(
        frames=entries["frames"],
        labels=entries.get("labels"),
        labeled_frames=tuple(int(i) for i in entries.get("labeled_frames", [])),
        gt_flows=entries.get("gt_flows"),
        spacing=float(meta["spacing"]),
        seq_id=str(meta["seq_id"]),
    )
    seq.validate()
    return seq


@dataclass
class Dataset:
    sequences: list[ImageSequence]
    splits: dict[str, list[int]]  # split name -> sequence indices
    config: dict = field(default_factory=dict)
    seed: int = 0

    def subset(self, split: str) -> list[ImageSequence]:
        return [self.sequences[i] for i in self.splits[split]]


def split_sequences(n: int, prng: Prng, train: float = 0.6, val: float = 0.2) -> dict[str, list[int]]:
    """Deterministic shuffle split into train/val/test by sequence."""
    if not 0 < train < 1 or not 0 <= val < 1 or train + val >= 1:
        raise ValueError("invalid split ratios")
    order = [int(i) for i in prng.permutation(n)]
    n_train = max(1, round(n * train))
    n_val = max(1, round(n * val)) if n > 2 else 0
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for seq in dataset.sequences:
        name = f"{seq.seq_id}.bin"
        save_sequence(seq, out / name)
        files.append({"id": seq.seq_id, "file": name})
    manifest = {
        "schema": 1,
        "kind": "dataset-manifest",
        "seed": dataset.seed,
        "config": dataset.config,
        "sequences": files,
        "splits": dataset.splits,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("kind") != "dataset-manifest":
        raise container.ContainerError(f"{root}: not a dataset directory")
    sequences = [load_sequence(root / entry["file"]) for entry in manifest["sequences"]]
    return Dataset(
        sequences=sequences,
        splits={k: list(v) for k, v in manifest["splits"].items()},
        config=manifest.get("config", {}),
        seed=manifest.get("seed", 0),
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    target: Tensor                 # (B, 1, H, W)
    sources: list[Tensor]          # T tensors of (B, 1, H, W); empty in the seg stage
    target_onehot: Tensor | None   # (B, K, H, W)
    meta: list[tuple[str, int]]    # (seq_id, target frame index)


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return np.moveaxis(out, -1, 1) if labels.ndim == 3 else np.moveaxis(out, -1, 0)


def list_windows(sequences: list[ImageSequence], stage: str, t_len: int) -> list[tuple[int, int]]:
    """Eligible (sequence index, target frame) pairs for a training stage.

    motion: sliding windows over every frame with T following frames.
    seg: exposed labeled frames only (no source window needed).
    joint: exposed labeled frames that still have T following frames.
    """
    windows = []
    for si, seq in enumerate(sequences):
        f = seq.num_frames
        if stage == "motion":
            if f < t_len + 1:
                raise ValueError(f"{seq.seq_id}: needs at least {t_len + 1} frames")
            windows.extend((si, t) for t in range(f - t_len))
        elif stage == "seg":
            windows.extend((si, t) for t in seq.labeled_frames)
        elif stage == "joint":
            eligible = [t for t in seq.labeled_frames if t + t_len <= f - 1]
            if not eligible:
                raise ValueError(f"{seq.seq_id}: no labeled frame with {t_len} following frames")
            windows.extend((si, t) for t in eligible)
        else:
            raise ValueError(f"unknown stage {stage!r}")
    return windows


def make_batch(sequences: list[ImageSequence], windows: list[tuple[int, int]],
               stage: str, t_len: int, dtype=np.float32) -> TrainBatch:
    """Assemble one batch from window references."""
    targets = np.stack([sequences[si].frames[t] for si, t in windows]).astype(dtype)
    sources: list[Tensor] = []
    if stage != "seg":
        for k in range(1, t_len + 1):
            arr = np.stack([sequences[si].frames[t + k] for si, t in windows]).astype(dtype)
            sources.append(Tensor(arr))
    onehot = None
    if stage != "motion":
        labs = np.stack([sequences[si].exposed_label(t) for si, t in windows])
        onehot = Tensor(one_hot(labs, dtype=dtype))
    meta = [(sequences[si].seq_id, t) for si, t in windows]
    return TrainBatch(Tensor(targets), sources, onehot, meta)


def batches(sequences: list[ImageSequence], stage: str, batch_size: int, t_len: int,
            prng: Prng, dtype=np.float32):
    """One epoch of batches: every eligible window exactly once, seed-shuffled."""
    windows = list_windows(sequences, stage, t_len)
    order = prng.permutation(len(windows))
    for start in range(0, len(windows), batch_size):
        chunk = [windows[i] for i in order[start:start + batch_size]]
        yield make_batch(sequences, chunk, stage, t_len, dtype)
