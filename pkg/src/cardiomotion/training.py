"""Three-stage optimization schedule with reproducible checkpoints.

Stages: `motion` trains the encoder and the motion head under the motion
loss on sliding windows; `seg` freezes the shared encoder (and leaves the
motion head untouched) and trains the segmentation head on labeled frames;
`joint` fine-tunes everything under the composite loss on windows anchored
at labeled frames, so every term receives signal each step.

Reproducibility scheme: all randomness is derived from (seed, stage,
epoch) child streams: augmentation draws and the window shuffle are
re-derivable, batches consume no generator state, and a checkpoint only
needs (epoch, step-in-epoch) plus the parameter and optimizer payloads to
continue bit-exactly. A run's every logged number is a function of
(seed, config, data).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container, data, losses, metrics
from . import network as net
from .autodiff import AdamState, NonFiniteError, Prng, Tensor

STAGES = ("motion", "seg", "joint")

_STAGE_PREFIXES = {
    "motion": ("encoder.", "motion."),
    "seg": ("seg.",),
    "joint": ("encoder.", "motion.", "seg."),
}

TRACE_COLUMNS = ("step", "loss_motion", "loss_seg", "loss_warp", "total")

# budget and cadence fields may change between a run and its resumption;
# everything else is identity-defining
_BUDGET_FIELDS = ("epochs", "max_steps", "checkpoint_every", "eval_every")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "motion"
    epochs: int = 4
    max_steps: int | None = None
    batch_size: int = 4
    learning_rate: float = 1e-4
    sequence_length: int = 10
    seed: int = 0
    loss: losses.JointLossConfig = field(default_factory=losses.JointLossConfig)
    net: net.NetConfig = field(default_factory=net.NetConfig)
    augment: bool = True
    augment_ranges: data.AugmentConfig = field(default_factory=data.AugmentConfig)
    checkpoint_every: int = 0     # steps between mid-run checkpoint files (0: only final)
    eval_every: int = 25          # steps between validation Dice probes (seg/joint)
    grad_clip: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.sequence_length < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs, batch size and sequence length must be >= 1")

    @property
    def precision(self) -> str:
        return self.net.dtype

    def to_json(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_json()
        d["augment_ranges"]["scale"] = list(self.augment_ranges.scale)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        if "net" in d:
            d["net"] = net.NetConfig.from_json(d["net"])
        if "loss" in d:
            ld = dict(d["loss"])
            if "motion" in ld:
                ld["motion"] = losses.MotionLossConfig(**ld["motion"])
            d["loss"] = losses.JointLossConfig(**ld)
        if "augment_ranges" in d:
            ar = dict(d["augment_ranges"])
            ar["scale"] = tuple(ar["scale"])
            d["augment_ranges"] = data.AugmentConfig(**ar)
        return TrainConfig(**d)

    def identity_json(self) -> dict:
        d = self.to_json()
        for k in _BUDGET_FIELDS:
            d.pop(k, None)
        return d

    def identity_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.identity_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: net.ModelParameters
    adam: AdamState
    trained_names: list[str]
    stage: str
    epoch: int
    step_in_epoch: int
    global_step: int
    config_json: dict
    config_hash: str
    prng: dict
    trace_digest: str
    best_val_dice: float | None = None
    best_params: dict[str, np.ndarray] | None = None

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_json(self.config_json)


def save_checkpoint(ck: Checkpoint, path) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, t in ck.params.named_parameters():
        entries[f"param/{name}"] = t.data
    for name, m, v in zip(ck.trained_names, ck.adam.m, ck.adam.v):
        entries[f"adam_m/{name}"] = m
        entries[f"adam_v/{name}"] = v
    if ck.best_params is not None:
        for name, arr in ck.best_params.items():
            entries[f"best/{name}"] = arr
    meta = {
        "net_config": ck.params.config.to_json(),
        "model_seed": ck.params.seed,
        "stage": ck.stage,
        "epoch": ck.epoch,
        "step_in_epoch": ck.step_in_epoch,
        "global_step": ck.global_step,
        "adam": {"lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2,
                 "eps": ck.adam.eps, "step": ck.adam.step},
        "trained_names": ck.trained_names,
        "config": ck.config_json,
        "config_hash": ck.config_hash,
        "prng": ck.prng,
        "trace_digest": ck.trace_digest,
        "best_val_dice": ck.best_val_dice,
    }
    container.write(path, "checkpoint", entries, meta)


def load_checkpoint(path) -> Checkpoint:
    entries, meta = container.read(path, expected_kind="checkpoint")
    cfg = net.NetConfig.from_json(meta["net_config"])
    params = net.init_model(0, cfg)
    params.seed = meta.get("model_seed")
    for name, t in params.named_parameters():
        t.data = entries[f"param/{name}"].astype(cfg.np_dtype, copy=False)
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                     m=[entries[f"adam_m/{n}"] for n in meta["trained_names"]],
                     v=[entries[f"adam_v/{n}"] for n in meta["trained_names"]])
    best_params = None
    if any(k.startswith("best/") for k in entries):
        best_params = {k[len("best/"):]: v for k, v in entries.items() if k.startswith("best/")}
    return Checkpoint(
        params=params, adam=adam, trained_names=list(meta["trained_names"]),
        stage=meta["stage"], epoch=meta["epoch"], step_in_epoch=meta["step_in_epoch"],
        global_step=meta["global_step"], config_json=meta["config"],
        config_hash=meta["config_hash"], prng=meta["prng"],
        trace_digest=meta["trace_digest"], best_val_dice=meta.get("best_val_dice"),
        best_params=best_params,
    )


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


class TraceWriter:
    """CSV loss trace; keeps a row digest for the checkpoint."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[str] = []
        self._sha = hashlib.sha256()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(TRACE_COLUMNS) + "\n")

    def write(self, step: int, l_m: float, l_s: float, l_w: float, total: float) -> None:
        row = f"{step},{l_m!r},{l_s!r},{l_w!r},{total!r}"
        self.rows.append(row)
        self._sha.update(row.encode())
        if self.path:
            with self.path.open("a") as f:
                f.write(row + "\n")

    @property
    def digest(self) -> str:
        return self._sha.hexdigest()


def _stage_loss(batch: data.TrainBatch, params: net.ModelParameters,
                cfg: TrainConfig) -> losses.LossBreakdown:
    if cfg.stage == "motion":
        flows = net.motion_forward(batch.target, batch.sources, params.encoder, params.motion)
        l_m = losses.motion_loss(batch.target, batch.sources, flows, cfg.loss.motion)
        return losses.LossBreakdown(total=l_m, motion=float(l_m.data), seg=0.0, warp=0.0)
    if cfg.stage == "seg":
        logits = net.seg_forward(batch.target, params.encoder, params.seg)
        l_s = losses.seg_cross_entropy(logits, batch.target_onehot)
        return losses.LossBreakdown(total=l_s, motion=0.0, seg=float(l_s.data), warp=0.0)
    return losses.composite_loss(batch, params, cfg.loss)


def train_step(batch: data.TrainBatch, params: net.ModelParameters, trained: list[Tensor],
               adam: AdamState, cfg: TrainConfig) -> losses.LossBreakdown:
    """One optimization step: forward, backward, Adam update.

    Raises NonFiniteError if the loss or any gradient is non-finite; the
    parameters are left untouched in that case.
    """
    ad.zero_grads(trained)
    with ad.Tape():
        breakdown = _stage_loss(batch, params, cfg)
        ad.backward(breakdown.total)
    grads = []
    for t in trained:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        grads.append(g)
    if cfg.grad_clip is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if norm > cfg.grad_clip:
            k = cfg.grad_clip / norm
            grads = [g * k for g in grads]
    ad.adam_step(trained, grads, adam)
    return breakdown


def _validation_dice(params: net.ModelParameters, val_seqs: list[data.ImageSequence]) -> float:
    """Mean Dice over structures 1..3 on exposed labeled frames."""
    scores = []
    dt = params.config.np_dtype
    for seq in val_seqs:
        for fi in seq.labeled_frames:
            logits = net.seg_forward(Tensor(seq.frames[fi][None].astype(dt)),
                                     params.encoder, params.seg)
            pred = logits.data[0].argmax(axis=0)
            scores.extend(metrics.dice_per_structure(pred, seq.labels[fi]).values())
    return float(np.mean(scores)) if scores else float("nan")


def _epoch_plan(train_seqs, cfg: TrainConfig, epoch: int):
    """Deterministic (augmented sequences, shuffled window chunks) for one epoch."""
    if cfg.augment:
        aug_rng = Prng(cfg.seed).spawn(f"{cfg.stage}-aug-{epoch}")
        seqs = [data.augment(s, aug_rng, cfg.augment_ranges) for s in train_seqs]
    else:
        seqs = train_seqs
    windows = data.list_windows(seqs, cfg.stage, cfg.sequence_length)
    shuffle_rng = Prng(cfg.seed).spawn(f"{cfg.stage}-shuffle-{epoch}")
    order = shuffle_rng.permutation(len(windows))
    chunks = [[windows[i] for i in order[s:s + cfg.batch_size]]
              for s in range(0, len(windows), cfg.batch_size)]
    return seqs, chunks


def _run_stage(dataset: data.Dataset, cfg: TrainConfig, params: net.ModelParameters,
               trace: TraceWriter, start_epoch: int = 0, start_step_in_epoch: int = 0,
               global_step: int = 0, adam: AdamState | None = None,
               best: tuple[float, dict] | None = None,
               checkpoint_dir=None) -> Checkpoint:
    train_seqs = dataset.subset("train")
    val_seqs = dataset.subset("val")
    prefixes = _STAGE_PREFIXES[cfg.stage]
    params.set_trainable(prefixes)
    named = [(n, t) for n, t in params.named_parameters() if n.startswith(prefixes)]
    trained_names = [n for n, _ in named]
    trained = [t for _, t in named]
    if adam is None:
        adam = AdamState.for_params(trained, lr=cfg.learning_rate)
    track_val = cfg.stage in ("seg", "joint") and cfg.eval_every > 0 and val_seqs
    best_val, best_params = best if best else (None, None)

    def snapshot() -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in params.named_parameters()}

    def make_ck(epoch: int, step_in_epoch: int) -> Checkpoint:
        return Checkpoint(
            params=params, adam=adam, trained_names=trained_names, stage=cfg.stage,
            epoch=epoch, step_in_epoch=step_in_epoch, global_step=global_step,
            config_json=cfg.to_json(), config_hash=cfg.identity_hash(),
            prng={"scheme": "per-epoch-derived", "seed": cfg.seed,
                  "epoch": epoch, "step_in_epoch": step_in_epoch},
            trace_digest=trace.digest, best_val_dice=best_val, best_params=best_params,
        )

    def maybe_eval() -> None:
        nonlocal best_val, best_params
        if not track_val:
            return
        score = _validation_dice(params, val_seqs)
        if best_val is None or score > best_val:
            best_val, best_params = score, snapshot()

    done = False
    epoch = start_epoch
    if cfg.max_steps is not None and global_step >= cfg.max_steps:
        maybe_eval()
        return make_ck(epoch, start_step_in_epoch)
    while epoch < cfg.epochs and not done:
        seqs, chunks = _epoch_plan(train_seqs, cfg, epoch)
        first = start_step_in_epoch if epoch == start_epoch else 0
        for step_in_epoch in range(first, len(chunks)):
            batch = data.make_batch(seqs, chunks[step_in_epoch], cfg.stage,
                                    cfg.sequence_length, cfg.net.np_dtype)
            try:
                breakdown = train_step(batch, params, trained, adam, cfg)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite loss at step {global_step} "
                    f"(epoch {epoch}, batch {step_in_epoch}): {e}") from None
            global_step += 1
            trace.write(global_step, *breakdown.as_row())
            if track_val and global_step % cfg.eval_every == 0:
                maybe_eval()
            if checkpoint_dir and cfg.checkpoint_every and global_step % cfg.checkpoint_every == 0:
                nxt = (epoch, step_in_epoch + 1) if step_in_epoch + 1 < len(chunks) else (epoch + 1, 0)
                save_checkpoint(make_ck(*nxt), Path(checkpoint_dir) / f"step{global_step:06d}.ckpt")
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                done = True
                break
        else:
            epoch += 1
            continue
        # max_steps hit mid-epoch
        if cfg.max_steps is not None and global_step >= cfg.max_steps:
            nxt = (epoch, step_in_epoch + 1) if step_in_epoch + 1 < len(chunks) else (epoch + 1, 0)
            maybe_eval()
            return make_ck(*nxt)
    maybe_eval()
    return make_ck(epoch, 0)


def train_motion(dataset: data.Dataset, cfg: TrainConfig,
                 trace_path=None, checkpoint_dir=None) -> Checkpoint:
    """Stage 1: encoder + motion head under the motion loss; labels unused."""
    if cfg.stage != "motion":
        raise ValueError("config stage must be 'motion'")
    params = net.init_model(cfg.seed, cfg.net)
    return _run_stage(dataset, cfg, params, TraceWriter(trace_path), checkpoint_dir=checkpoint_dir)


def train_seg_frozen(dataset: data.Dataset, checkpoint: Checkpoint, cfg: TrainConfig,
                     trace_path=None, checkpoint_dir=None) -> Checkpoint:
    """Stage 2: freeze the shared encoder, train the segmentation head only."""
    if cfg.stage != "seg":
        raise ValueError("config stage must be 'seg'")
    if checkpoint.stage != "motion":
        raise ValueError("stage 2 requires a stage-1 (motion) checkpoint")
    return _run_stage(dataset, cfg, checkpoint.params, TraceWriter(trace_path),
                      checkpoint_dir=checkpoint_dir)


def train_joint(dataset: data.Dataset, checkpoint: Checkpoint, cfg: TrainConfig,
                trace_path=None, checkpoint_dir=None) -> Checkpoint:
    """Stage 3: all parameters under the composite loss."""
    if cfg.stage != "joint":
        raise ValueError("config stage must be 'joint'")
    if checkpoint.stage != "seg":
        raise ValueError("joint training requires a stage-2 (seg) checkpoint")
    return _run_stage(dataset, cfg, checkpoint.params, TraceWriter(trace_path),
                      checkpoint_dir=checkpoint_dir)


def resume(dataset: data.Dataset, checkpoint: Checkpoint, cfg: TrainConfig,
           trace_path=None, checkpoint_dir=None) -> Checkpoint:
    """Continue a checkpointed run bit-exactly up to the (new) budget.

    Budget fields (epochs, max_steps, cadences) may differ from the original
    run; any other config change is refused.
    """
    if cfg.identity_hash() != checkpoint.config_hash:
        raise ValueError(
            "config does not match the checkpoint (only budget fields may change); "
            f"got {cfg.identity_hash()}, checkpoint has {checkpoint.config_hash}")
    if cfg.stage != checkpoint.stage:
        raise ValueError("resume must keep the stage")
    best = None
    if checkpoint.best_val_dice is not None:
        best = (checkpoint.best_val_dice, checkpoint.best_params)
    return _run_stage(dataset, cfg, checkpoint.params, TraceWriter(trace_path),
                      start_epoch=checkpoint.epoch, start_step_in_epoch=checkpoint.step_in_epoch,
                      global_step=checkpoint.global_step, adam=checkpoint.adam,
                      best=best, checkpoint_dir=checkpoint_dir)
