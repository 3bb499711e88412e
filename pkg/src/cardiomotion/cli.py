"""Command-line surface: data generation, staged training, inference,
evaluation, and visualization export.

Every command reads one JSON config document (sections: "data", "train",
"eval", "viz"; all optional, full defaulting), echoes the resolved
configuration, and writes a run manifest next to its artifacts. Exit
codes: 0 success, 1 usage or configuration error, 2 runtime numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import statistics
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container, data, losses, metrics, training, viz
from . import network as net
from .autodiff import NonFiniteError
from .data import CLASS_NAMES


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract wants 1
    def error(self, message):
        raise UsageError(message)


def _load_config_doc(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {p} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    return doc


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return sec


def _build(cls, section: dict, what: str):
    try:
        return cls.from_json(section) if hasattr(cls, "from_json") else cls(**section)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {what} config: {e}")


def _prepare_out(out_dir: str, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"],
                           capture_output=True, text=True, timeout=5)
        return r.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


class Manifest:
    def __init__(self, command: str, config: dict, seed):
        self.data = {
            "command": command,
            "config": config,
            "config_hash": net.config_hash(config),
            "seed": seed,
            "git": _git_describe(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": [],
        }
        self._t0 = time.perf_counter()

    def add(self, path) -> None:
        self.data["artifacts"].append(str(path))

    def write(self, out_dir: Path) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.data["duration_s"] = round(time.perf_counter() - self._t0, 3)
        (out_dir / "run-manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _echo(config: dict) -> None:
    print(json.dumps(config, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    doc = _load_config_doc(args.config)
    cfg = _build(data.SyntheticConfig, _section(doc, "data"), "data")
    print(f"generating {cfg.num_sequences} sequences "
          f"({cfg.frames_per_sequence} frames, {cfg.image_size}x{cfg.image_size}, seed {cfg.seed})")
    _echo(cfg.to_json())
    if args.dry_run:
        return 0
    out = _prepare_out(args.out, args.force)
    manifest = Manifest("gen-data", cfg.to_json(), cfg.seed)
    try:
        sequences = data.generate_synthetic(cfg)
    except ValueError as e:
        raise UsageError(f"synthetic geometry invalid: {e}")
    splits = data.split_sequences(len(sequences), data.Prng(cfg.seed).spawn("split"))
    ds = data.Dataset(sequences, splits, config=cfg.to_json(), seed=cfg.seed)
    data.save_dataset(ds, out)
    for seq in sequences:
        manifest.add(out / f"{seq.seq_id}.bin")
    manifest.write(out)
    print(f"wrote {len(sequences)} sequences to {out}")
    return 0


_PREV_STAGE = {"seg": "motion", "joint": "seg"}


def cmd_train(args) -> int:
    doc = _load_config_doc(args.config)
    section = dict(_section(doc, "train"))
    section["stage"] = args.stage
    if args.seed is not None:
        section["seed"] = args.seed
    if args.max_steps is not None:
        section["max_steps"] = args.max_steps
    if args.epochs is not None:
        section["epochs"] = args.epochs
    cfg = _build(training.TrainConfig, section, "train")
    print(f"stage={cfg.stage} epochs={cfg.epochs} max_steps={cfg.max_steps} "
          f"batch={cfg.batch_size} T={cfg.sequence_length} lr={cfg.learning_rate} seed={cfg.seed}")
    print(f"loss: alpha={cfg.loss.motion.alpha} beta={cfg.loss.motion.beta} "
          f"epsilon={cfg.loss.motion.epsilon} lambda1={cfg.loss.lambda1} lambda2={cfg.loss.lambda2}")
    _echo(cfg.to_json())
    if args.dry_run:
        return 0

    dataset = data.load_dataset(args.dataset)
    out = _prepare_out(args.out, args.force)
    manifest = Manifest(f"train-{cfg.stage}", cfg.to_json(), cfg.seed)
    trace = out / "trace.csv"
    ckpt_path = out / "checkpoint.ckpt"

    if args.resume:
        prev = training.load_checkpoint(args.resume)
        ck = training.resume(dataset, prev, cfg, trace_path=trace, checkpoint_dir=out)
    elif cfg.stage == "motion":
        ck = training.train_motion(dataset, cfg, trace_path=trace, checkpoint_dir=out)
    else:
        if not args.init_from:
            raise UsageError(f"stage {cfg.stage!r} needs --init-from "
                             f"with a {_PREV_STAGE[cfg.stage]}-stage checkpoint")
        prev = training.load_checkpoint(args.init_from)
        if cfg.stage == "seg":
            ck = training.train_seg_frozen(dataset, prev, cfg, trace_path=trace, checkpoint_dir=out)
        else:
            ck = training.train_joint(dataset, prev, cfg, trace_path=trace, checkpoint_dir=out)

    training.save_checkpoint(ck, ckpt_path)
    net.save_params(ck.params, out / "params.bin")
    manifest.add(trace)
    manifest.add(ckpt_path)
    manifest.add(out / "params.bin")
    manifest.write(out)
    if ck.best_val_dice is not None:
        print(f"best validation Dice: {ck.best_val_dice:.4f}")
    print(f"finished at step {ck.global_step}; checkpoint at {ckpt_path}")
    return 0


def _infer_one(params, seq: data.ImageSequence, out: Path) -> list[Path]:
    flows, probs, labels = metrics.predict_sequence(params, seq)
    report = metrics.time_inference(params, seq)
    seq_dir = out / seq.seq_id
    seq_dir.mkdir(parents=True, exist_ok=True)
    pred = seq_dir / "predictions.bin"
    container.write(pred, "predictions",
                    {"flows": flows, "probs": probs, "labels": labels, "frames": seq.frames},
                    {"seq_id": seq.seq_id, "spacing": seq.spacing})
    timing = seq_dir / "timing.json"
    timing.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return [pred, timing]


def cmd_infer(args) -> int:
    ck = training.load_checkpoint(args.checkpoint)
    params = ck.params
    src = Path(args.sequence)
    if src.is_dir():
        dataset = data.load_dataset(src)
        idx = dataset.splits.get(args.split, []) if args.split != "all" else range(len(dataset.sequences))
        sequences = [dataset.sequences[i] for i in idx]
        if not sequences:
            raise UsageError(f"no sequences in split {args.split!r}")
    else:
        sequences = [data.load_sequence(src)]
    out = _prepare_out(args.out, args.force)
    manifest = Manifest("infer", {"checkpoint": str(args.checkpoint), "split": args.split}, ck.config_json.get("seed"))
    for seq in sequences:
        for p in _infer_one(params, seq, out):
            manifest.add(p)
        print(f"{seq.seq_id}: {seq.num_frames - 1} flows written")
    manifest.write(out)
    return 0


def _load_predictions(pred_dir: Path, seq_id: str):
    path = pred_dir / seq_id / "predictions.bin"
    if not path.exists():
        raise UsageError(f"missing predictions for sequence {seq_id} (expected {path})")
    entries, meta = container.read(path, expected_kind="predictions")
    return entries, meta


def cmd_eval(args) -> int:
    dataset = data.load_dataset(args.dataset)
    pred_dir = Path(args.pred)
    out = _prepare_out(args.out, args.force)
    idx = dataset.splits.get(args.split, []) if args.split != "all" else range(len(dataset.sequences))
    sequences = [dataset.sequences[i] for i in idx]
    if not sequences:
        raise UsageError(f"no sequences in split {args.split!r}")

    rows: list[tuple[str, str, str, float]] = []
    for seq in sequences:
        entries, _ = _load_predictions(pred_dir, seq.seq_id)
        flows, labels_pred = entries["flows"], entries["labels"]
        if labels_pred.shape != (seq.num_frames,) + seq.image_size:
            raise UsageError(f"{seq.seq_id}: prediction shape mismatch with the dataset")
        for fi in seq.labeled_frames:
            gt = seq.labels[fi]
            for s, d in metrics.dice_per_structure(labels_pred[fi], gt).items():
                rows.append((seq.seq_id, CLASS_NAMES[s], "dice", d))
        # paper-style contour metrics: pull the other annotated frame's
        # labels onto the target grid with the estimated flow
        anchor = seq.labeled_frames[0]
        for fi in seq.labeled_frames[1:]:
            warped = metrics.warp_labels_to_target(seq.labels[fi], flows[fi - 1])
            for s in (1, 2, 3):
                a = metrics.extract_contour(warped == s)
                b = metrics.extract_contour(seq.labels[anchor] == s)
                if len(a) == 0 or len(b) == 0:
                    raise UsageError(f"{seq.seq_id}: structure {CLASS_NAMES[s]} has an empty contour")
                rows.append((seq.seq_id, CLASS_NAMES[s], "mcd", metrics.mcd(a, b, seq.spacing)))
                rows.append((seq.seq_id, CLASS_NAMES[s], "hd", metrics.hausdorff(a, b, seq.spacing)))
        if seq.gt_flows is not None:
            mask = seq.labels[0] > 0 if seq.labels is not None else np.ones(seq.image_size, bool)
            epe = [metrics.endpoint_error(flows[k], seq.gt_flows[k], mask)
                   for k in range(flows.shape[0])]
            rows.append((seq.seq_id, "all", "epe", float(np.mean(epe))))

    csv_path = out / "metrics.csv"
    with csv_path.open("w") as f:
        f.write("sequence,structure,metric,value\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]},{r[2]},{r[3]!r}\n")

    summary: dict = {}
    for _, structure, metric, value in rows:
        summary.setdefault(metric, {}).setdefault(structure, []).append(value)
    summary_out = {
        m: {s: {"mean": statistics.fmean(v),
                "std": statistics.pstdev(v) if len(v) > 1 else 0.0,
                "n": len(v)}
            for s, v in per.items()}
        for m, per in summary.items()
    }
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summary_out, indent=2, sort_keys=True) + "\n")

    manifest = Manifest("eval", {"pred": str(pred_dir), "dataset": str(args.dataset),
                                 "split": args.split}, dataset.seed)
    manifest.add(csv_path)
    manifest.add(json_path)
    manifest.write(out)
    for metric_name, per in sorted(summary_out.items()):
        line = ", ".join(f"{s}={d['mean']:.4f}" for s, d in sorted(per.items()))
        print(f"{metric_name}: {line}")
    return 0


def cmd_viz(args) -> int:
    doc = _load_config_doc(args.config)
    sec = _section(doc, "viz")
    stride = int(sec.get("arrow_stride", args.arrow_stride))
    pred_dir = Path(args.pred)
    out = _prepare_out(args.out, args.force)
    manifest = Manifest("viz", {"pred": str(pred_dir), "arrow_stride": stride}, None)
    seq_dirs = sorted(p.parent.name for p in pred_dir.glob("*/predictions.bin"))
    if not seq_dirs:
        raise UsageError(f"no predictions under {pred_dir}")
    for seq_id in seq_dirs:
        entries, meta = _load_predictions(pred_dir, seq_id)
        frames, flows, labels = entries["frames"], entries["flows"], entries["labels"]
        seq_out = out / seq_id
        seq_out.mkdir(parents=True, exist_ok=True)
        for k in range(frames.shape[0]):
            flow = flows[k - 1] if k > 0 else None
            rgb = viz.overlay_frame(frames[k, 0], labels[k], flow, arrow_stride=stride)
            path = seq_out / f"frame_{k:03d}.ppm"
            viz.write_ppm(path, rgb)
            manifest.add(path)
        try:
            curve = metrics.volume_curve(labels[0], list(flows), float(meta["spacing"]))
        except ValueError:
            print(f"warning: {seq_id}: LV absent from the predicted labels, writing a zero curve")
            curve = [0.0] * frames.shape[0]
        vpath = seq_out / "volume.csv"
        viz.write_volume_csv(vpath, curve)
        manifest.add(vpath)
        print(f"{seq_id}: {frames.shape[0]} overlays + volume curve")
    manifest.write(out)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="cardiomotion",
                description="joint cardiac motion estimation and segmentation, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config", help="JSON config document (section 'data')")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("stage", choices=("motion", "seg", "joint"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="JSON config document (section 'train')")
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", help="checkpoint of the previous stage (seg, joint)")
    t.add_argument("--resume", help="checkpoint of an interrupted run of this stage")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--force", action="store_true")
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="predict flows and segmentations")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sequence", required=True, help="sequence file or dataset directory")
    i.add_argument("--split", default="test", help="with a dataset dir: test/train/val/all")
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("--pred", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("viz", help="write overlay pixmaps and volume curves")
    v.add_argument("--pred", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config", help="JSON config document (section 'viz')")
    v.add_argument("--arrow-stride", type=int, default=4)
    v.add_argument("--force", action="store_true")
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (container.ContainerError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
