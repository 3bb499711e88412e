"""Objective terms for the two branches and their weighted composite.

Motion loss per sequence window of length T:

    L_m = (1/T) * sum_k [ mse_k + alpha * H_s(flow_k) ] + beta * H_t(flows)

where mse_k is the pixel mean squared error between the target frame and
the warped source k, H_s is the charbonnier penalty sqrt(eps + sum of
squared spatial forward differences of both flow channels) averaged over
pixels, and H_t penalizes squared differences between consecutive flow
fields the same way. Values averaged over the batch dimension as well.

Segmentation uses categorical cross-entropy on softmax probabilities, with
logs clamped at 1e-12. The warped variant scores a source frame's warped
prediction against the target frame's labels and back-propagates into the
segmentation head, the shared encoder, and the flow (so it regularizes the
motion branch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import Tensor
from .warp import check_flow, warp_probabilities, warp_sequence


@dataclass(frozen=True)
class MotionLossConfig:
    alpha: float = 0.001
    beta: float = 0.0001
    epsilon: float = 0.01
    sequence_length: int = 10

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.sequence_length < 1:
            raise ValueError("sequence length must be >= 1")


@dataclass(frozen=True)
class JointLossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.001
    motion: MotionLossConfig = field(default_factory=MotionLossConfig)
    # ablation switch: stop L_w gradients from reaching the motion branch
    warp_grad_to_flow: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")


def photometric_mse(target: Tensor, warped: list[Tensor]) -> Tensor:
    """(1/T) * sum_k mean squared error between target and warped frame k."""
    if not warped:
        raise ValueError("need at least one warped frame")
    for w in warped:
        if w.shape != target.shape:
            raise ValueError(f"warped shape {w.shape} != target shape {target.shape}")
    inv_t = 1.0 / len(warped)
    total = None
    for w in warped:
        term = ad.reduce_mean(ad.square(ad.sub(target, w)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, inv_t)


def _charbonnier_mean(sq_sum: Tensor, epsilon: float) -> Tensor:
    # sq_sum: per-pixel sum of squared differences, any shape
    return ad.reduce_mean(ad.sqrt(ad.add(sq_sum, float(epsilon))))


def huber_spatial(flow: Tensor, epsilon: float) -> Tensor:
    """Charbonnier penalty on spatial forward differences of the flow.

    Per pixel: sqrt(eps + sum over i in {x, y} of (d_x flow_i)^2 + (d_y flow_i)^2),
    with forward differences and a zero trailing border, then the mean over
    pixels (and batch). A constant flow scores exactly sqrt(eps).
    """
    check_flow(flow)
    dx = ad.forward_diff(flow, axis=3)
    dy = ad.forward_diff(flow, axis=2)
    sq = ad.add(ad.reduce_sum(ad.square(dx), axes=(1,)), ad.reduce_sum(ad.square(dy), axes=(1,)))
    return _charbonnier_mean(sq, epsilon)


def huber_temporal(flows: list[Tensor], epsilon: float) -> Tensor:
    """Charbonnier penalty on differences between consecutive flow fields.

    Mean over pixels and consecutive pairs; with a single flow there are no
    pairs and the term is defined as sqrt(eps).
    """
    if not flows:
        raise ValueError("need at least one flow field")
    for f in flows:
        check_flow(f)
    if len(flows) == 1:
        return Tensor(np.asarray(math.sqrt(epsilon), dtype=flows[0].dtype))
    terms = []
    for a, b in zip(flows, flows[1:]):
        sq = ad.reduce_sum(ad.square(ad.sub(b, a)), axes=(1,))
        terms.append(_charbonnier_mean(sq, epsilon))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def motion_loss(target: Tensor, sources: list[Tensor], flows: list[Tensor],
                cfg: MotionLossConfig) -> Tensor:
    """The full motion objective; warping is performed internally."""
    if len(sources) != len(flows):
        raise ValueError(f"{len(sources)} sources but {len(flows)} flows")
    warped = warp_sequence(sources, flows)
    inv_t = 1.0 / len(flows)
    total = None
    for w, f in zip(warped, flows):
        mse_k = ad.reduce_mean(ad.square(ad.sub(target, w)))
        term = mse_k if cfg.alpha == 0 else ad.add(mse_k, ad.scale(huber_spatial(f, cfg.epsilon), cfg.alpha))
        total = term if total is None else ad.add(total, term)
    total = ad.scale(total, inv_t)
    if cfg.beta != 0:
        total = ad.add(total, ad.scale(huber_temporal(flows, cfg.epsilon), cfg.beta))
    return total


def _check_one_hot(labels: Tensor, axis: int = 1) -> None:
    d = labels.data
    if not (np.all((d == 0.0) | (d == 1.0)) and np.allclose(d.sum(axis=axis), 1.0)):
        raise ValueError("labels must be one-hot along the class axis")


def seg_cross_entropy(logits: Tensor, labels: Tensor, pixel_mask: np.ndarray | None = None) -> Tensor:
    """Categorical cross-entropy between logits and one-hot labels.

    `pixel_mask` (N x H x W, truthy where annotated) restricts the mean to
    annotated pixels; logs are clamped at 1e-12.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    _check_one_hot(labels)
    probs = ad.softmax(logits, axis=1)
    return _cross_entropy_from_probs(probs, labels, pixel_mask)


def _cross_entropy_from_probs(probs: Tensor, labels: Tensor, pixel_mask: np.ndarray | None) -> Tensor:
    ll = ad.mul(labels, ad.log(probs))
    per_pixel = ad.scale(ad.reduce_sum(ll, axes=(1,)), -1.0)
    if pixel_mask is None:
        return ad.reduce_mean(per_pixel)
    mask = np.asarray(pixel_mask, dtype=probs.dtype)
    if mask.shape != per_pixel.shape:
        raise ValueError(f"mask shape {mask.shape} != {per_pixel.shape}")
    n = float(mask.sum())
    if n == 0:
        raise ValueError("pixel mask selects nothing")
    return ad.scale(ad.reduce_sum(ad.mul(per_pixel, Tensor(mask))), 1.0 / n)


def warped_cross_entropy(unlabeled_frame: Tensor, flow: Tensor, target_labels: Tensor,
                         enc: net.EncoderParameters, sh: net.SegHeadParameters,
                         grad_to_flow: bool = True) -> Tensor:
    """Cross-entropy of the warped prediction for an unlabeled frame.

    The frame's predicted probabilities are warped to the target grid by
    `flow` and scored against the target's one-hot labels. Gradients reach
    the segmentation head, the shared encoder, and (unless disabled for
    ablation) the flow itself.
    """
    if target_labels.shape[0] != unlabeled_frame.shape[0]:
        raise ValueError("batch size mismatch between frame and labels")
    _check_one_hot(target_labels)
    probs = ad.softmax(net.seg_forward(unlabeled_frame, enc, sh), axis=1)
    warped = warp_probabilities(probs, flow if grad_to_flow else flow.detach())
    return _cross_entropy_from_probs(warped, target_labels, None)


@dataclass
class LossBreakdown:
    total: Tensor
    motion: float
    seg: float
    warp: float

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.motion, self.seg, self.warp, float(self.total.data))


def composite_loss(batch, params: net.ModelParameters, cfg: JointLossConfig) -> LossBreakdown:
    """L = L_m + lambda1 * L_s + lambda2 * L_w over one training batch.

    The batch carries a labeled target frame and its source window (see
    `data.TrainBatch`). Terms with a zero weight are still evaluated for
    the breakdown, but outside the tape, so a zero-weight term can never
    perturb the gradient or the update bits.
    """
    flows = net.motion_forward(batch.target, batch.sources, params.encoder, params.motion)
    l_m = motion_loss(batch.target, batch.sources, flows, cfg.motion)

    if batch.target_onehot is None:
        raise ValueError("composite loss needs a labeled target frame")

    def eval_seg() -> Tensor:
        logits = net.seg_forward(batch.target, params.encoder, params.seg)
        return seg_cross_entropy(logits, batch.target_onehot)

    def eval_warp() -> Tensor:
        terms = []
        for src, flow in zip(batch.sources, flows):
            terms.append(warped_cross_entropy(src, flow, batch.target_onehot,
                                              params.encoder, params.seg,
                                              grad_to_flow=cfg.warp_grad_to_flow))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 1.0 / len(terms))

    total = l_m
    if cfg.lambda1 != 0:
        l_s = eval_seg()
        total = ad.add(total, ad.scale(l_s, cfg.lambda1))
    else:
        with _off_tape():
            l_s = eval_seg()
    if cfg.lambda2 != 0:
        l_w = eval_warp()
        total = ad.add(total, ad.scale(l_w, cfg.lambda2))
    else:
        with _off_tape():
            l_w = eval_warp()

    return LossBreakdown(total=total, motion=float(l_m.data), seg=float(l_s.data), warp=float(l_w.data))


class _off_tape:
    """Deactivate the current tape inside the block (forward-only evaluation)."""

    def __enter__(self):
        self._saved = ad.Tape._active
        ad.Tape._active = None

    def __exit__(self, *exc):
        ad.Tape._active = self._saved
