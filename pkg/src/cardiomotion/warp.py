"""Differentiable bilinear warping of frames by per-pixel displacement fields.

A flow field is an N x 2 x H x W tensor: channel 0 holds the column
displacement dx, channel 1 the row displacement dy, both in pixels. Flows
use the backward-warp convention: the field lives on the target grid and
points into the source frame, so

    warped(x, y) = source(x + dx(x, y), y + dy(x, y))

Sample coordinates falling outside the image are clamped to the border.
Integer coordinates land exactly on pixels, matching the align-corners
convention of the bilinear upsampler.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def check_flow(flow: Tensor, like: Tensor | None = None) -> None:
    """Validate the N x 2 x H x W layout, optionally against a frame tensor."""
    if flow.data.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be Nx2xHxW, got {flow.shape}")
    if like is not None:
        if like.data.ndim != 4:
            raise ValueError(f"frames must be NxCxHxW, got {like.shape}")
        if flow.shape[0] != like.shape[0] or flow.shape[2:] != like.shape[2:]:
            raise ValueError(f"flow {flow.shape} does not match frames {like.shape}")


def identity_grid(height: int, width: int, dtype=np.float32) -> Tensor:
    """Coordinate grid of shape 2 x H x W with grid[0][y][x] = x, grid[1][y][x] = y."""
    if height < 1 or width < 1:
        raise ValueError("grid dims must be >= 1")
    xs = np.arange(width, dtype=dtype)
    ys = np.arange(height, dtype=dtype)
    gx = np.broadcast_to(xs[None, :], (height, width))
    gy = np.broadcast_to(ys[:, None], (height, width))
    return Tensor(np.stack([gx, gy]).astype(dtype))


def grid_sample_bilinear(source: Tensor, flow: Tensor) -> Tensor:
    """Sample `source` at flow-displaced coordinates with border clamping.

    Differentiable with respect to both the source intensities and the flow;
    the flow gradient is zero where the sample coordinate is clamped to the
    border (the output no longer depends on the displacement there).
    """
    check_flow(flow, source)
    n, c, h, w = source.shape
    src = source.data
    gx = np.arange(w, dtype=src.dtype)[None, None, :]
    gy = np.arange(h, dtype=src.dtype)[None, :, None]
    xs_raw = gx + flow.data[:, 0]
    ys_raw = gy + flow.data[:, 1]
    xs = np.clip(xs_raw, 0.0, w - 1.0)
    ys = np.clip(ys_raw, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(ys), h - 2 if h > 1 else 0).astype(np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0).astype(src.dtype)
    wy = (ys - y0).astype(src.dtype)

    ni = np.arange(n)[:, None, None]
    v00 = src[ni, :, y0, x0].transpose(0, 3, 1, 2)
    v01 = src[ni, :, y0, x1].transpose(0, 3, 1, 2)
    v10 = src[ni, :, y1, x0].transpose(0, 3, 1, 2)
    v11 = src[ni, :, y1, x1].transpose(0, 3, 1, 2)
    wxb = wx[:, None]
    wyb = wy[:, None]
    top = v00 + wxb * (v01 - v00)
    bot = v10 + wxb * (v11 - v10)
    out = Tensor(top + wyb * (bot - top))

    if ad._recording(source, flow):
        inside_x = ((xs_raw >= 0.0) & (xs_raw <= w - 1.0)).astype(src.dtype)
        inside_y = ((ys_raw >= 0.0) & (ys_raw <= h - 1.0)).astype(src.dtype)

        def bwd(g):
            if flow.requires_grad:
                # d out / d xs summed over channels, masked where clamped
                dx = ((v01 - v00) * (1.0 - wyb) + (v11 - v10) * wyb) * g
                dy = (bot - top) * g
                gflow = np.stack([dx.sum(axis=1) * inside_x, dy.sum(axis=1) * inside_y], axis=1)
                ad.accumulate_grad(flow, gflow)
            if source.requires_grad:
                gsrc = np.zeros_like(src)
                flat = gsrc.reshape(n, c, h * w)
                i00 = (y0 * w + x0).reshape(n, -1)
                i01 = (y0 * w + x1).reshape(n, -1)
                i10 = (y1 * w + x0).reshape(n, -1)
                i11 = (y1 * w + x1).reshape(n, -1)
                w00 = ((1.0 - wx) * (1.0 - wy)).reshape(n, -1)
                w01 = (wx * (1.0 - wy)).reshape(n, -1)
                w10 = ((1.0 - wx) * wy).reshape(n, -1)
                w11 = (wx * wy).reshape(n, -1)
                gflat = g.reshape(n, c, -1)
                for b in range(n):
                    idx = np.concatenate([i00[b], i01[b], i10[b], i11[b]])
                    for ch in range(c):
                        vals = np.concatenate([
                            gflat[b, ch] * w00[b],
                            gflat[b, ch] * w01[b],
                            gflat[b, ch] * w10[b],
                            gflat[b, ch] * w11[b],
                        ])
                        flat[b, ch] = np.bincount(idx, weights=vals, minlength=h * w).astype(src.dtype)
                ad.accumulate_grad(source, gsrc)

        ad.register(out, (source, flow), bwd)
    return out


def warp_sequence(sources: list[Tensor], flows: list[Tensor]) -> list[Tensor]:
    """Warp each source frame by its flow field; order preserved."""
    if len(sources) != len(flows):
        raise ValueError(f"got {len(sources)} sources but {len(flows)} flows")
    return [grid_sample_bilinear(s, f) for s, f in zip(sources, flows)]


def warp_probabilities(prob_maps: Tensor, flow: Tensor, tol: float = 1e-4) -> Tensor:
    """Warp per-class probability maps and renormalize along the class axis.

    Inputs must already be probabilities (channels summing to one within
    `tol`); bilinear resampling mixes neighboring pixels so the channel sums
    drift slightly, and the renormalization restores them exactly while
    staying differentiable through both the probabilities and the flow.
    """
    if prob_maps.data.ndim != 4:
        raise ValueError("prob_maps must be NxKxHxW")
    sums = prob_maps.data.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ValueError("prob_maps channels do not sum to 1")
    warped = grid_sample_bilinear(prob_maps, flow)
    return ad.normalize_sum(warped, axis=1)
