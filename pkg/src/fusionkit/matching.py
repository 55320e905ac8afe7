"""Alignment of heterogeneous hidden-state bundles and merge operators.

Bundles from different encoders may disagree in layer count, frame count,
and feature dimension. Matching equalizes the axes by endpoint-aligned
linear upsampling (never downsampling); merging then combines the aligned
stacks either by elementwise addition or by channel concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional, Sequence

import numpy as np

from .bundles import HiddenStateBundle
from .errors import PolicyError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class MatchPolicy:
    """How to equalize bundle axes before merging.

    target_rule "max_of_inputs" upsamples every bundle to the largest layer
    and frame counts seen; explicit targets must dominate every input.
    dim_rule decides whether unequal feature dims are an error or get
    interpolated up to the max.
    """

    target_rule: Literal["max_of_inputs", "explicit"] = "max_of_inputs"
    explicit_layers: Optional[int] = None
    explicit_frames: Optional[int] = None
    dim_rule: Literal["require_equal", "interpolate_to_max"] = "require_equal"
    interpolation: Literal["linear_endpoint_aligned"] = "linear_endpoint_aligned"

    def __post_init__(self):
        if self.target_rule == "explicit":
            if self.explicit_layers is None or self.explicit_frames is None:
                raise ValueError("explicit target_rule needs explicit_layers and explicit_frames")


@dataclass
class MergedStack:
    """Aligned bundles combined into one L x T x C stack."""

    data: Tensor
    n_models: int
    merge_kind: Literal["add", "concat"]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"merged stack must be 3-D, got {self.data.shape}")


def resample_linear(x: Tensor, axis: int, new_len: int) -> Tensor:
    """Upsample `x` along `axis` with endpoint-aligned linear interpolation.

    Output index j reads source coordinate j*(len-1)/(new_len-1); first and
    last elements are preserved exactly. Equal lengths return the tensor
    unchanged; length-1 inputs broadcast. Downsampling is a policy error.
    """
    data = x.data
    n = data.shape[axis]
    if new_len < n:
        raise PolicyError(f"resample_linear: downsampling {n} -> {new_len} is not allowed")
    if new_len == n:
        return x
    if n == 1:
        reps = [1] * data.ndim
        reps[axis] = new_len
        return Tensor(np.tile(data, reps))

    pos = np.arange(new_len) * (n - 1) / (new_len - 1)
    lo = np.minimum(pos.astype(np.intp), n - 2)
    frac = pos - lo
    moved = np.moveaxis(data, axis, 0)
    shape_tail = (np.newaxis,) * (moved.ndim - 1)
    w = frac[(slice(None),) + shape_tail]
    out = moved[lo] * (1.0 - w) + moved[lo + 1] * w
    return Tensor(np.moveaxis(out, 0, axis))


def _targets(bundles: Sequence[HiddenStateBundle], policy: MatchPolicy):
    if policy.target_rule == "explicit":
        target_l, target_t = policy.explicit_layers, policy.explicit_frames
        for b in bundles:
            if b.layers > target_l or b.frames > target_t:
                raise PolicyError(
                    f"explicit targets ({target_l},{target_t}) below bundle "
                    f"{b.model_id} ({b.layers},{b.frames}); upsampling only")
        return target_l, target_t
    return max(b.layers for b in bundles), max(b.frames for b in bundles)


def match_bundles(bundles: Sequence[HiddenStateBundle],
                  policy: MatchPolicy = MatchPolicy()) -> List[HiddenStateBundle]:
    """Equalize layer/frame (and optionally dim) axes across bundles.

    Interpolation order is fixed: layers, then frames, then dim. Inputs are
    never modified; already-matched bundles are returned as-is.
    """
    bundles = list(bundles)
    if not bundles:
        raise ValueError("match_bundles: empty bundle list")

    dims = [b.dim for b in bundles]
    if policy.dim_rule == "require_equal" and len(set(dims)) > 1:
        raise ShapeError(f"match_bundles: unequal dims {dims} under require_equal")
    target_d = max(dims) if policy.dim_rule == "interpolate_to_max" else dims[0]
    target_l, target_t = _targets(bundles, policy)

    out = []
    for b in bundles:
        data = b.data
        if b.layers != target_l:
            data = resample_linear(data, axis=0, new_len=target_l)
        if b.frames != target_t:
            data = resample_linear(data, axis=1, new_len=target_t)
        if policy.dim_rule == "interpolate_to_max" and b.dim != target_d:
            data = resample_linear(data, axis=2, new_len=target_d)
        if data is b.data:
            out.append(b)
        else:
            out.append(HiddenStateBundle(
                model_id=b.model_id, layers=target_l, frames=target_t,
                dim=data.shape[2], framerate_hz=b.framerate_hz,
                data=Tensor(data.data)))
    return out


def merge_add(aligned: Sequence[HiddenStateBundle]) -> MergedStack:
    """Elementwise sum of matched bundles; channel count stays D."""
    aligned = list(aligned)
    if not aligned:
        raise ValueError("merge_add: empty bundle list")
    shapes = {b.data.shape for b in aligned}
    if len(shapes) > 1:
        raise ShapeError(f"merge_add: shapes differ {sorted(shapes)}; match bundles first")
    total = aligned[0].data.data.copy()
    for b in aligned[1:]:
        total += b.data.data
    return MergedStack(data=Tensor(total), n_models=len(aligned), merge_kind="add")


def merge_concat(aligned: Sequence[HiddenStateBundle]) -> MergedStack:
    """Concatenate matched bundles along the feature axis, in input order."""
    aligned = list(aligned)
    if not aligned:
        raise ValueError("merge_concat: empty bundle list")
    lt = {(b.layers, b.frames) for b in aligned}
    if len(lt) > 1:
        raise ShapeError(f"merge_concat: layer/frame axes differ {sorted(lt)}; match bundles first")
    stacked = np.concatenate([b.data.data for b in aligned], axis=2)
    return MergedStack(data=Tensor(stacked), n_models=len(aligned), merge_kind="concat")
