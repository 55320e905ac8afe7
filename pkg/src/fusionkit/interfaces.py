"""Trainable fusion interfaces: bundles in, one T x D feature sequence out.

Four kinds are provided. "ws" softmax-weights the layer axis per model and
projects the concatenated per-model outputs. "gumd" selects, per feature
dimension, one layer via Gumbel-softmax over learned logits (straight-through
in hard mode), then concatenates and projects. "hconv" collapses the layer
axis with a stack of strided 1-D convolutions over addition-merged stacks;
"chconv" is the same stack over concatenation-merged stacks, with the first
pointwise mix acting as the dense N*D -> D projection.

Interfaces never touch the time axis: every frame is fused independently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tk
from .errors import BadMagicError, ShapeError, TruncatedError
from .matching import MergedStack
from .tensor import Tensor

CHECKPOINT_MAGIC = b"IFC1"
CHECKPOINT_VERSION = 1

INTERFACE_KINDS = ("ws", "gumd", "hconv", "chconv")


@dataclass(frozen=True)
class InterfaceConfig:
    kind: Literal["ws", "gumd", "hconv", "chconv"]
    output_dim: int
    hconv_kernel: int = 3
    hconv_stride: int = 2
    hconv_channels: Optional[int] = None  # mid-stage width; defaults to output_dim
    gumbel_tau: float = 1.0
    gumbel_hard_eval: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in INTERFACE_KINDS:
            raise ValueError(f"unknown interface kind {self.kind!r}")
        if self.hconv_kernel < 2:
            raise ValueError(f"hconv_kernel must be >= 2, got {self.hconv_kernel}")
        if self.hconv_stride < 1:
            raise ValueError(f"hconv_stride must be >= 1, got {self.hconv_stride}")
        if self.gumbel_tau <= 0:
            raise ValueError(f"gumbel_tau must be positive, got {self.gumbel_tau}")

    @property
    def mid_channels(self) -> int:
        return self.hconv_channels if self.hconv_channels is not None else self.output_dim


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def ws_forward(h: Tensor, logits: Tensor) -> Tensor:
    """Softmax-weighted sum over the layer axis.

    h is (L, T, D) or batched (..., L, T, D); logits has length L.
    out[t, d] = sum_l softmax(logits)[l] * h[l, t, d].
    """
    n_layers = h.shape[-3]
    if logits.shape != (n_layers,):
        raise ShapeError(f"ws_forward: logits shape {logits.shape} != ({n_layers},)")
    weights = tk.softmax(logits, axis=0)
    return tk.sum_(tk.mul(h, tk.reshape(weights, (n_layers, 1, 1))), axis=-3)


def gumd_forward(h: Tensor, logits: Tensor, tau: float = 1.0,
                 hard: bool = True, rng_seed: int = 0,
                 noise: bool = True) -> Tensor:
    """Per-dimension layer selection via Gumbel-softmax.

    For each feature dimension d, weights over layers are
    softmax((logits[:, d] + g) / tau) with fresh Gumbel noise g when
    `noise` is set. hard=True uses the straight-through estimator: the
    forward value is the per-dimension one-hot argmax, the backward
    gradient is that of the soft weights.
    """
    if tau <= 0:
        raise ValueError(f"gumd_forward: tau must be positive, got {tau}")
    n_layers, dim = logits.shape
    if h.shape[-3] != n_layers or h.shape[-1] != dim:
        raise ShapeError(f"gumd_forward: h {h.shape} incompatible with logits {logits.shape}")

    scores = logits
    if noise:
        scores = tk.add(scores, tk.sample_gumbel((n_layers, dim), rng_seed))
    soft = tk.softmax(tk.scale(scores, 1.0 / tau), axis=0)
    if hard:
        one_hot = np.zeros((n_layers, dim))
        one_hot[soft.data.argmax(axis=0), np.arange(dim)] = 1.0
        weights = tk.add(soft, Tensor(one_hot - soft.data))  # straight-through
    else:
        weights = soft
    return tk.sum_(tk.mul(h, tk.reshape(weights, (n_layers, 1, dim))), axis=-3)


def concat_project(features: Sequence[Tensor], w: Tensor, bias: Tensor) -> Tensor:
    """Concatenate T x D_i features on the last axis and apply an affine map."""
    features = list(features)
    frames = {f.shape[-2] for f in features}
    if len(frames) > 1:
        raise ShapeError(f"concat_project: frame counts differ {sorted(frames)}")
    stacked = features[0] if len(features) == 1 else tk.concat(features, axis=-1)
    if stacked.shape[-1] != w.shape[0]:
        raise ShapeError(f"concat_project: {stacked.shape[-1]} channels vs W {w.shape}")
    return tk.add(tk.matmul(stacked, w), bias)


def hconv_stage_lengths(n_layers: int, kernel: int, stride: int) -> List[int]:
    """Layer-axis length after each conv stage until it reaches 1."""
    padding = kernel // 2
    lengths = []
    length = n_layers
    while True:
        length = (length + 2 * padding - kernel) // stride + 1
        lengths.append(length)
        if length <= 1:
            break
        if stride == 1 and 2 * padding >= kernel - 1:
            raise ValueError("hconv stage schedule does not shrink; increase stride")
    return lengths


# ---------------------------------------------------------------------------
# interface container
# ---------------------------------------------------------------------------


@dataclass
class Interface:
    """A built interface: config, structural dims, and named parameters."""

    config: InterfaceConfig
    n_models: int
    n_layers: int
    input_dims: Tuple[int, ...]
    params: Dict[str, Tensor] = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    @property
    def merged_channels(self) -> int:
        return (sum(self.input_dims) if self.config.kind == "chconv"
                else self.input_dims[0])

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    # -- forward -----------------------------------------------------------

    def forward(self, models: Sequence[Tensor], train: bool = False,
                step_seed: int = 0, gumbel_hard: Optional[bool] = None) -> Tensor:
        """Fuse per-model stacks (each (..., L, T, D_i)) into (..., T, D).

        In training mode GumD resamples Gumbel noise from `step_seed`; in
        eval mode selection is the noiseless argmax (hard by default, soft
        when the config disables hard eval).
        """
        models = [m if isinstance(m, Tensor) else Tensor(m) for m in models]
        if len(models) != self.n_models:
            raise ShapeError(f"interface built for {self.n_models} models, got {len(models)}")
        for i, (m, d) in enumerate(zip(models, self.input_dims)):
            if m.shape[-3] != self.n_layers or m.shape[-1] != d:
                raise ShapeError(
                    f"model {i}: stack {m.shape} incompatible with "
                    f"(L={self.n_layers}, D={d})")

        kind = self.config.kind
        if kind == "ws":
            feats = [ws_forward(m, self.params[f"ws.logits.{i}"])
                     for i, m in enumerate(models)]
            return self._project(feats)
        if kind == "gumd":
            hard = gumbel_hard
            if hard is None:
                hard = True if train else self.config.gumbel_hard_eval
            feats = []
            for i, m in enumerate(models):
                seed = _derive_seed(self.config.rng_seed, step_seed, i)
                feats.append(gumd_forward(
                    m, self.params[f"gumd.logits.{i}"], tau=self.config.gumbel_tau,
                    hard=hard, rng_seed=seed, noise=train))
            return self._project(feats)
        # hconv / chconv
        if kind == "hconv":
            merged = models[0]
            for m in models[1:]:
                merged = tk.add(merged, m)
        else:
            merged = models[0] if len(models) == 1 else tk.concat(models, axis=-1)
        return self._conv_stack(merged)

    def forward_merged(self, merged: MergedStack) -> Tensor:
        """Run the conv stack on an explicitly merged L x T x C stack."""
        if self.config.kind not in ("hconv", "chconv"):
            raise ValueError(f"forward_merged needs a conv interface, got {self.config.kind}")
        expected = "add" if self.config.kind == "hconv" else "concat"
        if merged.merge_kind != expected:
            raise ShapeError(f"{self.config.kind} expects {expected}-merged input, "
                             f"got {merged.merge_kind}")
        if merged.data.shape[0] < 1:
            raise ShapeError("merged stack has no layers")
        if merged.data.shape[2] != self.merged_channels:
            raise ShapeError(f"merged stack has {merged.data.shape[2]} channels, "
                             f"interface expects {self.merged_channels}")
        return self._conv_stack(merged.data)

    def _project(self, feats: List[Tensor]) -> Tensor:
        if self.n_models == 1:
            return feats[0]
        return concat_project(feats, self.params["proj.w"], self.params["proj.b"])

    def _conv_stack(self, merged: Tensor) -> Tensor:
        """(..., L, T, C) -> (..., T, D): conv over the layer axis per frame."""
        cfg = self.config
        lead = merged.shape[:-3]
        n_layers, frames, channels = merged.shape[-3:]
        sig = tk.transpose(merged, tuple(range(len(lead))) +
                           (len(lead) + 1, len(lead) + 2, len(lead)))
        sig = tk.reshape(sig, (-1, channels, n_layers))  # (B*T, C, L)

        padding = cfg.hconv_kernel // 2
        n_stages = len(hconv_stage_lengths(n_layers, cfg.hconv_kernel, cfg.hconv_stride))
        for j in range(n_stages):
            w = self.params[f"hconv.stage{j}.conv.w"]
            b = self.params[f"hconv.stage{j}.conv.b"]
            sig = tk.conv1d(sig, w, stride=cfg.hconv_stride, padding=padding)
            sig = tk.add(sig, tk.reshape(b, (b.shape[0], 1)))
            sig = tk.gelu(sig)
            mix_w = self.params[f"hconv.stage{j}.mix.w"]
            mix_b = self.params[f"hconv.stage{j}.mix.b"]
            sig = tk.transpose(sig, (0, 2, 1))
            sig = tk.add(tk.matmul(sig, mix_w), mix_b)
            sig = tk.transpose(sig, (0, 2, 1))
        return tk.reshape(sig, lead + (frames, cfg.output_dim))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# construction & parameter counting
# ---------------------------------------------------------------------------


def build_interface(config: InterfaceConfig, n_models: int, n_layers: int,
                    input_dims: Sequence[int]) -> Interface:
    """Deterministically initialize an interface's parameters.

    WS and GumD logits start at zero; conv kernels and projections draw
    from a fan-in-scaled uniform distribution seeded by config.rng_seed.
    """
    input_dims = tuple(int(d) for d in input_dims)
    if n_models < 1:
        raise ValueError(f"{config.kind} interface needs at least one model, got {n_models}")
    if len(input_dims) != n_models:
        raise ValueError(f"got {len(input_dims)} dims for {n_models} models")
    if n_layers < 1:
        raise ValueError(f"need at least one layer, got {n_layers}")

    rng = np.random.default_rng(np.random.SeedSequence((config.rng_seed, 0x1F0)))
    out_dim = config.output_dim
    params: Dict[str, Tensor] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    if config.kind in ("ws", "gumd"):
        for i, d in enumerate(input_dims):
            if config.kind == "ws":
                params[f"ws.logits.{i}"] = zeros((n_layers,))
            else:
                params[f"gumd.logits.{i}"] = zeros((n_layers, d))
        if n_models > 1:
            total = sum(input_dims)
            params["proj.w"] = uniform((total, out_dim), total)
            params["proj.b"] = zeros((out_dim,))
        elif input_dims[0] != out_dim:
            raise ValueError(
                f"single-model {config.kind} has no projection; "
                f"output_dim {out_dim} must equal model dim {input_dims[0]}")
    elif config.kind in ("hconv", "chconv"):
        if config.kind == "hconv":
            if len(set(input_dims)) > 1:
                raise ValueError(f"hconv addition merge needs equal dims, got {input_dims}")
            channels = input_dims[0]
        else:
            channels = sum(input_dims)
        k = config.hconv_kernel
        mid = config.mid_channels
        n_stages = len(hconv_stage_lengths(n_layers, k, config.hconv_stride))
        c_in = channels
        for j in range(n_stages):
            c_out = channels if j == 0 else mid
            params[f"hconv.stage{j}.conv.w"] = uniform((c_out, c_in, k), c_in * k)
            params[f"hconv.stage{j}.conv.b"] = zeros((c_out,))
            params[f"hconv.stage{j}.mix.w"] = uniform((c_out, out_dim), c_out)
            params[f"hconv.stage{j}.mix.b"] = zeros((out_dim,))
            c_in = out_dim

    return Interface(config=config, n_models=n_models, n_layers=n_layers,
                     input_dims=input_dims, params=params)


def param_count(iface: Interface) -> int:
    return sum(p.size for p in iface.params.values())


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _config_lines(iface: Interface) -> str:
    cfg = iface.config
    pairs = {
        "kind": cfg.kind,
        "output_dim": cfg.output_dim,
        "hconv_kernel": cfg.hconv_kernel,
        "hconv_stride": cfg.hconv_stride,
        "hconv_channels": cfg.mid_channels,
        "gumbel_tau": repr(cfg.gumbel_tau),
        "gumbel_hard_eval": str(cfg.gumbel_hard_eval).lower(),
        "rng_seed": cfg.rng_seed,
        "n_models": iface.n_models,
        "n_layers": iface.n_layers,
        "input_dims": ",".join(str(d) for d in iface.input_dims),
    }
    return "".join(f"{k}={v}\n" for k, v in sorted(pairs.items()))


def _parse_config_lines(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(iface: Interface, path) -> None:
    """Write the interface config and float32 parameter payloads."""
    config_blob = _config_lines(iface).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(iface.params)))
        for name, tensor in iface.params.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> Interface:
    """Rebuild an interface from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def need(n, what):
        if len(raw) < n:
            raise TruncatedError(expected=n, actual=len(raw), what=what)

    need(4, "header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected magic {CHECKPOINT_MAGIC!r}, got {raw[:4]!r}")
    need(12, "header")
    _, version, cfg_len = struct.unpack("<4sII", raw[:12])
    if version != CHECKPOINT_VERSION:
        raise BadMagicError(f"unsupported checkpoint version {version}")
    offset = 12
    need(offset + cfg_len, "config")
    fields = _parse_config_lines(raw[offset:offset + cfg_len].decode("utf-8"))
    offset += cfg_len

    config = InterfaceConfig(
        kind=fields["kind"], output_dim=int(fields["output_dim"]),
        hconv_kernel=int(fields["hconv_kernel"]),
        hconv_stride=int(fields["hconv_stride"]),
        hconv_channels=int(fields["hconv_channels"]),
        gumbel_tau=float(fields["gumbel_tau"]),
        gumbel_hard_eval=fields["gumbel_hard_eval"] == "true",
        rng_seed=int(fields["rng_seed"]))
    input_dims = tuple(int(d) for d in fields["input_dims"].split(","))
    iface = build_interface(config, int(fields["n_models"]),
                            int(fields["n_layers"]), input_dims)

    need(offset + 4, "parameter count")
    (n_params,) = struct.unpack("<I", raw[offset:offset + 4])
    offset += 4
    for _ in range(n_params):
        need(offset + 4, "parameter name length")
        (name_len,) = struct.unpack("<I", raw[offset:offset + 4])
        offset += 4
        need(offset + name_len, "parameter name")
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        need(offset + 4, "parameter rank")
        (ndim,) = struct.unpack("<I", raw[offset:offset + 4])
        offset += 4
        need(offset + 4 * ndim, "parameter shape")
        shape = struct.unpack(f"<{ndim}I", raw[offset:offset + 4 * ndim])
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        need(offset + 4 * count, f"parameter {name} payload")
        payload = np.frombuffer(raw[offset:offset + 4 * count], dtype="<f4")
        offset += 4 * count
        if name not in iface.params:
            raise BadMagicError(f"checkpoint parameter {name!r} not in rebuilt interface")
        if tuple(shape) != iface.params[name].shape:
            raise ShapeError(f"checkpoint parameter {name}: shape {shape} != "
                             f"{iface.params[name].shape}")
        iface.params[name] = Tensor(payload.astype(np.float64).reshape(shape),
                                    requires_grad=True)
    return iface
