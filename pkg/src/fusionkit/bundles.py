"""Hidden-state bundles, their on-disk format, and synthetic frozen encoders.

A bundle is one encoder's stacked per-layer hidden states (L x T x D) plus
framerate and identity metadata. Synthetic encoders stand in for large
pretrained models: they are deterministic functions of (seed, input) whose
weights never train. Task generators build datasets with controlled
information structure so that fusion experiments have known ground truth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from .errors import (BadMagicError, DimensionOverflowError, ShapeError,
                     TruncatedError)
from .tensor import Tensor

BUNDLE_MAGIC = b"HSB1"
BUNDLE_VERSION = 1
_MAX_ELEMENTS = 1 << 28  # refuse absurd headers before allocating

DEFAULT_INPUT_RATE = 1000  # raw input rows per second


# ---------------------------------------------------------------------------
# bundle container and file format
# ---------------------------------------------------------------------------


@dataclass
class HiddenStateBundle:
    """Stacked hidden states of one encoder for one input."""

    model_id: str
    layers: int
    frames: int
    dim: int
    framerate_hz: int
    data: Tensor

    def __post_init__(self):
        if self.framerate_hz <= 0:
            raise ValueError(f"framerate_hz must be positive, got {self.framerate_hz}")
        expect = (self.layers, self.frames, self.dim)
        if self.data.shape != expect:
            raise ShapeError(f"bundle data shape {self.data.shape} != declared {expect}")
        if self.data.requires_grad:
            raise ValueError("bundle data must be frozen (requires_grad=False)")


def write_bundle(bundle: HiddenStateBundle, path) -> None:
    """Serialize a bundle; payload is float32, little-endian, row-major."""
    model_id = bundle.model_id.encode("utf-8")
    header = struct.pack(
        "<4sIIIIII", BUNDLE_MAGIC, BUNDLE_VERSION,
        bundle.layers, bundle.frames, bundle.dim,
        bundle.framerate_hz, len(model_id))
    payload = bundle.data.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model_id)
        fh.write(payload)


def read_bundle(path) -> HiddenStateBundle:
    """Parse a bundle file, raising distinct errors for each corruption kind."""
    with open(path, "rb") as fh:
        raw = fh.read()

    head_size = struct.calcsize("<4sIIIIII")
    if len(raw) < 4:
        raise TruncatedError(expected=head_size, actual=len(raw), what="header")
    if raw[:4] != BUNDLE_MAGIC:
        raise BadMagicError(f"expected magic {BUNDLE_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < head_size:
        raise TruncatedError(expected=head_size, actual=len(raw), what="header")

    _, version, layers, frames, dim, framerate, id_len = struct.unpack(
        "<4sIIIIII", raw[:head_size])
    if version != BUNDLE_VERSION:
        raise BadMagicError(f"unsupported bundle version {version}")
    n_elements = layers * frames * dim
    if n_elements > _MAX_ELEMENTS or min(layers, frames, dim) == 0:
        raise DimensionOverflowError(
            f"declared dims {layers}x{frames}x{dim} out of range")

    offset = head_size
    if len(raw) < offset + id_len:
        raise TruncatedError(expected=offset + id_len, actual=len(raw), what="model_id")
    model_id = raw[offset:offset + id_len].decode("utf-8")
    offset += id_len

    expected_total = offset + 4 * n_elements
    if len(raw) < expected_total:
        raise TruncatedError(expected=expected_total, actual=len(raw), what="payload")
    payload = np.frombuffer(raw[offset:expected_total], dtype="<f4")
    data = payload.astype(np.float64).reshape(layers, frames, dim)
    return HiddenStateBundle(
        model_id=model_id, layers=layers, frames=frames, dim=dim,
        framerate_hz=framerate, data=Tensor(data))


# ---------------------------------------------------------------------------
# synthetic frozen encoders
# ---------------------------------------------------------------------------


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random matrix with orthonormal rows or columns (whichever fit)."""
    if rows >= cols:
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return q.T


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def xor_group_patterns(pattern_seed: int, input_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-group signal directions shared by the XOR task and its encoders."""
    if input_dim % 2:
        raise ValueError(f"input_dim must be even, got {input_dim}")
    rng = np.random.default_rng(np.random.SeedSequence((pattern_seed, 0xA11)))
    half = input_dim // 2
    return _unit(rng, half), _unit(rng, half)


def ctc_symbol_patterns(pattern_seed: int, input_dim: int,
                        vocab_size: int) -> np.ndarray:
    """Orthonormal feature directions, one per vocabulary symbol."""
    if vocab_size > input_dim:
        raise ValueError(f"vocab {vocab_size} exceeds input_dim {input_dim}")
    rng = np.random.default_rng(np.random.SeedSequence((pattern_seed, 0xC7C)))
    return _semi_orthogonal(rng, vocab_size, input_dim)


def layered_symbol_layers(vocab_size: int, n_layers: int) -> np.ndarray:
    """Assign each symbol's pattern energy to one interior hidden layer."""
    lo, hi = 2, max(3, n_layers - 2)
    slots = np.linspace(lo, hi, num=vocab_size)
    return np.round(slots).astype(int)


class SynthEncoder:
    """Frozen synthetic upstream encoder.

    Layer 0 is the temporally pooled input projection; layer l applies l
    rounds of fixed orthogonal mixing + tanh on top of it, so deeper layers
    are progressively more abstract. Specializations:

    - "generic":  plain mixing stack.
    - "group_a" / "group_b": before encoding, one half of the feature
      columns is passed through a fixed projection that annihilates that
      group's task signal direction and rotates the remainder. The paired
      group passes through untouched.
    - "layered":  every layer sees only its assigned vocabulary symbols'
      signal directions (others are projected out), placing label evidence
      at distinct depths of the stack.

    All weights derive from (seed, architecture) and never change.
    """

    def __init__(self, seed: int, layers: int = 12, dim: int = 16,
                 framerate_hz: int = 50, input_dim: int = 16,
                 input_rate: int = DEFAULT_INPUT_RATE,
                 specialization: str = "generic",
                 pattern_seed: Optional[int] = None,
                 vocab_size: Optional[int] = None):
        if specialization not in ("generic", "group_a", "group_b", "layered"):
            raise ValueError(f"unknown specialization {specialization!r}")
        if specialization != "generic" and pattern_seed is None:
            raise ValueError(f"specialization {specialization!r} needs pattern_seed")
        self.seed = seed
        self.layers = layers
        self.dim = dim
        self.framerate_hz = framerate_hz
        self.input_dim = input_dim
        self.input_rate = input_rate
        self.specialization = specialization
        self.pattern_seed = pattern_seed
        self.vocab_size = vocab_size
        self.model_id = f"synth-{specialization}-s{seed}"

        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E11)))
        gain = 1.4
        self._gain = gain
        self._w_in = _semi_orthogonal(rng, input_dim, dim)
        self._mix = [_semi_orthogonal(rng, dim, dim) for _ in range(layers)]
        self._bias = [0.2 * rng.standard_normal(dim) for _ in range(layers)]

        self._scramble: Optional[np.ndarray] = None
        self._scramble_cols: Optional[slice] = None
        if specialization in ("group_a", "group_b"):
            v1, v2 = xor_group_patterns(pattern_seed, input_dim)
            half = input_dim // 2
            if specialization == "group_a":
                victim, cols = v2, slice(half, input_dim)
            else:
                victim, cols = v1, slice(0, half)
            rot = _semi_orthogonal(rng, half, half)
            self._scramble = rot @ (np.eye(half) - np.outer(victim, victim))
            self._scramble_cols = cols

        self._layer_proj: Optional[List[np.ndarray]] = None
        if specialization == "layered":
            if vocab_size is None:
                raise ValueError("layered specialization needs vocab_size")
            patterns = ctc_symbol_patterns(pattern_seed, input_dim, vocab_size)
            where = layered_symbol_layers(vocab_size, layers + 1)
            kill_all = np.eye(input_dim) - patterns.T @ patterns
            projs = []
            for l in range(layers + 1):
                keep = patterns[where == l]
                drop = patterns[where != l]
                annihilate = np.eye(input_dim) - drop.T @ drop if len(drop) else np.eye(input_dim)
                base = annihilate if len(keep) else kill_all
                projs.append(base @ _semi_orthogonal(rng, input_dim, dim))
            self._layer_proj = projs

    # -- frozen-parameter bookkeeping -------------------------------------

    def weight_bytes(self) -> bytes:
        """Concatenated raw bytes of every weight; used for frozen checks."""
        parts = [self._w_in.tobytes()]
        parts += [m.tobytes() for m in self._mix]
        parts += [b.tobytes() for b in self._bias]
        if self._scramble is not None:
            parts.append(self._scramble.tobytes())
        if self._layer_proj is not None:
            parts += [p.tobytes() for p in self._layer_proj]
        return b"".join(parts)

    # -- encoding -----------------------------------------------------------

    def output_frames(self, input_len: int) -> int:
        return (input_len * self.framerate_hz) // self.input_rate

    def _pool(self, xs: np.ndarray) -> np.ndarray:
        """Mean-pool raw rows into output frames; xs is (n, T', F)."""
        n, t_in, _ = xs.shape
        t_out = self.output_frames(t_in)
        if t_out < 1:
            raise ValueError(
                f"input length {t_in} too short for framerate {self.framerate_hz}"
                f" at input rate {self.input_rate}")
        starts = (np.arange(t_out) * t_in) // t_out
        sums = np.add.reduceat(xs, starts, axis=1)
        counts = np.diff(np.append(starts, t_in))
        return sums / counts[None, :, None]

    def encode_batch(self, xs: np.ndarray) -> np.ndarray:
        """Encode (n, T', F) inputs to (n, L+1, T, D) stacked hidden states."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[2] != self.input_dim:
            raise ShapeError(f"expected (n, T', {self.input_dim}) input, got {xs.shape}")
        if self._scramble is not None:
            xs = xs.copy()
            xs[:, :, self._scramble_cols] = xs[:, :, self._scramble_cols] @ self._scramble.T
        pooled = self._pool(xs)

        states = []
        if self._layer_proj is not None:
            states.append(pooled @ self._layer_proj[0])
            for l in range(1, self.layers + 1):
                states.append(np.tanh(self._gain * pooled @ self._layer_proj[l]
                                      + self._bias[l - 1]))
        else:
            h = pooled @ self._w_in
            states.append(h)
            for l in range(self.layers):
                h = np.tanh(self._gain * h @ self._mix[l] + self._bias[l])
                states.append(h)
        return np.stack(states, axis=1)

    def encode(self, x) -> HiddenStateBundle:
        """Encode one raw input (T' x F) into a frozen bundle."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected 2-D raw input, got shape {x.shape}")
        stack = self.encode_batch(x[None])[0]
        return HiddenStateBundle(
            model_id=self.model_id, layers=self.layers + 1,
            frames=stack.shape[1], dim=self.dim,
            framerate_hz=self.framerate_hz, data=Tensor(stack))


def encode(encoder: SynthEncoder, x) -> HiddenStateBundle:
    """Functional alias for SynthEncoder.encode."""
    return encoder.encode(x)


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

_SPLIT_BOUNDS = {"train": (0.0, 0.8), "dev": (0.8, 0.9), "test": (0.9, 1.0)}
_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def split_of_index(index: int, seed: int) -> str:
    """Deterministic 80/10/10 split assignment by index hash."""
    frac = _splitmix64(index ^ _splitmix64(seed)) / 2.0 ** 64
    for name, (lo, hi) in _SPLIT_BOUNDS.items():
        if lo <= frac < hi:
            return name
    return "test"


@dataclass
class SynthDataset:
    """Seeded synthetic dataset with hash-disjoint train/dev/test splits."""

    kind: Literal["ctc_strings", "classify_xor", "verify_pairs"]
    inputs: np.ndarray            # (n, T', F)
    labels: list
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.labels)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in _SPLIT_BOUNDS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i in range(self.n_items)
                         if split_of_index(i, self.seed) == split], dtype=np.intp)


# -- XOR / complementary-information task -------------------------------------


def make_complementary_task(
        seed: int, n_items: int, input_len: int = 80, input_dim: int = 16,
        *, layers: int = 12, dim: int = 16, framerate_hz: int = 50,
        input_rate: int = DEFAULT_INPUT_RATE, amp: float = 1.0,
        noise: float = 1.0, bit_bias: float = 0.35,
) -> Tuple[SynthDataset, SynthEncoder, SynthEncoder]:
    """Binary task where the label needs both halves of the input.

    Each half ("group") of the feature columns carries one bit, rendered as
    a signed signal direction held constant over time; the label is the XOR
    of the two bits. Item noise is projected orthogonal to the signal
    directions, so the raw input determines the label exactly. Encoder A
    annihilates group 2's signal direction (and B group 1's), so an encoder
    alone sees exactly one bit. Both bits are biased (P(bit=1) = bit_bias),
    which caps single-encoder accuracy at max(bit_bias, 1-bit_bias) while
    making the joint evidence usable even by purely affine readouts: with
    the default bias the best affine rule on both bits reaches 87.75%
    whereas either bit alone gives 65%, and nonlinear readouts of the pair
    can reach 100%.
    """
    if input_dim % 2:
        raise ValueError(f"input_dim must be even, got {input_dim}")
    ss = np.random.SeedSequence((seed, 0xC0FE))
    rng = np.random.default_rng(ss)
    half = input_dim // 2
    v1, v2 = xor_group_patterns(seed, input_dim)

    bits1 = (rng.random(n_items) < bit_bias).astype(int)
    bits2 = (rng.random(n_items) < bit_bias).astype(int)
    labels = (bits1 ^ bits2).astype(int).tolist()

    xs = noise * rng.standard_normal((n_items, input_len, input_dim))
    for cols, v in ((slice(0, half), v1), (slice(half, input_dim), v2)):
        block = xs[:, :, cols]
        block -= np.einsum("ntf,f->nt", block, v)[:, :, None] * v[None, None, :]
    signs1 = (2 * bits1 - 1).astype(np.float64)
    signs2 = (2 * bits2 - 1).astype(np.float64)
    xs[:, :, :half] += amp * signs1[:, None, None] * v1[None, None, :]
    xs[:, :, half:] += amp * signs2[:, None, None] * v2[None, None, :]

    dataset = SynthDataset(
        kind="classify_xor", inputs=xs, labels=labels, seed=seed,
        meta={"n_classes": 2, "bits_group1": bits1, "bits_group2": bits2,
              "input_rate": input_rate, "bit_bias": bit_bias})

    child = ss.spawn(2)
    enc_a = SynthEncoder(seed=int(child[0].generate_state(1)[0]), layers=layers,
                         dim=dim, framerate_hz=framerate_hz, input_dim=input_dim,
                         input_rate=input_rate, specialization="group_a",
                         pattern_seed=seed)
    enc_b = SynthEncoder(seed=int(child[1].generate_state(1)[0]), layers=layers,
                         dim=dim, framerate_hz=framerate_hz, input_dim=input_dim,
                         input_rate=input_rate, specialization="group_b",
                         pattern_seed=seed)
    return dataset, enc_a, enc_b


def xor_bayes_decode(dataset: SynthDataset) -> list:
    """Exact labels recovered from the raw inputs' signal directions."""
    v1, v2 = xor_group_patterns(dataset.seed, dataset.inputs.shape[2])
    half = dataset.inputs.shape[2] // 2
    m = dataset.inputs.mean(axis=1)
    b1 = (m[:, :half] @ v1 > 0).astype(int)
    b2 = (m[:, half:] @ v2 > 0).astype(int)
    return (b1 ^ b2).tolist()


# -- CTC string tasks -----------------------------------------------------------


def _render_ctc_items(rng: np.random.Generator, n_items: int, vocab_size: int,
                      input_len: int, input_dim: int, patterns: np.ndarray,
                      max_label_len: int, amp: float, noise: float):
    xs = noise * rng.standard_normal((n_items, input_len, input_dim))
    labels = []
    for i in range(n_items):
        m = int(rng.integers(1, max_label_len + 1))
        label = [int(rng.integers(1, vocab_size + 1))]
        while len(label) < m:
            nxt = int(rng.integers(1, vocab_size + 1))
            if nxt != label[-1]:  # adjacent repeats would collapse under CTC
                label.append(nxt)
        bounds = (np.arange(m + 1) * input_len) // m
        for k, sym in enumerate(label):
            xs[i, bounds[k]:bounds[k + 1], :] += amp * patterns[sym - 1]
        labels.append(tuple(label))
    return xs, labels


def make_ctc_task(seed: int, n_items: int, vocab_size: int,
                  input_len: int = 240, input_dim: int = 16,
                  *, max_label_len: int = 4, amp: float = 1.5,
                  noise: float = 0.5) -> SynthDataset:
    """Symbol-segment sequences: each segment renders one symbol's feature
    direction plus noise; the label is the symbol string."""
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC7C0)))
    patterns = ctc_symbol_patterns(seed, input_dim, vocab_size)
    xs, labels = _render_ctc_items(rng, n_items, vocab_size, input_len,
                                   input_dim, patterns, max_label_len, amp, noise)
    return SynthDataset(kind="ctc_strings", inputs=xs, labels=labels, seed=seed,
                        meta={"vocab_size": vocab_size, "max_label_len": max_label_len,
                              "input_rate": DEFAULT_INPUT_RATE})


def make_layered_ctc_task(
        seed: int, n_items: int, vocab_size: int, input_len: int = 240,
        input_dim: int = 16, *, layers: int = 12, dim: int = 16,
        framerate_hz: int = 50, max_label_len: int = 4, amp: float = 1.5,
        noise: float = 0.5) -> Tuple[SynthDataset, SynthEncoder]:
    """CTC task paired with an encoder that spreads symbol evidence across
    distinct hidden layers, so single-layer (or naively mixed) readouts
    collide while depth-aware aggregation does not."""
    dataset = make_ctc_task(seed, n_items, vocab_size, input_len, input_dim,
                            max_label_len=max_label_len, amp=amp, noise=noise)
    enc_seed = int(np.random.SeedSequence((seed, 0x1A7E)).generate_state(1)[0])
    encoder = SynthEncoder(seed=enc_seed, layers=layers, dim=dim,
                           framerate_hz=framerate_hz, input_dim=input_dim,
                           specialization="layered", pattern_seed=seed,
                           vocab_size=vocab_size)
    return dataset, encoder


# -- speaker-style verification task -------------------------------------------


def make_verify_task(seed: int, n_items: int, n_speakers: int = 12,
                     input_len: int = 80, input_dim: int = 16,
                     *, amp: float = 1.5, noise: float = 1.0) -> SynthDataset:
    """Identity task: each item carries one speaker's signature direction
    plus noise; labels are speaker ids, scored downstream by embedding
    cosine similarity."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5D34)))
    signatures = _semi_orthogonal(rng, n_speakers, input_dim)
    speakers = rng.integers(0, n_speakers, size=n_items)
    xs = noise * rng.standard_normal((n_items, input_len, input_dim))
    xs += amp * signatures[speakers][:, None, :]
    return SynthDataset(kind="verify_pairs", inputs=xs,
                        labels=speakers.astype(int).tolist(), seed=seed,
                        meta={"n_speakers": n_speakers,
                              "input_rate": DEFAULT_INPUT_RATE})
