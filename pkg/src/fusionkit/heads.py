"""Trainable downstream heads over fused T x D features.

Three heads: a per-frame CTC projection for string tasks, a mean-pool
classifier, and a mean-pool embedding head scored by cosine similarity.
The CTC loss runs entirely in log space so that tiny-probability instances
stay comparable against exhaustive enumeration.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tk
from .errors import CtcInfeasibleError, ShapeError
from .tensor import Tensor

BLANK = 0  # CTC blank index


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def _uniform_param(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class CtcHead:
    """Per-frame projection to (V+1) log-probabilities; index 0 is blank.

    The blank bias starts negative: the synthetic corpora tile every frame
    with symbol segments, and a neutral start tends to settle into the
    blank-dominated fixed point of the CTC posterior instead of escaping it.
    """

    def __init__(self, feat_dim: int, vocab_size: int, rng_seed: int = 0,
                 blank_bias: float = -2.0):
        if vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
        self.vocab_size = vocab_size
        rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0xC7C1)))
        bias = np.zeros(vocab_size + 1)
        bias[BLANK] = blank_bias
        self.params: Dict[str, Tensor] = {
            "ctc.w": _uniform_param(rng, (feat_dim, vocab_size + 1), feat_dim),
            "ctc.b": Tensor(bias, requires_grad=True),
        }

    def forward(self, feats: Tensor) -> Tensor:
        """(..., T, D) -> (..., T, V+1) log-probabilities."""
        logits = tk.add(tk.matmul(feats, self.params["ctc.w"]), self.params["ctc.b"])
        return tk.log_softmax(logits, axis=-1)


class ClassifyHead:
    """Mean-pool over frames, affine map to class log-probabilities."""

    def __init__(self, feat_dim: int, n_classes: int, rng_seed: int = 0):
        self.n_classes = n_classes
        rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0xC1A5)))
        self.params: Dict[str, Tensor] = {
            "cls.w": _uniform_param(rng, (feat_dim, n_classes), feat_dim),
            "cls.b": Tensor(np.zeros(n_classes), requires_grad=True),
        }

    def forward(self, feats: Tensor) -> Tensor:
        """(..., T, D) -> (..., n_classes) log-probabilities."""
        if feats.shape[-2] < 1:
            raise ShapeError("classify_forward: no frames to pool")
        pooled = tk.mean(feats, axis=-2)
        logits = tk.add(tk.matmul(pooled, self.params["cls.w"]), self.params["cls.b"])
        return tk.log_softmax(logits, axis=-1)


class VerifyHead:
    """Mean-pool, affine map to an embedding, L2 normalization.

    Training attaches a speaker classifier over the embeddings; evaluation
    scores held-out pairs by cosine similarity.
    """

    def __init__(self, feat_dim: int, embed_dim: int,
                 n_speakers: Optional[int] = None, rng_seed: int = 0):
        self.embed_dim = embed_dim
        rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0x5D30)))
        self.params: Dict[str, Tensor] = {
            "emb.w": _uniform_param(rng, (feat_dim, embed_dim), feat_dim),
            "emb.b": Tensor(np.zeros(embed_dim), requires_grad=True),
        }
        if n_speakers is not None:
            self.params["spk.w"] = _uniform_param(rng, (embed_dim, n_speakers), embed_dim)
            self.params["spk.b"] = Tensor(np.zeros(n_speakers), requires_grad=True)

    def embed(self, feats: Tensor) -> Tensor:
        """(..., T, D) -> (..., E) unit-norm embeddings."""
        pooled = tk.mean(feats, axis=-2)
        raw = tk.add(tk.matmul(pooled, self.params["emb.w"]), self.params["emb.b"])
        norm = tk.sqrt(tk.sum_(tk.mul(raw, raw), axis=-1, keepdims=True))
        if (norm.data == 0.0).any():
            raise ValueError("embed_utterance: zero-norm embedding")
        return tk.div(raw, norm)

    def forward(self, feats: Tensor) -> Tensor:
        """Speaker log-probabilities for cross-entropy training."""
        if "spk.w" not in self.params:
            raise ValueError("VerifyHead built without n_speakers cannot classify")
        emb = self.embed(feats)
        logits = tk.add(tk.matmul(emb, self.params["spk.w"]), self.params["spk.b"])
        return tk.log_softmax(logits, axis=-1)


def classify_forward(feats: Tensor, head: ClassifyHead) -> Tensor:
    return head.forward(feats)


def embed_utterance(feats: Tensor, head: VerifyHead) -> Tensor:
    return head.embed(feats)


def cosine_score(e1, e2) -> float:
    """Dot product of two unit vectors, in [-1, 1]."""
    a = e1.data if isinstance(e1, Tensor) else np.asarray(e1, dtype=float)
    b = e2.data if isinstance(e2, Tensor) else np.asarray(e2, dtype=float)
    return float(np.clip(np.dot(a.ravel(), b.ravel()), -1.0, 1.0))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def nll_loss(logprobs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels; logprobs (..., C)."""
    labels = np.asarray(labels, dtype=np.intp)
    flat_shape = logprobs.shape[:-1]
    if labels.shape != flat_shape:
        raise ShapeError(f"nll_loss: labels {labels.shape} vs logprobs {logprobs.shape}")
    one_hot = np.zeros(logprobs.shape)
    np.put_along_axis(one_hot, labels[..., None], 1.0, axis=-1)
    picked = tk.sum_(tk.mul(logprobs, Tensor(one_hot)))
    return tk.scale(picked, -1.0 / max(1, int(np.prod(flat_shape))))


def _extend_labels(labels: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.intp)
    ext[1::2] = labels
    return ext


def ctc_min_frames(labels: Sequence[int]) -> int:
    """Minimum frame count that admits at least one alignment."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(logprobs: Tensor, labels: Sequence[int]) -> Tensor:
    """Negative log of the total probability over all alignments.

    logprobs is (T, V+1) with log-softmax rows; labels is a nonempty
    sequence over 1..V. Differentiable through logprobs: the gradient is
    the negative posterior symbol occupancy from the forward-backward
    recursion. An infeasible (T, labels) pair raises instead of returning
    an infinite loss.
    """
    labels = [int(v) for v in labels]
    if logprobs.ndim != 2:
        raise ShapeError(f"ctc_loss: logprobs must be (T, V+1), got {logprobs.shape}")
    t_len, n_sym = logprobs.shape
    if not labels:
        raise CtcInfeasibleError("ctc_loss: empty label sequence")
    if any(v < 1 or v >= n_sym for v in labels):
        raise ValueError(f"ctc_loss: labels must lie in 1..{n_sym - 1}")
    if t_len < ctc_min_frames(labels):
        raise CtcInfeasibleError(
            f"ctc_loss: {t_len} frames cannot align {len(labels)} labels "
            f"(need >= {ctc_min_frames(labels)})")

    lp = logprobs.data
    ext = _extend_labels(labels)
    n_states = len(ext)
    # skip transition s-2 -> s is legal only onto a fresh non-blank symbol
    can_skip = np.zeros(n_states, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((t_len, n_states), neg_inf)
    alpha[0, 0] = lp[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([neg_inf], prev[:-1]))
        skip = np.concatenate(([neg_inf, neg_inf], prev[:-2]))
        skip = np.where(can_skip, skip, neg_inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]

    if n_states > 1:
        log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_z = alpha[-1, -1]
    loss_value = -log_z

    def backward(grad):
        g = float(np.asarray(grad).reshape(()))
        beta = np.full((t_len, n_states), neg_inf)
        beta[-1, -1] = 0.0
        if n_states > 1:
            beta[-1, -2] = 0.0
        emit = lp[:, ext]  # (T, S)
        for t in range(t_len - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            stay = nxt
            step = np.concatenate((nxt[1:], [neg_inf]))
            skip = np.concatenate((nxt[2:], [neg_inf, neg_inf]))
            skip = np.where(np.concatenate((can_skip[2:], [False, False])), skip, neg_inf)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

        occupancy = np.exp(alpha + beta - log_z)  # (T, S)
        dlp = np.zeros_like(lp)
        np.add.at(dlp, (slice(None), ext), occupancy)
        logprobs._accumulate(-g * dlp)

    return Tensor._make(np.asarray(loss_value), (logprobs,), backward)


def ctc_greedy_decode(logprobs) -> Tuple[int, ...]:
    """Frame argmax, collapse repeats, drop blanks."""
    arr = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    best = arr.argmax(axis=-1)
    out: List[int] = []
    prev = -1
    for sym in best:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return tuple(out)


def format_transcripts(item_ids: Sequence, sequences: Sequence[Sequence[int]]) -> str:
    """UTF-8 transcript lines: item_id<TAB>symbols space-separated."""
    lines = []
    for item_id, seq in zip(item_ids, sequences):
        lines.append(f"{item_id}\t{' '.join(str(s) for s in seq)}")
    return "\n".join(lines) + ("\n" if lines else "")
