"""Optimizer, training loop, and the fusion-comparison experiment grid.

A run wires frozen synthetic encoders through a trainable interface and
task head. Encoders are encoded once up front (they never train), training
operates on batched stacks, and every run asserts bit-identity of encoder
weights afterwards. The grid runner reproduces the single-vs-fusion
comparison layout and computes per-interface fusion gains against the best
constituent single-model run.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tk
from .bundles import (SynthDataset, SynthEncoder, make_complementary_task,
                      make_ctc_task, make_verify_task)
from .errors import DivergenceError
from .heads import (ClassifyHead, CtcHead, VerifyHead, cosine_score, ctc_greedy_decode,
                    ctc_loss, nll_loss)
from .interfaces import Interface, InterfaceConfig, build_interface, param_count
from .matching import resample_linear
from .metrics import EvalReport, accuracy, cer, eer
from .tensor import Tensor

METRIC_DIRECTION = {"cer": -1, "eer": -1, "accuracy": +1}  # +1 = higher is better


def _derive_seed(*parts) -> int:
    entropy = tuple(int(p) if not isinstance(p, str)
                    else int.from_bytes(p.encode(), "little") for p in parts)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: OptimizerState) -> None:
    """One bias-corrected adaptive update, in place; missing grads count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if grad.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {grad.shape} != param {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    seed: int
    specialization: str = "generic"
    framerate_hz: int = 50
    layers: int = 12
    dim: int = 16

    def label(self) -> str:
        tag = {"group_a": "A", "group_b": "B"}.get(self.specialization)
        return tag if tag else f"E{self.seed}"


@dataclass(frozen=True)
class TaskSpec:
    kind: Literal["classify_xor", "ctc_strings", "ctc_layered", "verify_pairs"]
    seed: int
    n_items: int
    input_len: int = 80
    input_dim: int = 16
    vocab_size: int = 3
    n_speakers: int = 12
    embed_dim: int = 16
    noise: float = 0.5
    amp: float = 1.5

    @property
    def head(self) -> str:
        return {"classify_xor": "classify", "ctc_strings": "ctc",
                "ctc_layered": "ctc", "verify_pairs": "verify"}[self.kind]

    @property
    def metric(self) -> str:
        return {"classify": "accuracy", "ctc": "cer", "verify": "eer"}[self.head]


@dataclass(frozen=True)
class ExperimentConfig:
    encoders: Tuple[EncoderSpec, ...]
    interface: InterfaceConfig
    task: TaskSpec
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    eval_every: int = 500
    global_seed: int = 0

    def __post_init__(self):
        if not self.encoders:
            raise ValueError("experiment needs at least one encoder")
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")

    def canonical_lines(self) -> str:
        parts = []
        for i, e in enumerate(self.encoders):
            parts.append(f"[encoder.{i}]")
            parts.append(f"dim={e.dim}")
            parts.append(f"framerate_hz={e.framerate_hz}")
            parts.append(f"layers={e.layers}")
            parts.append(f"seed={e.seed}")
            parts.append(f"specialization={e.specialization}")
        c = self.interface
        parts.append("[interface]")
        parts.append(f"gumbel_hard_eval={str(c.gumbel_hard_eval).lower()}")
        parts.append(f"gumbel_tau={c.gumbel_tau!r}")
        parts.append(f"hconv_channels={c.mid_channels}")
        parts.append(f"hconv_kernel={c.hconv_kernel}")
        parts.append(f"hconv_stride={c.hconv_stride}")
        parts.append(f"kind={c.kind}")
        parts.append(f"output_dim={c.output_dim}")
        parts.append(f"rng_seed={c.rng_seed}")
        t = self.task
        parts.append("[task]")
        parts.append(f"amp={t.amp!r}")
        parts.append(f"embed_dim={t.embed_dim}")
        parts.append(f"input_dim={t.input_dim}")
        parts.append(f"input_len={t.input_len}")
        parts.append(f"kind={t.kind}")
        parts.append(f"n_items={t.n_items}")
        parts.append(f"n_speakers={t.n_speakers}")
        parts.append(f"noise={t.noise!r}")
        parts.append(f"seed={t.seed}")
        parts.append(f"vocab_size={t.vocab_size}")
        parts.append("[train]")
        parts.append(f"batch_size={self.batch_size}")
        parts.append(f"eval_every={self.eval_every}")
        parts.append(f"global_seed={self.global_seed}")
        parts.append(f"lr={self.lr!r}")
        parts.append(f"steps={self.steps}")
        return "\n".join(parts) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_lines().encode()).hexdigest()[:12]

    def combo_label(self) -> str:
        return "+".join(e.label() for e in self.encoders)


@dataclass
class RunResult:
    config: ExperimentConfig
    config_digest: str
    reports: Dict[str, EvalReport]
    loss_curve: List[Tuple[int, float]]
    param_count: int
    wall_seconds: float
    interface: Optional[Interface] = field(default=None, repr=False)
    head: Optional[object] = field(default=None, repr=False)

    @property
    def test_value(self) -> float:
        return self.reports["test"].value


# ---------------------------------------------------------------------------
# dataset / encoder assembly
# ---------------------------------------------------------------------------


def build_dataset(task: TaskSpec) -> SynthDataset:
    if task.kind == "classify_xor":
        ds, _, _ = make_complementary_task(
            task.seed, task.n_items, task.input_len, task.input_dim)
        return ds
    if task.kind in ("ctc_strings", "ctc_layered"):
        return make_ctc_task(task.seed, task.n_items, task.vocab_size,
                             task.input_len, task.input_dim,
                             amp=task.amp, noise=task.noise)
    if task.kind == "verify_pairs":
        return make_verify_task(task.seed, task.n_items, task.n_speakers,
                                task.input_len, task.input_dim,
                                amp=task.amp, noise=task.noise)
    raise ValueError(f"unknown task kind {task.kind!r}")


def build_encoder(spec: EncoderSpec, task: TaskSpec) -> SynthEncoder:
    pattern_seed = task.seed if spec.specialization != "generic" else None
    vocab = task.vocab_size if spec.specialization == "layered" else None
    return SynthEncoder(seed=spec.seed, layers=spec.layers, dim=spec.dim,
                        framerate_hz=spec.framerate_hz, input_dim=task.input_dim,
                        specialization=spec.specialization,
                        pattern_seed=pattern_seed, vocab_size=vocab)


def _match_stacks(stacks: List[np.ndarray], equalize_dim: bool) -> List[np.ndarray]:
    """Upsample whole (n, L, T, D) stacks so L, T (and optionally D) agree."""
    target_l = max(s.shape[1] for s in stacks)
    target_t = max(s.shape[2] for s in stacks)
    target_d = max(s.shape[3] for s in stacks)
    out = []
    for s in stacks:
        if s.shape[1] != target_l:
            s = resample_linear(Tensor(s), axis=1, new_len=target_l).data
        if s.shape[2] != target_t:
            s = resample_linear(Tensor(s), axis=2, new_len=target_t).data
        if equalize_dim and s.shape[3] != target_d:
            s = resample_linear(Tensor(s), axis=3, new_len=target_d).data
        out.append(s)
    return out


def _build_head(task: TaskSpec, feat_dim: int, seed: int):
    if task.head == "ctc":
        return CtcHead(feat_dim, task.vocab_size, rng_seed=seed)
    if task.head == "classify":
        return ClassifyHead(feat_dim, 2, rng_seed=seed)
    return VerifyHead(feat_dim, task.embed_dim, n_speakers=task.n_speakers, rng_seed=seed)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _verify_pairs(labels: np.ndarray, rng: np.random.Generator):
    """Trial pairs over one split: same-speaker positives, cross negatives."""
    by_spk: Dict[int, List[int]] = {}
    for i, s in enumerate(labels):
        by_spk.setdefault(int(s), []).append(i)
    pos = []
    for items in by_spk.values():
        pos.extend((a, b) for a, b in zip(items, items[1:]))
    neg = []
    n = len(labels)
    for i in range(n):
        for _ in range(8):
            j = int(rng.integers(0, n))
            if labels[j] != labels[i]:
                neg.append((i, j))
                break
    return pos, neg


def _evaluate(task: TaskSpec, iface: Interface, head, stacks: List[np.ndarray],
              labels: list, idx: np.ndarray, seed: int,
              chunk: int = 512) -> float:
    preds_or_scores = []
    if task.head == "verify":
        embs = []
        for lo in range(0, len(idx), chunk):
            sel = idx[lo:lo + chunk]
            models = [Tensor(s[sel]) for s in stacks]
            feats = iface.forward(models, train=False)
            embs.append(head.embed(feats).data)
        embs = np.concatenate(embs, axis=0)
        spk = np.array([labels[i] for i in idx])
        pos_pairs, neg_pairs = _verify_pairs(spk, np.random.default_rng(seed))
        pos = [cosine_score(embs[a], embs[b]) for a, b in pos_pairs]
        neg = [cosine_score(embs[a], embs[b]) for a, b in neg_pairs]
        return eer(pos, neg)

    for lo in range(0, len(idx), chunk):
        sel = idx[lo:lo + chunk]
        models = [Tensor(s[sel]) for s in stacks]
        feats = iface.forward(models, train=False)
        out = head.forward(feats)
        if task.head == "classify":
            preds_or_scores.extend(out.data.argmax(axis=-1).tolist())
        else:
            preds_or_scores.extend(ctc_greedy_decode(out.data[b])
                                   for b in range(len(sel)))
    truth = [labels[i] for i in idx]
    if task.head == "classify":
        return accuracy(preds_or_scores, truth)
    return cer(preds_or_scores, truth)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(cfg: ExperimentConfig, dataset: Optional[SynthDataset] = None) -> RunResult:
    """Run one experiment: only interface and head parameters move.

    Deterministic given the config. Raises DivergenceError on a non-finite
    loss. Encoder weights are hashed before and after; any drift is a bug
    and raises immediately.
    """
    t_start = time.time()
    task = cfg.task
    if dataset is None:
        dataset = build_dataset(task)
    encoders = [build_encoder(spec, task) for spec in cfg.encoders]
    frozen_before = [e.weight_bytes() for e in encoders]

    stacks = [enc.encode_batch(dataset.inputs) for enc in encoders]
    equalize_dim = cfg.interface.kind == "hconv" and len({s.shape[3] for s in stacks}) > 1
    stacks = _match_stacks(stacks, equalize_dim)
    n_layers = stacks[0].shape[1]
    input_dims = [s.shape[3] for s in stacks]

    iface_cfg = replace(cfg.interface,
                        rng_seed=_derive_seed(cfg.interface.rng_seed, cfg.global_seed, "iface"))
    iface = build_interface(iface_cfg, len(encoders), n_layers, input_dims)
    head = _build_head(task, iface_cfg.output_dim, _derive_seed(cfg.global_seed, "head"))

    params: Dict[str, Tensor] = dict(iface.params)
    params.update(head.params)
    state = OptimizerState(lr=cfg.lr)

    train_idx = dataset.split_indices("train")
    dev_idx = dataset.split_indices("dev")
    test_idx = dataset.split_indices("test")
    batch_rng = np.random.default_rng(_derive_seed(cfg.global_seed, "batches"))

    loss_curve: List[Tuple[int, float]] = []
    for step in range(cfg.steps):
        sel = batch_rng.choice(train_idx, size=cfg.batch_size, replace=True)
        models = [Tensor(s[sel]) for s in stacks]
        feats = iface.forward(models, train=True,
                              step_seed=_derive_seed(cfg.global_seed, "noise", step))
        if task.head == "ctc":
            logp = head.forward(feats)
            terms = [ctc_loss(logp[b], dataset.labels[i])
                     for b, i in enumerate(sel)]
            total = terms[0]
            for term in terms[1:]:
                total = tk.add(total, term)
            loss = tk.scale(total, 1.0 / len(terms))
        else:
            targets = [dataset.labels[i] for i in sel]
            loss = nll_loss(head.forward(feats), targets)

        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(f"non-finite loss {loss_value} at step {step}")
        loss_curve.append((step, loss_value))

        tk.backward(loss)
        adam_step(params, state)
        for p in params.values():
            p.zero_grad()

        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and len(dev_idx):
            _evaluate(task, iface, head, stacks, dataset.labels, dev_idx,
                      seed=_derive_seed(cfg.global_seed, "dev-pairs"))

    reports = {}
    for split, idx in (("dev", dev_idx), ("test", test_idx)):
        value = _evaluate(task, iface, head, stacks, dataset.labels, idx,
                          seed=_derive_seed(cfg.global_seed, f"{split}-pairs"))
        reports[split] = EvalReport(task=task.kind, metric=task.metric,
                                    value=value, n_items=len(idx), seed=cfg.global_seed)

    frozen_after = [e.weight_bytes() for e in encoders]
    if frozen_before != frozen_after:
        raise AssertionError("encoder weights changed during training")

    return RunResult(config=cfg, config_digest=cfg.digest(), reports=reports,
                     loss_curve=loss_curve,
                     param_count=param_count(iface) + sum(p.size for p in head.params.values()),
                     wall_seconds=time.time() - t_start,
                     interface=iface, head=head)


# ---------------------------------------------------------------------------
# grid running & comparison
# ---------------------------------------------------------------------------

_KIND_ORDER = {"ws": 0, "gumd": 1, "hconv": 2, "chconv": 3}
_SECTION_NAMES = {1: "Single Model", 2: "2 Model Fusion", 3: "3 Model Fusion"}


@dataclass
class ComparisonTable:
    rows: List[dict]  # combo, kind, metric, value, params, n_models, best

    def to_markdown(self) -> str:
        lines = []
        for n_models in sorted({r["n_models"] for r in self.rows}):
            section = _SECTION_NAMES.get(n_models, f"{n_models} Model Fusion")
            lines.append(f"### {section}")
            lines.append("")
            lines.append("| Models | Interface | Metric | Value | Params |")
            lines.append("|---|---|---|---|---|")
            for r in self.rows:
                if r["n_models"] != n_models:
                    continue
                shown = f"{r['value']:.4f}"
                if r["best"]:
                    shown = f"_{shown}_"  # best score within the section
                lines.append(f"| {r['combo']} | {r['kind']} | {r['metric']} "
                             f"| {shown} | {r['params']} |")
            lines.append("")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["combo,interface,metric,value,params,n_models,best"]
        for r in self.rows:
            lines.append(f"{r['combo']},{r['kind']},{r['metric']},"
                         f"{r['value']:.6f},{r['params']},{r['n_models']},"
                         f"{int(r['best'])}")
        return "\n".join(lines) + "\n"


def run_grid(configs: Sequence[ExperimentConfig],
             jobs: int = 1) -> Tuple[List[RunResult], ComparisonTable]:
    """Train every config and assemble the sectioned comparison table."""
    configs = list(configs)
    if not configs:
        raise ValueError("run_grid: empty config list")
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(train, configs))
    else:
        results = [train(cfg) for cfg in configs]

    rows = []
    for res in results:
        cfg = res.config
        rows.append({
            "combo": cfg.combo_label(), "kind": cfg.interface.kind,
            "metric": cfg.task.metric, "value": res.test_value,
            "params": res.param_count, "n_models": len(cfg.encoders),
            "best": False,
        })
    rows.sort(key=lambda r: (r["n_models"], r["combo"],
                             _KIND_ORDER.get(r["kind"], 99)))
    for n_models in {r["n_models"] for r in rows}:
        section = [r for r in rows if r["n_models"] == n_models]
        direction = METRIC_DIRECTION[section[0]["metric"]]
        best_value = max(direction * r["value"] for r in section)
        for r in section:
            if direction * r["value"] == best_value:
                r["best"] = True
    return results, ComparisonTable(rows=rows)


def fusion_gain(results: Sequence[RunResult]) -> Dict[Tuple[str, str], float]:
    """Relative improvement (%) of each fusion run against the best single
    run among its constituent encoders with the same interface.

    For error metrics a halved error is +50%; for accuracy the sign is the
    plain relative increase. Missing constituent runs raise.
    """
    singles: Dict[Tuple[str, str], float] = {}
    for res in results:
        if len(res.config.encoders) == 1:
            key = (res.config.encoders[0].label(), res.config.interface.kind)
            singles[key] = res.test_value

    gains: Dict[Tuple[str, str], float] = {}
    for res in results:
        cfg = res.config
        if len(cfg.encoders) == 1:
            continue
        kind = cfg.interface.kind
        metric = cfg.task.metric
        direction = METRIC_DIRECTION[metric]
        values = []
        for enc in cfg.encoders:
            key = (enc.label(), kind)
            if key not in singles:
                raise ValueError(f"fusion_gain: missing single run for {key}")
            values.append(singles[key])
        best_single = max(values) if direction > 0 else min(values)
        if direction > 0:
            gain = (res.test_value - best_single) / best_single * 100.0
        else:
            gain = (best_single - res.test_value) / best_single * 100.0
        gains[(cfg.combo_label(), kind)] = gain
    return gains


# ---------------------------------------------------------------------------
# probes: how much task information do raw inputs / encoder features hold
# ---------------------------------------------------------------------------


def fit_probe(features: np.ndarray, labels: Sequence[int], n_classes: int = 2,
              hidden: int = 0, steps: int = 400, lr: float = 0.05,
              seed: int = 0, balanced_eval: bool = False) -> float:
    """Train a small probe on 80% of rows, return held-out accuracy.

    hidden=0 is a linear (affine) probe; hidden>0 inserts one tanh layer.
    With balanced_eval, held-out accuracy is computed on an equal number of
    items per class, so a majority-class probe scores at chance.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9B0)))
    order = rng.permutation(n)
    cut = int(0.8 * n)
    tr, te = order[:cut], order[cut:]

    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0) + 1e-8
    feats = (features - mu) / sd

    dim = feats.shape[1]
    params: Dict[str, Tensor] = {}
    if hidden:
        bound = 1.0 / np.sqrt(dim)
        params["w1"] = Tensor(rng.uniform(-bound, bound, (dim, hidden)), requires_grad=True)
        params["b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        bound = 1.0 / np.sqrt(hidden)
        params["w2"] = Tensor(rng.uniform(-bound, bound, (hidden, n_classes)), requires_grad=True)
    else:
        bound = 1.0 / np.sqrt(dim)
        params["w2"] = Tensor(rng.uniform(-bound, bound, (dim, n_classes)), requires_grad=True)
    params["b2"] = Tensor(np.zeros(n_classes), requires_grad=True)

    def forward(x: Tensor) -> Tensor:
        h = x
        if hidden:
            h = tk.tanh(tk.add(tk.matmul(h, params["w1"]), params["b1"]))
        return tk.log_softmax(tk.add(tk.matmul(h, params["w2"]), params["b2"]), axis=-1)

    state = OptimizerState(lr=lr)
    batch = min(64, len(tr))
    for _ in range(steps):
        sel = rng.choice(tr, size=batch, replace=True)
        loss = nll_loss(forward(Tensor(feats[sel])), labels[sel])
        tk.backward(loss)
        adam_step(params, state)
        for p in params.values():
            p.zero_grad()

    eval_idx = te
    if balanced_eval:
        per_class = [te[labels[te] == c] for c in range(n_classes)]
        k = min(len(ix) for ix in per_class)
        eval_idx = np.concatenate([ix[:k] for ix in per_class])
    preds = forward(Tensor(feats[eval_idx])).data.argmax(axis=-1)
    return float((preds == labels[eval_idx]).mean())
