"""Command-line entry point: train, grid, export-features, verify, inspect-bundle.

Exit codes: 0 success, 1 verification failure, 2 config/usage error,
3 training divergence. FUSIONKIT_SEED overrides the default seed when
--seed is absent.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import tensor as tk
from .bundles import HiddenStateBundle, read_bundle, write_bundle
from .config import config_to_experiment, config_to_grid, emit_config, parse_config
from .errors import (BadMagicError, ConfigError, DimensionOverflowError,
                     DivergenceError, FusionkitError, TruncatedError)
from .heads import ctc_loss, ctc_min_frames
from .interfaces import (Interface, InterfaceConfig, build_interface,
                         load_checkpoint, save_checkpoint)
from .matching import MatchPolicy, match_bundles, resample_linear
from .metrics import eer, write_reports_csv
from .oracles import ctc_loss_bruteforce, eer_sweep, resample_linear_scalar
from .tensor import Tensor
from .training import ExperimentConfig, RunResult, run_grid, train

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _resolve_seed(arg_seed: Optional[int]) -> Optional[int]:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("FUSIONKIT_SEED")
    return int(env) if env else None


def _load_config(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text)


def _persist_run(result: RunResult, out_dir: Path) -> Path:
    run_dir = out_dir / result.config_digest
    run_dir.mkdir(parents=True, exist_ok=True)
    write_reports_csv(list(result.reports.values()), run_dir / "report.csv")
    with open(run_dir / "losscurve.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in result.loss_curve:
            fh.write(f"{step},{value:.10g}\n")
    (run_dir / "config.txt").write_text(result.config.canonical_lines(), encoding="utf-8")
    if result.interface is not None:
        save_checkpoint(result.interface, run_dir / "interface.ckpt")
    return run_dir


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        sections = _load_config(args.config)
        cfg = config_to_experiment(sections, seed_override=_resolve_seed(args.seed))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = train(cfg)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    run_dir = _persist_run(result, Path(args.out))
    for split, report in sorted(result.reports.items()):
        print(f"{split}: {report.metric}={report.value:.4f} (n={report.n_items})")
    print(f"artifacts: {run_dir}")
    return EXIT_OK


def cmd_grid(args) -> int:
    try:
        sections = _load_config(args.config)
        configs = config_to_grid(sections, seed_override=_resolve_seed(args.seed))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results, table = run_grid(configs, jobs=args.jobs)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for result in results:
        _persist_run(result, out_dir)
    markdown = table.to_markdown()
    (out_dir / "table.md").write_text(markdown, encoding="utf-8")
    (out_dir / "table.csv").write_text(table.to_csv(), encoding="utf-8")
    print(markdown)
    return EXIT_OK


def cmd_export_features(args) -> int:
    try:
        bundles = [read_bundle(p) for p in args.bundles]
        iface = load_checkpoint(args.checkpoint)
    except FusionkitError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if len(bundles) != iface.n_models:
        print(f"input error: checkpoint fuses {iface.n_models} bundles, "
              f"got {len(bundles)}", file=sys.stderr)
        return EXIT_CONFIG

    dim_rule = ("interpolate_to_max"
                if iface.config.kind == "hconv" and len({b.dim for b in bundles}) > 1
                else "require_equal")
    try:
        aligned = match_bundles(bundles, MatchPolicy(dim_rule=dim_rule))
        if tuple(b.dim for b in aligned) != iface.input_dims:
            raise FusionkitError(
                f"bundle dims {[b.dim for b in aligned]} != checkpoint dims "
                f"{list(iface.input_dims)}")
        if aligned[0].layers != iface.n_layers:
            raise FusionkitError(
                f"bundle layers {aligned[0].layers} != checkpoint layers {iface.n_layers}")
        feats = iface.forward([b.data for b in aligned], train=False)
    except FusionkitError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    fused = HiddenStateBundle(
        model_id=f"fused-{iface.config.kind}",
        layers=1, frames=feats.shape[0], dim=feats.shape[1],
        framerate_hz=max(b.framerate_hz for b in aligned),
        data=Tensor(feats.data[None]))
    write_bundle(fused, args.out)
    print(f"wrote {args.out}: 1x{fused.frames}x{fused.dim}")
    return EXIT_OK


def cmd_inspect_bundle(args) -> int:
    try:
        bundle = read_bundle(args.path)
    except FusionkitError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"model_id: {bundle.model_id}")
    print(f"layers: {bundle.layers}")
    print(f"frames: {bundle.frames}")
    print(f"dim: {bundle.dim}")
    print(f"framerate_hz: {bundle.framerate_hz}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify suites: oracle comparisons with printed worst-case errors
# ---------------------------------------------------------------------------


def _suite_grad() -> tuple:
    from .heads import ClassifyHead, nll_loss
    worst, worst_seed = 0.0, None
    for seed in range(6):
        rng = np.random.default_rng(seed)
        kind = ("ws", "gumd", "hconv", "chconv")[seed % 4]
        cfg = InterfaceConfig(kind=kind, output_dim=6, rng_seed=seed)
        iface = build_interface(cfg, 2, 7, [6, 6])
        head = ClassifyHead(6, 3, rng_seed=seed)
        models = [Tensor(rng.standard_normal((7, 4, 6))) for _ in range(2)]
        labels = [int(rng.integers(0, 3))]

        def forward(p):
            feats = iface.forward(models, train=True, step_seed=seed,
                                  gumbel_hard=False if kind == "gumd" else None)
            return nll_loss(tk.reshape(head.forward(feats), (1, -1)), labels)

        for name, p in list(iface.params.items()) + list(head.params.items()):
            err = tk.grad_check(lambda t: forward(t), p, max_coords=24,
                                rng=np.random.default_rng(seed))
            if err > worst:
                worst, worst_seed = err, (seed, name)
    return worst, 1e-5, worst_seed


def _suite_ctc() -> tuple:
    worst, worst_seed = 0.0, None
    rng = np.random.default_rng(0)
    for case in range(200):
        t_len = int(rng.integers(1, 7))
        vocab = int(rng.integers(2, 4))
        m = int(rng.integers(1, 4))
        label = [int(rng.integers(1, vocab + 1)) for _ in range(m)]
        if t_len < ctc_min_frames(label):
            continue
        raw = rng.standard_normal((t_len, vocab + 1))
        lp = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
        diff = abs(ctc_loss(Tensor(lp), label).item() - ctc_loss_bruteforce(lp, label))
        if diff > worst:
            worst, worst_seed = diff, case
    return worst, 1e-10, worst_seed


def _suite_interp() -> tuple:
    worst, worst_seed = 0.0, None
    rng = np.random.default_rng(0)
    for case in range(1000):
        n = int(rng.integers(1, 17))
        new_len = int(rng.integers(n, 65))
        values = rng.standard_normal(n)
        fast = resample_linear(Tensor(values), axis=0, new_len=new_len).data
        slow = np.array(resample_linear_scalar(values, new_len))
        diff = float(np.abs(fast - slow).max())
        if new_len == n and not np.array_equal(fast, values):
            return 1.0, 1e-12, case
        if diff > worst:
            worst, worst_seed = diff, case
    return worst, 1e-12, worst_seed


def _suite_eer() -> tuple:
    worst, worst_seed = 0.0, None
    rng = np.random.default_rng(0)
    for case in range(1000):
        pos = rng.standard_normal(int(rng.integers(3, 60))) + rng.uniform(0, 2)
        neg = rng.standard_normal(int(rng.integers(3, 60)))
        diff = abs(eer(pos, neg) - eer_sweep(pos, neg))
        if diff > worst:
            worst, worst_seed = diff, case
    return worst, 1e-9, worst_seed


def _suite_format() -> tuple:
    import tempfile
    from .bundles import SynthEncoder
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rng = np.random.default_rng(0)
        enc = SynthEncoder(seed=1, layers=3, dim=4, input_dim=6)
        bundle = enc.encode(rng.standard_normal((60, 6)))
        path = tmp / "b.hsb"
        write_bundle(bundle, path)
        again = read_bundle(path)
        write_bundle(again, tmp / "b2.hsb")
        if (tmp / "b.hsb").read_bytes() != (tmp / "b2.hsb").read_bytes():
            return 1.0, 0.5, "roundtrip"

        (tmp / "bad.hsb").write_bytes(b"XXXX" + path.read_bytes()[4:])
        try:
            read_bundle(tmp / "bad.hsb")
            return 1.0, 0.5, "bad-magic-undetected"
        except BadMagicError:
            pass
        (tmp / "short.hsb").write_bytes(path.read_bytes()[:40])
        try:
            read_bundle(tmp / "short.hsb")
            return 1.0, 0.5, "truncation-undetected"
        except TruncatedError:
            pass

        cfg = InterfaceConfig(kind="ws", output_dim=4, rng_seed=0)
        iface = build_interface(cfg, 1, 4, [4])
        save_checkpoint(iface, tmp / "i.ckpt")
        reloaded = load_checkpoint(tmp / "i.ckpt")
        save_checkpoint(reloaded, tmp / "i2.ckpt")
        if (tmp / "i.ckpt").read_bytes() != (tmp / "i2.ckpt").read_bytes():
            return 1.0, 0.5, "checkpoint-roundtrip"
    return 0.0, 0.5, None


_SUITES = {"grad": _suite_grad, "ctc": _suite_ctc, "interp": _suite_interp,
           "eer": _suite_eer, "format": _suite_format}


def cmd_verify(args) -> int:
    suites = [args.suite] if args.suite else sorted(_SUITES)
    code = EXIT_OK
    for name in suites:
        worst, tolerance, worst_case = _SUITES[name]()
        status = "ok" if worst <= tolerance else "FAIL"
        line = f"suite {name}: worst error {worst:.3e} (tolerance {tolerance:.0e}) {status}"
        if status == "FAIL":
            line += f" [case {worst_case}]"
            code = EXIT_VERIFY_FAILED
        print(line)
    return code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionkit",
        description="Train and compare layer/model fusion interfaces over "
                    "frozen synthetic encoders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="results")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("grid", help="run a grid of experiments and emit a table")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("export-features", help="fuse bundles with a checkpoint")
    p.add_argument("--bundles", nargs="+", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("verify", help="run oracle comparison suites")
    p.add_argument("--suite", choices=sorted(_SUITES), default=None)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("inspect-bundle", help="print bundle header fields")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect_bundle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
