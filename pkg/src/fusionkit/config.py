"""Strict key=value config files for experiments and grids.

Format: "[section]" headers, "key=value" lines, "#" comments. Unknown
sections or keys are errors that name the offending line, so a typo can
never silently fall back to a default in the middle of a grid study. The
emitter produces a canonical form whose parse equals the original parse.
"""

from __future__ import annotations

import re
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError
from .interfaces import INTERFACE_KINDS, InterfaceConfig
from .training import EncoderSpec, ExperimentConfig, TaskSpec

_ENCODER_KEYS = {"seed", "layers", "dim", "framerate_hz", "specialization"}
_INTERFACE_KEYS = {"kind", "output_dim", "hconv_kernel", "hconv_stride",
                   "hconv_channels", "gumbel_tau", "gumbel_hard_eval", "rng_seed"}
_TASK_KEYS = {"kind", "seed", "n_items", "input_len", "input_dim", "vocab_size",
              "n_speakers", "embed_dim", "noise", "amp"}
_TRAIN_KEYS = {"steps", "batch_size", "lr", "eval_every", "global_seed"}
_GRID_KEYS = {"interfaces", "combos", "rows"}

_SPECIALIZATIONS = {"generic", "group_a", "group_b", "layered"}
_TASK_KINDS = {"classify_xor", "ctc_strings", "ctc_layered", "verify_pairs"}

_ENCODER_RE = re.compile(r"^encoder\.(\d+)$")

ParsedConfig = Dict[str, Dict[str, str]]


def parse_config(text: str) -> ParsedConfig:
    """Parse and validate config text into {section: {key: value}}."""
    sections: ParsedConfig = {}
    lines_of: Dict[Tuple[str, str], int] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not (current in ("interface", "task", "train", "grid")
                    or _ENCODER_RE.match(current)):
                raise ConfigError(f"unknown section [{current}]", line=lineno)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", line=lineno)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        if current is None:
            raise ConfigError("key=value before any [section]", line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        allowed = (_ENCODER_KEYS if _ENCODER_RE.match(current) else
                   {"interface": _INTERFACE_KEYS, "task": _TASK_KEYS,
                    "train": _TRAIN_KEYS, "grid": _GRID_KEYS}[current])
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{current}]", line=lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in section [{current}]", line=lineno)
        sections[current][key] = value
        lines_of[(current, key)] = lineno
    return sections


def emit_config(sections: ParsedConfig) -> str:
    """Canonical echo: sections and keys sorted, one key=value per line."""
    out = []
    for name in sorted(sections, key=_section_sort_key):
        out.append(f"[{name}]")
        for key in sorted(sections[name]):
            out.append(f"{key}={sections[name][key]}")
    return "\n".join(out) + "\n"


def _section_sort_key(name: str):
    m = _ENCODER_RE.match(name)
    if m:
        return (0, int(m.group(1)), name)
    return (1, 0, name)


# ---------------------------------------------------------------------------
# typed conversion
# ---------------------------------------------------------------------------


def _need(sections: ParsedConfig, section: str) -> Dict[str, str]:
    if section not in sections:
        raise ConfigError(f"missing required section [{section}]")
    return sections[section]


def _get(values: Dict[str, str], section: str, key: str, convert, default=None):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing required key {key!r} in section [{section}]")
        return default
    try:
        return convert(values[key])
    except ConfigError:
        raise
    except Exception:
        raise ConfigError(f"bad value {values[key]!r} for {key!r} in [{section}]")


def _to_bool(value: str) -> bool:
    if value not in ("true", "false"):
        raise ValueError(value)
    return value == "true"


def _to_choice(options):
    def convert(value):
        if value not in options:
            raise ValueError(value)
        return value
    return convert


def encoder_sections(sections: ParsedConfig) -> List[str]:
    found = sorted((int(_ENCODER_RE.match(s).group(1)), s)
                   for s in sections if _ENCODER_RE.match(s))
    for expect, (idx, _) in enumerate(found):
        if idx != expect:
            raise ConfigError(f"encoder sections must be numbered 0..N-1, found gap at {expect}")
    return [name for _, name in found]


def parse_encoder_spec(sections: ParsedConfig, name: str) -> EncoderSpec:
    vals = sections[name]
    return EncoderSpec(
        seed=_get(vals, name, "seed", int),
        specialization=_get(vals, name, "specialization",
                            _to_choice(_SPECIALIZATIONS), default="generic"),
        framerate_hz=_get(vals, name, "framerate_hz", int, default=50),
        layers=_get(vals, name, "layers", int, default=12),
        dim=_get(vals, name, "dim", int, default=16))


def parse_interface_config(sections: ParsedConfig) -> InterfaceConfig:
    vals = _need(sections, "interface")
    hconv_channels = _get(vals, "interface", "hconv_channels", int, default=0)
    try:
        return InterfaceConfig(
            kind=_get(vals, "interface", "kind", _to_choice(INTERFACE_KINDS)),
            output_dim=_get(vals, "interface", "output_dim", int),
            hconv_kernel=_get(vals, "interface", "hconv_kernel", int, default=3),
            hconv_stride=_get(vals, "interface", "hconv_stride", int, default=2),
            hconv_channels=hconv_channels or None,
            gumbel_tau=_get(vals, "interface", "gumbel_tau", float, default=1.0),
            gumbel_hard_eval=_get(vals, "interface", "gumbel_hard_eval",
                                  _to_bool, default=True),
            rng_seed=_get(vals, "interface", "rng_seed", int, default=0))
    except ValueError as exc:
        raise ConfigError(f"bad interface config: {exc}")


def parse_task_spec(sections: ParsedConfig) -> TaskSpec:
    vals = _need(sections, "task")
    return TaskSpec(
        kind=_get(vals, "task", "kind", _to_choice(_TASK_KINDS)),
        seed=_get(vals, "task", "seed", int),
        n_items=_get(vals, "task", "n_items", int),
        input_len=_get(vals, "task", "input_len", int, default=80),
        input_dim=_get(vals, "task", "input_dim", int, default=16),
        vocab_size=_get(vals, "task", "vocab_size", int, default=3),
        n_speakers=_get(vals, "task", "n_speakers", int, default=12),
        embed_dim=_get(vals, "task", "embed_dim", int, default=16),
        noise=_get(vals, "task", "noise", float, default=0.5),
        amp=_get(vals, "task", "amp", float, default=1.5))


def config_to_experiment(sections: ParsedConfig,
                         seed_override: Optional[int] = None) -> ExperimentConfig:
    """Build one ExperimentConfig from a parsed file (grid section ignored)."""
    names = encoder_sections(sections)
    if not names:
        raise ConfigError("need at least one [encoder.N] section")
    encoders = tuple(parse_encoder_spec(sections, n) for n in names)
    train_vals = sections.get("train", {})
    global_seed = _get(train_vals, "train", "global_seed", int, default=0)
    if seed_override is not None:
        global_seed = seed_override
    try:
        return ExperimentConfig(
            encoders=encoders,
            interface=parse_interface_config(sections),
            task=parse_task_spec(sections),
            steps=_get(train_vals, "train", "steps", int, default=2000),
            batch_size=_get(train_vals, "train", "batch_size", int, default=16),
            lr=_get(train_vals, "train", "lr", float, default=1e-3),
            eval_every=_get(train_vals, "train", "eval_every", int, default=500),
            global_seed=global_seed)
    except ValueError as exc:
        raise ConfigError(str(exc))


def config_to_grid(sections: ParsedConfig,
                   seed_override: Optional[int] = None) -> List[ExperimentConfig]:
    """Expand a [grid] section into one config per (combo, interface)."""
    grid = _need(sections, "grid")
    base = config_to_experiment(sections, seed_override=seed_override)
    kinds = [k.strip() for k in _get(grid, "grid", "interfaces", str).split(",") if k.strip()]
    if not kinds:
        raise ConfigError("grid interfaces list is empty")
    bad = [k for k in kinds if k not in INTERFACE_KINDS]
    if bad:
        raise ConfigError(f"unknown grid interface kinds {bad}")
    combo_text = _get(grid, "grid", "combos", str)
    combos: List[Tuple[int, ...]] = []
    for chunk in combo_text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            combo = tuple(int(p) for p in chunk.split("+"))
        except ValueError:
            raise ConfigError(f"bad grid combo {chunk!r}; want forms like 0 or 0+1")
        if any(i < 0 or i >= len(base.encoders) for i in combo):
            raise ConfigError(f"grid combo {chunk!r} references missing encoder")
        combos.append(combo)
    if not combos:
        raise ConfigError("grid combos list is empty")

    from dataclasses import replace
    configs = []
    for combo in combos:
        for kind in kinds:
            configs.append(replace(
                base,
                encoders=tuple(base.encoders[i] for i in combo),
                interface=replace(base.interface, kind=kind)))
    return configs
