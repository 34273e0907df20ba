"""Run configuration: flat ``section.key = value`` text, typed round-trip.

One RunConfig drives every CLI command.  The file format is plain text with
one assignment per line; keys carry a section prefix naming the parameter
block they populate (``solver.mu_init = 0.5``).  Serialization is canonical
(sorted keys, repr floats), so ``parse_config(config_to_text(c)) == c`` and
two runs from the same file cannot disagree about defaults.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

from .extraction import ExtractionParams
from .matching import RansacParams
from .pipeline import PipelineParams
from .solver import SolverOptions
from .synthetic import SceneSpec

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "config_to_text",
    "load_config",
    "apply_overrides",
]

DESCRIPTOR_CHOICES = ("color", "file", "oracle")


class ConfigError(ValueError):
    """Unknown key, malformed value, or invariant violation in a config."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: dataset paths, camera, and module knobs."""

    # dataset paths; empty string means "not set"
    depth_dir: str = ""
    rgb_dir: str = ""
    association_file: str = ""
    keypoint_file: str = ""
    embedding_file: str = ""
    groundtruth_file: str = ""
    output_dir: str = "out"
    # camera model for ingested depth (TUM defaults)
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    depth_scale: float = 5000.0
    # run-wide knobs
    descriptor: str = "color"
    seed: int = 0
    # sweep command
    sweep_ratios: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)
    sweep_pairs: int = 200
    # module parameter blocks
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self) -> None:
        if self.descriptor not in DESCRIPTOR_CHOICES:
            raise ConfigError(
                f"descriptor must be one of {', '.join(DESCRIPTOR_CHOICES)}; "
                f"got {self.descriptor!r}"
            )
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")
        if self.sweep_pairs < 1:
            raise ConfigError("sweep.pairs must be >= 1")
        if any(not (0.0 <= r < 1.0) for r in self.sweep_ratios):
            raise ConfigError("sweep.ratios must lie in [0, 1)")

    @property
    def solver(self) -> SolverOptions:
        return self.pipeline.solver

    @property
    def ransac(self) -> RansacParams:
        return self.pipeline.ransac


# ---------------------------------------------------------------------------
# key space: section -> (container kind, key -> attribute)

_RUN_SECTIONS: dict[str, dict[str, str]] = {
    "paths": {
        "depth_dir": "depth_dir",
        "rgb_dir": "rgb_dir",
        "association_file": "association_file",
        "keypoint_file": "keypoint_file",
        "embedding_file": "embedding_file",
        "groundtruth_file": "groundtruth_file",
        "output_dir": "output_dir",
    },
    "camera": {k: k for k in ("fx", "fy", "cx", "cy", "depth_scale")},
    "run": {"descriptor": "descriptor", "seed": "seed"},
    "sweep": {"ratios": "sweep_ratios", "pairs": "sweep_pairs"},
}

_NESTED_SECTIONS: dict[str, tuple[str, type]] = {
    "extraction": ("extraction", ExtractionParams),
    "scene": ("scene", SceneSpec),
    "pipeline": ("pipeline", PipelineParams),
    "solver": ("pipeline.solver", SolverOptions),
    "ransac": ("pipeline.ransac", RansacParams),
}

# solver/ransac are surfaced as their own sections, not pipeline.* keys
_SECTION_SKIP_FIELDS = {"pipeline": {"solver", "ransac"}}


def _section_fields(section: str, cls: type) -> list[str]:
    skip = _SECTION_SKIP_FIELDS.get(section, set())
    return sorted(f.name for f in fields(cls) if f.name not in skip)


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_typed(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if text == "" or text.lower() == "none":
            return None
        return _parse_typed(text, inner[0], key)
    if origin is tuple:
        items = [t for t in text.split(",") if t.strip() != ""]
        if len(args) == 2 and args[1] is Ellipsis:
            elem = args[0]
            return tuple(_parse_typed(t.strip(), elem, key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values")
        return tuple(_parse_typed(t.strip(), a, key) for t, a in zip(items, args))
    if hint is bool:
        low = text.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}: expected true or false, got {text!r}")
    if hint is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if hint is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if hint is str:
        return text
    raise ConfigError(f"{key}: unsupported value type {hint!r}")


def _hints(cls: type) -> dict[str, object]:
    return typing.get_type_hints(cls)


def config_to_text(config: RunConfig) -> str:
    """Canonical serialization: sections and keys sorted, floats via repr."""
    lines: list[str] = []
    for section in sorted(set(_RUN_SECTIONS) | set(_NESTED_SECTIONS)):
        if section in _RUN_SECTIONS:
            for key in sorted(_RUN_SECTIONS[section]):
                attr = _RUN_SECTIONS[section][key]
                lines.append(f"{section}.{key} = {_format_value(getattr(config, attr))}")
        else:
            path, cls = _NESTED_SECTIONS[section]
            obj = config
            for part in path.split("."):
                obj = getattr(obj, part)
            for name in _section_fields(section, cls):
                lines.append(f"{section}.{name} = {_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def _parse_lines(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def _build_config(raw: dict[str, str]) -> RunConfig:
    run_kwargs: dict[str, object] = {}
    nested_kwargs: dict[str, dict[str, object]] = {s: {} for s in _NESTED_SECTIONS}
    run_hints = _hints(RunConfig)
    nested_hints = {s: _hints(cls) for s, (_, cls) in _NESTED_SECTIONS.items()}

    for key, value in raw.items():
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"key {key!r} is missing its section prefix")
        if section in _RUN_SECTIONS:
            if name not in _RUN_SECTIONS[section]:
                raise ConfigError(f"unknown config key {key!r}")
            attr = _RUN_SECTIONS[section][name]
            run_kwargs[attr] = _parse_typed(value, run_hints[attr], key)
        elif section in _NESTED_SECTIONS:
            _, cls = _NESTED_SECTIONS[section]
            if name not in _section_fields(section, cls):
                raise ConfigError(f"unknown config key {key!r}")
            nested_kwargs[section][name] = _parse_typed(value, nested_hints[section][name], key)
        else:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")

    try:
        extraction = ExtractionParams(**nested_kwargs["extraction"])
        scene = SceneSpec(**nested_kwargs["scene"])
        solver = SolverOptions(**nested_kwargs["solver"])
        ransac = RansacParams(**nested_kwargs["ransac"])
        pipeline = PipelineParams(solver=solver, ransac=ransac, **nested_kwargs["pipeline"])
        return RunConfig(
            extraction=extraction, pipeline=pipeline, scene=scene, **run_kwargs
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown keys and malformed values raise ConfigError."""
    return _build_config(_parse_lines(text))


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def apply_overrides(config: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of an existing config."""
    if not assignments:
        return config
    raw = _parse_lines(config_to_text(config))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        # validate the key against the known key space before merging
        probe = dict(raw)
        if key not in probe:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value.strip()
    return _build_config(raw)


def with_paths(config: RunConfig, **paths: str) -> RunConfig:
    """Convenience for programmatic path rewiring (used by synth)."""
    return replace(config, **paths)
