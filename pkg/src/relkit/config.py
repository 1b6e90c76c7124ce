"""Experiment configuration: TOML file with one section per concern.

Paths are resolved relative to the config file. Seed precedence is
command-line flag, then the RELKIT_SEED environment variable, then the file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .autodiff import OptimizerConfig
from .commonsense import DEFAULT_MAX_PATH_EDGES, DEFAULT_PATH_THRESHOLD, TranSEConfig
from .encoder import IRTConfig
from .errors import ConfigError

EVAL_SETUPS = ("PredCls", "SGCls")


@dataclass
class PathsConfig:
    annotations: Path
    vocab: Path
    test_annotations: Path | None = None
    features: Path | None = None
    word_vectors: Path | None = None
    concept_triples: Path | None = None
    merge_map: Path | None = None


@dataclass
class DataConfig:
    feature_dim: int = 16
    one_shot: bool = True
    one_shot_shuffle: bool = False
    freq_epsilon: float = 1e-3


@dataclass
class KnowledgeConfig:
    word_dim: int = 50
    use_relational: bool = True
    use_commonsense: bool = True
    max_path_edges: int = DEFAULT_MAX_PATH_EDGES
    path_threshold: float = DEFAULT_PATH_THRESHOLD


@dataclass
class TrainConfig:
    refine_labels: bool = True


@dataclass
class EvalConfig:
    setups: list[str] = field(default_factory=lambda: list(EVAL_SETUPS))


@dataclass
class ExperimentConfig:
    seed: int
    paths: PathsConfig
    data: DataConfig
    irt: IRTConfig
    knowledge: KnowledgeConfig
    transe: TranSEConfig
    optimizer: OptimizerConfig
    train: TrainConfig
    eval: EvalConfig
    raw_text: str = ""


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a table")
    return dict(value)


def _build(cls, raw: dict, section: str):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown key")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
        raw = tomllib.loads(text)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    if "seed" not in raw:
        raise ConfigError("seed: required")
    seed = raw["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")

    paths_raw = _section(raw, "paths")
    for key in ("annotations", "vocab"):
        if key not in paths_raw:
            raise ConfigError(f"paths.{key}: required")
    base = path.parent
    resolved = {}
    for key, value in paths_raw.items():
        if key not in PathsConfig.__dataclass_fields__:
            raise ConfigError(f"paths.{key}: unknown key")
        resolved[key] = (base / value).resolve()
    paths = PathsConfig(**resolved)

    config = ExperimentConfig(
        seed=seed,
        paths=paths,
        data=_build(DataConfig, _section(raw, "data"), "data"),
        irt=_build(IRTConfig, _section(raw, "irt"), "irt"),
        knowledge=_build(KnowledgeConfig, _section(raw, "knowledge"), "knowledge"),
        transe=_build(TranSEConfig, {**_section(raw, "transe"), "seed": seed}, "transe"),
        optimizer=_build(OptimizerConfig, _section(raw, "optimizer"), "optimizer"),
        train=_build(TrainConfig, _section(raw, "train"), "train"),
        eval=_build(EvalConfig, _section(raw, "eval"), "eval"),
        raw_text=text,
    )
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    """Referenced files must exist for every enabled component."""
    paths = config.paths

    def need(field_name: str, why: str):
        value = getattr(paths, field_name)
        if value is None:
            raise ConfigError(f"paths.{field_name}: required {why}")
        if not Path(value).is_file():
            raise ConfigError(f"paths.{field_name}: file not found: {value}")

    need("annotations", "always")
    need("vocab", "always")
    for optional in ("test_annotations", "features", "word_vectors"):
        value = getattr(paths, optional)
        if value is not None and not Path(value).is_file():
            raise ConfigError(f"paths.{optional}: file not found: {value}")
    if config.knowledge.use_commonsense:
        need("concept_triples", "when knowledge.use_commonsense is true")
        need("merge_map", "when knowledge.use_commonsense is true")
    for setup in config.eval.setups:
        if setup == "SGDet":
            continue  # rejected later with its dedicated message
        if setup not in EVAL_SETUPS:
            raise ConfigError(f"eval.setups: unknown setup {setup!r}")
    if config.data.feature_dim < 1:
        raise ConfigError("data.feature_dim: must be at least 1")
    if not 0 < config.knowledge.path_threshold < 1:
        raise ConfigError("knowledge.path_threshold: must lie in (0, 1)")
