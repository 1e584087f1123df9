"""Pipeline configuration: one YAML file holding every tunable constant."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import yaml

from .bench import MatchConfig
from .errors import ConfigError
from .lse_core import DEFAULT_EXPONENTS, LseParams
from .metrics import VsdParams
from .primitives import benchmark_models
from .robust_pose import RansacConfig

BUILTIN_PREFIX = "builtin:"


@dataclass(frozen=True)
class ModelEntry:
    id: str
    path: str
    symmetric: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved configuration.

    ``cm_per_unit`` is the single unit setting: it scales model units into the
    centimetres the embedding is defined in and into the millimetres of the
    VSD tolerance.
    """

    models: tuple
    cm_per_unit: float = 0.1
    sample_count: int = 20000
    lse: LseParams = field(default_factory=lambda: LseParams(unit_scale_to_cm=0.1))
    index_dir: str = "indices"
    ransac: RansacConfig = field(default_factory=RansacConfig)
    matching: MatchConfig = field(default_factory=MatchConfig)
    vsd: VsdParams = field(default_factory=VsdParams)
    output_dir: str = "out"
    seed: int = 0
    base_dir: str = "."

    def path(self, p):
        if p.startswith(BUILTIN_PREFIX) or os.path.isabs(p):
            return p
        return os.path.normpath(os.path.join(self.base_dir, p))

    def index_path(self, model_id):
        return os.path.join(self.path(self.index_dir), f"{model_id}.lsei")

    def with_seed(self, seed):
        return replace(self, seed=int(seed), ransac=replace(self.ransac, seed=int(seed)))


def _section_defaults(cls, skip=()):
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


def default_dict():
    """The full default configuration as plain data (what ``lsepose config`` writes)."""
    lse = _section_defaults(LseParams, skip=("exponents", "unit_scale_to_cm"))
    lse["exponents"] = [list(e) for e in DEFAULT_EXPONENTS]
    vsd = _section_defaults(VsdParams, skip=("mm_per_unit",))
    return {
        "models": [{"id": mid, "path": BUILTIN_PREFIX + mid, "symmetric": sym}
                   for mid, (_, sym) in sorted(benchmark_models().items())],
        "cm_per_unit": 0.1,
        "sample_count": 20000,
        "index_dir": "indices",
        "output_dir": "out",
        "seed": 0,
        "lse": lse,
        "ransac": _section_defaults(RansacConfig, skip=("seed",)),
        "matching": _section_defaults(MatchConfig),
        "vsd": vsd,
    }


SCHEMA_DOC = """\
# lsepose pipeline configuration
# models:        list of {id, path, symmetric}; path is a PLY/OBJ file relative to this
#                file, or builtin:<name> for the bundled bracket/cross/wedge models
# cm_per_unit:   centimetres per model unit (0.1 for millimetre models)
# sample_count:  surface samples per model index
# index_dir:     where `embed` writes and `estimate` reads <model id>.lsei files
# seed:          master seed (surface sampling, RANSAC, scene synthesis)
# lse:           radius (cm), sigma (cm), degeneracy_gap, exponents
# ransac:        n_iter, sample_min, sample_max, min_score, inlier_threshold (px),
#                alpha, candidate_rule (rank|uniform), score_gate (inliers|all),
#                lo_rounds, gate_pixels
# matching:      k, suppression_radius (model units, null = LSE radius), threshold
# vsd:           tau (mm), threshold, min_visibility
"""


def default_yaml():
    return SCHEMA_DOC + yaml.safe_dump(default_dict(), sort_keys=False)


def _build(cls, data, section, **extra):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)} - set(extra)
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from None


TOP_KEYS = {"models", "cm_per_unit", "sample_count", "index_dir", "output_dir", "seed",
            "lse", "ransac", "matching", "vsd"}


def config_from_dict(d, base_dir="."):
    merged = default_dict()
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    merged.update(d)
    try:
        cm = float(merged["cm_per_unit"])
        seed = int(merged["seed"])
        count = int(merged["sample_count"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scalar setting: {e}") from None
    if not cm > 0:
        raise ConfigError("cm_per_unit must be > 0")
    if count < 1:
        raise ConfigError("sample_count must be >= 1")
    lse_d = dict(merged["lse"] or {})
    if "exponents" in lse_d:
        try:
            lse_d["exponents"] = tuple(tuple(int(v) for v in e) for e in lse_d["exponents"])
        except (TypeError, ValueError):
            raise ConfigError("lse.exponents must be a list of integer triples") from None
    lse = _build(LseParams, lse_d, "lse", unit_scale_to_cm=cm)
    ransac = _build(RansacConfig, merged["ransac"], "ransac", seed=seed)
    matching = _build(MatchConfig, merged["matching"], "matching")
    vsd = _build(VsdParams, merged["vsd"], "vsd", mm_per_unit=10.0 * cm)
    models = []
    if not isinstance(merged["models"], list) or not merged["models"]:
        raise ConfigError("models must be a non-empty list")
    for m in merged["models"]:
        e = _build(ModelEntry, m, "models")
        models.append(ModelEntry(str(e.id), str(e.path), bool(e.symmetric)))
    if len({m.id for m in models}) != len(models):
        raise ConfigError("model ids must be unique")
    return PipelineConfig(tuple(models), cm, count, lse, str(merged["index_dir"]), ransac, matching, vsd,
                          str(merged["output_dir"]), seed, base_dir)


def load_config(path=None):
    """Read a YAML config; ``None`` gives the defaults relative to the working directory."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return config_from_dict(data or {}, os.path.dirname(os.path.abspath(path)))


def check_paths(cfg):
    """Every model path must resolve before a run starts."""
    builtin = benchmark_models()
    for m in cfg.models:
        p = cfg.path(m.path)
        if p.startswith(BUILTIN_PREFIX):
            if p[len(BUILTIN_PREFIX):] not in builtin:
                raise ConfigError(f"model {m.id!r}: unknown builtin {p!r}")
        elif not os.path.isfile(p):
            raise ConfigError(f"model {m.id!r}: file not found: {p}")
