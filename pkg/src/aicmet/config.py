"""Run configuration: one JSON document with five sections.

::

    {"simulation": {...}, "model": {...}, "trainer": {...}, "eval": {...}, "io": {...}}

Every section and key is optional; missing values take their defaults. Unknown
keys and out-of-range values are rejected with the offending field named.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .inference import EvalProtocolConfig
from .model import ModelConfig
from .ou import PriorConfig
from .simulate import SimulationConfig, SizeLaw
from .training import TrainerConfig

CONFIG_FILENAME = "resolved_config.json"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class IOConfig:
    seed: int = 0
    out_dir: str = "out"
    snapshot: str | None = None
    studies: str | None = None
    n_studies: int = 1
    include_latents: bool = False
    n_virtual: int | None = None

    def validate(self) -> "IOConfig":
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.n_studies < 1:
            raise ValueError(f"n_studies must be >= 1, got {self.n_studies}")
        if self.n_virtual is not None and self.n_virtual < 1:
            raise ValueError(f"n_virtual must be >= 1, got {self.n_virtual}")
        return self


@dataclass
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalProtocolConfig = field(default_factory=EvalProtocolConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        sim = asdict(self.simulation)
        prior = sim.pop("prior")
        size = sim.pop("size_law")
        return {
            "simulation": {**prior, **sim, "schedule_sizes": list(size["values"]),
                           "schedule_probs": None if size["probs"] is None else list(size["probs"])},
            "model": asdict(self.model),
            "trainer": asdict(self.trainer),
            "eval": asdict(self.eval),
            "io": asdict(self.io),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(cls, doc: dict, section: str):
    if not isinstance(doc, dict):
        raise ConfigError(section, "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(section, str(err)) from None


def _validated(obj, section: str):
    try:
        return obj.validate()
    except (ValueError, TypeError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(section, str(err)) from None


_PRIOR_KEYS = {f.name for f in fields(PriorConfig)}


def _simulation(doc: dict) -> SimulationConfig:
    if not isinstance(doc, dict):
        raise ConfigError("simulation", "expected an object")
    prior_doc = {k: v for k, v in doc.items() if k in _PRIOR_KEYS}
    rest = {k: v for k, v in doc.items() if k not in _PRIOR_KEYS}
    sizes = rest.pop("schedule_sizes", None)
    probs = rest.pop("schedule_probs", None)
    prior = _validated(_section(PriorConfig, prior_doc, "simulation"), "simulation")
    law = SizeLaw() if sizes is None else SizeLaw(tuple(int(v) for v in sizes),
                                                  None if probs is None else tuple(float(p) for p in probs))
    if law.probs is not None:
        if len(law.probs) != len(law.values) or any(p < 0 for p in law.probs) \
                or not math.isclose(sum(law.probs), 1.0, abs_tol=1e-9):
            raise ConfigError("simulation.schedule_probs", "must be non-negative, sum to 1 and match schedule_sizes")
    for key in rest:
        if key not in ("grid_steps", "max_rate_step"):
            raise ConfigError(f"simulation.{key}", "unknown key")
    sim = SimulationConfig(prior=prior, size_law=law, **rest)
    return _validated(sim, "simulation")


def parse_config(document: str | bytes | dict | None = None) -> RunConfig:
    """Parse and validate a run configuration; ``None`` or ``{}`` gives the defaults."""
    if document is None:
        doc = {}
    elif isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document) if document.strip() else {}
        except json.JSONDecodeError as err:
            raise ConfigError("$", f"malformed JSON: {err}") from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise ConfigError("$", "expected a JSON object")
    sections = ("simulation", "model", "trainer", "eval", "io")
    for key in doc:
        if key not in sections:
            raise ConfigError(key, "unknown section")
    io = _validated(_section(IOConfig, doc.get("io", {}), "io"), "io")
    trainer_doc = dict(doc.get("trainer", {})) if isinstance(doc.get("trainer", {}), dict) else doc["trainer"]
    if isinstance(trainer_doc, dict):
        trainer_doc.setdefault("seed", io.seed)
    return RunConfig(
        simulation=_simulation(doc.get("simulation", {})),
        model=_validated(_section(ModelConfig, doc.get("model", {}), "model"), "model"),
        trainer=_validated(_section(TrainerConfig, trainer_doc, "trainer"), "trainer"),
        eval=_validated(_section(EvalProtocolConfig, doc.get("eval", {}), "eval"), "eval"),
        io=io,
    )


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def echo_config(cfg: RunConfig, out_dir) -> Path:
    """Write the resolved configuration (seed included) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILENAME
    path.write_text(cfg.to_json(), encoding="utf-8")
    return path
