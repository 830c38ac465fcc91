"""JSON and CSV serialisation of studies.

Document layout (schema version 1)::

    {"schema_version": 1, "study_id": "...",
     "individuals": [{"dose": {"amount": 100.0, "route": "oral"},
                      "times": [...], "obs": [...], "mask": [...]}],
     "latents": {...}}            # simulation-only, optional

Masked observations may be ``null``. Floats are written with ``repr`` so a
round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from .ou import StudyHyperParams
from .pk import DoseEvent, Route
from .simulate import IndividualRecord, StudyLatents, StudyRecord

SCHEMA_VERSION = 1


class StudyParseError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class StudyValidationError(ValueError):
    def __init__(self, individual: int, message: str):
        self.individual = individual
        super().__init__(f"individual {individual}: {message}")


class SchemaVersionError(ValueError):
    pass


def _num(v: float):
    return None if not math.isfinite(v) else float(v)


def study_to_dict(s: StudyRecord, include_latents: bool = False) -> dict:
    if not s.individuals:
        raise ValueError("cannot serialise a study without individuals")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "study_id": s.study_id,
        "individuals": [
            {
                "dose": {"amount": float(d.dose.amount), "route": d.dose.route.value},
                "times": [float(t) for t in d.times],
                "obs": [_num(y) for y in d.obs],
                "mask": [bool(m) for m in d.mask],
            }
            for d in s.individuals
        ],
    }
    if include_latents and (s.hyper is not None or s.latents is not None):
        lat: dict = {}
        if s.hyper is not None:
            lat["hyper"] = s.hyper.to_dict()
        if s.latents is not None:
            lat["grid"] = s.latents.grid.tolist()
            lat["mu"] = s.latents.mu.tolist()
            lat["theta"] = s.latents.theta.tolist()
            lat["states"] = s.latents.states.tolist()
        doc["latents"] = lat
    return doc


def write_study(s: StudyRecord, include_latents: bool = False) -> str:
    return json.dumps(study_to_dict(s, include_latents), separators=(",", ":"))


def _require(obj, key, path, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise StudyParseError(path, f"missing field {key!r}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise StudyParseError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _floats(values, path: str, allow_null: bool = False) -> np.ndarray:
    out = []
    for j, v in enumerate(values):
        if v is None and allow_null:
            out.append(math.nan)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out.append(float(v))
        else:
            raise StudyParseError(f"{path}[{j}]", "expected a number")
    return np.array(out, dtype=float)


def read_study(document: str | bytes | dict) -> StudyRecord:
    doc = json.loads(document) if isinstance(document, (str, bytes)) else document
    if not isinstance(doc, dict):
        raise StudyParseError("$", "expected a JSON object")
    version = _require(doc, "schema_version", "$", None)
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    study_id = str(doc.get("study_id", "study"))
    raw = _require(doc, "individuals", "$", list)
    if not raw:
        raise StudyParseError("$.individuals", "a study needs at least one individual")
    individuals = []
    for i, item in enumerate(raw):
        path = f"$.individuals[{i}]"
        dose = _require(item, "dose", path, dict)
        amount = _require(dose, "amount", f"{path}.dose", (int, float))
        route = _require(dose, "route", f"{path}.dose", str)
        if route not in ("oral", "iv"):
            raise StudyParseError(f"{path}.dose.route", f"expected 'oral' or 'iv', got {route!r}")
        times = _floats(_require(item, "times", path, list), f"{path}.times")
        obs = _floats(_require(item, "obs", path, list), f"{path}.obs", allow_null=True)
        mask_raw = item.get("mask")
        if mask_raw is None:
            mask = np.isfinite(obs)
        else:
            if not isinstance(mask_raw, list) or not all(isinstance(m, bool) for m in mask_raw):
                raise StudyParseError(f"{path}.mask", "expected a list of booleans")
            mask = np.array(mask_raw, dtype=bool)
        if not (times.size == obs.size == mask.size):
            raise StudyValidationError(i, "times, obs and mask lengths differ")
        if np.any(np.diff(times) <= 0):
            raise StudyValidationError(i, "times must be strictly increasing")
        if np.any(~np.isfinite(obs[mask])) or np.any(obs[mask] <= 0):
            raise StudyValidationError(i, "unmasked observations must be positive numbers")
        try:
            individuals.append(IndividualRecord(DoseEvent(float(amount), Route.parse(route)), times, obs, mask))
        except ValueError as err:
            raise StudyValidationError(i, str(err)) from None
    s = StudyRecord(individuals, study_id)
    lat = doc.get("latents")
    if lat:
        if "hyper" in lat:
            s.hyper = StudyHyperParams.from_dict(lat["hyper"])
        if "grid" in lat:
            s.latents = StudyLatents(np.array(lat["grid"], dtype=float), np.array(lat["mu"], dtype=float),
                                     np.array(lat["theta"], dtype=float), np.array(lat["states"], dtype=float))
    return s


def save_study(s: StudyRecord, path, include_latents: bool = False) -> Path:
    path = Path(path)
    path.write_text(write_study(s, include_latents) + "\n", encoding="utf-8")
    return path


def save_studies_ndjson(studies: Iterable[StudyRecord], path, include_latents: bool = False) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in studies:
            fh.write(write_study(s, include_latents) + "\n")
    return path


def load_studies(path) -> list[StudyRecord]:
    """Read a single-study ``.json`` file or a newline-delimited ``.jsonl`` file."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".jsonl"):
        return [read_study(line) for line in text.splitlines() if line.strip()]
    return [read_study(text)]


def observations_csv(studies: Iterable[StudyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study_id", "individual", "time", "concentration"])
    for s in studies:
        for i, d in enumerate(s.individuals):
            for t, y in zip(*d.valid()):
                w.writerow([s.study_id, i, repr(float(t)), repr(float(y))])
    return buf.getvalue()
