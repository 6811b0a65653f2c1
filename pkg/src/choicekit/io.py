"""Dataset manifests and result files.

A manifest is a small JSON document describing a long-format dataset on
disk::

    {
      "schema": 1,
      "main_csv": "main.csv",
      "roles": {"record": "record_id", "item": "car", "choice": "purchase",
                "user": "consumer_id", "session": "session_id"},
      "encoding": "first-appearance",
      "observables": {
        "columns": {"user": ["gender", "income"], "itemsession": ["price"]},
        "tables": {"speed": {"variation": "item", "path": "speed.csv"}}
      }
    }

Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from choicekit.dataset import VARIATIONS
from choicekit.errors import IngestError
from choicekit.ingest import ENCODING_MODES, ColumnRoles, LabelEncoding, from_long_format, to_long_format

SCHEMA_VERSION = 1
ROLE_KEYS = ("record", "item", "choice", "user", "session")


class ManifestError(IngestError):
    """The manifest is malformed or references missing files."""


@dataclass
class Manifest:
    main_csv: str
    roles: ColumnRoles
    encoding: str = "first-appearance"
    columns: dict[str, list[str]] = field(default_factory=dict)
    tables: dict[str, dict] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> dict:
        roles = {k: getattr(self.roles, k) for k in ROLE_KEYS if getattr(self.roles, k)}
        return {
            "schema": SCHEMA_VERSION,
            "main_csv": str(self.main_csv),
            "roles": roles,
            "encoding": self.encoding,
            "observables": {"columns": self.columns, "tables": self.tables},
        }


def parse_manifest(obj: dict, base_dir=".") -> Manifest:
    if not isinstance(obj, dict):
        raise ManifestError("manifest must be a JSON object")
    if obj.get("schema") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema {obj.get('schema')!r}; expected 1")
    for key in ("main_csv", "roles"):
        if key not in obj:
            raise ManifestError(f"manifest lacks {key!r}")
    roles = obj["roles"]
    unknown = set(roles) - set(ROLE_KEYS)
    if unknown:
        raise ManifestError(f"unknown column roles {sorted(unknown)}")
    for req in ("record", "item", "choice"):
        if not roles.get(req):
            raise ManifestError(f"manifest roles lack {req!r}")
    encoding = obj.get("encoding")
    if encoding not in ENCODING_MODES:
        raise ManifestError(f"manifest 'encoding' must be one of {list(ENCODING_MODES)}")
    obs = obj.get("observables", {}) or {}
    columns = {k: list(v) for k, v in (obs.get("columns") or {}).items()}
    tables = dict(obs.get("tables") or {})
    for var in columns:
        if var not in VARIATIONS:
            raise ManifestError(f"unknown observable variation {var!r} in 'columns'")
    for name, spec in tables.items():
        if not isinstance(spec, dict) or spec.get("variation") not in VARIATIONS or "path" not in spec:
            raise ManifestError(f"table {name!r} needs 'variation' (one of {VARIATIONS}) and 'path'")
    m = Manifest(obj["main_csv"], ColumnRoles(**roles), encoding, columns, tables, Path(base_dir))
    missing = [str(m.resolve(p)) for p in [m.main_csv] + [t["path"] for t in tables.values()]
               if not m.resolve(p).is_file()]
    if missing:
        raise ManifestError(f"manifest references missing files: {missing}")
    return m


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(obj, path.parent)


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from None


def load_dataset(manifest: Manifest | str | os.PathLike):
    """Ingest the dataset a manifest describes; returns ``(dataset, encodings)``."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    main = _read_csv(manifest.resolve(manifest.main_csv))
    tables: dict[str, dict[str, pd.DataFrame]] = {}
    for name, spec in manifest.tables.items():
        tables.setdefault(spec["variation"], {})[name] = _read_csv(manifest.resolve(spec["path"]))
    return from_long_format(main, manifest.roles, manifest.columns, tables, manifest.encoding)


def write_dataset_dir(dataset, out_dir, encodings=None, encoding="sorted") -> Path:
    """Write ``dataset`` as keys-only ``main.csv`` plus one CSV per observable.

    Returns the path of the written ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    main, roles, tables = to_long_format(dataset, encodings)
    main.to_csv(out / "main.csv", index=False)
    manifest_tables = {}
    for var, named in tables.items():
        for name, frame in named.items():
            frame.to_csv(out / f"{name}.csv", index=False)
            manifest_tables[name] = {"variation": var, "path": f"{name}.csv"}
    manifest = Manifest("main.csv", roles, encoding, {}, manifest_tables, out)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


COEFFICIENT_FIELDS = ("coefficient", "level", "entity_index", "dim", "estimate", "std_error")


def write_coefficients(rows, csv_path, json_path=None):
    """Coefficient rows as CSV (and optionally JSON); floats in round-trip form."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEFFICIENT_FIELDS)
        for r in rows:
            se = "" if r["std_error"] is None else repr(r["std_error"])
            w.writerow([r["coefficient"], r["level"], r["entity_index"], r["dim"],
                        repr(r["estimate"]), se])
    if json_path is not None:
        write_json(json_path, [{k: r[k] for k in COEFFICIENT_FIELDS} for r in rows])


def encodings_to_json(encodings) -> dict:
    return {k: v.to_json() for k, v in encodings.items() if k != "record"}


def encodings_from_json(obj) -> dict:
    return {k: LabelEncoding.from_json(v) for k, v in obj.items()}
