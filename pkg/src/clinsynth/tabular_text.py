"""Rule-based conversion of clinical table rows into short English descriptions.

Missing or implausible attributes are dropped, never imputed: the rendered text
only mentions attributes that are both present and valid under the schema.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

KINDS = ("categorical", "numeric", "boolean")
FALLBACK_TEXT = "A patient."
SUBJECT_COLUMN = "subject_id"

_TRUE_TOKENS = {"true", "yes", "1", "y", "t"}
_FALSE_TOKENS = {"false", "no", "0", "n", "f"}


class SchemaError(ValueError):
    pass


class UnknownAttributeError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown attribute {name!r} (not in schema)")
        self.name = name


class RecordError(ValueError):
    """A per-row failure, carrying the row index."""

    def __init__(self, row: int, cause: Exception):
        super().__init__(f"row {row}: {cause}")
        self.row = row
        self.cause = cause


@dataclass(frozen=True)
class AttributeSchema:
    name: str
    kind: str
    template: str
    values: tuple[str, ...] | None = None  # categorical; None = free text
    range: tuple[float, float] | None = None  # numeric, inclusive
    renderings: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.template.count("{v}") != 1:
            raise SchemaError(f"{self.name}: template needs exactly one {{v}} placeholder")
        if self.kind == "numeric":
            if self.range is None or len(self.range) != 2 or self.range[0] > self.range[1]:
                raise SchemaError(f"{self.name}: numeric attribute needs range [lo, hi]")
        if self.kind == "boolean":
            for key in self.renderings:
                if key not in ("true", "false"):
                    raise SchemaError(f"{self.name}: boolean renderings use keys 'true'/'false'")
        if self.values is not None:
            unknown = set(self.renderings) - set(self.values)
            if unknown:
                raise SchemaError(f"{self.name}: renderings for values outside the valid set: {sorted(unknown)}")

    def coerce(self, raw: Any) -> Any | None:
        """Return the canonical valid value, or None if missing or invalid."""
        if raw is None:
            return None
        if isinstance(raw, str):
            raw = raw.strip()
            if raw == "":
                return None
        if self.kind == "numeric":
            if isinstance(raw, bool):
                return None
            try:
                value = float(raw)
            except (TypeError, ValueError):
                return None
            if not math.isfinite(value):
                return None
            lo, hi = self.range
            if not lo <= value <= hi:
                return None
            return int(value) if value.is_integer() else value
        if self.kind == "boolean":
            if isinstance(raw, bool):
                return raw
            token = str(raw).lower()
            if token in _TRUE_TOKENS:
                return True
            if token in _FALSE_TOKENS:
                return False
            return None
        value = str(raw)
        if self.values is not None and value not in self.values:
            return None
        return value

    def render(self, value: Any) -> str:
        if self.kind == "boolean":
            key = "true" if value else "false"
            shown = self.renderings.get(key, key)
        elif self.kind == "numeric":
            shown = str(value)
        else:
            shown = self.renderings.get(value, value)
        return self.template.replace("{v}", shown)


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeSchema, ...]
    fallback: str = FALLBACK_TEXT
    version: int = 1

    def __post_init__(self):
        if not self.attributes:
            raise SchemaError("schema must contain at least one attribute")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in schema: {names}")
        if not self.fallback:
            raise SchemaError("fallback text must be non-empty")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def __getitem__(self, name: str) -> AttributeSchema:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        raise UnknownAttributeError(name)

    def __iter__(self):
        return iter(self.attributes)

    def __len__(self):
        return len(self.attributes)


@dataclass(frozen=True)
class ClinicalRecord:
    subject_id: str
    values: Mapping[str, Any] = field(default_factory=dict)

    def with_value(self, name: str, value: Any) -> "ClinicalRecord":
        return ClinicalRecord(self.subject_id, {**self.values, name: value})


@dataclass(frozen=True)
class TextDescription:
    text: str
    rendered_attributes: tuple[str, ...]
    subject_id: str = ""


def _as_schema(schema: Schema | Sequence[AttributeSchema]) -> Schema:
    if isinstance(schema, Schema):
        return schema
    return Schema(tuple(schema))


def schema_from_dict(config: Mapping[str, Any]) -> Schema:
    attrs = []
    for block in config.get("attributes", []):
        block = dict(block)
        try:
            name = block.pop("name")
            kind = block.pop("kind")
            template = block.pop("template")
        except KeyError as exc:
            raise SchemaError(f"attribute block missing key {exc}") from None
        values = block.pop("values", None)
        rng = block.pop("range", None)
        renderings = block.pop("renderings", {}) or {}
        if block:
            raise SchemaError(f"{name}: unknown keys {sorted(block)}")
        attrs.append(
            AttributeSchema(
                name=str(name),
                kind=str(kind),
                template=str(template),
                values=tuple(str(v) for v in values) if values is not None else None,
                range=(float(rng[0]), float(rng[1])) if rng is not None else None,
                renderings={str(k).lower() if kind == "boolean" else str(k): str(v) for k, v in renderings.items()},
            )
        )
    return Schema(
        tuple(attrs),
        fallback=str(config.get("fallback", FALLBACK_TEXT)),
        version=int(config.get("version", 1)),
    )


def schema_to_dict(schema: Schema) -> dict:
    blocks = []
    for a in schema:
        block = {"name": a.name, "kind": a.kind, "template": a.template}
        if a.values is not None:
            block["values"] = list(a.values)
        if a.range is not None:
            block["range"] = list(a.range)
        if a.renderings:
            block["renderings"] = dict(a.renderings)
        blocks.append(block)
    return {"version": schema.version, "fallback": schema.fallback, "attributes": blocks}


def load_schema(path: str | os.PathLike | None = None) -> Schema:
    """Load a schema file; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("clinsynth.data").joinpath("default_schema.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return schema_from_dict(yaml.safe_load(text))


def default_schema() -> Schema:
    return load_schema(None)


def validate_record(record: ClinicalRecord, schema: Schema | Sequence[AttributeSchema]) -> ClinicalRecord:
    """Drop missing and out-of-rule values; keep valid ones in canonical form.

    Raises UnknownAttributeError for keys the schema does not define.
    """
    schema = _as_schema(schema)
    names = set(schema.names)
    for key in record.values:
        if key not in names:
            raise UnknownAttributeError(key)
    clean = {}
    for attr in schema:
        if attr.name in record.values:
            value = attr.coerce(record.values[attr.name])
            if value is not None:
                clean[attr.name] = value
    return ClinicalRecord(record.subject_id, clean)


def render_record(record: ClinicalRecord, schema: Schema | Sequence[AttributeSchema]) -> TextDescription:
    schema = _as_schema(schema)
    sentences, rendered = [], []
    for attr in schema:
        if attr.name not in record.values:
            continue
        value = record.values[attr.name]
        if value is None:
            continue
        sentences.append(attr.render(value))
        rendered.append(attr.name)
    text = " ".join(sentences) if sentences else schema.fallback
    return TextDescription(text=text, rendered_attributes=tuple(rendered), subject_id=record.subject_id)


def describe(record: ClinicalRecord, schema: Schema | Sequence[AttributeSchema]) -> TextDescription:
    """Validate then render."""
    return render_record(validate_record(record, schema), schema)


def render_table(records: Iterable[ClinicalRecord], schema: Schema | Sequence[AttributeSchema]) -> list[TextDescription]:
    schema = _as_schema(schema)
    out = []
    for i, record in enumerate(records):
        try:
            out.append(describe(record, schema))
        except Exception as exc:
            raise RecordError(i, exc) from exc
    return out


def read_csv(path: str | os.PathLike, schema: Schema | None = None, strict: bool = False) -> list[ClinicalRecord]:
    """Read a clinical table. Empty cells become absent values.

    With ``strict`` every column other than ``subject_id`` must be a schema
    attribute; otherwise unknown columns are ignored.
    """
    schema = schema or default_schema()
    names = set(schema.names)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        if SUBJECT_COLUMN not in columns:
            raise SchemaError(f"CSV has no {SUBJECT_COLUMN!r} column")
        unknown = [c for c in columns if c != SUBJECT_COLUMN and c not in names]
        if strict and unknown:
            raise UnknownAttributeError(unknown[0])
        for row in reader:
            values = {k: v for k, v in row.items() if k in names and v is not None and v.strip() != ""}
            records.append(ClinicalRecord(row[SUBJECT_COLUMN], values))
    return records


def write_descriptions(descriptions: Sequence[TextDescription], out_path: str | os.PathLike) -> Path:
    """Write one text per line plus a ``.manifest.json`` sidecar; returns the sidecar path."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for d in descriptions:
            fh.write(d.text.replace("\n", " ") + "\n")
    manifest = {d.subject_id: list(d.rendered_attributes) for d in descriptions}
    sidecar = out_path.with_name(out_path.name + ".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return sidecar
