"""Core value types: normalized boxes, annotation records, instruction triplets.

Coordinates are stored as double precision fractions of the image size in
center format (cx, cy, w, h). All types here are plain immutable dataclasses
and can be shared freely across threads.

JSONL record schema (one object per line):

    {"image_id": str, "source_id": str, "task": str, "category": str,
     "text": str | null, "boxes": [[cx, cy, w, h], ...], "split": str}

Two optional fields extend the schema where the seven fixed fields cannot
carry the annotation faithfully: ``findings`` (grounded-report records only,
a list of ``{"text": str, "boxes": [[...], ...]}`` objects preserving the
phrase-to-box association) and ``meta`` (a flat object for per-record flags
such as label provenance). Both are omitted when empty, so records that do
not need them serialize with exactly the seven fixed field names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import EmptyAfterClamp, FormatError

#: Tolerance for the unit-square containment invariant after clamping.
EPSILON = 1e-9

#: Maximum absolute per-coordinate error introduced by 2-decimal text output.
TEXT_ROUNDTRIP_TOL = 0.005


class Task(str, Enum):
    """Training task of a record.

    The three ``AGRG_*`` members are the subtasks of anatomy-guided report
    generation; they share one data source and are sampled uniformly within
    it. ``DETECTION`` marks raw detector annotations that ingestion converts
    into phrase-grounding and pseudo-report records, so it never renders.
    """

    PG = "pg"
    GRG = "grg"
    AGRG_LOCATE = "agrg_locate"
    AGRG_DESCRIBE = "agrg_describe"
    AGRG_BOTH = "agrg_both"
    DETECTION = "detection"

    @property
    def family(self) -> "TaskFamily":
        if self in _AGRG_TASKS:
            return TaskFamily.AGRG
        return TaskFamily(self.value)


_AGRG_TASKS = frozenset({Task.AGRG_LOCATE, Task.AGRG_DESCRIBE, Task.AGRG_BOTH})

#: Subtask ordering used wherever the three AGRG subtasks are enumerated.
AGRG_SUBTASKS = (Task.AGRG_LOCATE, Task.AGRG_DESCRIBE, Task.AGRG_BOTH)


class TaskFamily(str, Enum):
    """Task granularity at which data sources are identified."""

    PG = "pg"
    GRG = "grg"
    AGRG = "agrg"
    DETECTION = "detection"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in normalized center format.

    Width and height must be strictly positive. The box is not required to
    lie inside the unit square on construction; :func:`clamp_box` enforces
    containment where the pipeline needs it.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        """Return the (x1, y1, x2, y2) corner form."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "NormBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "NormBox":
        vals = list(values)
        if len(vals) != 4:
            raise ValueError(f"a box needs exactly 4 numbers, got {len(vals)}")
        return cls(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))


def box_corners(box: NormBox) -> tuple[float, float, float, float]:
    """Corner form of a box; inverse of :meth:`NormBox.from_corners`."""
    return box.corners()


def clamp_box(box: NormBox) -> NormBox:
    """Intersect a box with the unit square.

    Boxes already inside (within EPSILON) are returned unchanged, which makes
    the operation exactly idempotent. A box entirely outside the unit square
    raises :class:`EmptyAfterClamp`.
    """
    x1, y1, x2, y2 = box.corners()
    if x1 >= -EPSILON and y1 >= -EPSILON and x2 <= 1 + EPSILON and y2 <= 1 + EPSILON:
        return box
    nx1, ny1 = max(x1, 0.0), max(y1, 0.0)
    nx2, ny2 = min(x2, 1.0), min(y2, 1.0)
    if nx2 - nx1 <= 0 or ny2 - ny1 <= 0:
        raise EmptyAfterClamp(f"box {box.to_list()} lies outside the unit square")
    return NormBox.from_corners(nx1, ny1, nx2, ny2)


@dataclass(frozen=True)
class Finding:
    """One grounded-report finding: a phrase and the boxes attached to it.

    Text-only findings (no localizable region) carry an empty box tuple.
    """

    text: str
    boxes: tuple[NormBox, ...] = ()


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotation in the common schema all pipeline stages exchange.

    ``findings`` is populated for GRG records only and preserves the
    phrase-to-box association a flat (text, boxes) pair cannot express.
    ``meta`` carries flat auxiliary flags (for example ``label`` provenance
    from sentence-level grounding data, or ``has_abnormality`` and
    ``has_device`` flags used for benchmark stratification).
    """

    image_id: str
    source_id: str
    task: Task
    category: str
    text: str | None = None
    boxes: tuple[NormBox, ...] = ()
    split: Split = Split.TRAIN
    findings: tuple[Finding, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        """Check the per-task structural invariants."""
        if self.task is Task.AGRG_LOCATE and not self.boxes:
            raise ValueError("agrg_locate records need at least one box")
        if self.task is Task.AGRG_DESCRIBE and not self.text:
            raise ValueError("agrg_describe records need a description")
        if self.task is Task.AGRG_BOTH and not (self.boxes and self.text):
            raise ValueError("agrg_both records need boxes and a description")
        if self.task is Task.GRG and not self.findings:
            raise ValueError("grg records need at least one finding")


@dataclass(frozen=True)
class InstructionInstance:
    """A rendered (instruction, response) pair plus its structured source.

    The response is always regenerated from ``structured`` by the template
    renderer; nothing in the pipeline edits response strings in place.
    """

    image_id: str
    source_id: str
    task: Task
    category: str
    instruction: str
    response: str
    structured: AnnotationRecord


@dataclass(frozen=True)
class DataSourceId:
    """Identity of a data source: a dataset name plus its supervision task.

    Sources are identified at task-family granularity because the three AGRG
    subtasks share one source and one inter-level probability.
    """

    name: str
    task: TaskFamily

    @property
    def key(self) -> str:
        return f"{self.name}:{self.task.value}"

    @classmethod
    def parse(cls, key: str) -> "DataSourceId":
        name, sep, fam = key.rpartition(":")
        if not sep or not name:
            raise ValueError(f"source key must look like 'name:task', got {key!r}")
        return cls(name, TaskFamily(fam))


# ---------------------------------------------------------------------------
# JSONL serialization


def _boxes_to_json(boxes: Iterable[NormBox]) -> list[list[float]]:
    return [b.to_list() for b in boxes]


def _boxes_from_json(values: Any, line: int) -> tuple[NormBox, ...]:
    if not isinstance(values, list):
        raise FormatError(line, "boxes must be a list of 4-number arrays")
    out = []
    for v in values:
        if not isinstance(v, list) or len(v) != 4:
            raise FormatError(line, f"each box must be an array of 4 numbers, got {v!r}")
        try:
            out.append(NormBox.from_list(v))
        except (TypeError, ValueError) as exc:
            raise FormatError(line, f"bad box {v!r}: {exc}") from exc
    return tuple(out)


def record_to_json(rec: AnnotationRecord) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "image_id": rec.image_id,
        "source_id": rec.source_id,
        "task": rec.task.value,
        "category": rec.category,
        "text": rec.text,
        "boxes": _boxes_to_json(rec.boxes),
        "split": rec.split.value,
    }
    if rec.findings:
        obj["findings"] = [
            {"text": f.text, "boxes": _boxes_to_json(f.boxes)} for f in rec.findings
        ]
    if rec.meta:
        obj["meta"] = dict(rec.meta)
    return obj


def record_from_json(obj: Mapping[str, Any], line: int = 0) -> AnnotationRecord:
    if not isinstance(obj, Mapping):
        raise FormatError(line, "each line must hold a JSON object")
    for name in ("image_id", "source_id", "task", "category", "split"):
        if name not in obj:
            raise FormatError(line, f"missing field {name!r}")
    try:
        task = Task(obj["task"])
    except ValueError as exc:
        raise FormatError(line, f"unknown task {obj['task']!r}") from exc
    try:
        split = Split(obj["split"])
    except ValueError as exc:
        raise FormatError(line, f"unknown split {obj['split']!r}") from exc
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise FormatError(line, "text must be a string or null")
    findings = tuple(
        Finding(f["text"], _boxes_from_json(f.get("boxes", []), line))
        for f in obj.get("findings", [])
    )
    meta = obj.get("meta", {})
    if not isinstance(meta, Mapping):
        raise FormatError(line, "meta must be an object")
    return AnnotationRecord(
        image_id=str(obj["image_id"]),
        source_id=str(obj["source_id"]),
        task=task,
        category=str(obj["category"]),
        text=text,
        boxes=_boxes_from_json(obj.get("boxes", []), line),
        split=split,
        findings=findings,
        meta=dict(meta),
    )


def load_records_jsonl(path: str | Path) -> list[AnnotationRecord]:
    """Load annotation records from a JSONL file, strictly."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(line_no, f"invalid JSON: {exc}") from exc
            records.append(record_from_json(obj, line_no))
    return records


def dump_records_jsonl(path: str | Path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")


def instance_to_json(inst: InstructionInstance) -> dict[str, Any]:
    return {
        "image_id": inst.image_id,
        "source_id": inst.source_id,
        "task": inst.task.value,
        "category": inst.category,
        "instruction": inst.instruction,
        "response": inst.response,
        "structured": record_to_json(inst.structured),
    }


def instance_from_json(obj: Mapping[str, Any], line: int = 0) -> InstructionInstance:
    for name in ("image_id", "source_id", "task", "category", "instruction", "response", "structured"):
        if name not in obj:
            raise FormatError(line, f"missing field {name!r}")
    return InstructionInstance(
        image_id=str(obj["image_id"]),
        source_id=str(obj["source_id"]),
        task=Task(obj["task"]),
        category=str(obj["category"]),
        instruction=str(obj["instruction"]),
        response=str(obj["response"]),
        structured=record_from_json(obj["structured"], line),
    )


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield (line_no, parsed object) pairs from a JSONL file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(line_no, f"invalid JSON: {exc}") from exc
