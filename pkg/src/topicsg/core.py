"""Shared domain types: vocabulary, boxes, scene records and the JSON-lines dataset format."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
BOS_IDX, EOS_IDX, PAD_IDX, UNK_IDX = 0, 1, 2, 3
RESERVED = (BOS, EOS, PAD, UNK)

_STRIP = re.compile(r"[.,!?;:]")


class SchemaError(ValueError):
    """A dataset file does not follow the expected record layout."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form (pixels)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def box_iou(a: Box, b: Box) -> float:
    if a == b:
        return 1.0
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


class Vocabulary:
    """Ordered token list with the four reserved tokens at indices 0-3.

    An optional part-of-speech label per token is carried along so the noun
    mask used by attention pooling can be derived from the vocabulary alone.
    """

    def __init__(self, tokens: Iterable[str], pos: dict[str, str] | None = None):
        toks = list(RESERVED)
        for t in tokens:
            if t in RESERVED:
                continue
            if t in toks:
                raise ValueError(f"duplicate token {t!r}")
            toks.append(t)
        self.tokens: tuple[str, ...] = tuple(toks)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.pos: dict[str, str] = {t: "special" for t in RESERVED}
        if pos:
            self.pos.update(pos)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.pos == other.pos

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_IDX)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        entries = [{"token": t, "pos": self.pos.get(t)} for t in self.tokens]
        Path(path).write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        if [e["token"] for e in entries[:4]] != list(RESERVED):
            raise SchemaError(f"{path}: reserved tokens must occupy indices 0-3")
        pos = {e["token"]: e["pos"] for e in entries if e.get("pos") is not None}
        return cls([e["token"] for e in entries], pos)


def normalize(text: str) -> list[str]:
    return _STRIP.sub(" ", text.lower()).split()


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    words = normalize(text)
    if not words:
        raise ValueError("empty caption")
    return [vocab.index(w) for w in words] + [EOS_IDX]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize`: reserved tokens are dropped, text stops at EOS."""
    out = []
    for i in ids:
        if i == EOS_IDX:
            break
        if i in (BOS_IDX, PAD_IDX):
            continue
        out.append(vocab.token(i))
    return " ".join(out)


def strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(EOS_IDX)] if EOS_IDX in ids else ids


@dataclass(frozen=True)
class SceneObject:
    id: int
    box: Box
    category: int
    attribute_words: tuple[int, ...] = ()


@dataclass(frozen=True)
class RelationalCaption:
    subject_id: int
    object_id: int
    words: tuple[int, ...]

    def __post_init__(self):
        if self.subject_id == self.object_id:
            raise ValueError("relation subject and object must differ")
        if not self.words or self.words[-1] != EOS_IDX:
            raise ValueError("relational caption must end with EOS")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.subject_id, self.object_id)


@dataclass(frozen=True)
class TrainingScene:
    """Everything a weakly supervised trainer may see: no importance labels."""

    image_id: str
    objects: tuple[SceneObject, ...]
    relations: tuple[RelationalCaption, ...]
    image_caption: tuple[int, ...]

    def object(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(f"{self.image_id}: no object with id {obj_id}")

    @property
    def object_ids(self) -> list[int]:
        return [o.id for o in self.objects]


@dataclass(frozen=True)
class SceneRecord(TrainingScene):
    important_flags: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.image_id}: duplicate object ids")
        for r in self.relations:
            if r.subject_id not in ids or r.object_id not in ids:
                raise ValueError(f"{self.image_id}: relation {r.pair} references a missing object")
        if not self.image_caption or self.image_caption[-1] != EOS_IDX:
            raise ValueError(f"{self.image_id}: image caption must be non-empty and EOS-terminated")
        if len(self.important_flags) != len(self.relations):
            raise ValueError(f"{self.image_id}: important_flags length must equal the relation count")

    def for_training(self) -> TrainingScene:
        return TrainingScene(self.image_id, self.objects, self.relations, self.image_caption)


def _record_to_json(rec: SceneRecord, vocab: Vocabulary) -> dict:
    return {
        "image_id": rec.image_id,
        "objects": [
            {
                "id": o.id,
                "box": o.box.to_list(),
                "category": vocab.token(o.category),
                "attributes": [vocab.token(a) for a in o.attribute_words],
            }
            for o in rec.objects
        ],
        "relations": [
            {
                "sub": r.subject_id,
                "obj": r.object_id,
                "words": detokenize(r.words, vocab),
                "important": bool(f),
            }
            for r, f in zip(rec.relations, rec.important_flags)
        ],
        "caption": detokenize(rec.image_caption, vocab),
    }


def _require(d: dict, key: str, kind, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing field '{key}'")
    val = d[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise SchemaError(f"{where}: field '{key}' has wrong type {type(val).__name__}")
    return val


def _record_from_json(d: dict, vocab: Vocabulary, where: str) -> SceneRecord:
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: record must be a JSON object")
    image_id = _require(d, "image_id", str, where)
    where = f"{where} (image_id={image_id})"
    objects = []
    for k, o in enumerate(_require(d, "objects", list, where)):
        ow = f"{where} objects[{k}]"
        box = _require(o, "box", list, ow)
        if len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
            raise SchemaError(f"{ow}: field 'box' must be 4 numbers [cx, cy, w, h]")
        cat = _require(o, "category", str, ow)
        if cat not in vocab:
            raise SchemaError(f"{ow}: field 'category' {cat!r} not in vocabulary")
        try:
            b = Box(*map(float, box))
        except ValueError as e:
            raise SchemaError(f"{ow}: field 'box' {e}") from None
        attrs = tuple(vocab.index(a) for a in _require(o, "attributes", list, ow))
        objects.append(SceneObject(_require(o, "id", int, ow), b, vocab.index(cat), attrs))
    relations, flags = [], []
    for k, r in enumerate(_require(d, "relations", list, where)):
        rw = f"{where} relations[{k}]"
        try:
            rel = RelationalCaption(
                _require(r, "sub", int, rw), _require(r, "obj", int, rw),
                tuple(tokenize(_require(r, "words", str, rw), vocab)),
            )
        except ValueError as e:
            if isinstance(e, SchemaError):
                raise
            raise SchemaError(f"{rw}: field 'words' {e}") from None
        relations.append(rel)
        flags.append(_require(r, "important", bool, rw))
    try:
        caption = tuple(tokenize(_require(d, "caption", str, where), vocab))
        return SceneRecord(image_id, tuple(objects), tuple(relations), caption, tuple(flags))
    except ValueError as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(f"{where}: {e}") from None


def save_dataset(records: Sequence[SceneRecord], path: str | Path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_json(rec, vocab), separators=(",", ":")) + "\n")


def load_dataset(path: str | Path, vocab: Vocabulary | None = None) -> list[SceneRecord]:
    """Read a JSON-lines dataset; the vocabulary defaults to ``vocab.json`` beside the file."""
    path = Path(path)
    if vocab is None:
        vocab = Vocabulary.load(path.parent / "vocab.json")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            records.append(_record_from_json(d, vocab, f"{path}:{lineno}"))
    return records
