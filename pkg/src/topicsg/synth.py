"""Deterministic desk-scale scene generator.

Each scene gets a handful of objects with unique categories, template
relational captions, and an image caption that mentions a chosen subset of
the objects. A relation is flagged important when both of its endpoint
nouns occur in the image caption, which mirrors aligning caption-parsed
relations with annotated ones by subject/object identity.

Which objects get mentioned is not random noise: a per-category prominence
prior plus a per-object salience (also visible as box size) decide it, so the
signal is learnable from features and category embeddings.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Box, EOS_IDX, RelationalCaption, SceneObject, SceneRecord, Vocabulary, box_iou, save_dataset
from .features import ConfigError

NOUNS = (
    "man", "woman", "dog", "cat", "horse", "car", "bus", "tree", "table", "chair", "bike", "kite",
    "boat", "train", "bird", "lamp", "sign", "door", "window", "plate", "bench", "umbrella", "bag", "ball",
)
PREDICATES = ("above", "below", "beside", "near", "on", "under", "behind", "holding", "watching", "with")
SEMANTIC_PREDICATES = ("behind", "holding", "watching", "with")
ATTRIBUTES = ("red", "blue", "green", "white", "black", "small", "large", "old", "wooden", "shiny")
FUNCTION_WORDS = {"a": "det", "of": "prep", "and": "conj", "photo": "noun", "scene": "noun"}


@dataclass(frozen=True)
class VocabSpec:
    nouns: tuple[str, ...] = NOUNS
    predicates: tuple[str, ...] = PREDICATES
    attributes: tuple[str, ...] = ATTRIBUTES
    function_words: dict = field(default_factory=lambda: dict(FUNCTION_WORDS))

    def labels(self) -> dict[str, str]:
        pos = dict(self.function_words)
        pos.update({w: "noun" for w in self.nouns})
        pos.update({w: "verb" for w in self.predicates})
        pos.update({w: "adj" for w in self.attributes})
        return pos

    def vocabulary(self) -> Vocabulary:
        tokens = list(self.function_words) + list(self.nouns) + list(self.predicates) + list(self.attributes)
        return Vocabulary(tokens, self.labels())


@dataclass(frozen=True)
class GenConfig:
    num_scenes: int = 500
    num_val: int = 50
    num_test: int = 100
    n_min: int = 8
    n_max: int = 14
    rel_min: int = 6
    rel_max: int = 20
    mention_min: int = 2
    mention_max: int = 3
    attr_prob: float = 0.3
    semantic_pred_prob: float = 0.2
    canvas: tuple[int, int] = (640, 480)
    seed: int = 0
    vocab: VocabSpec = field(default_factory=VocabSpec)

    def __post_init__(self):
        if self.n_min < 2:
            raise ConfigError("n_min must be >= 2")
        if self.n_min > self.n_max or self.rel_min > self.rel_max or self.mention_min > self.mention_max:
            raise ConfigError("every (min, max) range must be non-empty")
        if self.mention_min < 0 or self.rel_min < 0:
            raise ConfigError("counts must be non-negative")
        if self.mention_max > self.n_max:
            raise ConfigError("mention_max cannot exceed n_max")
        if len(self.vocab.nouns) < self.n_max:
            raise ConfigError(f"vocabulary has {len(self.vocab.nouns)} category nouns; "
                              f"{self.n_max} needed for unique categories per scene")
        if not 0 <= self.attr_prob <= 1:
            raise ConfigError("attr_prob must lie in [0, 1]")
        overlap = set(self.vocab.nouns) & (set(self.vocab.predicates) | set(self.vocab.attributes) | set(self.vocab.function_words))
        if overlap:
            raise ConfigError(f"tokens with two roles: {sorted(overlap)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["vocab"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["vocab"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "vocab" in d:
            v = d["vocab"]
            d["vocab"] = VocabSpec(tuple(v["nouns"]), tuple(v["predicates"]), tuple(v["attributes"]),
                                   dict(v["function_words"]))
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        return cls(**d)


def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng([seed] + [zlib.crc32(str(k).encode()) for k in keys])


def category_prior(config: GenConfig) -> dict[str, float]:
    """Fixed prominence prior per category noun in [0, 1]."""
    vals = _rng(config.seed, "category-prior").permutation(len(config.vocab.nouns)) / max(len(config.vocab.nouns) - 1, 1)
    return dict(zip(config.vocab.nouns, vals.tolist()))


def _predicate(sub: Box, obj: Box, rng: np.random.Generator, config: GenConfig) -> str:
    if rng.random() < config.semantic_pred_prob:
        return SEMANTIC_PREDICATES[rng.integers(len(SEMANTIC_PREDICATES))]
    dx, dy = obj.cx - sub.cx, obj.cy - sub.cy
    if box_iou(sub, obj) > 0:
        return "on" if dy > 0 else "under"
    if abs(dy) > abs(dx):
        return "above" if dy > 0 else "below"
    scale = (sub.w * sub.h) ** 0.5 + (obj.w * obj.h) ** 0.5
    return "near" if (dx * dx + dy * dy) ** 0.5 < scale else "beside"


def generate_scene(config: GenConfig, index: int, split: str = "train") -> SceneRecord:
    vocab = config.vocab.vocabulary()
    rng = _rng(config.seed, split, index)
    n = int(rng.integers(config.n_min, config.n_max + 1))
    nouns = [config.vocab.nouns[k] for k in rng.choice(len(config.vocab.nouns), size=n, replace=False)]
    prior = category_prior(config)
    W, H = config.canvas

    objects, salience = [], []
    for oid, noun in enumerate(nouns):
        u = float(rng.random())
        side = 40.0 + 140.0 * u
        aspect = float(np.exp(rng.uniform(-0.5, 0.5)))
        w, h = side * aspect ** 0.5, side / aspect ** 0.5
        cx, cy = rng.uniform(w / 2, W - w / 2), rng.uniform(h / 2, H - h / 2)
        attrs = ()
        if rng.random() < config.attr_prob:
            attrs = (vocab.index(config.vocab.attributes[rng.integers(len(config.vocab.attributes))]),)
        objects.append(SceneObject(oid, Box(float(cx), float(cy), float(w), float(h)), vocab.index(noun), attrs))
        salience.append(prior[noun] + u + 0.25 * float(rng.standard_normal()))

    k = min(int(rng.integers(config.mention_min, config.mention_max + 1)), n)
    mentioned = [int(i) for i in np.argsort(-np.asarray(salience), kind="stable")[:k]]

    planted = [(mentioned[0], j) for j in mentioned[1:]]
    candidates = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in planted]
    m = min(int(rng.integers(config.rel_min, config.rel_max + 1)), n * (n - 1))
    extra = max(m - len(planted), 0)
    picked = [candidates[c] for c in rng.choice(len(candidates), size=extra, replace=False)] if extra else []
    pairs = sorted(planted + picked)

    def phrase(o: SceneObject) -> list[str]:
        return [vocab.token(a) for a in o.attribute_words] + [vocab.token(o.category)]

    preds = {p: _predicate(objects[p[0]].box, objects[p[1]].box, rng, config) for p in pairs}
    relations = []
    for i, j in pairs:
        words = phrase(objects[i]) + [preds[(i, j)]] + phrase(objects[j])
        relations.append(RelationalCaption(i, j, tuple(vocab.index(w) for w in words) + (EOS_IDX,)))

    if k == 0:
        caption = ["a", "photo", "of", "a", "scene"]
    elif k == 1:
        caption = ["a", "photo", "of", "a", nouns[mentioned[0]]]
    else:
        caption = ["a", nouns[mentioned[0]], preds[planted[0]], "a", nouns[mentioned[1]]]
        for j in mentioned[2:]:
            caption += ["and", "a", nouns[j]]
    cap_ids = tuple(vocab.index(w) for w in caption) + (EOS_IDX,)
    flags = importance_flags(cap_ids, relations, objects)
    return SceneRecord(f"{split}-{index:05d}", tuple(objects), tuple(relations), cap_ids, flags)


def importance_flags(caption_ids, relations, objects) -> tuple[bool, ...]:
    """Relation is important iff both endpoint category tokens occur in the caption."""
    present = set(caption_ids)
    cat = {o.id: o.category for o in objects}
    return tuple(cat[r.subject_id] in present and cat[r.object_id] in present for r in relations)


def pos_labels(vocab: Vocabulary):
    """Noun-mask lookup: returns ``mask(tokens) -> list[bool]`` (True at noun positions)."""
    labels = {}
    for t in vocab.tokens:
        if vocab.pos.get(t) is None:
            raise ValueError(f"token {t!r} has no part-of-speech label")
        labels[vocab.index(t)] = vocab.pos[t] == "noun"

    def mask(tokens) -> list[bool]:
        try:
            return [labels[int(t)] for t in tokens]
        except KeyError as e:
            raise ValueError(f"token index {e.args[0]} has no part-of-speech label") from None

    return mask


def generate_split(config: GenConfig, split: str) -> list[SceneRecord]:
    count = {"train": config.num_scenes, "val": config.num_val, "test": config.num_test}[split]
    return [generate_scene(config, i, split) for i in range(count)]


def write_dataset(config: GenConfig, out_dir: str | Path) -> dict[str, list[SceneRecord]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = config.vocab.vocabulary()
    vocab.save(out_dir / "vocab.json")
    splits = {}
    for split in ("train", "val", "test"):
        splits[split] = generate_split(config, split)
        save_dataset(splits[split], out_dir / f"{split}.jsonl", vocab)
    return splits
