"""Captioning and relational-captioning metrics.

METEOR here is an exact-match unigram variant ("METEOR-lite"): no stemming,
synonyms or paraphrase tables. It is only ever used against fixed
thresholds, so a consistent monotone scorer is what matters.

Relational mAP follows the dense-captioning protocol: one AP per
(language threshold, IoU threshold) cell, averaged over the 30 cells.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Box, SchemaError, box_iou, detokenize

log = logging.getLogger(__name__)

LANGUAGE_THRESHOLDS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
IOU_THRESHOLDS = (0.2, 0.3, 0.4, 0.5, 0.6)
RECALL_IOU = 0.5
RECALL_KS = (20, 50, 100)


@dataclass
class PredictedRelation:
    subject_box: Box
    object_box: Box
    words: list[str]
    score: float
    pair: tuple[int, int] | None = None


@dataclass
class GroundTruthRelation:
    subject_box: Box
    object_box: Box
    words: list[str]
    important: bool = False


@dataclass
class Prediction:
    image_id: str
    relations: list[PredictedRelation]
    caption: list[str] = field(default_factory=list)

    def __post_init__(self):
        # stable sort keeps the original index as tie-breaker
        self.relations = sorted(self.relations, key=lambda r: -r.score)


@dataclass
class GroundTruth:
    image_id: str
    relations: list[GroundTruthRelation]
    caption: list[str] = field(default_factory=list)


def meteor_lite(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not candidate or not reference:
        log.debug("meteor_lite: empty %s", "candidate" if not candidate else "reference")
        return 0.0
    alignment = _align(list(candidate), list(reference))
    matches = len(alignment)
    if matches == 0:
        return 0.0
    P = matches / len(candidate)
    R = matches / len(reference)
    f_mean = 10 * P * R / (R + 9 * P)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(alignment, alignment[1:]):
        if not (c1 == c0 + 1 and r1 == r0 + 1):
            chunks += 1
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact-match one-to-one alignment, greedy left to right, preferring to extend the current chunk."""
    used = [False] * len(ref)
    out: list[tuple[int, int]] = []
    for i, w in enumerate(cand):
        options = [j for j, r in enumerate(ref) if r == w and not used[j]]
        if not options:
            continue
        pick = options[0]
        if out and out[-1][0] == i - 1 and out[-1][1] + 1 in options:
            pick = out[-1][1] + 1
        else:
            # start a chunk where the next candidate word would also continue it
            for j in options:
                if i + 1 < len(cand) and j + 1 < len(ref) and ref[j + 1] == cand[i + 1] and not used[j + 1]:
                    pick = j
                    break
        used[pick] = True
        out.append((i, pick))
    return out


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence, n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights and brevity penalty.

    ``references[k]`` is either one word list or a list of word lists.
    """
    refs = [[list(r)] if r and isinstance(r[0], str) else [list(x) for x in r] for r in references]
    if len(refs) != len(candidates):
        raise ValueError("candidates and references differ in length")
    clipped = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, rs in zip(candidates, refs):
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((len(r) for r in rs), key=lambda L: (abs(L - len(cand)), L))
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            max_ref = Counter()
            for r in rs:
                max_ref |= _ngrams(r, k)
            clipped[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or min(clipped) == 0:
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def _pair_iou(p: PredictedRelation, g: GroundTruthRelation) -> float:
    return min(box_iou(p.subject_box, g.subject_box), box_iou(p.object_box, g.object_box))


def _index(items, what: str) -> dict:
    out = {}
    for it in items:
        if it.image_id in out:
            raise ValueError(f"duplicate {what} for image {it.image_id}")
        out[it.image_id] = it
    return out


def relational_map(predictions: Sequence[Prediction], ground_truth: Sequence[GroundTruth]) -> float:
    """Mean AP over the language x IoU threshold grid.

    Predictions from all images are pooled and swept in descending score
    order (ties by image id, then rank within image, so image order is irrelevant). Each prediction
    claims the unclaimed eligible ground truth with the highest pair IoU
    (lowest index on ties); eligibility needs subject and object IoU and
    METEOR all strictly above the cell's thresholds.
    """
    gts = _index(ground_truth, "ground truth")
    num_gt = sum(len(g.relations) for g in ground_truth)
    if num_gt == 0:
        raise ValueError("empty ground truth")
    preds = []
    for p in predictions:
        if p.image_id not in gts:
            raise ValueError(f"prediction for unknown image {p.image_id}")
        for rank, r in enumerate(p.relations):
            preds.append((r, p.image_id, rank))
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][0].score, preds[k][1], preds[k][2]))
    if not preds:
        return 0.0
    # per prediction: overlap and METEOR against each GT of its image
    ious, mets = [], []
    for k in order:
        r, img, _ = preds[k]
        g = gts[img].relations
        ious.append(np.array([_pair_iou(r, x) for x in g]))
        mets.append(np.array([meteor_lite(r.words, x.words) for x in g]))
    images = [preds[k][1] for k in order]
    aps = []
    for lt in LANGUAGE_THRESHOLDS:
        for it in IOU_THRESHOLDS:
            claimed = {img: np.zeros(len(gts[img].relations), dtype=bool) for img in gts}
            tp = np.zeros(len(order))
            for rank, img in enumerate(images):
                ok = (ious[rank] > it) & (mets[rank] > lt) & ~claimed[img]
                if ok.any():
                    cand = np.where(ok, ious[rank], -np.inf)
                    best = int(np.argmax(cand))
                    claimed[img][best] = True
                    tp[rank] = 1
            aps.append(_average_precision(tp, num_gt))
    return float(np.mean(aps))


def _average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Finite-sum area: ``sum_k (R_k - R_{k-1}) P_k`` over the ranked list."""
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def important_recall_at_k(predictions: Sequence[Prediction], ground_truth: Sequence[GroundTruth], K: int,
                          with_language: bool = True) -> float:
    """Recall of important relations within each image's top-K predictions, averaged over images.

    Images without important relations are skipped. With language, a
    relation counts at threshold ``t`` when a top-K prediction has both IoUs
    above 0.5 and METEOR above ``t``; the result is the mean over thresholds.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    preds = _index(predictions, "prediction")
    per_image = []
    for g in ground_truth:
        important = [r for r in g.relations if r.important]
        if not important:
            continue
        top = preds[g.image_id].relations[:K] if g.image_id in preds else []
        if with_language:
            hits = np.zeros(len(LANGUAGE_THRESHOLDS))
            for gt in important:
                best = max((meteor_lite(p.words, gt.words) for p in top if _pair_iou(p, gt) > RECALL_IOU),
                           default=None)
                if best is not None:
                    hits += np.array([best > t for t in LANGUAGE_THRESHOLDS], dtype=float)
            per_image.append(float(np.mean(hits / len(important))))
        else:
            hit = sum(any(_pair_iou(p, gt) > RECALL_IOU for p in top) for gt in important)
            per_image.append(hit / len(important))
    return float(np.mean(per_image)) if per_image else 0.0


def image_level_recall(predictions: Sequence[Prediction], ground_truth: Sequence[GroundTruth]) -> float:
    """Bag-of-captions recall, boxes ignored, averaged over thresholds then images."""
    preds = _index(predictions, "prediction")
    per_image = []
    for g in ground_truth:
        if not g.relations:
            continue
        bag = preds[g.image_id].relations if g.image_id in preds else []
        hits = np.zeros(len(LANGUAGE_THRESHOLDS))
        for gt in g.relations:
            best = max((meteor_lite(p.words, gt.words) for p in bag), default=None)
            if best is not None:
                hits += np.array([best > t for t in LANGUAGE_THRESHOLDS], dtype=float)
        per_image.append(float(np.mean(hits / len(g.relations))))
    return float(np.mean(per_image)) if per_image else 0.0


@dataclass
class MetricReport:
    mAP: float
    img_level_recall: float
    recall_20: float
    recall_50: float
    recall_100: float
    recall_ns_20: float
    recall_ns_50: float
    recall_ns_100: float
    mean: float
    bleu_1: float
    bleu_4: float
    meteor: float

    RECALL_FIELDS = ("recall_20", "recall_ns_20", "recall_50", "recall_ns_50", "recall_100", "recall_ns_100")

    def to_json(self) -> str:
        """Values x100, two decimals, as in results tables."""
        return json.dumps({k: round(100 * v, 2) for k, v in asdict(self).items()}, indent=1) + "\n"


def evaluate(predictions: Sequence[Prediction], ground_truth: Sequence[GroundTruth]) -> MetricReport:
    preds = _index(predictions, "prediction")
    empty = sum(not rel.words for p in predictions for rel in p.relations)
    if empty:
        log.warning("%d predicted relational captions are empty and score 0 against every reference", empty)
    r = {}
    for K in RECALL_KS:
        r[f"recall_{K}"] = important_recall_at_k(predictions, ground_truth, K, True)
        r[f"recall_ns_{K}"] = important_recall_at_k(predictions, ground_truth, K, False)
    mean = float(np.mean([r[k] for k in MetricReport.RECALL_FIELDS]))
    with_caption = [g for g in ground_truth if g.caption and g.image_id in preds]
    cands = [preds[g.image_id].caption for g in with_caption]
    refs = [g.caption for g in with_caption]
    met = float(np.mean([meteor_lite(c, ref) for c, ref in zip(cands, refs)])) if cands else 0.0
    return MetricReport(
        mAP=relational_map(predictions, ground_truth),
        img_level_recall=image_level_recall(predictions, ground_truth),
        mean=mean,
        bleu_1=bleu(cands, refs, 1) if cands else 0.0,
        bleu_4=bleu(cands, refs, 4) if cands else 0.0,
        meteor=met,
        **r,
    )


def _box(v) -> Box:
    return Box(*map(float, v))


def write_predictions(predictions: Sequence[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            rec = {
                "image_id": p.image_id,
                "caption": " ".join(p.caption),
                "relations": [
                    {"sub_box": r.subject_box.to_list(), "obj_box": r.object_box.to_list(),
                     "words": " ".join(r.words), "score": r.score}
                    | ({"pair": list(r.pair)} if r.pair is not None else {})
                    for r in p.relations
                ],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rels = [PredictedRelation(_box(r["sub_box"]), _box(r["obj_box"]), r["words"].split(), float(r["score"]),
                                          tuple(r["pair"]) if "pair" in r else None)
                        for r in d["relations"]]
                out.append(Prediction(d["image_id"], rels, d.get("caption", "").split()))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise SchemaError(f"{path}:{lineno}: bad prediction record ({e!r})") from None
    return out


def ground_truth_from_records(records, vocab) -> list[GroundTruth]:
    boxes = lambda rec: {o.id: o.box for o in rec.objects}
    out = []
    for rec in records:
        b = boxes(rec)
        rels = [GroundTruthRelation(b[r.subject_id], b[r.object_id], detokenize(r.words, vocab).split(), bool(f))
                for r, f in zip(rec.relations, rec.important_flags)]
        out.append(GroundTruth(rec.image_id, rels, detokenize(rec.image_caption, vocab).split()))
    return out
