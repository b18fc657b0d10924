# Relational mAP and important-relation recall on a hand-built image.
from topicsg.core import Box, box_iou
from topicsg.evaluation import (
    GroundTruth, GroundTruthRelation, PredictedRelation, Prediction, image_level_recall, important_recall_at_k,
    meteor_lite, relational_map,
)

man, dog = Box(20, 20, 10, 10), Box(60, 20, 10, 10)
cat, mat = Box(20, 80, 10, 10), Box(60, 80, 10, 10)
nudge = lambda b: Box(b.cx + 4, b.cy, b.w, b.h)
far = Box(300, 300, 10, 10)

truth = [GroundTruth("img", [
    GroundTruthRelation(man, dog, "man near dog".split(), important=True),
    GroundTruthRelation(cat, mat, "cat on mat".split()),
])]
preds = [Prediction("img", [
    PredictedRelation(man, dog, "man near dog".split(), 0.9),
    PredictedRelation(nudge(cat), nudge(mat), "cat on mat".split(), 0.8),
    PredictedRelation(far, far, "cat on mat".split(), 0.7),
])]

print(f"IoU of the nudged boxes: {box_iou(cat, nudge(cat)):.3f}  (passes 0.2/0.3/0.4, fails 0.5/0.6)")
print(f"mAP over 6 x 5 thresholds: {relational_map(preds, truth):.3f}  (expected 0.8)")
print(f"R@1 {important_recall_at_k(preds, truth, 1):.2f}   R-ns@1 {important_recall_at_k(preds, truth, 1, False):.2f}")
print(f"image-level recall: {image_level_recall(preds, truth):.2f}")
print(f"METEOR-lite('dog sits on a mat', 'red man near dog') = "
      f"{meteor_lite('dog sits on a mat'.split(), 'red man near dog'.split()):.4f}")
