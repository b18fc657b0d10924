# From first-order caption attention to a distribution over object pairs.
# A small captioner is fit to a handful of scenes so the attention means something.
import numpy as np
import torch

from topicsg.captioner import decode_image_caption
from topicsg.distill import assemble_second_order, pool_attention
from topicsg.features import ModelConfig, scene_features
from topicsg.synth import GenConfig, generate_split, pos_labels
from topicsg.trainer import TrainConfig, relation_pairs, train_stage1

torch.set_num_threads(1)
gen = GenConfig(num_scenes=120, n_min=4, n_max=6, seed=1)
vocab = gen.vocab.vocabulary()
scenes = generate_split(gen, "train")
mc = ModelConfig(d_v=32, d_l=24, d_h=32, d_a=16, d_e=16, d_u=32, d_s=16, d_sem=8)
feats = scene_features(scenes, mc)
captioner, _ = train_stage1(scenes, feats, len(vocab), mc, TrainConfig(epochs_stage1=12))

rec, fs = scenes[0], feats[0]
trace = decode_image_caption(captioner, fs, "teacher_forced", words=rec.image_caption).trace
words = [vocab.token(t) for t in trace.words]
np.set_printoptions(precision=2, suppress=True)
print("caption:", " ".join(words))
print("alpha (objects x words):")
for oid, row in zip(trace.attended_ids, trace.alpha):
    print(f"  {vocab.token(rec.object(oid).category):10s}", row)

pairs = relation_pairs(rec)
for mode, mask in [("max", None), ("mean", None), ("max", pos_labels(vocab)(trace.words))]:
    pooled = pool_attention(trace, mode, mask)
    _, beta = assemble_second_order(pooled, pairs)
    best = pairs[int(np.argmax(beta))]
    label = mode + (" + noun mask" if mask else "")
    print(f"{label:15s} gamma={pooled.gamma}  top pair {best} beta={beta.max():.3f}")
print("important pairs:", [r.pair for r, f in zip(rec.relations, rec.important_flags) if f])
