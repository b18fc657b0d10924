# Two-stage training on a reduced benchmark, then the same relational captions
# ranked by eta and by sentence likelihood. Takes under a minute.
import torch

from topicsg.evaluation import evaluate, ground_truth_from_records
from topicsg.features import ModelConfig, scene_features
from topicsg.pipeline import generate
from topicsg.synth import GenConfig, generate_split
from topicsg.trainer import TrainConfig, train_stage1, train_stage2

torch.set_num_threads(1)
gen = GenConfig(num_scenes=150, num_test=40)
vocab = gen.vocab.vocabulary()
train, test = generate_split(gen, "train"), generate_split(gen, "test")
mc = ModelConfig()
ftr, fte = scene_features(train, mc), scene_features(test, mc)
cfg = TrainConfig(epochs_stage1=6)

captioner, r1 = train_stage1(train, ftr, len(vocab), mc, cfg)
print("stage 1 loss by epoch:", [round(float(e["combined"]), 2) for e in r1.epochs])
head, r2 = train_stage2(train, ftr, captioner, vocab, cfg)
print("stage 2 KL by epoch:  ", [round(e["kl"], 4) for e in r2.epochs[::4]])

gts = ground_truth_from_records(test, vocab)
for rank in ("eta", "likelihood"):
    m = evaluate(generate(captioner, head, test, fte, vocab, rank), gts)
    print(f"{rank:10s} R-ns@20 {100 * m.recall_ns_20:5.1f}  R@20 {100 * m.recall_20:5.1f}  mean {100 * m.mean:5.1f}"
          f"  mAP {100 * m.mAP:4.1f}")
