# Distilling beta into the importance head on a single image: KL falls to ~0
# and eta orders the pairs the same way beta does.
import numpy as np
import torch

from topicsg.distill import importance_scores, kl_loss
from topicsg.features import ModelConfig, project_features, scene_features
from topicsg.synth import GenConfig, generate_split
from topicsg.trainer import TrainConfig, prepare_distillation, train_stage1, train_stage2

torch.set_num_threads(1)
gen = GenConfig(num_scenes=1, seed=5)
vocab = gen.vocab.vocabulary()
recs = generate_split(gen, "train")
mc = ModelConfig()
feats = scene_features(recs, mc)
cfg = TrainConfig(epochs_stage1=20)
captioner, _ = train_stage1(recs, feats, len(vocab), mc, cfg)

ex = prepare_distillation(recs, feats, captioner, vocab, cfg)[0]
for steps in (1, 50, 500):
    head, report = train_stage2(recs, feats, captioner, vocab, cfg, steps=steps)
    _, eta = importance_scores(project_features(feats[0], captioner.export_numpy()), ex.pairs, head)
    print(f"{steps:4d} steps: KL(eta||beta) = {kl_loss(eta, ex.beta):.2e}")

order = np.argsort(-ex.beta, kind="stable")[:5]
print("top pairs by beta:", [ex.pairs[k] for k in order])
print("beta:", np.round(ex.beta[order], 4))
print("eta: ", np.round(eta[order], 4))
