# One synthetic scene: objects, relational captions, the image caption,
# and which relations count as important (both endpoints mentioned).
from topicsg.core import detokenize
from topicsg.synth import GenConfig, generate_scene

cfg = GenConfig(seed=0)
vocab = cfg.vocab.vocabulary()
rec = generate_scene(cfg, 0)

print("caption:", detokenize(rec.image_caption, vocab))
for o in rec.objects:
    attrs = " ".join(vocab.token(a) for a in o.attribute_words)
    print(f"  object {o.id:2d}: {attrs + ' ' if attrs else ''}{vocab.token(o.category):10s} box={[round(v, 1) for v in o.box.to_list()]}")

print(f"{len(rec.relations)} relations, {sum(rec.important_flags)} important:")
for r, flag in zip(rec.relations, rec.important_flags):
    print(f"  {'*' if flag else ' '} {r.pair}  {detokenize(r.words, vocab)}")
