"""Command-line entry point: ``topicsg <command> ...``.

Every command writes a ``manifest.json`` into its output directory before
producing anything else; ``topicsg replay`` re-executes a manifest. Errors
are reported as a single JSON line on stderr with exit code 2 (checkpoint),
3 (dataset schema) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
import time
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .captioner import Captioner, decode_image_caption, decode_relational_captions
from .checkpoint import CheckpointError, assign_params, load_arrays, params_digest, save_params
from .core import SchemaError, Vocabulary, detokenize, load_dataset, strip_eos
from .distill import (
    FEATURE_MODES, POOLING_MODES, ImportanceHead, assemble_second_order, importance_scores, inspect_dump,
    pool_attention, write_inspect,
)
from .evaluation import evaluate, ground_truth_from_records, read_predictions, write_predictions
from .features import ConfigError, ModelConfig, load_precomputed, project_features, scene_features
from .pipeline import generate
from .synth import GenConfig, pos_labels, write_dataset
from .trainer import TrainConfig, TrainingError, relation_pairs, train_stage1, train_stage2, train_stage2_label

log = logging.getLogger("topicsg")

MANIFEST = "manifest.json"
CAPTIONER = "captioner.json"
HEAD = "head.json"
EXIT_CODES = {"checkpoint": 2, "schema": 3}


# ---------------------------------------------------------------- config

def read_config_file(path: str | Path | None) -> dict[str, str]:
    """Flat ``key = value`` file (``#`` comments); no sections."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[config]\n" + path.read_text())
    return dict(parser["config"])


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        return tuple(int(x) for x in str(raw).split(","))
    try:
        return type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def build(cls, values: dict):
    """Instantiate a config dataclass from string values for the keys it knows."""
    base = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in values and f.name != "vocab":
            kwargs[f.name] = _coerce(values[f.name], getattr(base, f.name), f.name)
    return replace(base, **kwargs)


def resolve(args, classes) -> tuple:
    values = read_config_file(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None and v is not False:
            values[key] = str(v)
    out = tuple(build(c, values) for c in classes)
    # one config file may serve every command, so only keys no command knows are errors
    known = {f.name for c in (GenConfig, ModelConfig, TrainConfig) for f in fields(c)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return out, values


FLAG_KEYS = {
    "seed": "seed", "pooling": "pooling", "features": "feature_mode", "mask_non_nouns": "mask_non_nouns",
    "backbone": "backbone", "epochs_stage1": "epochs_stage1", "epochs_stage2": "epochs_stage2",
    "num_scenes": "num_scenes",
}


# ---------------------------------------------------------------- manifests

def begin_run(out_dir: Path, args, argv: list[str], config: dict, inputs: dict, seed: int | None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST
    if path.exists():
        try:
            previous = json.loads(path.read_text()).get("command")
        except json.JSONDecodeError:
            previous = None
        if previous != args.command:
            raise ConfigError(f"{out_dir} already holds a {previous!r} run; use a separate output directory")
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": config,
        "inputs": inputs,
        "outputs": {},
        "seed": seed,
        "tool_version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_clock_seconds": None,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    manifest["_t0"] = time.perf_counter()
    return manifest


def finish_run(out_dir: Path, manifest: dict, outputs: dict) -> None:
    manifest["outputs"] = outputs
    manifest["wall_clock_seconds"] = round(time.perf_counter() - manifest.pop("_t0"), 3)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- loading helpers

def load_split(data_dir: Path, split: str):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"dataset split not found: {path}")
    vocab = Vocabulary.load(Path(data_dir) / "vocab.json")
    return load_dataset(path, vocab), vocab


def load_captioner(ckpt_dir: Path) -> Captioner:
    arrays, meta = load_arrays(Path(ckpt_dir) / CAPTIONER)
    try:
        model = Captioner(ModelConfig(**meta["model_config"]), int(meta["vocab_size"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{ckpt_dir / CAPTIONER}: incomplete metadata ({e})") from None
    assign_params(model, arrays)
    model.eval()
    return model


def load_head(ckpt_dir: Path) -> ImportanceHead:
    arrays, meta = load_arrays(Path(ckpt_dir) / HEAD)
    try:
        head = ImportanceHead(meta["d_l"], meta["d_s"], meta["d_sem"], meta["vocab_size"], meta["feature_mode"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{ckpt_dir / HEAD}: incomplete metadata ({e})") from None
    assign_params(head, arrays)
    head.eval()
    return head


def features_for(records, model_config: ModelConfig, precomputed: str | None):
    pre = load_precomputed(precomputed) if precomputed else None
    if pre is not None:
        missing = [r.image_id for r in records if r.image_id not in pre]
        if missing:
            raise ConfigError(f"precomputed features lack images {missing[:3]}")
    return scene_features(records, model_config, pre)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_dataset_synth(args, argv):
    (gen,), values = resolve(args, [GenConfig])
    out = Path(args.out)
    manifest = begin_run(out, args, argv, gen.to_dict(), {"config_file": args.config}, gen.seed)
    splits = write_dataset(gen, out)
    _dump(gen.to_dict(), out / "gen_config.json")
    finish_run(out, manifest, {"vocab": "vocab.json", **{s: f"{s}.jsonl" for s in splits},
                               "gen_config": "gen_config.json"})
    print(json.dumps({s: len(r) for s, r in splits.items()}))


def cmd_train(args, argv):
    (mc, tc), values = resolve(args, [ModelConfig, TrainConfig])
    out = Path(args.out)
    records, vocab = load_split(Path(args.data), args.split)
    inputs = {"data": str(args.data), "split": args.split, "config_file": args.config,
              "captioner": args.captioner, "precomputed": args.precomputed}
    if args.stage == "1":
        manifest = begin_run(out, args, argv, {"model": mc.to_dict(), "train": vars_of(tc)}, inputs, tc.seed)
        feats = features_for(records, mc, args.precomputed)
        model, report = train_stage1([r.for_training() for r in records], feats, len(vocab), mc, tc)
        save_params(model, out / CAPTIONER, {"model_config": model.cfg.to_dict(), "vocab_size": len(vocab),
                                             "train_config": vars_of(tc)})
        outputs = {"captioner": CAPTIONER}
    else:
        if not args.captioner:
            raise ConfigError("--captioner DIR is required for stage 2")
        captioner = load_captioner(Path(args.captioner))
        tc = replace(tc, supervision_mode="label" if args.stage == "2-label" else "distill")
        manifest = begin_run(out, args, argv, {"model": captioner.cfg.to_dict(), "train": vars_of(tc)}, inputs, tc.seed)
        feats = features_for(records, captioner.cfg, args.precomputed)
        if args.stage == "2":
            head, report = train_stage2([r.for_training() for r in records], feats, captioner, vocab, tc)
        else:
            head, report = train_stage2_label(records, feats, captioner, vocab, tc)
        cfg = captioner.cfg
        save_params(head, out / HEAD, {"d_l": cfg.d_l, "d_s": cfg.d_s, "d_sem": cfg.d_sem, "vocab_size": len(vocab),
                                       "feature_mode": tc.feature_mode, "train_config": vars_of(tc),
                                       "captioner_digest": params_digest(captioner)})
        # the stage-2 directory is self-contained: it carries the frozen captioner too
        for suffix in (".json", ".bin"):
            shutil.copyfile(Path(args.captioner) / f"captioner{suffix}", out / f"captioner{suffix}")
        outputs = {"head": HEAD, "captioner": CAPTIONER}
    _dump(report.to_dict(), out / "report.json")
    outputs["report"] = "report.json"
    finish_run(out, manifest, outputs)
    print(json.dumps(report.final, sort_keys=True))


def vars_of(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def cmd_generate(args, argv):
    out = Path(args.out)
    ckpt = Path(args.checkpoint)
    records, vocab = load_split(Path(args.data), args.split)
    manifest = begin_run(out, args, argv, {"rank": args.rank, "topk": args.topk, "split": args.split},
                         {"data": str(args.data), "checkpoint": str(ckpt), "precomputed": args.precomputed}, None)
    captioner = load_captioner(ckpt)
    head = load_head(ckpt) if args.rank == "eta" else None
    feats = features_for(records, captioner.cfg, args.precomputed)
    preds = generate(captioner, head, [r.for_training() for r in records], feats, vocab, args.rank, args.topk)
    write_predictions(preds, out / "predictions.jsonl")
    finish_run(out, manifest, {"predictions": "predictions.jsonl"})
    print(json.dumps({"images": len(preds), "relations": sum(len(p.relations) for p in preds)}))


def cmd_eval(args, argv):
    out = Path(args.out)
    records, vocab = load_split(Path(args.data), args.split)
    manifest = begin_run(out, args, argv, {"split": args.split},
                         {"predictions": str(args.predictions), "data": str(args.data)}, None)
    pred_path = Path(args.predictions)
    if pred_path.is_dir():
        pred_path = pred_path / "predictions.jsonl"
    if not pred_path.is_file():
        raise FileNotFoundError(f"predictions not found: {pred_path}")
    report = evaluate(read_predictions(pred_path), ground_truth_from_records(records, vocab))
    (out / "metrics.json").write_text(report.to_json())
    finish_run(out, manifest, {"metrics": "metrics.json"})
    sys.stdout.write(report.to_json())


def cmd_inspect(args, argv):
    out = Path(args.out)
    ckpt = Path(args.checkpoint)
    records, vocab = load_split(Path(args.data), args.split)
    manifest = begin_run(out, args, argv, {"pooling": args.pooling or "max", "mask_non_nouns": args.mask_non_nouns,
                                           "image_id": args.image_id},
                         {"data": str(args.data), "checkpoint": str(ckpt)}, None)
    by_id = {r.image_id: r for r in records}
    if args.image_id not in by_id:
        raise ConfigError(f"image {args.image_id!r} not in split {args.split}")
    rec = by_id[args.image_id]
    captioner, head = load_captioner(ckpt), load_head(ckpt)
    fs = features_for([rec], captioner.cfg, args.precomputed)[0]
    with torch.no_grad():
        trace = decode_image_caption(captioner, fs, "teacher_forced", words=rec.image_caption).trace
        mask = pos_labels(vocab)(trace.words) if args.mask_non_nouns else None
        pooled = pool_attention(trace, args.pooling or "max", mask)
        pairs = relation_pairs(rec)
        delta, beta = assemble_second_order(pooled, pairs)
        project_features(fs, captioner.export_numpy())
        s, eta = importance_scores(fs, pairs, head)
        rels = decode_relational_captions(captioner, fs, pairs, "greedy")
    words = [vocab.token(t) for t in trace.words]
    dump = inspect_dump(rec.image_id, pooled, pairs, delta, beta, s, eta, [r.log_likelihood for r in rels],
                        trace, words)
    dump["relational_captions"] = [detokenize(strip_eos(r.words), vocab) for r in rels]
    write_inspect(dump, out / "inspect.json")
    plot_inspect(dump, out)
    finish_run(out, manifest, {"dump": "inspect.json", "heatmap": "attention_heatmap.png", "chart": "scores.png"})
    print(json.dumps({"image_id": rec.image_id, "pairs": len(pairs)}))


def plot_inspect(dump: dict, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    alpha = np.asarray(dump["alpha"])
    fig, ax = plt.subplots(figsize=(1 + 0.6 * alpha.shape[1], 1 + 0.4 * alpha.shape[0]))
    ax.imshow(alpha, aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(alpha.shape[1]), dump["caption_words"], rotation=45, ha="right")
    ax.set_yticks(range(alpha.shape[0]), [f"obj {i}" for i in dump["object_ids"]])
    ax.set_title(f"attention per word: {dump['image_id']}")
    fig.tight_layout()
    fig.savefig(out / "attention_heatmap.png", dpi=100, metadata={"Software": None})
    plt.close(fig)

    order = np.argsort(-np.asarray(dump["eta"]), kind="stable")
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(order)), 3))
    x = np.arange(len(order))
    ax.plot(x, np.asarray(dump["eta"])[order], marker="o", label="eta")
    ax.plot(x, np.asarray(dump["beta"])[order], marker="s", label="beta")
    ax.set_xticks(x, [f"{dump['pairs'][k][0]}-{dump['pairs'][k][1]}" for k in order], rotation=45)
    ax.set_ylabel("probability")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "scores.png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    recorded = list(manifest["argv"])
    if args.out:
        k = recorded.index("--out")
        recorded[k + 1] = args.out
    return main(recorded)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topicsg", description="Topic scene graphs from caption attention.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("dataset-synth", help="generate the synthetic benchmark")
    common(sp)
    sp.add_argument("--num-scenes", type=int)
    sp.set_defaults(func=cmd_dataset_synth)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="dataset directory (vocab.json + <split>.jsonl)")
        sp.add_argument("--precomputed", help="precomputed object-feature manifest")

    def ablation_args(sp):
        sp.add_argument("--pooling", choices=POOLING_MODES)
        sp.add_argument("--features", choices=FEATURE_MODES)
        sp.add_argument("--mask-non-nouns", action="store_true", default=None)

    sp = sub.add_parser("train", help="stage 1 (captioner), stage 2 (distilled head) or 2-label (upper bound)")
    common(sp)
    data_args(sp)
    sp.add_argument("--split", default="train")
    sp.add_argument("--stage", choices=["1", "2", "2-label"], required=True)
    sp.add_argument("--captioner", help="stage-1 output directory (stage 2 only)")
    sp.add_argument("--backbone", choices=["updown", "transformer"])
    sp.add_argument("--epochs-stage1", type=int)
    sp.add_argument("--epochs-stage2", type=int)
    ablation_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="caption images and rank relational captions")
    common(sp, config=False)
    data_args(sp)
    sp.add_argument("--split", default="test")
    sp.add_argument("--checkpoint", required=True, help="train output directory")
    sp.add_argument("--rank", choices=["eta", "likelihood"], default="eta")
    sp.add_argument("--topk", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="score predictions against a dataset split")
    common(sp, config=False)
    sp.add_argument("--predictions", required=True, help="predictions.jsonl or the generate output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="dump and plot attention and scores for one image")
    common(sp, config=False)
    data_args(sp)
    sp.add_argument("--split", default="test")
    sp.add_argument("--checkpoint", required=True, help="stage-2 output directory")
    sp.add_argument("--image-id", required=True)
    sp.add_argument("--pooling", choices=POOLING_MODES)
    sp.add_argument("--mask-non-nouns", action="store_true")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write to this directory instead of the recorded one")
    sp.set_defaults(func=cmd_replay)
    return p


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, SchemaError):
        return "schema"
    if isinstance(exc, (ConfigError, TrainingError)):
        return type(exc).__name__.replace("Error", "").lower()
    return "error"


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # determinism is only promised for a single worker
    torch.set_num_threads(1)
    try:
        result = args.func(args, argv)
        return result if isinstance(result, int) else 0
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        kind = _error_kind(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        sys.stderr.write(json.dumps({"error": kind, "code": EXIT_CODES.get(kind, 1), "message": msg}) + "\n")
        log.debug("traceback", exc_info=True)
        return EXIT_CODES.get(kind, 1)


if __name__ == "__main__":
    sys.exit(main())
