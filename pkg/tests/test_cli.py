import json
import subprocess
import sys

import pytest

from topicsg.cli import main, read_config_file, resolve, build_parser
from topicsg.features import ModelConfig
from topicsg.trainer import TrainConfig

TINY_CFG = """\
# small enough to train in seconds
num_scenes = 12
num_val = 2
num_test = 4
n_min = 3
n_max = 5
d_v = 16
d_l = 12
d_h = 16
d_a = 8
d_e = 8
d_u = 16
d_s = 8
d_sem = 4
d_tr = 16
heads = 2
enc_layers = 1
dec_layers = 1
epochs_stage1 = 2
epochs_stage2 = 2
"""


def run(*argv) -> int:
    return main([str(a) for a in argv])


def last_error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert run("dataset-synth", "--config", cfg, "--out", root / "data") == 0
    assert run("train", "--stage", "1", "--data", root / "data", "--config", cfg, "--out", root / "s1") == 0
    assert run("train", "--stage", "2", "--data", root / "data", "--config", cfg, "--captioner", root / "s1",
               "--out", root / "s2") == 0
    return root


def test_help_exits_cleanly():
    out = subprocess.run([sys.executable, "-m", "topicsg", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("dataset-synth", "train", "generate", "eval", "inspect", "replay"):
        assert cmd in out.stdout


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("d_l = 12  # comment\nlam = 0.5\nmask_non_nouns = yes\n")
    assert read_config_file(cfg) == {"d_l": "12", "lam": "0.5", "mask_non_nouns": "yes"}
    args = build_parser().parse_args(["train", "--stage", "1", "--data", "x", "--out", "y", "--config", str(cfg),
                                      "--set", "lam=0.9", "--pooling", "mean"])
    (mc, tc), _ = resolve(args, [ModelConfig, TrainConfig])
    assert mc.d_l == 12 and mc.lam == 0.9 and tc.lam == 0.9
    assert tc.pooling == "mean" and tc.mask_non_nouns is True


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert run("dataset-synth", "--config", cfg, "--out", tmp_path / "d") == 1
    assert last_error(capsys)["error"] == "config"
    cfg.write_text("n_min = lots\n")
    assert run("dataset-synth", "--config", cfg, "--out", tmp_path / "d") == 1
    assert "n_min" in last_error(capsys)["message"]


def test_manifest_written(pipeline):
    m = json.loads((pipeline / "s2" / "manifest.json").read_text())
    assert m["command"] == "train"
    assert m["config"]["train"]["epochs_stage2"] == 2
    assert m["outputs"]["head"] == "head.json"
    assert m["wall_clock_seconds"] is not None and m["seed"] == 0


def test_missing_inputs_leave_no_manifest(tmp_path, capsys):
    assert run("generate", "--data", tmp_path / "nowhere", "--checkpoint", tmp_path, "--out", tmp_path / "g") == 1
    assert last_error(capsys)["error"] == "error"
    # the failure happened before the run began, so nothing was claimed
    assert not (tmp_path / "g" / "manifest.json").exists()


def test_output_dir_guard(pipeline, capsys):
    assert run("eval", "--predictions", pipeline / "x", "--data", pipeline / "data", "--out", pipeline / "s1") == 1
    assert "already holds" in last_error(capsys)["message"]


def test_missing_checkpoint_exit_code(pipeline, tmp_path, capsys):
    assert run("generate", "--data", pipeline / "data", "--checkpoint", tmp_path, "--out", tmp_path / "g") == 2
    assert last_error(capsys)["error"] == "checkpoint"
    # the manifest precedes every output, so an aborted run is still identifiable
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert m["command"] == "generate" and m["wall_clock_seconds"] is None


def test_schema_error_exit_code(pipeline, tmp_path, capsys):
    bad = tmp_path / "data"
    bad.mkdir()
    (bad / "vocab.json").write_bytes((pipeline / "data" / "vocab.json").read_bytes())
    (bad / "test.jsonl").write_text('{"image_id": "x"}\n')
    assert run("generate", "--data", bad, "--checkpoint", pipeline / "s2", "--out", tmp_path / "g") == 3
    assert last_error(capsys)["error"] == "schema"


def test_stage2_requires_captioner(pipeline, tmp_path, capsys):
    assert run("train", "--stage", "2", "--data", pipeline / "data", "--out", tmp_path / "t") == 1
    assert "--captioner" in last_error(capsys)["message"]


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_rank_changes_order_not_captions(pipeline):
    assert run("generate", "--data", pipeline / "data", "--checkpoint", pipeline / "s2", "--rank", "eta",
               "--out", pipeline / "g_eta") == 0
    assert run("generate", "--data", pipeline / "data", "--checkpoint", pipeline / "s2", "--rank", "likelihood",
               "--out", pipeline / "g_lik") == 0
    eta, lik = read_jsonl(pipeline / "g_eta" / "predictions.jsonl"), read_jsonl(pipeline / "g_lik" / "predictions.jsonl")
    assert [p["image_id"] for p in eta] == [p["image_id"] for p in lik]
    orders_differ = False
    for a, b in zip(eta, lik):
        key = lambda r: (tuple(r["pair"]), r["words"])
        assert sorted(map(key, a["relations"])) == sorted(map(key, b["relations"]))
        orders_differ |= [key(r) for r in a["relations"]] != [key(r) for r in b["relations"]]
    assert orders_differ


def test_eval_ground_truth_as_predictions(pipeline):
    from topicsg.core import Vocabulary, load_dataset
    from topicsg.evaluation import Prediction, PredictedRelation, ground_truth_from_records, write_predictions

    vocab = Vocabulary.load(pipeline / "data" / "vocab.json")
    gts = ground_truth_from_records(load_dataset(pipeline / "data" / "test.jsonl", vocab), vocab)
    preds = [Prediction(g.image_id, [PredictedRelation(r.subject_box, r.object_box, r.words, 1.0)
                                     for r in g.relations], g.caption) for g in gts]
    write_predictions(preds, pipeline / "gt.jsonl")
    assert run("eval", "--predictions", pipeline / "gt.jsonl", "--data", pipeline / "data", "--out", pipeline / "ev") == 0
    metrics = json.loads((pipeline / "ev" / "metrics.json").read_text())
    assert metrics["recall_ns_100"] == 100.0
    assert metrics["recall_20"] == 100.0
    assert metrics["img_level_recall"] == 100.0


def test_inspect_outputs(pipeline):
    image_id = read_jsonl(pipeline / "data" / "test.jsonl")[0]["image_id"]
    assert run("inspect", "--data", pipeline / "data", "--checkpoint", pipeline / "s2", "--image-id", image_id,
               "--pooling", "mean", "--out", pipeline / "insp") == 0
    dump = json.loads((pipeline / "insp" / "inspect.json").read_text())
    assert dump["pooling"] == "mean"
    assert len(dump["alpha"]) == len(dump["object_ids"])
    assert len(dump["eta"]) == len(dump["beta"]) == len(dump["pairs"])
    for png in ("attention_heatmap.png", "scores.png"):
        assert (pipeline / "insp" / png).read_bytes()[:4] == b"\x89PNG"


def test_replay_reproduces_checkpoint(pipeline):
    assert run("replay", pipeline / "s1" / "manifest.json", "--out", pipeline / "s1_again") == 0
    for f in ("captioner.json", "captioner.bin", "report.json"):
        a, b = (pipeline / "s1" / f).read_bytes(), (pipeline / "s1_again" / f).read_bytes()
        if f == "report.json":
            a, b = (json.loads(x) | {"seconds": 0} for x in (a, b))
        assert a == b, f
