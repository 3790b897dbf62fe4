import json

import numpy as np
import pytest
from PIL import Image

from keypose.cli import main
from keypose.codec import CodecConfig, TokenSequence, VOCAB_SIZE, decode_trajectory
from keypose.decoder import write_dump
from keypose.scenegen import read_records



def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run("gen-dataset", "--out", out, "--n", 6, "--mode", "easy",
               "--seed", 11) == 0
    return out


def grammar_peaked_logits(tokens, vocab=VOCAB_SIZE, peak=8.0):
    logits = np.zeros((len(tokens), vocab), dtype=np.float32)
    for k, t in enumerate(tokens):
        logits[k, t] = peak
    return logits


def target_tokens(dataset):
    record = read_records(dataset / "records.jsonl")[0]
    return TokenSequence.from_text(record.tokens_image).ids, record


# ---------------------------------------------------------------------------
# gen-dataset
# ---------------------------------------------------------------------------

def test_gen_dataset_deterministic_manifest(tmp_path):
    assert run("gen-dataset", "--out", tmp_path / "a", "--n", 10, "--seed", 3) == 0
    assert run("gen-dataset", "--out", tmp_path / "b", "--n", 10, "--seed", 3) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["records_sha256"] == mb["records_sha256"]
    assert ma["config"]["n"] == 10  # effective config echoed


def test_gen_dataset_unwritable_path():
    assert run("gen-dataset", "--out", "/proc/nope/ds", "--n", 1) == 2


def test_gen_dataset_usage_error():
    assert run("gen-dataset", "--out", "/tmp/x", "--mode", "extreme") == 1


def test_env_seed_used_as_default(tmp_path, monkeypatch):
    monkeypatch.setenv("KEYPOSE_SEED", "777")
    assert run("gen-dataset", "--out", tmp_path / "env", "--n", 2) == 0
    manifest = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert manifest["seed"] == 777


def test_config_file_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"n": 3, "mode": "hard", "seed": 9}))
    # flag overrides file; file overrides default
    assert run("gen-dataset", "--out", tmp_path / "ds", "--config", cfg_file,
               "--n", 2) == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["config"]["n"] == 2
    assert manifest["config"]["mode"] == "hard"
    assert manifest["seed"] == 9
    assert len((tmp_path / "ds" / "records.jsonl").read_text().splitlines()) == 2


def test_config_file_unknown_key(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"bogus": 1}))
    assert run("gen-dataset", "--out", tmp_path / "ds", "--config", cfg_file) == 1


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def test_encode_identity_with_records(dataset, tmp_path):
    out = tmp_path / "tokens.jsonl"
    assert run("encode", "--records", dataset / "records.jsonl", "--out", out) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[0]["type"] == "manifest"
    records = read_records(dataset / "records.jsonl")
    for row, rec in zip(lines[1:], records):
        assert row["tokens"] == rec.tokens_image  # same codec -> identical tokens


def test_encode_robot_frame_roundtrip(dataset, tmp_path):
    out = tmp_path / "robot.jsonl"
    assert run("encode", "--records", dataset / "records.jsonl", "--out", out,
               "--frame", "robot", "--n-loc", 256) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()][1:]
    records = {r.scene_id: r for r in read_records(dataset / "records.jsonl")}
    cfg = CodecConfig(n_loc=256, frame="robot")
    for row in rows:
        traj = decode_trajectory(TokenSequence.from_text(row["tokens"]), None, cfg)
        rec = records[row["scene_id"]]
        err = np.linalg.norm(
            traj.grasp.pose.position - rec.trajectory.grasp.pose.position
        )
        assert err < np.linalg.norm([1.2 / 512] * 3) + 1e-12


def test_encode_missing_records_file(tmp_path):
    assert run("encode", "--records", tmp_path / "nope.jsonl",
               "--out", tmp_path / "t.jsonl") == 2


# ---------------------------------------------------------------------------
# decode-logits
# ---------------------------------------------------------------------------

def test_decode_greedy_recovers_peak_sequence(dataset, tmp_path):
    tokens, record = target_tokens(dataset)
    dump_path = tmp_path / "trace.lgtd"
    write_dump(grammar_peaked_logits(tokens), dump_path)
    cam_path = tmp_path / "camera.json"
    cam_path.write_text(json.dumps(record.camera.to_json()))
    out = tmp_path / "pred.jsonl"
    assert run("decode-logits", "--dump", dump_path, "--out", out,
               "--camera", cam_path, "--episode-id", record.scene_id) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert rows[0]["type"] == "manifest"
    pred = rows[1]
    assert pred["tokens"] == record.tokens_image
    assert pred["log_prob"] <= 0.0


def test_decode_beam_nms_finds_two_modes(dataset, tmp_path):
    tokens, record = target_tokens(dataset)
    logits = grammar_peaked_logits(tokens)
    # add a second mode 200 bins away on the first coordinate
    alt = tokens[0] + 200 if tokens[0] + 200 < 1024 else tokens[0] - 200
    logits[0, alt] = 7.5
    dump_path = tmp_path / "bimodal.lgtd"
    write_dump(logits, dump_path)
    cam_path = tmp_path / "camera.json"
    cam_path.write_text(json.dumps(record.camera.to_json()))
    out = tmp_path / "pred.jsonl"
    assert run("decode-logits", "--dump", dump_path, "--out", out,
               "--camera", cam_path, "--strategy", "beam-nms", "--n", 3) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()][1:]
    firsts = {TokenSequence.from_text(r["tokens"]).ids[0] for r in rows}
    assert {tokens[0], alt} <= firsts


def test_decode_check_mode(tmp_path, capsys):
    dump_path = tmp_path / "small.lgtd"
    write_dump(np.zeros((2, 4), dtype=np.float32), dump_path)
    assert run("decode-logits", "--dump", dump_path, "--check") == 0
    assert "vocab_size=4" in capsys.readouterr().out


def test_decode_truncated_dump_names_step(tmp_path, capsys):
    dump_path = tmp_path / "trunc.lgtd"
    write_dump(np.zeros((12, VOCAB_SIZE), dtype=np.float32), dump_path)
    data = dump_path.read_bytes()
    dump_path.write_bytes(data[: len(data) - 100])
    assert run("decode-logits", "--dump", dump_path, "--check") == 2
    assert "step 11" in capsys.readouterr().err


def test_decode_vocab_mismatch(tmp_path):
    dump_path = tmp_path / "tiny.lgtd"
    write_dump(np.zeros((12, 64), dtype=np.float32), dump_path)
    assert run("decode-logits", "--dump", dump_path, "--out", "/tmp/x.jsonl",
               "--frame", "robot") == 2


def test_decode_too_few_steps(tmp_path):
    dump_path = tmp_path / "short.lgtd"
    write_dump(np.zeros((6, VOCAB_SIZE), dtype=np.float32), dump_path)
    assert run("decode-logits", "--dump", dump_path, "--out", "/tmp/x.jsonl",
               "--frame", "robot") == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _write_predictions(path, rows):
    with open(path, "w") as f:
        f.write(json.dumps({"type": "manifest", "config": {}}) + "\n")
        for row in rows:
            f.write(json.dumps({"type": "prediction", **row}) + "\n")


def test_eval_exact_predictions_map_one(dataset, tmp_path):
    records = read_records(dataset / "records.jsonl")
    preds = [
        {"episode_id": r.scene_id, "tokens": r.tokens_image,
         "trajectory": r.trajectory.to_json(), "log_prob": -0.5}
        for r in records
    ]
    pred_path = tmp_path / "p.jsonl"
    _write_predictions(pred_path, preds)
    out = tmp_path / "report.json"
    assert run("eval", "--predictions", pred_path,
               "--records", dataset / "records.jsonl", "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["map"] == 1.0
    assert report["mean_l1_top1"] == 0.0
    assert report["config"]["map_deg_per_cm"] == 10.0


def test_eval_hand_ap_case(dataset, tmp_path):
    records = read_records(dataset / "records.jsonl")
    r = records[0]
    far = json.loads(json.dumps(r.trajectory.to_json()))
    far[0]["position"][0] += 1.0  # 100 cm off
    preds = [
        {"episode_id": r.scene_id, "trajectory": far, "log_prob": -0.1},
        {"episode_id": r.scene_id, "trajectory": r.trajectory.to_json(),
         "log_prob": -2.0},
    ]
    pred_path = tmp_path / "p.jsonl"
    _write_predictions(pred_path, preds)
    out = tmp_path / "report.json"
    csv_path = tmp_path / "pr.csv"
    assert run("eval", "--predictions", pred_path, "--records",
               dataset / "records.jsonl", "--out", out, "--pr-csv", csv_path,
               "--thresholds", "5") == 0
    report = json.loads(out.read_text())
    # 6 episodes, only one has predictions: TP at rank 2 -> recall 1/6,
    # envelope precision 0.5 -> AP = 1/12
    assert report["per_threshold"][0]["ap"] == pytest.approx(1 / 12)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "threshold_cm,recall,precision,confidence_cut"
    assert len(lines) == 3


def test_eval_unmatched_episode(dataset, tmp_path):
    preds = [{"episode_id": "bogus", "trajectory":
              read_records(dataset / "records.jsonl")[0].trajectory.to_json(),
              "log_prob": -1.0}]
    pred_path = tmp_path / "p.jsonl"
    _write_predictions(pred_path, preds)
    assert run("eval", "--predictions", pred_path,
               "--records", dataset / "records.jsonl",
               "--out", tmp_path / "r.json") == 2


# ---------------------------------------------------------------------------
# crop
# ---------------------------------------------------------------------------

@pytest.fixture
def png(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, size=(720, 1280, 3), dtype=np.uint8)
    path = tmp_path / "frame.png"
    Image.fromarray(img).save(path)
    return path


def test_crop_identity_full(png, tmp_path):
    out = tmp_path / "crop.png"
    assert run("crop", "--image", png, "--out", out) == 0
    assert Image.open(out).size == (224, 224)
    cmap = json.loads((tmp_path / "crop.png.map.json").read_text())["map"]
    assert (cmap["x0"], cmap["y0"]) == (0, 0)
    assert (cmap["width"], cmap["height"]) == (1280, 720)


def test_crop_roundtrip_via_map_json(png, tmp_path):
    from keypose.scenegen import CropMap

    out = tmp_path / "crop.png"
    assert run("crop", "--image", png, "--out", out, "--crop-size", 700,
               "--center-mode", "midpoint", "--center", 640, 360) == 0
    payload = json.loads((tmp_path / "crop.png.map.json").read_text())
    cmap = CropMap(**payload["map"])
    pts = np.array([[640.0, 360.0], [400.0, 300.0]])
    np.testing.assert_allclose(cmap.to_original(cmap.to_crop(pts)), pts, atol=1e-9)
    np.testing.assert_allclose(cmap.to_crop([[640, 360]]), [[112, 112]])


def test_crop_degenerate_window(png, tmp_path):
    assert run("crop", "--image", png, "--out", tmp_path / "c.png",
               "--crop-size", 100, "--valid", "--center-mode", "start_object",
               "--center", 5000, 5000) == 2


def test_crop_scene_centers_from_records(dataset, tmp_path):
    records = read_records(dataset / "records.jsonl")
    rec = records[0]
    img = np.zeros((rec.camera.height, rec.camera.width, 3), dtype=np.uint8)
    path = tmp_path / "scene.png"
    Image.fromarray(img).save(path)
    assert run("crop", "--image", path, "--out", tmp_path / "sc.png",
               "--crop-size", 224, "--center-mode", "start_object",
               "--records", dataset / "records.jsonl",
               "--scene-id", rec.scene_id) == 0


# ---------------------------------------------------------------------------
# pair-sample
# ---------------------------------------------------------------------------

def test_pair_sample_deterministic(tmp_path):
    # 250 scenes make same-(source, target) collisions all but certain
    assert run("gen-dataset", "--out", tmp_path / "ds", "--n", 250,
               "--mode", "easy", "--seed", 4) == 0
    records = tmp_path / "ds" / "records.jsonl"
    out1, out2 = tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"
    assert run("pair-sample", "--records", records, "--k", 4, "--seed", 5,
               "--out", out1, "--text-dir", tmp_path / "texts") == 0
    assert run("pair-sample", "--records", records, "--k", 4, "--seed", 5,
               "--out", out2) == 0
    a = [json.loads(l) for l in out1.read_text().splitlines()[1:]]
    b = [json.loads(l) for l in out2.read_text().splitlines()[1:]]
    assert [(r["demo_scene"], r["query_scene"]) for r in a] == \
        [(r["demo_scene"], r["query_scene"]) for r in b]
    texts = sorted((tmp_path / "texts").glob("pair_*.txt"))
    assert len(texts) == len(a)


def test_pair_sample_insufficient(tmp_path):
    assert run("gen-dataset", "--out", tmp_path / "ds", "--n", 3,
               "--mode", "easy", "--seed", 8) == 0
    assert run("pair-sample", "--records", tmp_path / "ds" / "records.jsonl",
               "--k", 10_000, "--out", tmp_path / "p.jsonl") == 2
