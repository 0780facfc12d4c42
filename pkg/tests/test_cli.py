import json
import os

import pytest

from textspotter.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from textspotter.config import RunConfig, read_manifest


def tiny_run_config(tmp_path, **section_overrides):
    cfg = {
        "data": {
            "canvas_size": 32,
            "lexicon": ["GO", "tea", "UP"],
            "instances_min": 1,
            "instances_max": 2,
            "glyph_size": 5,
            "noise_level": 0.02,
            "seed": 3,
            "num_images": 5,
        },
        "model": {
            "d_model": 16,
            "n_heads": 2,
            "encoder_layers": 1,
            "decoder_layers": 1,
            "instruction_encoder_layers": 1,
            "image_size": 32,
            "patch_size": 8,
            "patch_embed_dim": 8,
            "max_sequence_length": 96,
            "max_instruction_length": 64,
            "vocab_size": 1099,
            "dropout": 0.0,
        },
        "train": {"steps": 4, "batch_size": 4, "seed": 3, "log_every": 2},
        "eval": {"max_decode_len": 60, "batch_size": 8},
        "io": {"out_dir": str(tmp_path / "out")},
    }
    for key, val in section_overrides.items():
        cfg[key].update(val)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture()
def dataset(tmp_path):
    cfg = tiny_run_config(tmp_path)
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data_dir)]) == EXIT_OK
    return cfg, data_dir


def test_gen_data_outputs(dataset, tmp_path):
    _, data_dir = dataset
    index = (data_dir / "index.jsonl").read_text().strip().splitlines()
    assert len(index) == 5
    for line in index:
        rec = json.loads(line)
        assert os.path.exists(data_dir / rec["file"])
    assert (data_dir / "preview.png").exists()
    assert (data_dir / "manifest.json").exists()
    command, parsed = read_manifest(data_dir / "run_manifest.json")
    assert command == "gen-data"
    assert parsed.data.lexicon == ["GO", "tea", "UP"]


def test_gen_data_idempotent(tmp_path):
    cfg = tiny_run_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    assert (a / "index.jsonl").read_bytes() == (b / "index.jsonl").read_bytes()


def test_gen_data_zero_images(tmp_path):
    cfg = tiny_run_config(tmp_path)
    out = tmp_path / "z"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--num-images", "0"]) == EXIT_OK
    assert (out / "index.jsonl").read_text() == ""


def test_export_instructions(dataset, tmp_path):
    cfg, data_dir = dataset
    out = tmp_path / "instr"
    rc = main([
        "export-instructions", "--config", str(cfg),
        "--data", str(data_dir), "--out", str(out),
    ])
    assert rc == EXIT_OK
    lines = (out / "instructions.jsonl").read_text().strip().splitlines()
    assert len(lines) == 5
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"image_id", "instruction", "target_transcriptions"}
        assert rec["target_transcriptions"]  # sampler guarantees non-empty targets


def test_train_and_infer_and_eval_roundtrip(dataset, tmp_path):
    cfg, data_dir = dataset
    run_dir = tmp_path / "run"
    rc = main([
        "train", "--config", str(cfg), "--data", str(data_dir), "--out", str(run_dir),
    ])
    assert rc == EXIT_OK
    assert (run_dir / "checkpoint.pt").exists()
    assert (run_dir / "losses.csv").exists()
    assert (run_dir / "loss_curve.png").exists()
    assert (run_dir / "instructions.jsonl").exists()
    command, parsed = read_manifest(run_dir / "run_manifest.json")
    assert command == "train"
    # manifest round-trips to an equal config
    again = RunConfig.from_dict(parsed.to_dict())
    assert again == parsed

    infer_dir = tmp_path / "infer"
    rc = main([
        "infer", "--checkpoint", str(run_dir / "checkpoint.pt"),
        "--data", str(data_dir), "--out", str(infer_dir), "--max-len", "40",
    ])
    assert rc == EXIT_OK
    pred_path = infer_dir / "predictions.jsonl"
    assert pred_path.exists()
    for line in pred_path.read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"image_id", "instances"}
        for inst in rec["instances"]:
            assert set(inst) == {"x", "y", "transcription"}
    summary = json.loads((infer_dir / "infer_summary.json").read_text())
    assert summary["instruction"] == "Recognize all text"
    assert (infer_dir / "predictions.png").exists()

    eval_dir = tmp_path / "eval"
    rc = main([
        "eval", "--pred", str(pred_path), "--data", str(data_dir), "--out", str(eval_dir),
    ])
    assert rc == EXIT_OK  # success regardless of score
    report = json.loads((eval_dir / "report.json").read_text())
    assert "spotting" in report and "none" in report["spotting"]
    assert (eval_dir / "report.csv").exists()
    assert (eval_dir / "report.png").exists()


def test_train_reproducible(dataset, tmp_path):
    cfg, data_dir = dataset
    a, b = tmp_path / "ra", tmp_path / "rb"
    for out in (a, b):
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    assert (a / "losses.csv").read_bytes() == (b / "losses.csv").read_bytes()


def test_train_instruction_mode_off_logs_all_text_only(dataset, tmp_path):
    cfg, data_dir = dataset
    run_dir = tmp_path / "off"
    rc = main([
        "train", "--config", str(cfg), "--data", str(data_dir),
        "--out", str(run_dir), "--instruction-mode", "off",
    ])
    assert rc == EXIT_OK
    instructions = {
        json.loads(line)["instruction"]
        for line in (run_dir / "instructions.jsonl").read_text().splitlines()
    }
    assert instructions == {"Recognize all text"}


def test_gt_as_predictions_scores_one(dataset, tmp_path):
    _, data_dir = dataset
    pred_path = tmp_path / "gt_pred.jsonl"
    with open(data_dir / "index.jsonl") as f, open(pred_path, "w") as out:
        for line in f:
            rec = json.loads(line)
            out.write(json.dumps({
                "image_id": rec["image_id"],
                "instances": [
                    {"x": t["cx"], "y": t["cy"], "transcription": t["transcription"]}
                    for t in rec["instances"] if not t["dont_care"]
                ],
            }) + "\n")
    eval_dir = tmp_path / "eval_perfect"
    assert main(["eval", "--pred", str(pred_path), "--data", str(data_dir), "--out", str(eval_dir)]) == EXIT_OK
    report = json.loads((eval_dir / "report.json").read_text())
    assert report["spotting"]["none"]["hmean"] == 1.0


def test_empty_predictions_score_zero(dataset, tmp_path):
    _, data_dir = dataset
    pred_path = tmp_path / "empty.jsonl"
    pred_path.write_text("")
    eval_dir = tmp_path / "eval_empty"
    assert main(["eval", "--pred", str(pred_path), "--data", str(data_dir), "--out", str(eval_dir)]) == EXIT_OK
    report = json.loads((eval_dir / "report.json").read_text())
    assert report["spotting"]["none"]["hmean"] == 0.0


def test_eval_icdar_ground_truth(tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    (gt_dir / "img1.txt").write_text("0,0,10,0,10,10,0,10,GO\n")
    pred_path = tmp_path / "p.jsonl"
    pred_path.write_text(json.dumps({
        "image_id": "img1",
        "instances": [{"x": 0.05, "y": 0.05, "transcription": "GO"}],
    }) + "\n")
    out = tmp_path / "icdar_eval"
    rc = main([
        "eval", "--pred", str(pred_path), "--gt-icdar", str(gt_dir),
        "--image-width", "100", "--image-height", "100", "--out", str(out),
    ])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["spotting"]["none"]["hmean"] == 1.0


def test_eval_full_lexicon_derived_from_gt(dataset, tmp_path):
    _, data_dir = dataset
    # corrupt one character per transcription; full lexicon should repair it
    pred_path = tmp_path / "noisy.jsonl"
    with open(data_dir / "index.jsonl") as f, open(pred_path, "w") as out:
        for line in f:
            rec = json.loads(line)
            out.write(json.dumps({
                "image_id": rec["image_id"],
                "instances": [
                    {"x": t["cx"], "y": t["cy"],
                     "transcription": "#" + t["transcription"][1:]}
                    for t in rec["instances"]
                ],
            }) + "\n")
    out_dir = tmp_path / "eval_full"
    rc = main([
        "eval", "--pred", str(pred_path), "--data", str(data_dir),
        "--lexicon-mode", "full", "--out", str(out_dir),
    ])
    assert rc == EXIT_OK
    report = json.loads((out_dir / "report.json").read_text())
    assert report["spotting"]["full"]["hmean"] == 1.0


def test_eval_vqa(tmp_path):
    gt = [
        {"image_id": "a", "question": "what?", "answers": ["stop"] * 5},
        {"image_id": "b", "question": "when?", "answers": ["now", "later", "now"]},
    ]
    gt_path = tmp_path / "vqa_gt.json"
    gt_path.write_text(json.dumps(gt))
    pred_path = tmp_path / "vqa_pred.jsonl"
    pred_path.write_text(
        json.dumps({"image_id": "a", "question": "what?", "answer": "Stop"}) + "\n"
        + json.dumps({"image_id": "b", "question": "when?", "answer": "never"}) + "\n"
    )
    out = tmp_path / "vqa_eval"
    rc = main([
        "eval", "--vqa-pred", str(pred_path), "--vqa-gt", str(gt_path), "--out", str(out),
    ])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["vqa"]["accuracy"] == pytest.approx((1.0 + 0.0) / 2)
    assert report["vqa"]["count"] == 2


def test_usage_errors_exit_one(tmp_path):
    assert main(["train"]) == EXIT_USAGE  # missing --config
    assert main(["bogus-command"]) == EXIT_USAGE
    assert main(["eval", "--out", str(tmp_path / "x")]) == EXIT_USAGE  # nothing to do
    cfg = tiny_run_config(tmp_path, train={"seed": None})
    bad = json.loads(cfg.read_text())
    bad["train"].pop("seed")
    bad["mystery"] = {}
    cfg.write_text(json.dumps(bad))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "y")]) == EXIT_USAGE


def test_data_errors_exit_two(tmp_path):
    cfg = tiny_run_config(tmp_path)
    missing = tmp_path / "definitely-missing"
    assert main(["train", "--config", str(cfg), "--data", str(missing)]) == EXIT_DATA
    assert main([
        "infer", "--checkpoint", str(missing / "ck.pt"), "--data", str(tmp_path),
    ]) == EXIT_DATA


def test_infer_empty_dataset(dataset, tmp_path):
    cfg, data_dir = dataset
    run_dir = tmp_path / "run_e"
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(run_dir)]) == EXIT_OK
    empty_dir = tmp_path / "empty_data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(empty_dir), "--num-images", "0"]) == EXIT_OK
    infer_dir = tmp_path / "infer_e"
    rc = main([
        "infer", "--checkpoint", str(run_dir / "checkpoint.pt"),
        "--data", str(empty_dir), "--out", str(infer_dir),
    ])
    assert rc == EXIT_OK
    assert (infer_dir / "predictions.jsonl").read_text() == ""
