"""Command-line harness: dataset generation, instruction export, training,
inference, and evaluation.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Every command echoes its resolved configuration as a manifest and
writes figures next to its delimited outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from textspotter.annotations import AnnotationSet
from textspotter.codec import build_vocabulary
from textspotter.config import ConfigError, RunConfig, load_run_config, write_manifest
from textspotter.data import load_dataset, render_sample, write_dataset
from textspotter.evaluation import (
    LEXICON_MODES,
    Lexicon,
    anls,
    corpus_spotting_metrics,
    load_lexicon,
    vqa_accuracy,
)
from textspotter.inference import (
    predict_records,
    read_predictions,
    write_predictions,
)
from textspotter.instructions import filter_instances, sample_instruction
from textspotter.model import (
    NumericalError,
    VocabularyMismatchError,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from textspotter.parsers import parse_icdar_gt, parse_polygon_gt, parse_vqa_annotations
from textspotter.training import Trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ALL_TEXT_INSTRUCTION = "Recognize all text"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textspotter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config: bool):
        p.add_argument("--config", required=need_config, help="run config JSON")
        p.add_argument("--seed", type=int, help="override data.seed and train.seed")
        p.add_argument("--out", help="override io.out_dir")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p, need_config=True)
    p.add_argument("--num-images", type=int, help="override data.num_images")

    p = sub.add_parser("export-instructions", help="write sampled training triples")
    common(p, need_config=True)
    p.add_argument("--data", help="dataset directory (default data.dataset_dir)")

    p = sub.add_parser("train", help="train a spotting model")
    common(p, need_config=True)
    p.add_argument("--data", help="dataset directory (default data.dataset_dir)")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--instruction-mode", choices=("on", "off"))
    p.add_argument("--freeze-text-encoder", type=_bool, metavar="BOOL")

    p = sub.add_parser("infer", help="decode predictions for a dataset")
    common(p, need_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--instruction", default=ALL_TEXT_INSTRUCTION)
    p.add_argument("--max-len", type=int, help="override eval.max_decode_len")
    p.add_argument("--batch-size", type=int, help="override eval.batch_size")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p, need_config=False)
    p.add_argument("--pred", help="prediction JSONL")
    p.add_argument("--data", help="dataset directory with index.jsonl ground truth")
    p.add_argument("--gt-icdar", help="directory of ICDAR quad gt .txt files")
    p.add_argument("--gt-polygon", help="directory of polygon gt .txt files")
    p.add_argument("--image-width", type=int, help="image width for --gt-icdar/--gt-polygon")
    p.add_argument("--image-height", type=int, help="image height for --gt-icdar/--gt-polygon")
    p.add_argument("--lexicon-mode", choices=LEXICON_MODES)
    p.add_argument("--lexicon", help="lexicon file, one word per line")
    p.add_argument("--vqa-pred", help="VQA predictions JSONL {image_id, question, answer}")
    p.add_argument("--vqa-gt", help="VQA ground truth JSON array")
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.io.out_dir = args.out
    return cfg


def _require_dir(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"{what} not given (flag or config)")
    if not os.path.isdir(path):
        raise DataError(f"{what} {path!r} is not a directory")
    return path


def _load_records(path: str):
    try:
        return load_dataset(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        raise DataError(f"cannot load dataset from {path!r}: {err}") from err


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.num_images is not None:
        cfg.data.num_images = args.num_images
    synth = cfg.data.synthetic_config()
    out_dir = cfg.io.out_dir
    try:
        write_dataset(synth, cfg.data.num_images, out_dir)
    except OSError as err:
        raise DataError(f"cannot write dataset to {out_dir!r}: {err}") from err
    write_manifest(out_dir, cfg, "gen-data")

    from textspotter import reporting

    preview = [render_sample(synth, i) for i in range(min(8, cfg.data.num_images))]
    reporting.plot_sample_grid(
        os.path.join(out_dir, "preview.png"),
        [s.image for s in preview],
        [" ".join(t.transcription for t in s.annotations.instances) for s in preview],
        points=[[(t.cx, t.cy) for t in s.annotations.instances] for s in preview],
    )
    print(f"wrote {cfg.data.num_images} images to {out_dir}")
    return EXIT_OK


def cmd_export_instructions(args) -> int:
    cfg = _load_config(args)
    data_dir = _require_dir(args.data or cfg.data.dataset_dir, "dataset directory")
    if cfg.train.seed is None:
        raise UsageError("a seed is mandatory (config train.seed or --seed)")
    records = _load_records(data_dir)
    out_dir = cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "instructions.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for idx, rec in enumerate(records):
            instruction = sample_instruction(rec.annotations, cfg.train.seed * 1_000_003 + idx)
            targets = filter_instances(instruction, rec.annotations)
            f.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "instruction": instruction.canonical_text,
                        "target_transcriptions": [t.transcription for t in targets],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    write_manifest(out_dir, cfg, "export-instructions")
    print(f"wrote {len(records)} instruction records to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.instruction_mode is not None:
        cfg.train.instruction_mode = args.instruction_mode
    if args.freeze_text_encoder is not None:
        cfg.train.freeze_text_encoder = args.freeze_text_encoder
    data_dir = _require_dir(args.data or cfg.data.dataset_dir, "dataset directory")
    cfg.data.dataset_dir = data_dir
    records = _load_records(data_dir)
    if not records:
        raise DataError(f"dataset at {data_dir!r} is empty")
    vocab = build_vocabulary()
    model_cfg = cfg.model
    if model_cfg.vocab_size != vocab.size:
        raise UsageError(
            f"model.vocab_size {model_cfg.vocab_size} != vocabulary size {vocab.size}"
        )
    out_dir = cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    settings = cfg.train.settings()
    trainer = Trainer(records, model_cfg, settings, vocab, log=print)

    from textspotter import reporting

    def dump_outputs(result):
        reporting.write_loss_csv(os.path.join(out_dir, "losses.csv"), result.losses)
        reporting.plot_loss_curve(os.path.join(out_dir, "loss_curve.png"), result.losses)
        with open(os.path.join(out_dir, "instructions.jsonl"), "w", encoding="utf-8") as f:
            for rec in result.instruction_log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as f:
            json.dump(vocab.to_manifest(), f, indent=2, sort_keys=True)
            f.write("\n")
        write_manifest(out_dir, cfg, "train")

    try:
        result = trainer.train()
    except NumericalError:
        # keep the last finite parameters on disk, then report failure
        save_checkpoint(
            os.path.join(out_dir, "checkpoint-lastgood.pt"),
            trainer.model,
            vocab,
            settings.seed,
            extra={"aborted": True},
        )
        dump_outputs(trainer.result)
        raise

    final_path = os.path.join(out_dir, "checkpoint.pt")
    save_checkpoint(
        final_path,
        trainer.model,
        vocab,
        settings.seed,
        extra={
            "steps": result.steps_done,
            "instruction_mode": settings.instruction_mode,
            "freeze_text_encoder": settings.freeze_text_encoder,
        },
    )
    if trainer.best_state is not None:
        best_model = build_model(model_cfg, seed=settings.seed)
        best_model.load_state_dict(trainer.best_state)
        save_checkpoint(
            os.path.join(out_dir, "checkpoint-best.pt"),
            best_model,
            vocab,
            settings.seed,
            extra={"best_window_loss": trainer.best_loss},
        )
    dump_outputs(result)
    print(
        f"trained {result.steps_done} steps ({result.epochs_done} epochs); "
        f"final loss {result.losses[-1]:.4f}; checkpoint {final_path}"
    )
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    if not args.instruction.strip():
        raise UsageError("--instruction must be non-empty")
    vocab = build_vocabulary()
    try:
        model, vocab, _payload = load_checkpoint(args.checkpoint, expected_vocab=vocab)
    except FileNotFoundError as err:
        raise DataError(f"checkpoint not found: {err}") from err
    except VocabularyMismatchError as err:
        raise DataError(str(err)) from err
    data_dir = _require_dir(args.data, "dataset directory")
    records = _load_records(data_dir)
    out_dir = cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    max_len = args.max_len or cfg.eval.max_decode_len
    batch_size = args.batch_size or cfg.eval.batch_size
    predictions = predict_records(
        model,
        records,
        [args.instruction] * len(records),
        vocab,
        batch_size=batch_size,
        max_len=max_len,
    )
    pred_path = os.path.join(out_dir, "predictions.jsonl")
    write_predictions(pred_path, predictions)
    summary = {
        "instruction": args.instruction,
        "num_images": len(records),
        "num_instances": sum(len(p.instances) for p in predictions),
        "malformed_sequences": sum(p.malformed for p in predictions),
    }
    with open(os.path.join(out_dir, "infer_summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out_dir, cfg, "infer")

    from textspotter import reporting

    shown = records[:8]
    reporting.plot_sample_grid(
        os.path.join(out_dir, "predictions.png"),
        [rec.load_image() for rec in shown],
        [
            " ".join(t.transcription for t in pred.instances) or "(none)"
            for pred in predictions[:8]
        ],
        points=[[(t.cx, t.cy) for t in pred.instances] for pred in predictions[:8]],
    )
    print(
        f"decoded {summary['num_instances']} instances over {len(records)} images "
        f"({summary['malformed_sequences']} malformed frames) -> {pred_path}"
    )
    return EXIT_OK


def _load_gt(args) -> dict[str, AnnotationSet]:
    sources = [bool(args.data), bool(args.gt_icdar), bool(args.gt_polygon)]
    if sum(sources) != 1:
        raise UsageError("exactly one of --data, --gt-icdar, --gt-polygon is required")
    if args.data:
        records = _load_records(_require_dir(args.data, "dataset directory"))
        return {rec.image_id: rec.annotations for rec in records}
    gt_dir = _require_dir(args.gt_icdar or args.gt_polygon, "ground-truth directory")
    if not args.image_width or not args.image_height:
        raise UsageError("--image-width/--image-height are required with ICDAR/polygon gt")
    parse = parse_icdar_gt if args.gt_icdar else parse_polygon_gt
    out = {}
    for name in sorted(os.listdir(gt_dir)):
        if not name.endswith(".txt"):
            continue
        image_id = os.path.splitext(name)[0]
        try:
            with open(os.path.join(gt_dir, name), encoding="utf-8") as f:
                content = f.read()
        except OSError as err:
            raise DataError(f"cannot read {name!r}: {err}") from err
        annotations, _skipped = parse(content, args.image_width, args.image_height, image_id)
        out[image_id] = annotations
    if not out:
        raise DataError(f"no .txt ground-truth files in {gt_dir!r}")
    return out


def _build_lexicon(mode: str, path: str | None, gt: dict[str, AnnotationSet]) -> Lexicon:
    if mode == "none":
        return Lexicon()
    if path:
        try:
            return load_lexicon(path, mode)
        except OSError as err:
            raise DataError(f"cannot read lexicon {path!r}: {err}") from err
    if mode == "full":
        words = sorted(
            {t.transcription for ann in gt.values() for t in ann.care_instances()}
        )
        if not words:
            raise DataError("cannot derive a full lexicon from empty ground truth")
        return Lexicon(mode="full", words=tuple(words))
    raise UsageError(f"--lexicon is required for mode {mode!r}")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    report: dict = {}
    spotting_reports = {}

    wants_spotting = bool(args.pred or args.data or args.gt_icdar or args.gt_polygon)
    if wants_spotting:
        if not args.pred:
            raise UsageError("--pred is required for spotting evaluation")
        gt = _load_gt(args)
        try:
            predictions = read_predictions(args.pred)
        except (OSError, json.JSONDecodeError, KeyError) as err:
            raise DataError(f"cannot read predictions {args.pred!r}: {err}") from err
        by_id = {p.image_id: p for p in predictions}
        unknown = sorted(set(by_id) - set(gt))
        if unknown:
            raise DataError(f"predictions reference unknown image ids: {unknown[:5]}")
        mode = args.lexicon_mode or cfg.eval.lexicon_mode
        lexicon = _build_lexicon(mode, args.lexicon or cfg.eval.lexicon_path or None, gt)
        pairs = []
        for image_id in sorted(gt):
            pred = by_id.get(image_id)
            pairs.append((pred.instances if pred else [], gt[image_id]))
        result = corpus_spotting_metrics(pairs, lexicon)
        spotting_reports[mode] = result
        report["spotting"] = {mode: result.to_dict()}

    if bool(args.vqa_pred) != bool(args.vqa_gt):
        raise UsageError("--vqa-pred and --vqa-gt must be given together")
    if args.vqa_pred:
        try:
            with open(args.vqa_gt, encoding="utf-8") as f:
                samples, skipped = parse_vqa_annotations(f.read())
            vqa_preds = {}
            with open(args.vqa_pred, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        vqa_preds[(str(rec.get("image_id", "")), rec["question"])] = rec[
                            "answer"
                        ]
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
            raise DataError(f"cannot read VQA inputs: {err}") from err
        accs, anlss = [], []
        missing = 0
        for sample in samples:
            answer = vqa_preds.get((sample.image_id, sample.question))
            if answer is None:
                missing += 1
                answer = ""
            accs.append(vqa_accuracy(answer, sample.answers))
            anlss.append(anls(answer, sample.answers))
        if not samples:
            raise DataError("VQA ground truth contains no valid records")
        report["vqa"] = {
            "accuracy": sum(accs) / len(accs),
            "anls": sum(anlss) / len(anlss),
            "count": len(samples),
            "skipped_gt_records": skipped,
            "missing_predictions": missing,
        }

    if not report:
        raise UsageError("nothing to evaluate: give spotting and/or VQA inputs")

    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out_dir, cfg, "eval")

    from textspotter import reporting

    if spotting_reports:
        reporting.write_report_csv(os.path.join(out_dir, "report.csv"), spotting_reports)
        reporting.plot_eval_report(os.path.join(out_dir, "report.png"), spotting_reports)
        for mode, rep in spotting_reports.items():
            print(
                f"[{mode}] precision {rep.precision:.4f} recall {rep.recall:.4f} "
                f"hmean {rep.hmean:.4f} ({rep.matched}/{rep.num_predictions} preds, "
                f"{rep.num_gt} gt)"
            )
    if "vqa" in report:
        print(
            f"[vqa] accuracy {report['vqa']['accuracy']:.4f} "
            f"anls {report['vqa']['anls']:.4f} over {report['vqa']['count']} questions"
        )
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "export-instructions": cmd_export_instructions,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
