"""Point-based spotting metrics, lexicon correction, and scene-text VQA scores.

Spotting predictions are matched one-to-one to ground truth by transcription
equality and ascending point distance; predictions sitting on don't-care
ground truth are neither credited nor penalized. VQA predictions are scored
with the min(#agreeing/3, 1) accuracy and with normalized Levenshtein
similarity thresholded at 0.5.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass

from textspotter.annotations import AnnotationSet, TextInstance
from textspotter.instructions import Instruction, filter_instances, predicate_holds

LEXICON_MODES = ("none", "full", "strong", "weak", "generic")
ANLS_THRESHOLD = 0.5


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance, single-row DP."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def normalize_answer(text: str) -> str:
    """Shared VQA answer normalization.

    Lowercase, trim, collapse internal whitespace, strip surrounding
    punctuation. Idempotent.
    """
    text = " ".join(text.lower().split())
    return text.strip(string.punctuation + " ")


@dataclass(frozen=True)
class Lexicon:
    """A correction dictionary; mode 'none' disables correction."""

    mode: str = "none"
    words: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in LEXICON_MODES:
            raise ValueError(f"unknown lexicon mode {self.mode!r}")
        if self.mode == "none" and self.words:
            raise ValueError("mode 'none' takes no words")
        if self.mode != "none" and not self.words:
            raise ValueError(f"mode {self.mode!r} requires a non-empty word list")


def load_lexicon(path, mode: str) -> Lexicon:
    with open(path, encoding="utf-8") as f:
        words = tuple(line.strip() for line in f if line.strip())
    return Lexicon(mode=mode, words=words)


def lexicon_correct(transcription: str, lexicon: Lexicon) -> str:
    """Replace by the nearest lexicon word (case-insensitive distance).

    Ties break toward the earlier lexicon entry; mode 'none' is identity.
    """
    if lexicon.mode == "none":
        return transcription
    lowered = transcription.lower()
    best_word, best_dist = lexicon.words[0], None
    for word in lexicon.words:
        d = edit_distance(lowered, word.lower())
        if best_dist is None or d < best_dist:
            best_word, best_dist = word, d
    return best_word


def _strip_punct(text: str) -> str:
    return text.strip(string.punctuation)


def _match_key(text: str, corrected: bool) -> str:
    # lexicon modes compare with surrounding punctuation stripped;
    # lexicon-free comparison is exact up to case
    return _strip_punct(text).lower() if corrected else text.lower()


@dataclass
class EvalReport:
    precision: float
    recall: float
    hmean: float
    matched: int
    num_predictions: int
    num_gt: int
    malformed_sequences: int = 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "hmean": self.hmean,
            "matched": self.matched,
            "num_predictions": self.num_predictions,
            "num_gt": self.num_gt,
            "malformed_sequences": self.malformed_sequences,
        }


def _hmean(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def match_predictions(
    predictions: list[TextInstance],
    gts: AnnotationSet,
    lexicon: Lexicon | None = None,
) -> tuple[list[tuple[int, int]], list[int]]:
    """Greedy one-to-one matching by transcription equality and distance.

    Returns (matched pairs as (pred_idx, gt_idx), indices of predictions
    discarded because their nearest ground-truth instance is don't-care).
    Candidate pairs require the lexicon-corrected prediction transcription
    to equal the ground-truth transcription case-insensitively; pairs are
    consumed in ascending Euclidean distance, ties by (pred_idx, gt_idx).
    """
    lexicon = lexicon or Lexicon()
    corrected = lexicon.mode != "none"
    pred_keys = [
        _match_key(lexicon_correct(p.transcription, lexicon), corrected)
        for p in predictions
    ]

    care = [(j, g) for j, g in enumerate(gts.instances) if not g.dont_care]
    dont_care = [(j, g) for j, g in enumerate(gts.instances) if g.dont_care]

    edges = []
    for i, pred in enumerate(predictions):
        for j, gt in care:
            if pred_keys[i] == _match_key(gt.transcription, corrected):
                d = math.hypot(pred.cx - gt.cx, pred.cy - gt.cy)
                edges.append((d, i, j))
    edges.sort()

    pred_used = set()
    gt_used = set()
    pairs = []
    for _, i, j in edges:
        if i in pred_used or j in gt_used:
            continue
        pred_used.add(i)
        gt_used.add(j)
        pairs.append((i, j))

    # an unmatched prediction whose nearest ground truth is don't-care is
    # treated as covering an ignored region and leaves the prediction pool
    removed = []
    if dont_care:
        for i, pred in enumerate(predictions):
            if i in pred_used:
                continue
            d_dc = min(math.hypot(pred.cx - g.cx, pred.cy - g.cy) for _, g in dont_care)
            d_care = min(
                (math.hypot(pred.cx - g.cx, pred.cy - g.cy) for _, g in care),
                default=math.inf,
            )
            if d_dc < d_care:
                removed.append(i)
    return pairs, removed


def spotting_metrics(
    predictions: list[TextInstance],
    gts: AnnotationSet,
    lexicon: Lexicon | None = None,
    malformed: int = 0,
) -> EvalReport:
    """Score one image."""
    pairs, removed = match_predictions(predictions, gts, lexicon)
    matched = len(pairs)
    num_pred = len(predictions) - len(removed)
    num_gt = len(gts.care_instances())
    precision = matched / num_pred if num_pred else 0.0
    recall = matched / num_gt if num_gt else 0.0
    return EvalReport(
        precision=precision,
        recall=recall,
        hmean=_hmean(precision, recall),
        matched=matched,
        num_predictions=num_pred,
        num_gt=num_gt,
        malformed_sequences=malformed,
    )


def corpus_spotting_metrics(
    per_image: list[tuple[list[TextInstance], AnnotationSet]],
    lexicon: Lexicon | None = None,
    malformed: int = 0,
) -> EvalReport:
    """Aggregate counts over a dataset, then compute corpus-level P/R/H."""
    matched = num_pred = num_gt = 0
    for predictions, gts in per_image:
        pairs, removed = match_predictions(predictions, gts, lexicon)
        matched += len(pairs)
        num_pred += len(predictions) - len(removed)
        num_gt += len(gts.care_instances())
    precision = matched / num_pred if num_pred else 0.0
    recall = matched / num_gt if num_gt else 0.0
    return EvalReport(
        precision=precision,
        recall=recall,
        hmean=_hmean(precision, recall),
        matched=matched,
        num_predictions=num_pred,
        num_gt=num_gt,
        malformed_sequences=malformed,
    )


def vqa_accuracy(prediction: str, human_answers: list[str]) -> float:
    """min(#humans agreeing with the prediction / 3, 1)."""
    if not human_answers:
        raise ValueError("human_answers must be non-empty")
    pred = normalize_answer(prediction)
    agree = sum(1 for a in human_answers if normalize_answer(a) == pred)
    return min(agree / 3.0, 1.0)


def anls(prediction: str, gt_answers: list[str]) -> float:
    """Normalized Levenshtein similarity, best over answers, zeroed >= 0.5."""
    if not gt_answers:
        raise ValueError("gt_answers must be non-empty")
    pred = normalize_answer(prediction)
    best = 0.0
    for answer in gt_answers:
        gt = normalize_answer(answer)
        denom = max(len(pred), len(gt))
        if denom == 0:
            nl = 0.0  # both empty: identical
        else:
            nl = edit_distance(pred, gt) / denom
        score = 1.0 - nl if nl < ANLS_THRESHOLD else 0.0
        best = max(best, score)
    return best


@dataclass
class InstructionFollowingReport:
    predicate_precision: float
    conditional: EvalReport
    num_outputs: int
    num_satisfying: int

    def to_dict(self) -> dict:
        return {
            "predicate_precision": self.predicate_precision,
            "num_outputs": self.num_outputs,
            "num_satisfying": self.num_satisfying,
            "conditional": self.conditional.to_dict(),
        }


def instruction_following_report(
    model_outputs: list[tuple[Instruction, list[TextInstance]]],
    gts: list[AnnotationSet],
    lexicon: Lexicon | None = None,
) -> InstructionFollowingReport:
    """Quantify how well decoded instances obey their instruction.

    predicate_precision is the fraction of all emitted instances whose
    transcription satisfies the paired instruction; the conditional report
    scores each output against the instruction-filtered ground truth.
    """
    if len(model_outputs) != len(gts):
        raise ValueError("model_outputs and gts must align")
    total = satisfying = 0
    conditional_pairs = []
    for (instruction, decoded), annot in zip(model_outputs, gts):
        for inst in decoded:
            total += 1
            satisfying += predicate_holds(instruction, inst.transcription)
        targets = filter_instances(instruction, annot)
        kept_dc = [g for g in annot.instances if g.dont_care]
        conditional_pairs.append(
            (decoded, AnnotationSet(instances=targets + kept_dc, image_id=annot.image_id))
        )
    conditional = corpus_spotting_metrics(conditional_pairs, lexicon)
    return InstructionFollowingReport(
        predicate_precision=satisfying / total if total else 0.0,
        conditional=conditional,
        num_outputs=total,
        num_satisfying=satisfying,
    )
