"""Inference modes, baselines, macro-F1 and slice reports."""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .corpus import LABEL_INDEX, LABELS, EncodedBatch, Example, encode_batch
from .errors import ContractError
from .model import _as_batch, branch_scores, counterfactual_fuse, decompose_effects, fuse

MODES = ("tie", "factual", "text_only", "poe", "majority")


@dataclass(frozen=True)
class Prediction:
    id: str
    label: str
    scores: tuple[float, float, float]
    mode: str


def _to_predictions(ids, scores: np.ndarray, mode: str) -> list[Prediction]:
    # np.argmax returns the first maximum, i.e. ties go to the earlier class
    labels = np.argmax(scores, axis=1)
    return [Prediction(i, LABELS[int(l)], tuple(float(x) for x in s), mode) for i, l, s in zip(ids, labels, scores)]


def predict_tie(model, encoded) -> list[Prediction]:
    batch = _as_batch(encoded)
    return _to_predictions(batch.ids, decompose_effects(model, batch).tie, "tie")


def predict_factual(model, encoded) -> list[Prediction]:
    batch = _as_batch(encoded)
    s, _ = branch_scores(model, batch)
    return _to_predictions(batch.ids, fuse(s.j_d, s.j_t, s.j_c).data, "factual")


def predict_text_only(model, encoded) -> list[Prediction]:
    batch = _as_batch(encoded)
    s, _ = branch_scores(model, batch)
    return _to_predictions(batch.ids, counterfactual_fuse(model, s.j_d).data, "text_only")


def _softmax(y: np.ndarray) -> np.ndarray:
    return np.exp(nc.log_softmax_rows(nc.constant(y)).data)


def factual_probs(model, encoded) -> np.ndarray:
    s, _ = branch_scores(model, _as_batch(encoded))
    return _softmax(fuse(s.j_d, s.j_t, s.j_c).data)


def text_only_probs(model, encoded) -> np.ndarray:
    s, _ = branch_scores(model, _as_batch(encoded))
    return _softmax(counterfactual_fuse(model, s.j_d).data)


def poe_scores(bias_probs, full_probs) -> np.ndarray:
    """Renormalized elementwise product of two probability vectors (or rows of them)."""
    bias = np.atleast_2d(np.asarray(bias_probs, dtype=float))
    full = np.atleast_2d(np.asarray(full_probs, dtype=float))
    if bias.shape != full.shape or bias.shape[-1] != 3:
        raise ContractError(f"poe inputs must both be 3-class, got {bias.shape} and {full.shape}")
    for name, p in (("bias", bias), ("full", full)):
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
            raise ContractError(f"{name} probabilities are not normalized")
    prod = bias * full
    total = prod.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ContractError("poe product vanishes for some example")
    return prod / total


def poe_baseline(text_only_probs_, full_probs_, ids=None):
    """Product-of-experts prediction; a single Prediction for 3-vector inputs."""
    scores = poe_scores(text_only_probs_, full_probs_)
    single = np.ndim(full_probs_) == 1
    ids = ids if ids is not None else [str(i) for i in range(len(scores))]
    preds = _to_predictions(ids, scores, "poe")
    return preds[0] if single else preds


class MajorityVote:
    """Per-target most frequent training stance, with the global majority as fallback."""

    def __init__(self, train_set: Sequence[Example]):
        if not train_set:
            raise ContractError("majority vote needs a nonempty training set")
        self.by_target = {t: self._majority(c) for t, c in self._counts(train_set).items()}
        self.global_label = self._majority(Counter(ex.stance for ex in train_set))

    @staticmethod
    def _counts(examples):
        out = defaultdict(Counter)
        for ex in examples:
            out[ex.target][ex.stance] += 1
        return out

    @staticmethod
    def _majority(counter: Counter) -> str:
        # ties go to the earlier class in the label order
        return max(LABELS, key=lambda l: (counter[l], -LABEL_INDEX[l]))

    def label_for(self, target: str) -> str:
        return self.by_target.get(target, self.global_label)

    def __call__(self, examples: Sequence[Example]) -> list[str]:
        return [self.label_for(ex.target) for ex in examples]

    def predict(self, examples: Sequence[Example]) -> list[Prediction]:
        out = []
        for ex in examples:
            label = self.label_for(ex.target)
            scores = tuple(1.0 if l == label else 0.0 for l in LABELS)
            out.append(Prediction(ex.id, label, scores, "majority"))
        return out


def majority_vote_baseline(train_set: Sequence[Example]) -> MajorityVote:
    return MajorityVote(train_set)


def _label_of(x) -> str:
    if isinstance(x, Prediction):
        return x.label
    if isinstance(x, Example):
        return x.stance
    if isinstance(x, (int, np.integer)):
        return LABELS[int(x)]
    return x


def macro_f1(predictions, golds):
    """``(F_favor, F_against, F_macro)`` over the pooled examples.

    NONE counts as a class for precision/recall bookkeeping but is left out
    of the average. A class that is never predicted or never gold gets F=0.
    """
    preds = [_label_of(p) for p in predictions]
    gold = [_label_of(g) for g in golds]
    if len(preds) != len(gold):
        raise ContractError(f"macro_f1: {len(preds)} predictions vs {len(gold)} golds")
    f = []
    for cls in ("FAVOR", "AGAINST"):
        tp = sum(p == cls and g == cls for p, g in zip(preds, gold))
        n_pred = sum(p == cls for p in preds)
        n_gold = sum(g == cls for g in gold)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gold if n_gold else 0.0
        f.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return f[0], f[1], (f[0] + f[1]) / 2


def target_averaged_f1(predictions, golds, targets) -> float:
    by_target = defaultdict(lambda: ([], []))
    for p, g, t in zip(predictions, golds, targets):
        by_target[t][0].append(p)
        by_target[t][1].append(g)
    if not by_target:
        return float("nan")
    return float(np.mean([macro_f1(p, g)[2] for p, g in by_target.values()]))


def predict_labels(model, batch: EncodedBatch, mode: str) -> list[str]:
    """Labels for ``tie``, ``factual`` or ``text_only`` inference."""
    if mode == "tie":
        return [p.label for p in predict_tie(model, batch)]
    if mode == "factual":
        return [p.label for p in predict_factual(model, batch)]
    if mode == "text_only":
        return [p.label for p in predict_text_only(model, batch)]
    raise ContractError(f"predict_labels does not handle mode {mode!r}")


@dataclass
class SliceRow:
    slice: str
    mode: str
    support: int
    f_favor: float | None
    f_against: float | None
    f_macro: float | None
    f_macro_target_avg: float | None


@dataclass
class EvalReport:
    rows: list[SliceRow] = field(default_factory=list)
    per_target: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    model_fingerprint: str | None = None
    warnings: list[str] = field(default_factory=list)

    def row(self, slice_name: str, mode: str) -> SliceRow:
        for r in self.rows:
            if r.slice == slice_name and r.mode == mode:
                return r
        raise KeyError((slice_name, mode))

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "per_target": self.per_target,
            "config": self.config,
            "seeds": self.seeds,
            "model_fingerprint": self.model_fingerprint,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["slice", "mode", "support", "f_favor", "f_against", "f_macro", "f_macro_target_avg"])
        for r in self.rows:
            writer.writerow([r.slice, r.mode, r.support] + ["" if v is None else f"{v:.6f}" for v in
                            (r.f_favor, r.f_against, r.f_macro, r.f_macro_target_avg)])
        return buf.getvalue()

    def to_text(self) -> str:
        def fmt(v):
            return "   -  " if v is None else f"{100 * v:6.2f}"

        lines = [f"{'slice':<16} {'mode':<10} {'n':>6} {'F_fav':>6} {'F_ag':>6} {'F_mac':>6} {'F_tgt':>6}"]
        for r in self.rows:
            lines.append(
                f"{r.slice:<16} {r.mode:<10} {r.support:>6} {fmt(r.f_favor)} {fmt(r.f_against)} "
                f"{fmt(r.f_macro)} {fmt(r.f_macro_target_avg)}"
            )
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def _slice_labels(model, examples, mode, train_set, bias_model):
    if mode == "majority":
        if train_set is None:
            raise ContractError("the majority mode needs the training set")
        return MajorityVote(train_set)(examples)
    batch = encode_batch(examples, model.vocab)
    if mode == "poe":
        bias_probs = text_only_probs(bias_model, encode_batch(examples, bias_model.vocab)) if bias_model else \
            text_only_probs(model, batch)
        return [p.label for p in poe_baseline(bias_probs, factual_probs(model, batch), ids=batch.ids)]
    return predict_labels(model, batch, mode)


def evaluate_slices(
    model,
    slices: Mapping[str, Sequence[Example]],
    modes: Sequence[str] = ("tie", "factual", "text_only"),
    train_set: Sequence[Example] | None = None,
    bias_model=None,
    config: dict | None = None,
    seeds: Sequence[int] = (),
    expected_fingerprint: str | None = None,
    jobs: int = 1,
) -> EvalReport:
    """One row per (slice, mode) plus a per-target breakdown.

    ``poe`` combines the factual distribution with ``bias_model``'s text-only
    distribution, or with the model's own text-only branch when no bias model
    is given. ``majority`` needs ``train_set``.
    """
    for m in modes:
        if m not in MODES:
            raise ContractError(f"unknown mode {m!r}; expected one of {MODES}")
    report = EvalReport(config=dict(config or {}), seeds=list(seeds), model_fingerprint=model.fingerprint())
    if expected_fingerprint is not None and model.vocab and model.vocab.fingerprint != expected_fingerprint:
        report.warnings.append(
            f"model vocab fingerprint {model.vocab.fingerprint} differs from data fingerprint {expected_fingerprint}"
        )
    tasks = [(name, mode) for name in slices for mode in modes]

    def run(task):
        name, mode = task
        examples = list(slices[name])
        if not examples:
            return name, mode, [], []
        return name, mode, examples, _slice_labels(model, examples, mode, train_set, bias_model)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    for name, mode, examples, labels in results:
        if not examples:
            report.rows.append(SliceRow(name, mode, 0, None, None, None, None))
            continue
        gold = [ex.stance for ex in examples]
        targets = [ex.target for ex in examples]
        f_fav, f_ag, f_mac = macro_f1(labels, gold)
        report.rows.append(
            SliceRow(name, mode, len(examples), f_fav, f_ag, f_mac, target_averaged_f1(labels, gold, targets))
        )
        breakdown = report.per_target.setdefault(name, {}).setdefault(mode, {})
        for t in sorted(set(targets)):
            idx = [i for i, tt in enumerate(targets) if tt == t]
            breakdown[t] = {
                "support": len(idx),
                "f_macro": macro_f1([labels[i] for i in idx], [gold[i] for i in idx])[2],
            }
    return report


def summarize_seeds(reports: Sequence[EvalReport]) -> dict[tuple[str, str], dict[str, float]]:
    """Mean and median of per-seed F_macro for each (slice, mode)."""
    values = defaultdict(list)
    for rep in reports:
        for r in rep.rows:
            if r.f_macro is not None:
                values[(r.slice, r.mode)].append(r.f_macro)
    return {
        key: {"mean": float(np.mean(v)), "median": float(statistics.median(v)), "n_seeds": len(v)}
        for key, v in values.items()
    }
