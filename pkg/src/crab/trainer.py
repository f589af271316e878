"""Loss assembly, KL calibration of the void constant, and the training loop."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import EncodedBatch, Example, build_vocab, encode_batch
from .errors import ContractError
from .evaluator import macro_f1, predict_labels
from .model import (
    CausalStanceModel,
    adversarial_forward,
    branch_scores,
    counterfactual_fuse,
    fuse,
    model_for_vocab,
    require_labels,
)
from .numcore import AdamState, RngStreams, Tensor

OBJECTIVES = ("crab", "factual", "text_only", "poe")
# inference mode used for model selection under each objective
SELECTION_MODE = {"crab": "tie", "factual": "factual", "text_only": "text_only", "poe": "factual"}


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    lambda_grl: float = 1.0
    grl_warmup: bool = False
    val_fraction: float = 0.15
    use_grl: bool = True
    use_tmt: bool = True
    use_stt: bool = True
    use_kl: bool = True
    patience: int = 5
    hidden: int = 64
    dropout: float = 0.5
    min_freq: int = 1
    objective: str = "crab"
    a_limit: float = 50.0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("lambda1 and lambda2 must be nonnegative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ContractError("batch_size and patience must be positive, epochs nonnegative")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.objective not in OBJECTIVES:
            raise ContractError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 < self.a_limit < 100.0:
            raise ContractError("a_limit must lie in (0, 100)")


@dataclass
class EpochRecord:
    epoch: int
    l_c: float
    l_d: float
    l_tmt: float
    l_stt: float
    l_kl: float
    val_f1: float
    a: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ("epoch", "l_c", "l_d", "l_tmt", "l_stt", "l_kl", "val_f1", "a")
        buf.write(",".join(cols) + "\n")
        for r in self.records:
            row = asdict(r)
            buf.write(",".join(str(row["epoch"]) if c == "epoch" else f"{row[c]:.17g}" for c in cols) + "\n")
        return buf.getvalue()


def cross_entropy(logits: Tensor, labels: np.ndarray, k: int | None = None, log_probs=False) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` (or of ``logits`` read as log-probabilities)."""
    n, k = logits.shape[0], k or logits.shape[1]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logp = logits if log_probs else nc.log_softmax_rows(logits)
    return nc.scale(nc.sum_all(logp * onehot), -1.0 / n)


def compute_cls_loss(
    model: CausalStanceModel,
    batch: EncodedBatch,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    train_flag: bool = False,
    lambda_grl: float | None = None,
    bias_log_probs: np.ndarray | None = None,
):
    """Classification loss ``L_C + L_D + lambda1 L_TMT + lambda2 L_STT``.

    ``L_C`` scores the full fusion, ``L_D`` the text-only counterfactual fusion;
    the sub-task heads read ``h_d`` through the reversal layer. Returns the
    loss tensor and a dict of the component values (disabled terms are 0).
    """
    config = config or TrainConfig()
    scores, h_d = branch_scores(model, batch, train_flag=train_flag, rng=rng)
    stance = batch.stance
    comps = {"l_c": 0.0, "l_d": 0.0, "l_tmt": 0.0, "l_stt": 0.0}
    terms = []

    if config.objective in ("crab", "factual", "poe"):
        y_fact = fuse(scores.j_d, scores.j_t, scores.j_c)
        if config.objective == "poe":
            if bias_log_probs is None:
                raise ContractError("the poe objective needs bias-model log-probabilities")
            combined = nc.log_softmax_rows(nc.log_softmax_rows(y_fact) + nc.constant(bias_log_probs))
            l_c = cross_entropy(combined, stance, log_probs=True)
        else:
            l_c = cross_entropy(y_fact, stance)
        comps["l_c"] = float(l_c.data[0])
        terms.append(l_c)

    if config.objective in ("crab", "text_only"):
        y_cf = counterfactual_fuse(model, scores.j_d)
        l_d = cross_entropy(y_cf, stance)
        comps["l_d"] = float(l_d.data[0])
        terms.append(l_d)

    if config.objective == "crab" and (config.use_tmt or config.use_stt):
        lam = model.config.lambda_grl if lambda_grl is None else lambda_grl
        _, tmt_logits, stt_logits = adversarial_forward(model, h_d, lam, use_grl=config.use_grl)
        if config.use_tmt:
            l_tmt = cross_entropy(tmt_logits, require_labels(batch, "tmt"))
            comps["l_tmt"] = float(l_tmt.data[0])
            terms.append(nc.scale(l_tmt, config.lambda1))
        if config.use_stt:
            l_stt = cross_entropy(stt_logits, require_labels(batch, "stt"))
            comps["l_stt"] = float(l_stt.data[0])
            terms.append(nc.scale(l_stt, config.lambda2))

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    comps["total"] = float(total.data[0])
    return total, comps


def compute_kl_loss(model: CausalStanceModel, batch: EncodedBatch) -> Tensor:
    """Cross-entropy of the counterfactual softmax against the (constant) factual one.

    Only ``a`` is reachable from the returned loss, so its backward pass
    produces a gradient for ``a`` alone.
    """
    if len(batch) == 0:
        raise ContractError("compute_kl_loss needs a nonempty batch")
    scores, _ = branch_scores(model, batch, train_flag=False)
    y_fact = fuse(scores.j_d, scores.j_t, scores.j_c).data
    p_fact = np.exp(nc.log_softmax_rows(nc.constant(y_fact)).data)
    y_cf = counterfactual_fuse(model, nc.constant(scores.j_d.data))
    log_q = nc.log_softmax_rows(y_cf)
    n, k = y_fact.shape
    return nc.scale(nc.sum_all(log_q * p_fact), -1.0 / (n * k))


def kl_step(model: CausalStanceModel, batch: EncodedBatch, state: AdamState, a_limit: float = 50.0) -> float:
    loss = compute_kl_loss(model, batch)
    grads = nc.backward(loss)
    a = model.params["a"]
    nc.adam_step({"a": a}, {"a": grads.get(a, np.zeros_like(a.data))}, state)
    a.data = np.clip(a.data, -a_limit, a_limit)
    return float(loss.data[0])


def cls_step(model, batch, config, state, rng, lambda_grl=None, bias_log_probs=None):
    loss, comps = compute_cls_loss(
        model, batch, config, rng=rng, train_flag=True, lambda_grl=lambda_grl, bias_log_probs=bias_log_probs
    )
    grads = nc.backward(loss)
    named = {k: grads.get(p, np.zeros_like(p.data)) for k, p in model.params.items()}
    nc.adam_step(model.params, named, state)
    a = model.params["a"]
    a.data = np.clip(a.data, -config.a_limit, config.a_limit)
    return comps


def bias_log_probs_for(bias_model: CausalStanceModel, examples: Sequence[Example], vocab=None) -> np.ndarray:
    """Log-probabilities of a text-only model, encoded with the bias model's own vocab."""
    batch = encode_batch(examples, bias_model.vocab)
    scores, _ = branch_scores(bias_model, batch)
    y_cf = counterfactual_fuse(bias_model, scores.j_d)
    return nc.log_softmax_rows(y_cf).data


def train(
    config: TrainConfig,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    bias_model: CausalStanceModel | None = None,
):
    """Fit a model; returns ``(model, history)`` with the best-validation parameters.

    Each batch takes one Adam step on the classification loss over every
    parameter, then (for the ``crab`` objective) one Adam step on the KL loss
    over ``a`` alone.
    """
    config.validate()
    if not train_set:
        raise ContractError("train needs a nonempty training set")
    streams = RngStreams(config.seed)
    vocab = build_vocab(train_set, config.min_freq)
    model = model_for_vocab(
        vocab, rng=streams.get("init"), hidden=config.hidden, dropout=config.dropout, lambda_grl=config.lambda_grl
    )
    history = TrainHistory()
    if config.epochs == 0:
        return model, history

    enc_train = encode_batch(train_set, vocab)
    val_set = list(val_set)
    enc_val = encode_batch(val_set, vocab) if val_set else None
    val_gold = [ex.stance for ex in val_set]
    bias_lp = None
    if config.objective == "poe":
        if bias_model is None:
            raise ContractError("the poe objective needs a trained text-only bias model")
        bias_lp = bias_log_probs_for(bias_model, train_set)

    cls_state = AdamState(lr=config.learning_rate)
    kl_state = AdamState(lr=config.learning_rate)
    shuffle = streams.get("shuffle")
    drop_rng = streams.get("dropout")
    use_kl = config.use_kl and config.objective == "crab"
    n = len(enc_train)
    steps_per_epoch = -(-n // config.batch_size)
    step = 0
    best_f1, best_state, stale = -np.inf, model.state(), 0

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        sums = {"l_c": 0.0, "l_d": 0.0, "l_tmt": 0.0, "l_stt": 0.0, "l_kl": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = enc_train.take(idx)
            lam = config.lambda_grl
            if config.grl_warmup:
                lam *= min(1.0, step / steps_per_epoch)
            comps = cls_step(
                model, batch, config, cls_state, drop_rng, lambda_grl=lam,
                bias_log_probs=None if bias_lp is None else bias_lp[idx],
            )
            for k in ("l_c", "l_d", "l_tmt", "l_stt"):
                sums[k] += comps[k] * len(idx)
            if use_kl:
                sums["l_kl"] += kl_step(model, batch, kl_state, config.a_limit) * len(idx)
            step += 1

        if enc_val is not None:
            labels = predict_labels(model, enc_val, SELECTION_MODE[config.objective])
            val_f1 = macro_f1(labels, val_gold)[2]
        else:
            val_f1 = float("nan")
        history.records.append(EpochRecord(epoch, *(sums[k] / n for k in sums), val_f1, model.a))

        if enc_val is None or val_f1 > best_f1:
            best_f1, best_state, stale = val_f1, model.state(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state(best_state)
    return model, history
