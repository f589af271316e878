"""Three-branch causal stance model with log-sigmoid fusion and adversarial sub-task heads."""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .corpus import LABELS, EncodedBatch, EncodedExample, Vocab, stack
from .errors import ContractError, DimensionError, ModelFormatError
from .numcore import Tensor

FORMAT_VERSION = "crab-model/1"
BRANCHES = ("d", "t", "c")


@dataclass
class ModelConfig:
    d_in: int
    t_in: int
    pair_in: int
    hidden: int = 64
    dropout: float = 0.5
    lambda_grl: float = 1.0
    init_a: float = 0.0
    # bag-of-words inputs are L1-normalized, so they are amplified before the first layer
    input_gain: float = 5.0
    zero_heads: bool = False


class CausalStanceModel:
    """Parameters of the text, target and text-target branches plus the
    no-treatment constant ``a`` and the TMT/STT heads.

    Each encoder is affine -> tanh -> dropout -> affine; every head is one
    affine layer. ``params`` keeps a fixed insertion order, which fixes the
    serialization order and therefore the bytes of a saved model.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, vocab: Vocab | None = None):
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        h = config.hidden
        widths = {"d": config.d_in, "t": config.t_in, "c": config.pair_in}
        for b in BRANCHES:
            self._affine(f"enc_{b}.l1", widths[b], h, rng)
            self._affine(f"enc_{b}.l2", h, h, rng)
        for b in BRANCHES:
            self._affine(f"head_{b}", h, 3, rng, zero=config.zero_heads)
        self.params["a"] = nc.parameter(np.array([config.init_a]), name="a")
        self._affine("head_tmt", h, 2, rng, zero=config.zero_heads)
        self._affine("head_stt", h, 2, rng, zero=config.zero_heads)

    def _affine(self, name, n_in, n_out, rng, zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            limit = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.params[f"{name}.w"] = nc.parameter(w, name=f"{name}.w")
        self.params[f"{name}.b"] = nc.parameter(np.zeros((1, n_out)), name=f"{name}.b")

    @property
    def a(self) -> float:
        return float(self.params["a"].data[0])

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            if self.params[k].shape != arr.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def affine(self, name: str, x: Tensor) -> Tensor:
        return nc.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def encode_branch(self, branch: str, x: Tensor, train_flag=False, rng=None) -> Tensor:
        if self.config.input_gain != 1.0:
            x = nc.scale(x, self.config.input_gain)
        hidden = nc.tanh(self.affine(f"enc_{branch}.l1", x))
        hidden = nc.dropout(hidden, self.config.dropout, train_flag, rng)
        return self.affine(f"enc_{branch}.l2", hidden)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class BranchScores:
    j_d: Tensor
    j_t: Tensor
    j_c: Tensor


@dataclass
class EffectDecomposition:
    """Factual, counterfactual and no-treatment scores with the derived effects.

    Arrays have shape ``(n, 3)``; ``te - nde - tie`` and ``tie - (y_fact - y_cf)``
    are exactly zero (see :func:`decompose_effects`).
    """

    y_fact: np.ndarray
    y_cf: np.ndarray
    y_null: np.ndarray
    te: np.ndarray = field(init=False)
    nde: np.ndarray = field(init=False)
    tie: np.ndarray = field(init=False)

    def __post_init__(self):
        self.te = self.y_fact - self.y_null
        self.nde = self.y_cf - self.y_null
        self.tie = self.te - self.nde


def _as_batch(encoded) -> EncodedBatch:
    if isinstance(encoded, EncodedBatch):
        return encoded
    if isinstance(encoded, EncodedExample):
        return stack([encoded])
    return stack(list(encoded))


def _check_width(name, arr, width):
    if arr.shape[1] != width:
        raise DimensionError(f"{name} has width {arr.shape[1]}, encoder expects {width}")


def branch_scores(model: CausalStanceModel, encoded, train_flag=False, rng=None):
    """Per-branch stance logits and the text representation ``h_d``."""
    batch = _as_batch(encoded)
    cfg = model.config
    _check_width("d_feat", batch.d, cfg.d_in)
    _check_width("t_feat", batch.t, cfg.t_in)
    _check_width("pair_feat", batch.pair, cfg.pair_in)
    h_d = model.encode_branch("d", nc.constant(batch.d), train_flag, rng)
    h_t = model.encode_branch("t", nc.constant(batch.t), train_flag, rng)
    h_c = model.encode_branch("c", nc.constant(batch.pair), train_flag, rng)
    scores = BranchScores(
        j_d=model.affine("head_d", h_d),
        j_t=model.affine("head_t", h_t),
        j_c=model.affine("head_c", h_c),
    )
    return scores, h_d


def fuse(j_d, j_t, j_c) -> Tensor:
    """``log(sigmoid(j_d + j_t + j_c))`` per class, summed left to right."""
    j_d, j_t, j_c = nc.as_tensors((j_d, j_t, j_c))
    return nc.log_sigmoid((j_d + j_t) + j_c)


def _void(model: CausalStanceModel, like: Tensor) -> Tensor:
    # a broadcast to a uniform logit over the classes
    ones = nc.constant(np.ones((like.shape[0], 3)))
    return ones * model.params["a"]


def counterfactual_fuse(model: CausalStanceModel, j_d) -> Tensor:
    """Scores with target and interaction branches set to the void constant."""
    (j_d,) = nc.as_tensors((j_d,))
    void = _void(model, j_d)
    return fuse(j_d, void, void)


def null_fuse(model: CausalStanceModel, n: int = 1) -> Tensor:
    void = _void(model, nc.constant(np.zeros((n, 3))))
    return fuse(void, void, void)


def _snap(*arrays: np.ndarray) -> list[np.ndarray]:
    # Put all scores on one power-of-two grid coarse enough that every
    # difference between them is representable, so the effect identities
    # hold bitwise.
    peak = max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)
    exponent = math.frexp(peak)[1] if peak > 0 else 0
    quantum = math.ldexp(1.0, exponent - 51)
    return [np.round(a / quantum) * quantum for a in arrays]


def decompose_effects(model: CausalStanceModel, encoded) -> EffectDecomposition:
    scores, _ = branch_scores(model, encoded, train_flag=False)
    y_fact = fuse(scores.j_d, scores.j_t, scores.j_c).data
    y_cf = counterfactual_fuse(model, scores.j_d).data
    y_null = null_fuse(model, y_fact.shape[0]).data
    return EffectDecomposition(*_snap(y_fact, y_cf, y_null))


def adversarial_forward(model: CausalStanceModel, h_d: Tensor, lambda_grl=None, use_grl=True):
    """Stance logits from ``h_d`` directly and TMT/STT logits behind the reversal layer."""
    lam = model.config.lambda_grl if lambda_grl is None else lambda_grl
    stance_logits = model.affine("head_d", h_d)
    h_grl = nc.grl(h_d, lam) if use_grl else h_d
    return stance_logits, model.affine("head_tmt", h_grl), model.affine("head_stt", h_grl)


# -- persistence ----------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shape = tuple(int(s) for s in d["shape"])
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"array payload has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape)


def save(model: CausalStanceModel, path, extra: dict | None = None) -> None:
    """Write the model as a JSON document with base64 little-endian float64 payloads."""
    doc = {
        "format": FORMAT_VERSION,
        "labels": list(LABELS),
        "config": asdict(model.config),
        "vocab_fingerprint": model.vocab.fingerprint if model.vocab else None,
        "vocab": model.vocab.to_dict() if model.vocab else None,
        "extra": extra or {},
        "params": {k: _encode_array(p.data) for k, p in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load(path, expected_fingerprint: str | None = None):
    """Read a saved model; returns ``(model, metadata)``.

    A fingerprint mismatch is not fatal: it is appended to
    ``metadata["warnings"]``.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: not a readable model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_VERSION:
        found = doc.get("format") if isinstance(doc, dict) else None
        raise ModelFormatError(f"{path}: format {found!r}, expected {FORMAT_VERSION!r}")
    if tuple(doc.get("labels", ())) != LABELS:
        raise ModelFormatError(f"{path}: label order {doc.get('labels')} differs from {list(LABELS)}")
    try:
        config = ModelConfig(**doc["config"])
        vocab = Vocab.from_dict(doc["vocab"]) if doc.get("vocab") else None
        state = {k: _decode_array(v) for k, v in doc["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from None
    model = CausalStanceModel(config, vocab=vocab)
    if set(state) != set(model.params):
        raise ModelFormatError(f"{path}: parameter names do not match the model layout")
    model.load_state(state)
    warnings = []
    stored = doc.get("vocab_fingerprint")
    if expected_fingerprint is not None and stored != expected_fingerprint:
        warnings.append(f"vocab fingerprint {stored} does not match expected {expected_fingerprint}")
    meta = {"format": doc["format"], "vocab_fingerprint": stored, "extra": doc.get("extra", {}), "warnings": warnings}
    return model, meta


def model_for_vocab(vocab: Vocab, rng=None, **overrides) -> CausalStanceModel:
    d_in, t_in, pair_in = vocab.widths
    config = ModelConfig(d_in=d_in, t_in=t_in, pair_in=pair_in, **overrides)
    return CausalStanceModel(config, rng=rng, vocab=vocab)


def require_labels(batch: EncodedBatch, which: str) -> np.ndarray:
    labels = getattr(batch, which)
    if np.any(labels < 0):
        raise ContractError(f"{which} label is unset for some examples")
    return labels
