"""Stance corpora: TSV ingestion, tokenization, sub-task labels, features,
synthetic shortcut corpora and hard test-set builders."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import string
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError

LABELS = ("FAVOR", "AGAINST", "NONE")
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}
ORIGINS = ("ingested", "synthetic", "replaced", "negated")

TSV_COLUMNS = ("ID", "Target", "Tweet", "Stance")


@dataclass(frozen=True)
class Example:
    id: str
    target: str
    text: str
    stance: str
    tmt_label: bool | None = None
    stt_label: bool | None = None
    origin: str = "ingested"

    def __post_init__(self):
        if self.stance not in LABEL_INDEX:
            raise ContractError(f"unknown stance {self.stance!r}")
        if self.stt_label is not None and self.stt_label != (self.stance != "NONE"):
            raise ContractError(f"example {self.id}: stt_label disagrees with stance")
        if self.origin not in ORIGINS:
            raise ContractError(f"unknown origin {self.origin!r}")


# -- TSV ----------------------------------------------------------------------


def _read_text(path) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError:
        # the official SemEval release is not valid UTF-8 throughout
        return raw.decode("latin-1")


def load_semeval(path) -> list[Example]:
    """Read a tab-separated stance file with columns ID, Target, Tweet, Stance.

    Header names are matched case-insensitively; an optional ``Origin`` column
    (written by :func:`write_tsv`) is honoured.
    """
    text = _read_text(path)
    rows = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(rows)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, expected a header row") from None
    lookup = {name.strip().lower(): i for i, name in enumerate(header)}
    missing = [c for c in TSV_COLUMNS if c.lower() not in lookup]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    cols = [lookup[c.lower()] for c in TSV_COLUMNS]
    origin_col = lookup.get("origin")

    examples = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) <= max(cols):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
        ex_id, target, tweet, stance = (row[c] for c in cols)
        stance = stance.strip().upper()
        if stance not in LABEL_INDEX:
            raise ParseError(f"unknown stance {stance!r}", lineno)
        origin = "ingested"
        if origin_col is not None and origin_col < len(row) and row[origin_col].strip():
            origin = row[origin_col].strip()
            if origin not in ORIGINS:
                raise ParseError(f"unknown origin {origin!r}", lineno)
        examples.append(Example(ex_id.strip(), target.strip(), tweet, stance, origin=origin))
    return examples


def write_tsv(examples: Iterable[Example], path, with_origin=True) -> None:
    columns = list(TSV_COLUMNS) + (["Origin"] if with_origin else [])
    lines = ["\t".join(columns)]
    for ex in examples:
        fields = [ex.id, ex.target, ex.text, ex.stance] + ([ex.origin] if with_origin else [])
        for f in fields:
            if "\t" in f or "\n" in f:
                raise ContractError(f"example {ex.id}: field contains a tab or newline")
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def target_counts(examples: Iterable[Example]) -> dict[str, int]:
    counts = Counter(ex.target for ex in examples)
    return dict(sorted(counts.items()))


def dataset_fingerprint(examples: Iterable[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(f"{ex.target}\x1f{ex.text}\x1f{ex.stance}\x1e".encode("utf-8"))
    return h.hexdigest()[:16]


# -- tokens and sub-task labels ----------------------------------------------

_PUNCT = string.punctuation
_LEADING_STRIP = "".join(c for c in _PUNCT if c not in "#@")


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        tok = raw.rstrip(_PUNCT).lstrip(_LEADING_STRIP)
        if tok.strip("#@"):
            tokens.append(tok)
    return tokens


def load_alias_table(path=None) -> dict[str, frozenset[str]]:
    """Parse ``Target<TAB>alias1,alias2`` lines; ``None`` loads the bundled SemEval table."""
    if path is None:
        text = resources.files("crab").joinpath("data/semeval_aliases.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            target, aliases = line.split("\t", 1)
        except ValueError:
            raise ParseError("expected Target<TAB>aliases", lineno) from None
        names = frozenset(a.strip().lower() for a in aliases.split(",") if a.strip())
        if not names:
            raise ParseError(f"target {target!r} has no aliases", lineno)
        table[target.strip()] = names
    return table


def derive_tmt_label(example: Example, alias_table: Mapping[str, Iterable[str]]) -> bool:
    """True iff an alias of the target is a token of the text or sits inside a hashtag."""
    if example.target not in alias_table:
        raise ConfigError(f"target {example.target!r} is not in the alias table")
    aliases = alias_table[example.target]
    tokens = tokenize(example.text)
    token_set = set(tokens)
    hashtags = [t[1:] for t in tokens if t.startswith("#")]
    for alias in aliases:
        if alias in token_set or any(alias in tag for tag in hashtags):
            return True
    return False


def derive_stt_label(example: Example) -> bool:
    return example.stance != "NONE"


def with_subtask_labels(examples: Iterable[Example], alias_table) -> list[Example]:
    return [
        replace(ex, tmt_label=derive_tmt_label(ex, alias_table), stt_label=derive_stt_label(ex))
        for ex in examples
    ]


# -- features -----------------------------------------------------------------

UNK = "<unk>"


@dataclass
class Vocab:
    """Text and target token indices; index 0 of each is the unknown token."""

    tokens: list[str]
    target_tokens: list[str]
    min_freq: int = 1
    built_from: str = ""
    index: dict[str, int] = field(init=False, repr=False)
    target_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK or self.target_tokens[0] != UNK:
            raise ContractError("vocab index 0 must be the unknown token")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.target_index = {t: i for i, t in enumerate(self.target_tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def fingerprint(self) -> str:
        return self.built_from

    @property
    def widths(self) -> tuple[int, int, int]:
        """Input widths of the text, target and pair features."""
        v, vt = len(self.tokens), len(self.target_tokens)
        return v, vt, 2 * v + vt

    def lookup(self, token: str) -> int:
        return self.index.get(token, 0)

    def to_dict(self):
        return {
            "tokens": self.tokens,
            "target_tokens": self.target_tokens,
            "min_freq": self.min_freq,
            "built_from": self.built_from,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["tokens"]), list(d["target_tokens"]), int(d["min_freq"]), d["built_from"])


def build_vocab(examples: Sequence[Example], min_freq: int = 1) -> Vocab:
    if min_freq < 1:
        raise ContractError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(tok for ex in examples for tok in tokenize(ex.text))
    target_counts_ = Counter(tok for ex in examples for tok in tokenize(ex.target))
    tokens = [UNK] + sorted(t for t, c in counts.items() if c >= min_freq and t != UNK)
    target_tokens = [UNK] + sorted(t for t in target_counts_ if t != UNK)
    return Vocab(tokens, target_tokens, min_freq, dataset_fingerprint(examples))


@dataclass
class EncodedExample:
    d_feat: np.ndarray
    t_feat: np.ndarray
    pair_feat: np.ndarray
    stance: int
    tmt: int  # -1 when unset
    stt: int
    id: str = ""
    target: str = ""


def _l1(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    return v / s if s > 0 else v


def encode(example: Example, vocab: Vocab) -> EncodedExample:
    v, vt, _ = vocab.widths
    d = np.zeros(v)
    for tok in tokenize(example.text):
        d[vocab.lookup(tok)] += 1.0
    d = _l1(d)
    t = np.zeros(vt)
    mention = np.zeros(v)
    for tok in tokenize(example.target):
        t[vocab.target_index.get(tok, 0)] += 1.0
        idx = vocab.lookup(tok)
        if idx:
            mention[idx] = 1.0
    t = _l1(t)
    pair = np.concatenate([d, t, d * mention])
    return EncodedExample(
        d_feat=d,
        t_feat=t,
        pair_feat=pair,
        stance=LABEL_INDEX[example.stance],
        tmt=-1 if example.tmt_label is None else int(example.tmt_label),
        stt=-1 if example.stt_label is None else int(example.stt_label),
        id=example.id,
        target=example.target,
    )


@dataclass
class EncodedBatch:
    """Row-stacked features and labels for a group of examples."""

    d: np.ndarray
    t: np.ndarray
    pair: np.ndarray
    stance: np.ndarray
    tmt: np.ndarray
    stt: np.ndarray
    ids: list[str]
    targets: list[str]

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "EncodedBatch":
        idx = np.asarray(idx, dtype=int)
        return EncodedBatch(
            self.d[idx], self.t[idx], self.pair[idx], self.stance[idx], self.tmt[idx],
            self.stt[idx], [self.ids[i] for i in idx], [self.targets[i] for i in idx],
        )


def stack(encoded: Sequence[EncodedExample], widths=None) -> EncodedBatch:
    if not encoded:
        if widths is None:
            raise ContractError("cannot stack an empty batch without feature widths")
        v, vt, vp = widths
        e = np.zeros(0, dtype=int)
        return EncodedBatch(np.zeros((0, v)), np.zeros((0, vt)), np.zeros((0, vp)), e, e, e, [], [])
    return EncodedBatch(
        np.stack([e.d_feat for e in encoded]),
        np.stack([e.t_feat for e in encoded]),
        np.stack([e.pair_feat for e in encoded]),
        np.array([e.stance for e in encoded]),
        np.array([e.tmt for e in encoded]),
        np.array([e.stt for e in encoded]),
        [e.id for e in encoded],
        [e.target for e in encoded],
    )


def encode_batch(examples: Sequence[Example], vocab: Vocab) -> EncodedBatch:
    return stack([encode(ex, vocab) for ex in examples], widths=vocab.widths)


def split_train_val(examples: Sequence[Example], val_fraction: float, seed: int):
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng([int(seed), zlib.crc32(b"split")])
    order = rng.permutation(len(examples))
    n_val = int(round(len(examples) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in val_idx]
    val = [ex for i, ex in enumerate(examples) if i in val_idx]
    return train, val


# -- synthetic shortcut corpora -----------------------------------------------

TARGET_NAMES = (
    "Aurora", "Borealis", "Cascade", "Dynamo", "Ember",
    "Fjord", "Glacier", "Harbor", "Isotope", "Juniper",
)
NEUTRAL_TOPICS = ("weather", "lunch", "traffic", "football", "coffee", "movie")
POSITIVE = ("{e} is great", "i love {e}", "{e} deserves support", "so proud of {e}")
NEGATIVE = ("{e} is awful", "i hate {e}", "{e} must be stopped", "shame on {e}")
NEUTRAL = ("what about {e}", "{e} was on the news", "anyone watching {e}", "thinking about {e}")
FILLERS = ("today", "honestly", "really", "folks", "again", "tbh")


@dataclass(frozen=True)
class SyntheticSpec:
    """A corpus whose stance depends on the (target, opinion) pair, with one
    text token spuriously correlated with FAVOR.

    Targets come in rival pairs: praising a target (or attacking its rival)
    is FAVOR, the reverse is AGAINST. NONE texts either voice an opinion
    about something else or mention an entity without any opinion.
    """

    n_targets: int = 4
    n_train: int = 2000
    n_test: int = 1000
    bias_token: str = "#truth"
    bias_strength: float = 0.9
    flip_in_test: bool = True
    label_prior: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    template_set: str = "default"
    seed: int = 0

    def validate(self) -> None:
        if not 0.5 <= self.bias_strength <= 1.0:
            raise ConfigError(f"bias_strength must lie in [0.5, 1], got {self.bias_strength}")
        if len(self.label_prior) != 3 or abs(sum(self.label_prior) - 1.0) > 1e-9:
            raise ConfigError(f"label_prior must be 3 probabilities summing to 1, got {self.label_prior}")
        if any(p < 0 for p in self.label_prior):
            raise ConfigError("label_prior entries must be nonnegative")
        if self.n_targets < 2 or self.n_targets % 2 or self.n_targets > len(TARGET_NAMES):
            raise ConfigError(f"n_targets must be even and in [2, {len(TARGET_NAMES)}], got {self.n_targets}")
        if self.template_set != "default":
            raise ConfigError(f"unknown template_set {self.template_set!r}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("example counts must be nonnegative")
        if not tokenize(self.bias_token) or len(tokenize(self.bias_token)) != 1:
            raise ConfigError(f"bias_token must be a single token, got {self.bias_token!r}")


def synthetic_targets(spec: SyntheticSpec) -> list[str]:
    return list(TARGET_NAMES[: spec.n_targets])


def synthetic_alias_table(spec: SyntheticSpec) -> dict[str, frozenset[str]]:
    return {name: frozenset({name.lower()}) for name in synthetic_targets(spec)}


def _synthetic_split(spec: SyntheticSpec, split: str, n: int, anti: bool) -> list[Example]:
    rng = np.random.default_rng([spec.seed, zlib.crc32(f"data-gen/{split}".encode())])
    targets = synthetic_targets(spec)
    entities = [t.lower() for t in targets]
    prior = np.asarray(spec.label_prior, dtype=float)
    rho = spec.bias_strength
    out = []
    for i in range(n):
        ti = int(rng.integers(len(targets)))
        stance = LABELS[int(rng.choice(3, p=prior))]
        rival = ti ^ 1
        neutral = False
        if stance == "NONE":
            # half of the NONE texts voice an opinion about something else,
            # half mention any entity (the target included) without an opinion
            neutral = bool(rng.integers(2))
            if neutral:
                others = entities + list(NEUTRAL_TOPICS)
            else:
                others = [e for j, e in enumerate(entities) if j not in (ti, rival)] + list(NEUTRAL_TOPICS)
            entity = others[int(rng.integers(len(others)))]
            positive = bool(rng.integers(2))
        else:
            about_self = bool(rng.integers(2))
            entity = entities[ti] if about_self else entities[rival]
            # praise of self or attack on the rival is FAVOR
            positive = about_self == (stance == "FAVOR")
        pool = NEUTRAL if neutral else POSITIVE if positive else NEGATIVE
        words = pool[int(rng.integers(len(pool)))].format(e=entity).split()
        for _ in range(int(rng.integers(3))):
            words.insert(int(rng.integers(len(words) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
        p_bias = rho if stance == "FAVOR" else 1.0 - rho
        if anti:
            p_bias = 1.0 - p_bias
        if rng.random() < p_bias:
            words.insert(int(rng.integers(len(words) + 1)), spec.bias_token)
        out.append(
            Example(
                id=f"syn-{split}-{i:05d}",
                target=targets[ti],
                text=" ".join(words),
                stance=stance,
                tmt_label=entity == entities[ti],
                stt_label=stance != "NONE",
                origin="synthetic",
            )
        )
    return out


def gen_synthetic(spec: SyntheticSpec):
    """Return ``(train, test_iid, test_anti)``; deterministic given ``spec.seed``."""
    spec.validate()
    train = _synthetic_split(spec, "train", spec.n_train, anti=False)
    test_iid = _synthetic_split(spec, "test_iid", spec.n_test, anti=False)
    test_anti = _synthetic_split(spec, "test_anti", spec.n_test, anti=spec.flip_in_test)
    return train, test_iid, test_anti


# -- hard test sets -------------------------------------------------------------

NEGATION_TEMPLATE = "opposition to {target}"
_FLIP = {"FAVOR": "AGAINST", "AGAINST": "FAVOR", "NONE": "NONE"}


def flip_stance(stance: str) -> str:
    return _FLIP[stance]


def make_target_negated(test_set: Iterable[Example]) -> list[Example]:
    return [
        replace(
            ex,
            id=f"{ex.id}-neg",
            target=NEGATION_TEMPLATE.format(target=ex.target),
            stance=flip_stance(ex.stance),
            origin="negated",
        )
        for ex in test_set
    ]


def make_target_replaced(test_set: Iterable[Example], target_pool: Sequence[str], alias_table) -> list[Example]:
    """Pair each text with every other pool target it does not mention, as NONE."""
    out = []
    for ex in test_set:
        for new_target in target_pool:
            if new_target == ex.target:
                continue
            candidate = replace(ex, target=new_target)
            if derive_tmt_label(candidate, alias_table):
                continue
            out.append(
                Example(
                    id=f"{ex.id}-rep-{new_target}",
                    target=new_target,
                    text=ex.text,
                    stance="NONE",
                    tmt_label=False,
                    stt_label=False,
                    origin="replaced",
                )
            )
    return out


def pmi_table(train_set: Sequence[Example]) -> dict[str, dict[str, float]]:
    """Add-one smoothed PMI between token presence and stance.

    ``PMI(w, l) = log p(l | w) - log p(l)``, with ``p(l | w)`` estimated as
    ``(c(w, l) + 1) / (c(w) + 3)`` over documents containing ``w``.
    """
    if not train_set:
        raise ContractError("pmi_table needs a nonempty training set")
    label_counts = Counter(ex.stance for ex in train_set)
    n = len(train_set)
    joint: dict[str, Counter] = defaultdict(Counter)
    for ex in train_set:
        for tok in set(tokenize(ex.text)):
            joint[tok][ex.stance] += 1
    table = {}
    for tok, by_label in joint.items():
        total = sum(by_label.values())
        row = {}
        for label in LABELS:
            prior = label_counts[label] / n
            if prior == 0:
                continue
            row[label] = math.log((by_label[label] + 1) / (total + len(LABELS))) - math.log(prior)
        table[tok] = row
    return table


def select_pmi_tail(test_set: Sequence[Example], train_set: Sequence[Example], threshold: float):
    """Keep examples whose strongest lexical cue (max |PMI| over tokens and labels,
    tokens unseen in train ignored) stays below ``threshold``."""
    table = pmi_table(train_set)
    subset = []
    for ex in test_set:
        scores = [abs(v) for tok in tokenize(ex.text) if tok in table for v in table[tok].values()]
        if max(scores, default=0.0) < threshold:
            subset.append(ex)
    return subset, table


def select_tof(test_set: Sequence[Example], text_only_predictors: Sequence[Callable[[Sequence[Example]], Sequence[str]]]):
    """Examples on which every one of (at least three) text-only predictors is wrong."""
    if len(text_only_predictors) < 3:
        raise ContractError(f"select_tof needs three predictors, got {len(text_only_predictors)}")
    test_set = list(test_set)
    predictions = [list(p(test_set)) for p in text_only_predictors]
    return [
        ex
        for i, ex in enumerate(test_set)
        if all(preds[i] != ex.stance for preds in predictions)
    ]


# published sizes, printed next to the counts built here
REFERENCE_HARDSET_COUNTS = {"TOF": 319, "PMI": 403, "OT": 425, "DT": 707, "Replaced": 3978, "Negated": 1249}
REFERENCE_SEMEVAL_COUNTS = {
    "train": {"Atheism": 513, "Climate Change is a Real Concern": 395, "Feminist Movement": 664,
              "Hillary Clinton": 689, "Legalization of Abortion": 653},
    "test": {"Atheism": 220, "Climate Change is a Real Concern": 169, "Feminist Movement": 285,
             "Hillary Clinton": 295, "Legalization of Abortion": 280},
}
