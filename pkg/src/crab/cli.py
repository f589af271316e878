"""Batch front end: ``crab gen|train|hardsets|eval|all``.

Every command reads an optional INI config (``--config``), resolves it
against the defaults, echoes the resolved config into the output directory
and writes deterministic files there. Exit codes: 0 success, 1 input or
validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import corpus as cp
from . import evaluator as ev
from . import model as md
from .errors import ConfigError, CrabError
from .trainer import TrainConfig, train

CONFIG_VERSION = 1
DEFAULT_OUT = "crab-out"
_BOOL = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}

PATH_KEYS = ("train", "val", "test", "aliases", "out", "model", "bias_model", "tof_models")
# file stem in the output directory -> slice name used in reports
DEFAULT_SLICES = (
    ("test_iid", "iid"), ("test_anti", "anti"), ("tof", "TOF"), ("pmi", "PMI"),
    ("replaced", "Replaced"), ("negated", "Negated"),
)


@dataclass
class RunConfig:
    synthetic: cp.SyntheticSpec = field(default_factory=cp.SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    modes: tuple = ("tie", "factual", "text_only")
    slices: dict = field(default_factory=dict)
    only_slices: tuple = ()
    pmi_threshold: float = 1.0
    seeds: tuple = (0,)
    tof_models: int = 3


# -- config ---------------------------------------------------------------------


def _convert(section, key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _section_to_dataclass(parser, section, cls, base):
    if not parser.has_section(section):
        return base
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        values[key] = _convert(section, key, raw, getattr(base, key))
    return replace(base, **values)


def _csv_list(raw: str) -> tuple:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def load_config(path=None) -> RunConfig:
    """Parse an INI config; ``None`` gives the defaults.

    Sections: ``[crab]`` (``version``), ``[synthetic]`` and ``[train]``
    (dataclass fields), ``[paths]``, ``[eval]`` (``modes``, ``slices``),
    ``[hardsets]`` (``pmi_threshold``, ``tof_models``), ``[run]``
    (``seeds``) and ``[slices]`` (free ``name = path`` pairs).
    """
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    allowed = {"crab", "synthetic", "train", "paths", "eval", "hardsets", "run", "slices"}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
    if not parser.has_option("crab", "version"):
        raise ConfigError(f"{path}: missing [crab] version header")
    for key in parser.options("crab"):
        if key != "version":
            raise ConfigError(f"[crab] unknown key {key!r}")
    version = parser.get("crab", "version").strip()
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"[crab] version {version!r} is not supported (expected {CONFIG_VERSION})")

    cfg.synthetic = _section_to_dataclass(parser, "synthetic", cp.SyntheticSpec, cfg.synthetic)
    cfg.train = _section_to_dataclass(parser, "train", TrainConfig, cfg.train)
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            if key not in PATH_KEYS:
                raise ConfigError(f"[paths] unknown key {key!r}")
            cfg.paths[key] = raw.strip()
    if parser.has_section("eval"):
        for key, raw in parser.items("eval"):
            if key == "modes":
                cfg.modes = _csv_list(raw)
            elif key == "slices":
                cfg.only_slices = _csv_list(raw)
            else:
                raise ConfigError(f"[eval] unknown key {key!r}")
    if parser.has_section("hardsets"):
        for key, raw in parser.items("hardsets"):
            if key == "pmi_threshold":
                cfg.pmi_threshold = _convert("hardsets", key, raw, 1.0)
            elif key == "tof_models":
                cfg.tof_models = _convert("hardsets", key, raw, 3)
            else:
                raise ConfigError(f"[hardsets] unknown key {key!r}")
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key != "seeds":
                raise ConfigError(f"[run] unknown key {key!r}")
            try:
                cfg.seeds = tuple(int(s) for s in _csv_list(raw))
            except ValueError:
                raise ConfigError(f"[run] seeds: cannot parse {raw!r}") from None
    if parser.has_section("slices"):
        cfg.slices = {k: v.strip() for k, v in parser.items("slices")}
    return cfg


def _ini_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig, sections=("synthetic", "train", "paths", "eval", "hardsets", "run", "slices")) -> str:
    lines = ["[crab]", f"version = {CONFIG_VERSION}"]

    def emit(name, items):
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_ini_value(v)}" for k, v in items)

    for name in sections:
        if name == "synthetic":
            emit(name, asdict(cfg.synthetic).items())
        elif name == "train":
            emit(name, asdict(cfg.train).items())
        elif name == "paths":
            emit(name, sorted(cfg.paths.items()))
        elif name == "eval":
            items = [("modes", ",".join(cfg.modes))]
            if cfg.only_slices:
                items.append(("slices", ",".join(cfg.only_slices)))
            emit(name, items)
        elif name == "hardsets":
            emit(name, [("pmi_threshold", cfg.pmi_threshold), ("tof_models", cfg.tof_models)])
        elif name == "run":
            emit(name, [("seeds", ",".join(str(s) for s in cfg.seeds))])
        elif name == "slices" and cfg.slices:
            emit(name, sorted(cfg.slices.items()))
    return "\n".join(lines) + "\n"


# -- helpers ----------------------------------------------------------------------


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".crab-write-test"
    probe.write_text("")
    probe.unlink()
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _load(path) -> list[cp.Example]:
    try:
        return cp.load_semeval(path)
    except CrabError as exc:
        exc.args = (f"{path}: {exc}",)
        raise


def _input(cfg: RunConfig, key: str, out: Path, fallback: str | None):
    if cfg.paths.get(key):
        return Path(cfg.paths[key])
    if fallback and (out / fallback).exists():
        return out / fallback
    return None


def _alias_table(cfg: RunConfig):
    if cfg.paths.get("aliases"):
        return cp.load_alias_table(cfg.paths["aliases"])
    table = dict(cp.load_alias_table())
    table.update({name: frozenset({name.lower()}) for name in cp.TARGET_NAMES})
    return table


# -- commands -----------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    spec = cfg.synthetic
    train_set, iid, anti = cp.gen_synthetic(spec)
    files = {"train.tsv": train_set, "test_iid.tsv": iid, "test_anti.tsv": anti}
    for name, examples in files.items():
        cp.write_tsv(examples, out / name)
    # the manifest is itself a config: `crab gen --config manifest.ini` rebuilds the files
    manifest = dump_config(cfg, sections=("synthetic",))
    manifest += "\n" + "".join(f"# sha256 {name} {_sha256(out / name)}\n" for name in files)
    _write(out / "manifest.ini", manifest)
    print(f"wrote {len(train_set)}/{len(iid)}/{len(anti)} examples to {out}")
    return 0


def _train_one(cfg: RunConfig, out: Path, name: str, tcfg: TrainConfig) -> float:
    train_path = _input(cfg, "train", out, "train.tsv")
    if train_path is None:
        raise ConfigError("no training data: set [paths] train or run `crab gen` first")
    aliases = _alias_table(cfg)
    examples = cp.with_subtask_labels(_load(train_path), aliases)
    val_path = _input(cfg, "val", out, None)
    if val_path is not None:
        fit, val = examples, cp.with_subtask_labels(_load(val_path), aliases)
    else:
        fit, val = cp.split_train_val(examples, tcfg.val_fraction, tcfg.seed)
    bias_model = None
    if tcfg.objective == "poe":
        if not cfg.paths.get("bias_model"):
            raise ConfigError("objective poe needs [paths] bias_model")
        bias_model, _ = md.load(cfg.paths["bias_model"])
    if tcfg.epochs == 0:
        _warn("epochs = 0: writing the initialized model")
    model, history = train(tcfg, fit, val, bias_model=bias_model)
    extra = {
        "train_config": asdict(tcfg),
        "best_epoch": history.best_epoch,
        "data_fingerprint": cp.dataset_fingerprint(examples),
    }
    md.save(model, out / f"{name}.json", extra=extra)
    _write(out / f"{name}.history.csv", history.to_csv())
    best = history.records[history.best_epoch - 1].val_f1 if history.best_epoch else float("nan")
    return best


def cmd_train(cfg: RunConfig, out: Path, name: str = "model") -> int:
    best = _train_one(cfg, out, name, cfg.train)
    print(f"final validation F_macro: {best:.4f}")
    return 0


def _tof_predictor(model):
    def predict(examples):
        return ev.predict_labels(model, cp.encode_batch(examples, model.vocab), "text_only")

    return predict


def cmd_hardsets(cfg: RunConfig, out: Path) -> int:
    test_path = _input(cfg, "test", out, "test_iid.tsv")
    if test_path is None:
        raise ConfigError("no test data: set [paths] test or run `crab gen` first")
    test = _load(test_path)
    train_path = _input(cfg, "train", out, "train.tsv")
    train_set = _load(train_path) if train_path is not None else []
    aliases = _alias_table(cfg)
    pool = sorted({ex.target for ex in test} | {ex.target for ex in train_set})

    counts = {"input": len(test)}
    negated = cp.make_target_negated(test)
    cp.write_tsv(negated, out / "negated.tsv")
    counts["Negated"] = len(negated)
    replaced = cp.make_target_replaced(test, pool, aliases)
    cp.write_tsv(replaced, out / "replaced.tsv")
    counts["Replaced"] = len(replaced)

    if train_set:
        pmi, _ = cp.select_pmi_tail(test, train_set, cfg.pmi_threshold)
        cp.write_tsv(pmi, out / "pmi.tsv")
        counts["PMI"] = len(pmi)
    elif not test:
        cp.write_tsv([], out / "pmi.tsv")
        counts["PMI"] = 0
    else:
        _warn("PMI-tail skipped: no training data")

    tof_paths = [p for p in _csv_list(cfg.paths.get("tof_models", ""))]
    if not test:
        cp.write_tsv([], out / "tof.tsv")
        counts["TOF"] = 0
    elif len(tof_paths) < 3:
        _warn(f"TOF skipped: needs three text-only models in [paths] tof_models, got {len(tof_paths)}")
    else:
        predictors = [_tof_predictor(md.load(p)[0]) for p in tof_paths]
        tof = cp.select_tof(test, predictors)
        cp.write_tsv(tof, out / "tof.tsv")
        counts["TOF"] = len(tof)

    summary = {
        "counts": counts,
        "reference": {k: cp.REFERENCE_HARDSET_COUNTS[k] for k in ("TOF", "PMI", "Replaced", "Negated")},
        "reference_input": 1249,
        "pmi_threshold": cfg.pmi_threshold,
    }
    _write(out / "counts.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = [f"{'set':<10} {'built':>7} {'reference':>10}"]
    lines.append(f"{'input':<10} {len(test):>7} {1249:>10}")
    for k in ("TOF", "PMI", "Replaced", "Negated"):
        built = counts.get(k)
        lines.append(f"{k:<10} {'-' if built is None else built:>7} {cp.REFERENCE_HARDSET_COUNTS[k]:>10}")
    text = "\n".join(lines) + "\n"
    _write(out / "counts.txt", text)
    print(text, end="")
    return 0


def _slices(cfg: RunConfig, out: Path) -> dict[str, Path]:
    if cfg.slices:
        found = {name: Path(p) for name, p in cfg.slices.items()}
    else:
        found = {}
        if cfg.paths.get("test"):
            found["original"] = Path(cfg.paths["test"])
        for stem, name in DEFAULT_SLICES:
            if (out / f"{stem}.tsv").exists():
                found[name] = out / f"{stem}.tsv"
    if cfg.only_slices:
        missing = [s for s in cfg.only_slices if s not in found]
        if missing:
            raise ConfigError(f"unknown slice(s) {', '.join(missing)}; available: {', '.join(found) or 'none'}")
        found = {s: found[s] for s in cfg.only_slices}
    if not found:
        raise ConfigError("no evaluation slices: set [slices], [paths] test, or build them first")
    return found


def cmd_eval(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    model_path = Path(cfg.paths.get("model") or out / "model.json")
    model, meta = md.load(model_path)
    slices = {name: _load(p) for name, p in _slices(cfg, out).items()}
    train_path = _input(cfg, "train", out, "train.tsv")
    train_set = _load(train_path) if train_path is not None else None
    if "majority" in cfg.modes and train_set is None:
        raise ConfigError("mode majority needs training data ([paths] train)")
    bias_model = md.load(cfg.paths["bias_model"])[0] if cfg.paths.get("bias_model") else None
    report = ev.evaluate_slices(
        model, slices, cfg.modes, train_set=train_set, bias_model=bias_model,
        config={"modes": list(cfg.modes), "model": model_path.name, "aggregate": "single run"},
        seeds=[meta["extra"].get("train_config", {}).get("seed")], jobs=jobs,
    )
    report.warnings.extend(meta["warnings"])
    stored = meta["extra"].get("data_fingerprint")
    if train_set is not None and stored and stored != cp.dataset_fingerprint(train_set):
        report.warnings.append(f"model was trained on data {stored}, training file is {cp.dataset_fingerprint(train_set)}")
    for w in report.warnings:
        _warn(w)
    _write(out / "report.json", report.to_json())
    _write(out / "report.txt", report.to_text())
    _write(out / "report.csv", report.to_csv())
    print(report.to_text(), end="")
    return 0


def _run_seed(cfg: RunConfig, out: Path, seed: int, jobs: int) -> dict:
    cfg = replace(cfg, train=replace(cfg.train, seed=seed), paths=dict(cfg.paths))
    _prepare_out(out)
    tof = []
    for k in range(cfg.tof_models):
        name = f"text_only-{k}"
        tcfg = replace(cfg.train, objective="text_only", seed=1000 * seed + k + 1)
        _train_one(cfg, out, name, tcfg)
        tof.append(str(out / f"{name}.json"))
    if tof:
        cfg.paths["tof_models"] = ",".join(tof)
    _train_one(cfg, out, "model", cfg.train)
    cmd_hardsets(cfg, out)
    if cfg.slices:
        # shared slices from the caller plus this seed's hard sets
        built = {name: str(out / f"{stem}.tsv") for stem, name in DEFAULT_SLICES[2:] if (out / f"{stem}.tsv").exists()}
        cfg = replace(cfg, slices={**cfg.slices, **built})
    cmd_eval(cfg, out, jobs)
    return json.loads((out / "report.json").read_text(encoding="utf-8"))


def cmd_all(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    """gen (when no training file is configured), then per seed: train the
    model and the TOF text-only models, build hard sets, evaluate."""
    if not cfg.paths.get("train"):
        cmd_gen(cfg, out)
    seeds = cfg.seeds
    if len(seeds) == 1:
        _run_seed(cfg, out, seeds[0], jobs)
        return 0
    dirs = [out / f"seed-{s}" for s in seeds]
    shared = dict(cfg.paths)
    for key, stem in (("train", "train.tsv"), ("test", "test_iid.tsv")):
        if not shared.get(key) and (out / stem).exists():
            shared[key] = str(out / stem)
    cfg = replace(cfg, paths=shared)
    if not cfg.slices:
        cfg = replace(cfg, slices={name: str(out / f"{stem}.tsv") for stem, name in DEFAULT_SLICES[:2]
                                   if (out / f"{stem}.tsv").exists()})
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            docs = list(pool.map(_run_seed, [cfg] * len(seeds), dirs, seeds, [1] * len(seeds)))
    else:
        docs = [_run_seed(cfg, d, s, 1) for d, s in zip(dirs, seeds)]
    reports = [ev.EvalReport(rows=[ev.SliceRow(**r) for r in d["rows"]]) for d in docs]
    summary = ev.summarize_seeds(reports)
    rows = [{"slice": s, "mode": m, **v} for (s, m), v in summary.items()]
    doc = {"aggregate": "mean and median of per-seed F_macro", "seeds": list(seeds), "rows": rows}
    _write(out / "summary.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    lines = [f"{'slice':<16} {'mode':<10} {'mean':>6} {'median':>6} {'seeds':>5}"]
    for r in rows:
        lines.append(f"{r['slice']:<16} {r['mode']:<10} {100 * r['mean']:6.2f} {100 * r['median']:6.2f} {r['n_seeds']:>5}")
    text = "\n".join(lines) + "\n"
    _write(out / "summary.txt", text)
    print(text, end="")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int, help="overrides the synthetic and training seeds")
    common.add_argument("--out", type=Path, help="output directory (CRAB_OUT takes precedence)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for evaluation and seeds")

    parser = argparse.ArgumentParser(prog="crab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", parents=[common], help="write synthetic shortcut corpora")
    p_train = sub.add_parser("train", parents=[common], help="train a model")
    for flag in ("grl", "tmt", "stt", "kl"):
        p_train.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {flag.upper()} term")
    p_train.add_argument("--objective", choices=("crab", "factual", "text_only", "poe"))
    p_train.add_argument("--name", default="model", help="output file stem (default: model)")
    sub.add_parser("hardsets", parents=[common], help="build TOF, PMI-tail, Replaced and Negated sets")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a saved model on slices")
    p_eval.add_argument("--modes", help="comma-separated subset of " + ",".join(ev.MODES))
    p_eval.add_argument("--slice", action="append", help="restrict to the named slice (repeatable)")
    sub.add_parser("all", parents=[common], help="gen, train, hardsets and eval in one go")
    return parser


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.synthetic = replace(cfg.synthetic, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.seeds = (args.seed,)
    if args.verb == "train":
        flags = {f"use_{f}": False for f in ("grl", "tmt", "stt", "kl") if getattr(args, f"no_{f}")}
        if args.objective:
            flags["objective"] = args.objective
        cfg.train = replace(cfg.train, **flags)
    if args.verb == "eval":
        if args.modes:
            cfg.modes = _csv_list(args.modes)
        if args.slice:
            cfg.only_slices = tuple(s for item in args.slice for s in _csv_list(item))
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    for m in cfg.modes:
        if m not in ev.MODES:
            raise ConfigError(f"modes: unknown mode {m!r}; expected a subset of {','.join(ev.MODES)}")
    cfg.synthetic.validate()
    cfg.train.validate()
    out = os.environ.get("CRAB_OUT") or args.out or cfg.paths.get("out") or DEFAULT_OUT
    return cfg, Path(out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = _resolve(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        _prepare_out(out)
        suffix = f"-{args.name}" if args.verb == "train" and args.name != "model" else ""
        _write(out / f"resolved-{args.verb}{suffix}.ini", dump_config(cfg))
        if args.verb == "gen":
            return cmd_gen(cfg, out)
        if args.verb == "train":
            return cmd_train(cfg, out, args.name)
        if args.verb == "hardsets":
            return cmd_hardsets(cfg, out)
        if args.verb == "eval":
            return cmd_eval(cfg, out, args.jobs)
        return cmd_all(cfg, out, args.jobs)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
