"""Command-line front end: gen, extract, train, eval, localize, gradcheck.

Settings come from a flat ``key = value`` run-config file (``#`` starts a
comment); ``--seed``, ``--deterministic`` and ``--workers`` override it.
Relative paths in the config are resolved against the config file's
directory, or the working directory when no file is given.

Exit codes: 0 ok, 1 gradcheck failure, 2 config, 3 I/O, 4 missing inputs,
5 numeric failure, 6 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradsuite
from .autograd.tensor import no_grad
from .corpus import (
    CLIP_SECONDS,
    SAMPLE_RATE,
    Label,
    SynthesisConfig,
    atomic_write_bytes,
    domain_b_config,
    generate_corpus,
    load_wav,
    pad_or_trim,
    read_manifest,
)
from .features import extract_features, write_cache
from .metrics import CLASS_NAMES, binary_score_from_ternary, build_report
from .models import CAFNet, build_model, probabilities, trust_gate
from .nn import read_checkpoint
from .training import (
    Dataset,
    NumericalError,
    TrainConfig,
    cache_path,
    finetune_param_groups,
    fit,
    load_dataset,
    predict,
)

log = logging.getLogger("halftruth")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run config


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


# field annotations are strings under postponed evaluation
_CONVERTERS = {"int": int, "float": float, "bool": _bool, "str": str, "float | None": _opt_float}


@dataclass
class RunConfig:
    # paths
    corpus_dir: str = "corpus"
    cache_dir: str = "cache"
    checkpoint: str = "model.cafw"
    log: str = "train_log.jsonl"
    report: str = "report.json"
    scores: str = "scores.csv"
    # data and model
    model: str = "cafnet"
    domain: str = "a"
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"
    # synthesis
    n_train: int = 1500
    n_val: int = 300
    n_test: int = 300
    ratio_real: float = 0.17
    ratio_fake: float = 0.34
    ratio_half_truth: float = 0.49
    splice_min: float = 0.8
    splice_max: float = 1.2
    artefact_strength: float = 1.0
    master_seed: int = 42
    # training
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0
    patience: int = 10
    max_epochs: int = 15
    augment: bool = True
    backbone_lr: float = 1e-5
    head_lr: float = 1e-4
    # execution
    seed: int = 42
    deterministic: bool = False
    workers: int = 1

    base_dir: str = "."

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "base_dir"]

    @classmethod
    def parse(cls, text: str, base_dir=".") -> "RunConfig":
        cfg = cls(base_dir=str(base_dir))
        types = {f.name: f.type for f in fields(cls)}
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types or key == "base_dir":
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key in seen:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            seen.add(key)
            setattr(cfg, key, cls._convert(key, types[key], value, lineno))
        cfg.validate()
        return cfg

    @classmethod
    def _convert(cls, key, typ, value, lineno):
        try:
            return _CONVERTERS[typ](value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), base_dir=path.parent)

    def validate(self) -> None:
        if self.model not in ("cafnet", "mfaan"):
            raise ValueError(f"model must be cafnet or mfaan, got {self.model!r}")
        if self.domain not in ("a", "b"):
            raise ValueError(f"domain must be a or b, got {self.domain!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        # the dataclass constructors carry the remaining checks
        self.synthesis()
        self.train_config()

    def path(self, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def synthesis(self) -> SynthesisConfig:
        params = dict(
            n_clips={"train": self.n_train, "val": self.n_val, "test": self.n_test},
            ratios=(self.ratio_real, self.ratio_fake, self.ratio_half_truth),
            splice_range=(self.splice_min, self.splice_max),
            artefact_strength=self.artefact_strength,
            master_seed=self.master_seed,
        )
        return domain_b_config(**params) if self.domain == "b" else SynthesisConfig(**params)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
            augment=self.augment,
            deterministic=self.deterministic,
        )

    def dumps(self) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.keys())


def load_run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.deterministic:
            cfg.deterministic = True
        if args.workers is not None:
            cfg.workers = args.workers
        if getattr(args, "model", None):
            cfg.model = args.model
        cfg.validate()
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"config file not found: {exc.filename}") from None
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _manifest(cfg: RunConfig, split: str):
    path = cfg.path("corpus_dir") / f"{split}.csv"
    if not path.exists():
        raise CliError(EXIT_MISSING, f"manifest not found: {path} (run `gen` first)")
    try:
        return read_manifest(path)
    except ValueError as exc:
        raise CliError(EXIT_IO, f"bad manifest {path}: {exc}") from None


def _dataset(cfg: RunConfig, split: str) -> Dataset:
    manifest = _manifest(cfg, split)
    try:
        return load_dataset(manifest, cfg.path("cache_dir"))
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, f"{exc} (run `extract` first)") from None
    except ValueError as exc:
        raise CliError(EXIT_IO, f"unreadable feature cache: {exc}") from None


def _load_model(cfg: RunConfig, path: Path):
    if not path.exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    model = build_model(cfg.model, seed=cfg.seed)
    try:
        state = read_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"unreadable checkpoint: {exc}") from None
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint {path} does not match model {cfg.model!r}: {exc}") from None
    return model


def _write_text(path: Path, text: str) -> None:
    try:
        atomic_write_bytes(path, text.encode("utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def _out(text: str = "") -> None:
    sys.stdout.write(text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args) -> int:
    out = cfg.path("corpus_dir")
    try:
        manifests = generate_corpus(cfg.synthesis(), out, workers=cfg.workers)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write corpus to {out}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    for split, manifest in manifests.items():
        counts = manifest.class_counts()
        detail = ", ".join(f"{lab.name.lower()}={counts[lab.name]}" for lab in Label)
        _out(f"{split}: {len(manifest.entries)} clips ({detail})")
    return EXIT_OK


def _extract_one(wav: Path, dest: Path):
    if dest.exists() and dest.stat().st_mtime_ns >= wav.stat().st_mtime_ns:
        return "skipped"
    write_cache(extract_features(pad_or_trim(load_wav(wav))), dest)
    return "written"


def cmd_extract(cfg: RunConfig, args) -> int:
    corpus, cache = cfg.path("corpus_dir"), cfg.path("cache_dir")
    splits = args.splits or [s for s in (cfg.train_split, cfg.val_split, cfg.test_split)]
    jobs = []
    for split in dict.fromkeys(splits):
        for rel, _ in _manifest(cfg, split).entries:
            jobs.append((rel, corpus / rel, cache_path(cache, rel)))
    missing = [rel for rel, wav, _ in jobs if not wav.exists()]
    if missing:
        for rel in missing:
            print(f"missing: {rel}", file=sys.stderr)
        raise CliError(EXIT_MISSING, f"{len(missing)} WAV file(s) missing")

    def work(job):
        rel, wav, dest = job
        try:
            return rel, _extract_one(wav, dest), None
        except ValueError as exc:
            return rel, "corrupt", str(exc)
        except OSError as exc:
            return rel, "io", str(exc)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    bad = [(rel, msg) for rel, status, msg in results if status == "corrupt"]
    io_err = [(rel, msg) for rel, status, msg in results if status == "io"]
    for rel, msg in bad + io_err:
        print(f"failed: {rel}: {msg}", file=sys.stderr)
    written = sum(status == "written" for _, status, _ in results)
    _out(f"extracted {written}, up to date {sum(s == 'skipped' for _, s, _ in results)}, failed {len(bad) + len(io_err)}")
    if io_err:
        raise CliError(EXIT_IO, f"{len(io_err)} file(s) could not be written")
    if bad:
        raise CliError(EXIT_MISSING, f"{len(bad)} unreadable WAV file(s)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train, val = _dataset(cfg, cfg.train_split), _dataset(cfg, cfg.val_split)
    groups = None
    if args.finetune:
        model = _load_model(cfg, Path(args.finetune))
        groups = finetune_param_groups(model, cfg.backbone_lr, cfg.head_lr)
        for g in groups:
            _out(f"param group {g.name}: {g.size()} parameters, lr {g.lr:g}")
    else:
        model = build_model(cfg.model, seed=cfg.seed)
    if cfg.model == "mfaan":
        n_ht = int(np.sum(train.labels == Label.HALF_TRUTH) + np.sum(val.labels == Label.HALF_TRUTH))
        _out(f"binary training: {n_ht} half_truth rows mapped to fake")
    ckpt, log_path = cfg.path("checkpoint"), cfg.path("log")
    for p in (ckpt, log_path):
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot create {p.parent}: {exc}") from None
    try:
        result = fit(model, train, val, cfg.train_config(), groups=groups, checkpoint=ckpt, log_path=log_path)
    except NumericalError as exc:
        kept = f"; last good checkpoint kept at {ckpt}" if ckpt.exists() else ""
        raise CliError(EXIT_NUMERIC, f"{exc}{kept}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"training output failed: {exc}") from None
    for rec in result.log:
        _out(
            f"epoch {rec['epoch']:>3}  train_loss {rec['train_loss']:.4f}  val_loss {rec['val_loss']:.4f}"
            f"  val_acc {rec['val_acc']:.4f}  lr {rec['lr']:g}"
        )
    _out(f"best epoch {result.best_epoch} (val_acc {result.best_val_acc:.4f}); checkpoint {ckpt}")
    return EXIT_OK


def scores_csv(paths, scores, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip", "score", "label"])
    for p, s, y in zip(paths, scores, labels):
        w.writerow([p, repr(float(s)), int(y)])
    return buf.getvalue()


def evaluation_outputs(probs, labels, paths, pred_bounds=None, true_bounds=None) -> tuple[dict, str]:
    """Report document and score CSV (``label`` is 1 for non-real clips)."""
    probs = np.asarray(probs, dtype=np.float64)
    report = build_report(probs, labels, pred_bounds, true_bounds)
    score = binary_score_from_ternary(probs) if probs.shape[1] == 3 else probs[:, 1]
    return report, scores_csv(paths, score, np.asarray(labels) != Label.REAL)


def cmd_eval(cfg: RunConfig, args) -> int:
    split = args.split or cfg.test_split
    data = _dataset(cfg, split)
    model = _load_model(cfg, cfg.path("checkpoint"))
    if cfg.model == "mfaan":
        data = data.binary()
    preds = predict(model, data)
    report, scores = evaluation_outputs(preds.probs, data.labels, data.paths, preds.boundaries, data.boundaries)
    report = {"model": cfg.model, "split": split, **report}
    _write_text(cfg.path("report"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_text(cfg.path("scores"), scores)
    _out(f"accuracy {report['accuracy']:.4f}  macro_auc {report['macro_auc']:.4f}  eer {report['eer']:.4f}")
    if "localisation" in report:
        loc = report["localisation"]["overall"]
        _out(f"boundary mae {loc['mae']:.3f} s  median {loc['median']:.3f} s  p90 {loc['p90']:.3f} s")
    _out(f"report {cfg.path('report')}; scores {cfg.path('scores')}")
    return EXIT_OK


def verdict(probs) -> str:
    """Trust-gate verdict for one clip's class probabilities."""
    probs = np.asarray(probs)
    trusted = trust_gate(probs) and int(probs.argmax()) != Label.REAL
    return "trusted" if trusted else "untrusted"


def localize_result(model: CAFNet, clip: np.ndarray) -> dict:
    was_training = model.training
    model.eval()
    with no_grad():
        out = model.forward_features(extract_features(clip))
    model.train(was_training)
    probs = probabilities(out.main_logits)[0]
    bounds = out.boundaries.data[0].astype(np.float64) * CLIP_SECONDS
    return {
        "probs": {name: float(p) for name, p in zip(CLASS_NAMES, probs)},
        "predicted": CLASS_NAMES[int(probs.argmax())],
        "start_s": float(bounds[0]),
        "end_s": float(bounds[1]),
        "verdict": verdict(probs),
    }


def plot_data_csv(clip: np.ndarray, result: dict, true_bounds=None, hop: int = 256) -> str:
    """Long-format CSV ``kind,time_s,value``: RMS envelope frames plus boundary markers."""
    n = len(clip) // hop
    env = np.sqrt(np.mean(clip[: n * hop].reshape(n, hop) ** 2, axis=1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "time_s", "value"])
    for i, e in enumerate(env):
        w.writerow(["envelope", repr((i + 0.5) * hop / SAMPLE_RATE), repr(float(e))])
    w.writerow(["pred_start", repr(result["start_s"]), ""])
    w.writerow(["pred_end", repr(result["end_s"]), ""])
    if true_bounds is not None:
        w.writerow(["true_start", repr(float(true_bounds[0])), ""])
        w.writerow(["true_end", repr(float(true_bounds[1])), ""])
    return buf.getvalue()


def cmd_localize(cfg: RunConfig, args) -> int:
    if cfg.model != "cafnet":
        raise CliError(EXIT_CONFIG, "localize needs model = cafnet")
    wav = Path(args.wav)
    if not wav.exists():
        raise CliError(EXIT_IO, f"cannot read {wav}: no such file")
    try:
        clip = pad_or_trim(load_wav(wav))
    except (OSError, ValueError, EOFError) as exc:
        raise CliError(EXIT_IO, f"cannot read {wav}: {exc}") from None
    model = _load_model(cfg, cfg.path("checkpoint"))
    res = localize_result(model, clip)
    probs = "  ".join(f"p_{k}={v:.3f}" for k, v in res["probs"].items())
    _out(f"{wav}: {probs}")
    _out(f"predicted {res['predicted']}; boundaries {res['start_s']:.2f} s - {res['end_s']:.2f} s ({res['verdict']})")
    if args.plot_data:
        truth = None
        if args.true_start is not None and args.true_end is not None:
            truth = (args.true_start, args.true_end)
        _write_text(Path(args.plot_data), plot_data_csv(clip, res, truth))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = gradsuite.run_suite(gradsuite.default_cases(), seeds=range(args.seeds))
    _out(gradsuite.format_table(results))
    failed = [r.name for r in results if not r.passed]
    _out(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="run-config file (key = value lines)")
    common.add_argument("--seed", type=int, help="training and model-init seed (default 42)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("--workers", type=int, metavar="N", help="parallel workers for gen/extract")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="halftruth", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("extract", parents=[common], help="compute feature caches")
    p.add_argument("--splits", nargs="+", default=None)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--model", choices=("cafnet", "mfaan"))
    p.add_argument("--finetune", metavar="FROM", help="start from this checkpoint with layer-wise learning rates")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--model", choices=("cafnet", "mfaan"))
    p.add_argument("--split", default=None)
    p = sub.add_parser("localize", parents=[common], help="classify and localise one WAV file")
    p.add_argument("wav")
    p.add_argument("--plot-data", metavar="CSV")
    p.add_argument("--true-start", type=float, default=None, metavar="S")
    p.add_argument("--true-end", type=float, default=None, metavar="S")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive")
    p.add_argument("--seeds", type=int, default=10)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "localize": cmd_localize,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "workers"):
        setattr(args, name, getattr(args, name, None))
    for name in ("deterministic", "verbose"):
        setattr(args, name, getattr(args, name, False))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
