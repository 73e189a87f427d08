"""Command-line orchestration: train, evaluate, sweep, analyze, benchmark,
and fixture generation, driven by JSON config files.

Every config key can be overridden with `--set key=value`. Runs are
deterministic per seed; artifacts are written atomically and contain no
timestamps, so re-running a command overwrites byte-identical files
(measured wall-clock times in benchmark reports excepted).
"""

from __future__ import annotations

import os

# Pin BLAS pools before numpy spins them up; runs are single-threaded for
# determinism and sweep workers parallelize across processes instead.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import detect, evaluation, fixture, model as model_mod
from .data import (
    OOD_LABEL,
    DatasetBundle,
    EmbeddingTable,
    derive_seed,
    encode_utterances,
    label_array,
    load_clinc,
    load_embeddings,
    subsample_ood_train,
)
from .errors import ConfigError, StateError
from .evaluation import EvalReport

WORKERS_ENV = "OODINTENT_WORKERS"
SWEEP_AXES = ("temperature", "margin", "ood_size")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    data_path: str = ""
    variant: str = "full"
    fixture_mode: bool = False
    embedding_path: str = ""
    embedding_dim: int = 300
    hidden_dim: int = 128
    dropout_rate: float = 0.5
    objective: str = "ce"
    temperature: float = 0.8
    margin: float = 19.0
    ind_bound: float = -25.0
    ood_bound: float = -7.0
    entropy_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 15
    detector: str = "energy"
    lof_k: int = 20
    gda_ridge: float | None = None
    ood_train_size: int | None = None
    seeds: list[int] | None = None

    def __post_init__(self):
        if self.seeds is None:
            self.seeds = [0, 1, 2, 3, 4]

    def train_config(self, seed: int) -> model_mod.TrainConfig:
        return model_mod.TrainConfig(
            objective=self.objective,
            temperature=self.temperature,
            margin=self.margin,
            ind_bound=self.ind_bound,
            ood_bound=self.ood_bound,
            entropy_weight=self.entropy_weight,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
        )

    def validate(self) -> None:
        if self.objective not in model_mod.OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.detector not in detect.DETECTOR_KINDS:
            raise ConfigError(f"unknown detector {self.detector!r}")
        if (self.objective == "nplusone") != (self.detector == "nplusone"):
            raise ConfigError("K+1 training and the K+1 detector must be used together")
        if self.objective in model_mod.SUPERVISED_OBJECTIVES and self.ood_train_size == 0:
            raise ConfigError(
                f"objective {self.objective!r} needs labeled OOD training data; "
                "ood_train_size is 0"
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.data_path or not self.embedding_path:
            raise ConfigError("data_path and embedding_path must be set")
        for path in (self.data_path, self.embedding_path):
            if not Path(path).is_file():
                raise ConfigError(f"referenced path does not exist: {path}")


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON config {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} is not a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**raw)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply `key=value` overrides; values are parsed as JSON when possible."""
    fields = RunConfig.__dataclass_fields__
    updates = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = json.loads(value)
        except json.JSONDecodeError:
            updates[key] = value
    return replace(cfg, **updates)


# ---------------------------------------------------------------------------
# Shared run machinery
# ---------------------------------------------------------------------------


def load_inputs(cfg: RunConfig, seed: int) -> tuple[DatasetBundle, EmbeddingTable]:
    bundle = load_clinc(cfg.data_path, cfg.variant, fixture=cfg.fixture_mode)
    if cfg.ood_train_size is not None:
        bundle = subsample_ood_train(
            bundle, cfg.ood_train_size, derive_seed(seed, "ood-subsample")
        )
    table = load_embeddings(cfg.embedding_path, cfg.embedding_dim)
    return bundle, table


def build_detector(
    cfg: RunConfig,
    classifier: model_mod.ClassifierModel,
    bundle: DatasetBundle,
    table: EmbeddingTable,
) -> tuple[detect.Detector, EvalReport]:
    """Fit the configured detector on the training split and calibrate its
    threshold on validation; returns the detector and the validation report."""
    kind = cfg.detector
    if kind == "msp":
        det = detect.Detector(kind="msp")
    elif kind == "energy":
        det = detect.Detector(kind="energy", temperature=cfg.temperature)
    elif kind == "gda":
        feats = classifier.hidden(encode_utterances(bundle.train.ind, table))
        labels = label_array(bundle.train.ind, bundle.label_map)
        det = detect.Detector(
            kind="gda", gda=detect.fit_gda(feats, labels, ridge=cfg.gda_ridge)
        )
    elif kind == "lof":
        feats = classifier.hidden(encode_utterances(bundle.train.ind, table))
        det = detect.Detector(kind="lof", lof=detect.fit_lof(feats, k=cfg.lof_k))
    elif kind == "nplusone":
        det = detect.Detector(kind="nplusone")
    else:
        raise ConfigError(f"unknown detector {kind!r}")

    if kind != "nplusone":
        X = encode_utterances(bundle.val.ind + bundle.val.ood, table)
        logits = classifier.logits(X)
        features = classifier.hidden(X) if det.needs_features else None
        conf = det.confidence_batch(logits=logits, features=features)
        is_ood = np.concatenate(
            [np.zeros(len(bundle.val.ind), dtype=bool), np.ones(len(bundle.val.ood), dtype=bool)]
        )
        det.threshold = detect.calibrate_threshold(conf, is_ood)

    report, _ = evaluate_split(classifier, det, bundle, table, "val")
    return det, report


def evaluate_split(
    classifier: model_mod.ClassifierModel,
    det: detect.Detector,
    bundle: DatasetBundle,
    table: EmbeddingTable,
    split_name: str,
) -> tuple[EvalReport, dict]:
    """Predict one split and score it; also returns the score-dump columns."""
    split = bundle.split(split_name)
    utts = split.ind + split.ood
    X = encode_utterances(utts, table)
    gold = label_array(utts, bundle.label_map)
    preds = detect.predict_batch(classifier, det, X)
    report = evaluation.compute_metrics(preds, gold, len(bundle.intent_names))

    logits = classifier.logits(X)
    features = classifier.hidden(X) if det.needs_features else None
    conf = det.confidence_batch(logits=logits, features=features)
    names = bundle.intent_names
    ids = [f"{split_name}-ind-{i:05d}" for i in range(len(split.ind))] + [
        f"{split_name}-ood-{i:05d}" for i in range(len(split.ood))
    ]
    dump = {
        "ids": ids,
        "gold": [u.label for u in utts],
        "confidences": conf,
        "predictions": [OOD_LABEL if p < 0 else names[p] for p in preds],
    }
    return report, dump


def train_run(cfg: RunConfig, seed: int) -> tuple[
    model_mod.ClassifierModel, model_mod.TrainReport, detect.Detector, EvalReport,
    DatasetBundle, EmbeddingTable,
]:
    """One full training run: load, train, fit + calibrate the detector."""
    bundle, table = load_inputs(cfg, seed)
    classifier, report = model_mod.train(
        bundle,
        table,
        cfg.train_config(seed),
        hidden_dim=cfg.hidden_dim,
        dropout_rate=cfg.dropout_rate,
        selection_detector=cfg.detector,
        lof_k=cfg.lof_k,
        gda_ridge=cfg.gda_ridge,
    )
    det, val_report = build_detector(cfg, classifier, bundle, table)
    return classifier, report, det, val_report, bundle, table


# ---------------------------------------------------------------------------
# Atomic file helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def _read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out_dir: Path) -> None:
    cfg.validate()
    for seed in cfg.seeds:
        classifier, report, det, val_report, bundle, _ = train_run(cfg, seed)
        seed_dir = out_dir / f"seed_{seed}"
        _write_json(seed_dir / "run_config.json", {**asdict(cfg), "seed": seed})
        _write_json(
            seed_dir / "checkpoint.json",
            model_mod.classifier_to_dict(classifier, bundle.intent_names),
        )
        detector_obj = detect.detector_to_dict(det)
        detector_obj["validation_ood_f1"] = val_report.ood_f1
        _write_json(seed_dir / "detector.json", detector_obj)
        _write_json(seed_dir / "train_report.json", report.to_dict())
        print(
            f"seed {seed}: best epoch {report.best_epoch}, "
            f"validation OOD F1 {val_report.ood_f1:.4f}"
        )


def cmd_evaluate(
    cfg: RunConfig, checkpoint: Path, detector_state: Path, split: str, out_dir: Path
) -> None:
    classifier, intent_names = model_mod.classifier_from_dict(_read_json(checkpoint))
    if not Path(detector_state).is_file():
        raise StateError(f"detector state file not found: {detector_state}")
    det = detect.detector_from_dict(_read_json(detector_state))
    bundle, table = load_inputs(cfg, seed=cfg.seeds[0])
    if tuple(intent_names) != bundle.intent_names:
        raise ConfigError("checkpoint intent names do not match the dataset")
    report, dump = evaluate_split(classifier, det, bundle, table, split)
    _write_json(out_dir / f"eval_report_{split}.json", report.to_dict())
    evaluation.write_score_dump(
        out_dir / f"scores_{split}.csv",
        dump["ids"],
        dump["gold"],
        dump["confidences"],
        dump["predictions"],
    )
    print(
        f"{split}: IND acc {report.ind_accuracy:.4f}, IND F1 {report.ind_macro_f1:.4f}, "
        f"OOD recall {report.ood_recall:.4f}, OOD F1 {report.ood_f1:.4f}"
    )


def _sweep_point(cfg_dict: dict, axis: str, value: float, seed: int) -> float:
    """Train and evaluate one sweep point; returns the test OOD F1."""
    cfg = RunConfig(**cfg_dict)
    cfg = _apply_sweep_value(cfg, axis, value)
    classifier, _, det, _, bundle, table = train_run(cfg, seed)
    report, _ = evaluate_split(classifier, det, bundle, table, "test")
    return report.ood_f1


def _apply_sweep_value(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    if axis == "temperature":
        return replace(cfg, temperature=float(value))
    if axis == "margin":
        return replace(cfg, margin=float(value))
    return replace(cfg, ood_train_size=int(value))


def validate_sweep(cfg: RunConfig, axis: str, values: list[float]) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if axis == "margin" and cfg.objective != "margin":
        raise ConfigError("a margin sweep requires the margin objective")
    if axis == "ood_size":
        if cfg.objective not in model_mod.SUPERVISED_OBJECTIVES:
            raise ConfigError("an ood_size sweep requires a supervised objective")
        if any(v < 1 for v in values):
            raise ConfigError(
                f"ood_size values must be at least 1 for objective {cfg.objective!r}"
            )
    if axis == "temperature" and any(v <= 0 for v in values):
        raise ConfigError("temperature values must be positive")


def cmd_sweep(cfg: RunConfig, axis: str, values: list[float], out_dir: Path) -> None:
    cfg.validate()
    validate_sweep(cfg, axis, values)
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    tasks = [(value, seed) for value in values for seed in cfg.seeds]
    cfg_dict = asdict(cfg)

    results: dict[tuple[float, int], float] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                (value, seed): pool.submit(_sweep_point, cfg_dict, axis, value, seed)
                for value, seed in tasks
            }
            for key, fut in futures.items():
                results[key] = fut.result()
    else:
        for value, seed in tasks:
            results[(value, seed)] = _sweep_point(cfg_dict, axis, value, seed)

    lines = ["value,ood_f1_mean,ood_f1_std"]
    for value in values:
        per_seed = np.array([results[(value, seed)] for seed in cfg.seeds])
        std = float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0
        lines.append(f"{value},{repr(float(np.mean(per_seed)))},{repr(std)}")
        print(f"{axis}={value}: OOD F1 {np.mean(per_seed):.4f} +- {std:.4f}")
    _atomic_write_text(out_dir / f"sweep_{axis}.csv", "\n".join(lines) + "\n")


def cmd_analyze(dump_paths: list[Path], out_dir: Path, bins: int) -> None:
    loaded = []
    for path in dump_paths:
        ids, gold, conf, _ = evaluation.read_score_dump(path)
        loaded.append((Path(path).stem, ids, gold, conf))
    base_ids = loaded[0][1]
    for stem, ids, _, _ in loaded[1:]:
        if ids != base_ids:
            raise ValueError(
                f"score dumps disagree on sample ids ({loaded[0][0]} vs {stem}); "
                "they must come from the same evaluation split"
            )
    stats_obj = {}
    for stem, _, gold, conf in loaded:
        is_ood = np.array([g == OOD_LABEL for g in gold])
        stats = evaluation.score_stats(conf, is_ood, bins=bins)
        stats_obj[stem] = stats.to_dict()
        lines = ["bin_left,bin_right,count_ind,count_ood"]
        for i in range(len(stats.ind_counts)):
            lines.append(
                f"{repr(float(stats.bin_edges[i]))},{repr(float(stats.bin_edges[i + 1]))},"
                f"{int(stats.ind_counts[i])},{int(stats.ood_counts[i])}"
            )
        _atomic_write_text(out_dir / f"hist_{stem}.csv", "\n".join(lines) + "\n")
        print(
            f"{stem}: IND mean {stats.ind_mean:.4f} var {stats.ind_variance:.4f} | "
            f"OOD mean {stats.ood_mean:.4f} var {stats.ood_variance:.4f}"
        )
    _write_json(out_dir / "score_stats.json", stats_obj)


def cmd_benchmark(cfg: RunConfig, checkpoint: Path, out_dir: Path, repetitions: int) -> None:
    classifier, _ = model_mod.classifier_from_dict(_read_json(checkpoint))
    bundle, table = load_inputs(cfg, seed=cfg.seeds[0])
    train_feats = classifier.hidden(encode_utterances(bundle.train.ind, table))
    labels = label_array(bundle.train.ind, bundle.label_map)

    detectors = {
        "msp": detect.Detector(kind="msp"),
        "energy": detect.Detector(kind="energy", temperature=cfg.temperature),
        "gda": detect.Detector(kind="gda", gda=detect.fit_gda(train_feats, labels, ridge=cfg.gda_ridge)),
        "lof": detect.Detector(kind="lof", lof=detect.fit_lof(train_feats, k=cfg.lof_k)),
    }
    x_val = encode_utterances(bundle.val.ind + bundle.val.ood, table)
    is_ood = np.concatenate(
        [np.zeros(len(bundle.val.ind), dtype=bool), np.ones(len(bundle.val.ood), dtype=bool)]
    )
    logits = classifier.logits(x_val)
    feats = classifier.hidden(x_val)
    for det in detectors.values():
        conf = det.confidence_batch(logits=logits, features=feats if det.needs_features else None)
        det.threshold = detect.calibrate_threshold(conf, is_ood)

    samples = encode_utterances(bundle.test.ind + bundle.test.ood, table)
    report = evaluation.benchmark_inference(classifier, detectors, samples, repetitions)
    _write_json(out_dir / "timing.json", report.to_dict())
    for kind in detectors:
        print(f"{kind}: {report.per_sample_seconds[kind] * 1e6:.2f} us/sample "
              f"({report.ratios[kind]:.2f}x)")


def cmd_make_fixture(
    out_dir: Path, classes: int, samples_per_class: int, ood_samples: int, seed: int
) -> None:
    data_path, emb_path = fixture.write_fixture(
        out_dir, classes, samples_per_class, ood_samples, seed
    )
    print(f"wrote {data_path} and {emb_path}")


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodintent",
        description="Out-of-domain intent detection: training, detection, and analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run-config file")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--seed", type=int, help="replace the config seed list with one seed")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )

    sub.add_parser("train", parents=[common], help="train and calibrate per seed")

    p_eval = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--detector-state", type=Path, required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")

    p_sweep = sub.add_parser("sweep", parents=[common], help="train/evaluate along one axis")
    p_sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")

    p_an = sub.add_parser("analyze", help="histogram and moment analysis of score dumps")
    p_an.add_argument("--dumps", type=Path, nargs=2, required=True)
    p_an.add_argument("--out", type=Path, default=Path("runs"))
    p_an.add_argument("--bins", type=int, default=50)

    p_bench = sub.add_parser("benchmark", parents=[common], help="detector latency comparison")
    p_bench.add_argument("--checkpoint", type=Path, required=True)
    p_bench.add_argument("--repetitions", type=int, default=5)

    p_fix = sub.add_parser("make-fixture", help="emit a synthetic blob dataset")
    p_fix.add_argument("--out", type=Path, required=True)
    p_fix.add_argument("--classes", type=int, default=5)
    p_fix.add_argument("--samples-per-class", type=int, default=20)
    p_fix.add_argument("--ood-samples", type=int, default=20)
    p_fix.add_argument("--seed", type=int, default=0)
    return parser


def _config_from_args(args) -> RunConfig:
    if args.config is None:
        raise ConfigError(f"command {args.command!r} requires --config")
    cfg = load_run_config(args.config)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_config_from_args(args), args.out)
        elif args.command == "evaluate":
            cmd_evaluate(
                _config_from_args(args), args.checkpoint, args.detector_state, args.split, args.out
            )
        elif args.command == "sweep":
            values = [float(v) for v in args.values.split(",") if v.strip()]
            if not values:
                raise ConfigError("--values must list at least one number")
            cmd_sweep(_config_from_args(args), args.axis, values, args.out)
        elif args.command == "analyze":
            cmd_analyze(args.dumps, args.out, args.bins)
        elif args.command == "benchmark":
            cmd_benchmark(_config_from_args(args), args.checkpoint, args.out, args.repetitions)
        elif args.command == "make-fixture":
            cmd_make_fixture(
                args.out, args.classes, args.samples_per_class, args.ood_samples, args.seed
            )
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single structured error record
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
