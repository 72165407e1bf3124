"""Command-line entry point for unattended batch experiments.

Verbs:
    train      run a training strategy from a config file
    eval       evaluate checkpoint(s) on a dataset (ensemble when several)
    landscape  emit loss-vs-perturbation curves for a checkpoint
    compare    tabulate accuracy / training cost across finished runs
    gen-data   write a synthetic dataset to CSV

Configs are flat ``key = value`` lines with dotted keys (see configs/ for
shipped examples with every default filled in). Every train run writes a
manifest.json capturing the resolved config, the package version and the
dataset hash; ``train --config <manifest.json>`` replays the run
bit-identically.

Exit codes: 0 success, 2 invalid config or contract violation, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Augmenter, Dataset, load_csv, load_idx_images, save_csv, synth_gaussian_mixture
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractViolation,
    FileIntegrityError,
    NumericFailure,
    ShapeMismatch,
)
from .evaluation import (
    PerturbationSpec,
    RetrievalSet,
    cmc,
    landscape_sweep,
    mean_average_precision,
    mean_cross_entropy,
    write_sweep_csv,
)
from .model import ModelSpec, load_checkpoint, save_checkpoint
from .schedule import ScheduleConfig
from .training import (
    OptimizerConfig,
    combined_trcost,
    ensemble_top1,
    evaluate_top1,
    save_knowledge,
    train_kd,
    train_srdl,
    train_vanilla,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def parse_config_text(text: str) -> dict[str, str]:
    """Flat dotted-key config: one ``key = value`` per line, # comments."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    """Read a config file; a manifest.json is accepted and replayed."""
    raw = Path(path).read_text(encoding="utf-8")
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        manifest = json.loads(raw)
        if "config" not in manifest:
            raise ConfigError(f"{path}: JSON file has no 'config' section to replay")
        return {str(k): str(v) for k, v in manifest["config"].items()}
    return parse_config_text(raw)


class RunConfig:
    """Validated view over the flat key/value mapping."""

    def __init__(self, raw: dict[str, str]):
        self.raw = dict(raw)
        self.used: set[str] = set()
        self.strategy = self.str_field("strategy", choices=("vanilla", "srdl", "kd"))

    def get(self, key, default=None):
        self.used.add(key)
        return self.raw.get(key, default)

    def str_field(self, key, default=None, choices=None):
        v = self.get(key, default)
        if v is None:
            raise ConfigError(f"missing required field {key!r}")
        if choices and v not in choices:
            raise ConfigError(f"{key}: expected one of {choices}, got {v!r}")
        return v

    def int_field(self, key, default=None, minimum=None):
        v = self.get(key, default)
        if v is None:
            raise ConfigError(f"missing required field {key!r}")
        try:
            n = int(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: expected an integer, got {v!r}") from e
        if minimum is not None and n < minimum:
            raise ConfigError(f"{key}: must be >= {minimum}, got {n}")
        return n

    def float_field(self, key, default=None):
        v = self.get(key, default)
        if v is None:
            raise ConfigError(f"missing required field {key!r}")
        try:
            return float(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: expected a number, got {v!r}") from e

    def bool_field(self, key, default):
        v = self.get(key, None)
        if v is None:
            return default
        if str(v).lower() in ("true", "1", "yes", "on"):
            return True
        if str(v).lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {v!r}")

    def tuple_field(self, key, default, cast=float):
        v = self.get(key, None)
        if v is None:
            return default
        if isinstance(v, str) and not v.strip():
            return ()
        try:
            return tuple(cast(c.strip()) for c in str(v).split(","))
        except ValueError as e:
            raise ConfigError(f"{key}: bad list {v!r}") from e

    # -------- composite sections

    def model_spec(self, prefix="model") -> ModelSpec:
        kind = self.str_field(f"{prefix}.kind", "mlp", choices=("mlp", "smallcnn"))
        default_hidden = (256, 256) if kind == "mlp" else (8, 16, 32)
        hidden = self.tuple_field(f"{prefix}.hidden", default_hidden, cast=int)
        shape = self.tuple_field(f"{prefix}.input_shape", None, cast=int)
        if shape is None:
            raise ConfigError(f"missing required field '{prefix}.input_shape'")
        classes = self.int_field(f"{prefix}.classes", minimum=2)
        try:
            return ModelSpec(kind, shape, hidden, classes)
        except ContractViolation as e:
            raise ConfigError(f"{prefix}.*: {e}") from e

    def optimizer(self) -> OptimizerConfig:
        sched = ScheduleConfig(
            base_lr=self.float_field("optimizer.lr", 0.1),
            horizon=1,  # horizon is owned by the trainer
            drop_factor=self.float_field("schedule.drop_factor", 0.1),
            drop_points=self.tuple_field("schedule.drop_points", (0.5, 0.75)),
        )
        try:
            return OptimizerConfig(
                schedule=sched,
                momentum=self.float_field("optimizer.momentum", 0.9),
                weight_decay=self.float_field("optimizer.weight_decay", 0.0002),
                batch_size=self.int_field("optimizer.batch_size", 128, minimum=1),
            )
        except ContractViolation as e:
            raise ConfigError(f"optimizer.*: {e}") from e

    def datasets(self) -> tuple[Dataset, Dataset | None]:
        source = self.str_field("data.source", choices=("synth", "csv", "idx"))
        if source == "synth":
            train, test = synth_gaussian_mixture(
                num_classes=self.int_field("data.synth.classes", 10, minimum=2),
                per_class_train=self.int_field("data.synth.per_class_train", 500, minimum=1),
                dim=self.int_field("data.synth.dim", 16, minimum=2),
                spread=self.float_field("data.synth.spread", 1.0),
                seed=self.int_field("data.synth.seed", 1234),
                per_class_test=self.int_field("data.synth.per_class_test", 100, minimum=1),
            )
            return train, test
        if source == "csv":
            classes = self.int_field("model.classes", minimum=2)
            standardize = self.bool_field("data.standardize", False)
            train = load_csv(self.str_field("data.csv.train"), classes, standardize)
            test_path = self.get("data.csv.test")
            test = load_csv(test_path, classes, standardize) if test_path else None
            return train, test
        train = load_idx_images(
            self.str_field("data.idx.train_images"), self.str_field("data.idx.train_labels")
        )
        test = None
        if self.get("data.idx.test_images"):
            test = load_idx_images(
                self.str_field("data.idx.test_images"), self.str_field("data.idx.test_labels")
            )
        return train, test

    def augmenter(self) -> Augmenter | None:
        policy = self.tuple_field("data.augment", (), cast=str)
        if not policy or policy == ("none",):
            return None
        try:
            return Augmenter(tuple(policy))
        except ContractViolation as e:
            raise ConfigError(f"data.augment: {e}") from e


def _dtype_of(cfg: RunConfig):
    name = cfg.str_field("precision", "float32", choices=("float32", "float64"))
    return np.float32 if name == "float32" else np.float64


def _write_manifest(out_dir: Path, cfg: RunConfig, dataset_hash: str, summary: dict):
    manifest = {
        "package_version": __version__,
        "config": cfg.raw,
        "dataset_sha256": dataset_hash,
        "summary": summary,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    cfg = RunConfig(read_config(args.config))
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        k, v = override.split("=", 1)
        cfg.raw[k.strip()] = v.strip()
    if args.seed is not None:
        cfg.raw["seed"] = str(args.seed)
    out_dir = Path(args.out or cfg.str_field("output_dir", "run-out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    spec = cfg.model_spec()
    opt = cfg.optimizer()
    train, test = cfg.datasets()
    if train.feature_shape != spec.input_shape and (
        spec.kind == "smallcnn" or int(np.prod(train.feature_shape)) != spec.input_size
    ):
        raise ConfigError(
            f"model.input_shape {spec.input_shape} does not match dataset features "
            f"{train.feature_shape}"
        )
    if train.num_classes != spec.num_classes:
        raise ConfigError(
            f"model.classes {spec.num_classes} != dataset classes {train.num_classes}"
        )
    epochs = cfg.int_field("epochs", minimum=1)
    seed = cfg.int_field("seed", 1)
    dtype = _dtype_of(cfg)
    augmenter = cfg.augmenter()
    temperature = cfg.float_field("srdl.temperature", 3.0)

    summary: dict = {"strategy": cfg.strategy, "epochs": epochs}
    if cfg.strategy == "vanilla":
        ckpt, report = train_vanilla(
            spec, train, epochs, opt, seed, dtype=dtype, test_data=test, augmenter=augmenter
        )
        save_checkpoint(ckpt, out_dir / "final.ckpt")
    elif cfg.strategy == "srdl":
        seed2 = cfg.int_field("seed2", seed + 1)
        restart = cfg.bool_field("srdl.restart", True)
        stage_complete = cfg.bool_field("srdl.stage_complete", True)
        half, ckpt, store, report = train_srdl(
            spec, train, epochs, opt, temperature, seed, seed2,
            restart=restart, stage_complete=stage_complete,
            dtype=dtype, test_data=test, augmenter=augmenter,
        )
        save_checkpoint(half, out_dir / "stage1.ckpt")
        save_checkpoint(ckpt, out_dir / "final.ckpt")
        save_knowledge(store, out_dir / "knowledge.knw")
        if cfg.bool_field("srdl.ensemble_eval", False) and test is not None:
            summary["ensemble_test_top1"] = ensemble_top1([half, ckpt], test)
    else:  # kd
        teacher_path = cfg.get("kd.teacher_checkpoint")
        if teacher_path:
            teacher = load_checkpoint(teacher_path)
            teacher_trcost = 0  # pre-existing teacher: not billed to this run
        else:
            if cfg.get("kd.teacher.epochs") is None:
                raise ConfigError(
                    "kd needs kd.teacher_checkpoint or kd.teacher.* fields to train one"
                )
            teacher_spec = ModelSpec(
                cfg.str_field("kd.teacher.kind", "mlp", choices=("mlp", "smallcnn")),
                cfg.tuple_field("kd.teacher.input_shape", spec.input_shape, cast=int),
                cfg.tuple_field("kd.teacher.hidden", (512, 512), cast=int),
                spec.num_classes,
            )
            teacher, teacher_report = train_vanilla(
                teacher_spec, train, cfg.int_field("kd.teacher.epochs", minimum=1), opt,
                cfg.int_field("kd.teacher.seed", seed + 1000),
                dtype=dtype, test_data=test, augmenter=augmenter,
            )
            teacher.stage = "teacher"
            teacher_trcost = teacher_report.trcost
            save_checkpoint(teacher, out_dir / "teacher.ckpt")
        ckpt, report = train_kd(
            spec, teacher, train, epochs, opt, temperature, seed,
            teacher_trcost=teacher_trcost, dtype=dtype, test_data=test, augmenter=augmenter,
        )
        save_checkpoint(ckpt, out_dir / "final.ckpt")
        summary["teacher_trcost"] = report.teacher_trcost

    report.write_csv(out_dir / "report.csv")
    summary.update(
        {
            "final_train_top1": report.epochs[-1].train_top1,
            "final_test_top1": report.final_test_top1,
            "final_mean_ce": report.epochs[-1].mean_ce,
            "trcost": report.trcost,
            "trcost_with_teacher": combined_trcost(report),
            "extraction_flops": report.extraction_flops,
            "total_flops_estimate": report.total_flops_estimate,
            "forward_flops_per_sample": report.forward_flops,
            "wall_clock_sec": report.wall_clock_sec,
            "notes": report.notes,
            "seeds": report.seeds,
        }
    )
    _write_manifest(out_dir, cfg, train.sha256(), summary)
    print(f"run complete: {out_dir}")
    for key in ("final_train_top1", "final_test_top1", "trcost"):
        print(f"  {key} = {summary[key]}")
    return EXIT_OK


def _load_eval_dataset(args) -> Dataset:
    if args.data.endswith(".csv"):
        return load_csv(args.data, num_classes=args.classes)
    raise ConfigError(f"unsupported dataset file {args.data!r} (expected .csv)")


def cmd_eval(args) -> int:
    if args.mode == "retrieval":
        rset = _load_retrieval(args.probe, args.gallery)
        ranks = [int(k) for k in args.ranks.split(",")]
        rates = cmc(rset, ranks, exclude_same_camera=args.exclude_same_camera)
        m = mean_average_precision(rset, exclude_same_camera=args.exclude_same_camera)
        rows = [(f"rank-{k}", rates[k]) for k in ranks] + [("mAP", m)]
        for name, value in rows:
            print(f"{name},{value:.6f}")
        if args.out:
            Path(args.out).write_text(
                "metric,value\n" + "".join(f"{n},{v:.10g}\n" for n, v in rows)
            )
        return EXIT_OK

    ckpts = [load_checkpoint(p) for p in args.checkpoints]
    ds = _load_eval_dataset(args)
    if len(ckpts) == 1:
        acc = evaluate_top1(ckpts[0].params, ds)
        label = "single"
    else:
        acc = ensemble_top1(ckpts, ds)
        label = "ensemble"
    print(f"{label},top1,{acc:.6f}")
    if args.out:
        Path(args.out).write_text(f"mode,metric,value\n{label},top1,{acc:.10g}\n")
    return EXIT_OK


def _load_retrieval(probe_path, gallery_path) -> RetrievalSet:
    """Retrieval CSVs: ``identity, camera, embedding...`` per row."""

    def read(path):
        ids, cams, rows = [], [], []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if len(cells) < 3:
                raise ConfigError(f"{path} row {lineno}: need id, camera, embedding...")
            ids.append(int(cells[0]))
            cams.append(int(cells[1]))
            rows.append([float(c) for c in cells[2:]])
        if not rows:
            raise ConfigError(f"{path}: no rows")
        return np.array(ids), np.array(cams), np.array(rows)

    p_ids, p_cams, p_emb = read(probe_path)
    g_ids, g_cams, g_emb = read(gallery_path)
    return RetrievalSet(p_emb, p_ids, g_emb, g_ids, probe_cams=p_cams, gallery_cams=g_cams)


def cmd_landscape(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_csv(args.data, num_classes=ckpt.spec.num_classes)
    if args.grid:
        grid = tuple(float(d) for d in args.grid.split(","))
    else:
        steps = args.steps
        grid = tuple(args.d_max * i / (steps - 1) for i in range(steps))
    spec = PerturbationSpec(num_directions=args.directions, d_grid=grid, seed=args.seed)
    curves = landscape_sweep(ckpt, ds, spec)
    out = Path(args.out or "landscape.csv")
    write_sweep_csv(curves, grid, out)
    base = mean_cross_entropy(ckpt.params, ds)
    print(f"baseline loss {base:.6f}; wrote {len(curves) * len(grid)} rows to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    manifests = []
    for path in args.runs:
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        manifests.append(json.loads(p.read_text()))
    hashes = {m["dataset_sha256"] for m in manifests}
    if len(hashes) != 1:
        raise ConfigError(f"runs trained on different datasets: {sorted(hashes)}")
    rows = []
    for m in manifests:
        s = m["summary"]
        rows.append(
            (
                s["strategy"],
                s.get("final_test_top1"),
                s["trcost_with_teacher"],
                s["total_flops_estimate"],
            )
        )
    print("strategy,test_top1,trcost,total_flops_estimate")
    for strategy, acc, cost, est in rows:
        acc_txt = f"{100 * acc:.2f}" if acc is not None else "n/a"
        print(f"{strategy},{acc_txt},{cost},{est}")
    by_name = {r[0]: r for r in rows}
    if "vanilla" in by_name and "srdl" in by_name:
        v, s = by_name["vanilla"], by_name["srdl"]
        if v[1] is not None and s[1] is not None:
            print(f"gain(srdl-vanilla),{100 * (s[1] - v[1]):+.2f}")
        print(f"trcost_ratio(srdl/vanilla),{s[3] / v[3]:.5f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    train, test = synth_gaussian_mixture(
        num_classes=args.classes,
        per_class_train=args.per_class_train,
        dim=args.dim,
        spread=args.spread,
        seed=args.seed,
        per_class_test=args.per_class_test,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srdl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run a training strategy from a config file")
    p.add_argument("--config", required=True, help="config file or manifest.json to replay")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) on a dataset")
    p.add_argument("--mode", choices=("classification", "retrieval"), default="classification")
    p.add_argument("--checkpoints", nargs="*", default=[],
                   help="one checkpoint, or several for an ensemble")
    p.add_argument("--data", help="dataset CSV (classification mode)")
    p.add_argument("--classes", type=int, help="class count of the dataset CSV")
    p.add_argument("--probe", help="probe CSV (retrieval mode)")
    p.add_argument("--gallery", help="gallery CSV (retrieval mode)")
    p.add_argument("--ranks", default="1,5,10", help="comma list of CMC ranks")
    p.add_argument("--exclude-same-camera", action="store_true")
    p.add_argument("--out", help="write metrics CSV here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("landscape", help="loss curves along random parameter rays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset CSV to measure the loss on")
    p.add_argument("--directions", type=int, default=20)
    p.add_argument("--d-max", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--grid", help="explicit comma list of magnitudes (starts at 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("compare", help="tabulate finished runs (vanilla/srdl/kd)")
    p.add_argument("runs", nargs="+", help="run directories or manifest.json paths")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class-train", type=int, default=500)
    p.add_argument("--per-class-test", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (
        ConfigError,
        ContractViolation,
        ShapeMismatch,
        CheckpointFormatError,
        FileIntegrityError,
        FileNotFoundError,
        IsADirectoryError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        where = f" at epoch {e.epoch}" if e.epoch is not None else ""
        print(f"numeric failure{where}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
