"""Command-line drivers: gen-data, train, selftrain, eval and sweep.

Every command writes ``resolved_config.json`` into its output directory.
Passing that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (ConfigError, DatasetManifest, ManifestError, SyntheticConfig,
                   generate_synthetic, load_manifest, save_manifest)
from .detector import DetectorConfig, load_checkpoint
from .evaluation import (EvalReport, compare, evaluate_raw, plot_froc, raw_results,
                         save_detections)
from .losses import MoICriterion
from .self_training import PromotionConfig, self_train, write_promotion_report
from .training import TrainConfig, dump_json, train

log = logging.getLogger("jointdet")

OUT_ENV = "JOINTDET_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class DataError(RuntimeError):
    """A referenced input file is missing or malformed."""


@dataclass
class EvalOptions:
    prob_threshold: float = 0.5
    nms_iou: float = 0.3
    resamples: int = 2000
    seed: int = 0


@dataclass
class ExperimentSpec:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    promotion: PromotionConfig | None = None
    eval: EvalOptions = field(default_factory=EvalOptions)
    out: str = ""
    seeds: list[int] = field(default_factory=lambda: [0])
    manifest: str | None = None
    checkpoint: str | None = None
    grid: dict = field(default_factory=lambda: {"strong": [10], "weak": [0]})

    def validate(self) -> "ExperimentSpec":
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if not self.grid.get("strong") or not self.grid.get("weak"):
            raise ConfigError("sweep grid must name at least one strong and one weak size")
        return self

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "detector": self.detector.to_dict(),
            "promotion": None if self.promotion is None else {
                **asdict(self.promotion), "background_size": list(self.promotion.background_size)},
            "eval": asdict(self.eval),
            "seeds": list(self.seeds),
            "manifest": self.manifest,
            "checkpoint": self.checkpoint,
            "grid": self.grid,
        }


_SECTIONS = {"data", "train", "detector", "promotion", "eval", "seeds", "manifest",
             "checkpoint", "grid", "command", "seed"}


def load_spec(path: str | None) -> ExperimentSpec:
    if path is None:
        return ExperimentSpec()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(d) - _SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    spec = ExperimentSpec()
    try:
        if d.get("data"):
            spec.data = SyntheticConfig.from_dict(d["data"])
        if d.get("train"):
            spec.train = TrainConfig.from_dict(d["train"])
        if d.get("detector"):
            spec.detector = DetectorConfig(**d["detector"])
        if d.get("promotion"):
            spec.promotion = PromotionConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                for k, v in d["promotion"].items()})
        if d.get("eval"):
            spec.eval = EvalOptions(**d["eval"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if d.get("seeds"):
        spec.seeds = [int(s) for s in d["seeds"]]
    elif "seed" in d:
        spec.seeds = [int(d["seed"])]
    spec.manifest = d.get("manifest")
    spec.checkpoint = d.get("checkpoint")
    if d.get("grid"):
        spec.grid = {k: [int(v) for v in d["grid"][k]] for k in ("strong", "weak")}
    return spec


def _parse_alpha(value: str) -> dict:
    if value == "gradual":
        return {"alpha_schedule": "gradual_linear"}
    if value.startswith("static:"):
        try:
            a = float(value.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad --alpha value {value!r}") from None
        return {"alpha_schedule": "static", "alpha_static": a}
    raise ConfigError(f"--alpha must be 'gradual' or 'static:VALUE', got {value!r}")


def apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    """Fold command-line flags into ``spec``; flags win over the config file."""
    train_kw = spec.train.to_dict()
    if getattr(args, "seed", None) is not None:
        spec.seeds = [args.seed]
    seed = spec.seeds[0]
    train_kw["seed"] = seed
    spec.data.seed = seed
    spec.eval.seed = seed
    if getattr(args, "variant", None):
        train_kw["variant"] = args.variant
    if getattr(args, "moi", None):
        train_kw["criterion"] = MoICriterion.parse(args.moi).value
    if getattr(args, "alpha", None):
        train_kw.update(_parse_alpha(args.alpha))
    if getattr(args, "iterations", None):
        train_kw["iterations"] = args.iterations
    try:
        spec.train = TrainConfig.from_dict(train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if getattr(args, "promote_fraction", None) is not None or spec.promotion is not None:
        base = asdict(spec.promotion) if spec.promotion else {}
        if getattr(args, "promote_fraction", None) is not None:
            base["fraction"] = args.promote_fraction
        base["seed"] = seed
        try:
            spec.promotion = PromotionConfig(**base)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "manifest", None):
        spec.manifest = str(Path(args.manifest).resolve())
    if getattr(args, "checkpoint", None):
        spec.checkpoint = str(Path(args.checkpoint).resolve())
    return spec.validate()


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _prepare_out(args, command: str) -> Path:
    out = Path(args.out) if args.out else default_out(command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def write_resolved(spec: ExperimentSpec, command: str, out: Path):
    dump_json({"command": command, "seed": spec.seeds[0], **spec.to_dict()},
              out / "resolved_config.json")


def _load_manifest(spec: ExperimentSpec) -> DatasetManifest:
    if not spec.manifest:
        raise DataError("a manifest is required (--manifest)")
    if not Path(spec.manifest).is_file():
        raise DataError(f"manifest not found: {spec.manifest}")
    return load_manifest(spec.manifest)


def write_report(report: EvalReport, out: Path, name: str = "eval_report.json") -> Path:
    path = out / name
    dump_json(report.as_dict(), path)
    return path


def evaluate_model(model, records, spec: ExperimentSpec, label: str) -> tuple[EvalReport, list]:
    raw = raw_results(model, records)
    report = evaluate_raw(raw, spec.eval.prob_threshold, spec.eval.nms_iou, spec.eval.resamples,
                          spec.eval.seed, label=label)
    return report, raw


def emit_eval(model, manifest: DatasetManifest, spec: ExperimentSpec, out: Path,
              label: str) -> EvalReport | None:
    """Detections file, report and FROC plot for the test split, if it has boxes."""
    test = manifest.test
    if not any(r.is_strong for r in test):
        log.info("no boxed test images; skipping evaluation")
        return None
    report, raw = evaluate_model(model, test, spec, label)
    save_detections(raw, out / "detections.jsonl")
    write_report(report, out)
    plot_froc(report.froc, out / "froc.png", label)
    return report


# commands

def cmd_gen_data(spec: ExperimentSpec, out: Path) -> Path:
    manifest = generate_synthetic(spec.data)
    path = save_manifest(manifest, out / "manifest.jsonl")
    counts = {"/".join(k): v for k, v in sorted(manifest.counts().items())}
    dump_json(counts, out / "counts.json")
    log.info("wrote %d records to %s", len(manifest), path)
    return path


def _train_cell(spec: ExperimentSpec, manifest: DatasetManifest, out: Path):
    result = train(manifest, config=spec.train, detector_config=spec.detector)
    result.save(out, extra={"run_label": result.run_label})
    dump_json({"run_label": result.run_label, "n_strong": result.n_strong,
               "n_weak": result.n_weak, "iterations": spec.train.iterations},
              out / "train_summary.json")
    report = emit_eval(result.model, manifest, spec, out, result.run_label)
    return result, report


def cmd_train(spec: ExperimentSpec, out: Path):
    return _train_cell(spec, _load_manifest(spec), out)


def cmd_selftrain(spec: ExperimentSpec, out: Path):
    manifest = _load_manifest(spec)
    if not manifest.weak_train:
        raise DataError("self-training needs weakly annotated training images")
    cfg = spec.promotion or PromotionConfig(seed=spec.seeds[0])
    result = self_train(manifest, cfg, spec.train, spec.detector, evaluate=False)
    result.initial.save(out / "initial", extra={"run_label": "initial"})
    result.retrained.save(out / "retrained", extra={"run_label": "retrained"})
    write_promotion_report(result.promotions, out / "promotions.jsonl")
    summary = result.summary()
    if any(r.is_strong for r in manifest.test):
        init = emit_eval(result.initial.model, manifest, spec, out / "initial", "initial")
        ret = emit_eval(result.retrained.model, manifest, spec, out / "retrained", "retrained")
        compare(ret, init, "initial", spec.eval.resamples, spec.eval.seed)
        write_report(ret, out / "retrained")
        summary.update(initial_corloc=init.corloc.as_dict(),
                       retrained_corloc=ret.corloc.as_dict(),
                       comparison=ret.comparisons["initial"])
    dump_json(summary, out / "selftrain_report.json")
    return result


def cmd_eval(spec: ExperimentSpec, out: Path) -> EvalReport:
    if not spec.checkpoint or not Path(spec.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {spec.checkpoint}")
    try:
        model, payload = load_checkpoint(spec.checkpoint)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {spec.checkpoint}: {exc}") from None
    manifest = _load_manifest(spec)
    label = payload.get("extra", {}).get("run_label", "")
    report = emit_eval(model, manifest, spec, out, label)
    if report is None:
        raise DataError("manifest has no boxed test images to evaluate")
    return report


def _sweep_data(spec: ExperimentSpec, seed: int) -> DatasetManifest:
    if spec.manifest:
        return _load_manifest(spec)
    cfg = {**spec.data.to_dict(), "seed": seed, "n_strong": max(spec.grid["strong"]),
           "n_weak": max(spec.grid["weak"])}
    return _generate_cached(json.dumps(cfg, sort_keys=True))


@functools.lru_cache(maxsize=2)
def _generate_cached(cfg_json: str) -> DatasetManifest:
    # cells of one seed share a dataset; each worker process keeps its own copy
    return generate_synthetic(SyntheticConfig.from_dict(json.loads(cfg_json)))


def _subset(manifest: DatasetManifest, n_strong: int, n_weak: int) -> DatasetManifest:
    strong, weak = manifest.strong_train, manifest.weak_train
    if n_strong > len(strong) or n_weak > len(weak):
        raise DataError(f"grid cell {n_strong}(+{n_weak}) exceeds the available "
                        f"{len(strong)} strong / {len(weak)} weak images")
    return DatasetManifest(strong[:n_strong] + weak[:n_weak] + manifest.test, manifest.source)


def _run_sweep_cell(job):
    spec, seed, n_strong, n_weak, cell_out = job
    cell_spec = replace(spec)
    cell_spec.train = TrainConfig.from_dict({**spec.train.to_dict(), "seed": seed})
    cell_spec.eval = EvalOptions(**{**asdict(spec.eval), "seed": seed})
    manifest = _subset(_sweep_data(spec, seed), n_strong, n_weak)
    cell_out.mkdir(parents=True, exist_ok=True)
    _, report = _train_cell(cell_spec, manifest, cell_out)
    if report is None:
        raise DataError("sweep needs boxed test images")
    c = report.corloc
    return {"n_strong": n_strong, "n_weak": n_weak, "seed": seed, "corloc": c.estimate,
            "ci_low": c.low, "ci_high": c.high}


SWEEP_COLUMNS = ("n_strong", "n_weak", "seed", "corloc", "ci_low", "ci_high")


def cmd_sweep(spec: ExperimentSpec, out: Path, jobs: int = 1) -> list[dict]:
    jobs_list = [(spec, seed, s, w, out / "cells" / f"s{s}_w{w}_seed{seed}")
                 for s in spec.grid["strong"] for w in spec.grid["weak"] for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, jobs_list))
    else:
        rows = [_run_sweep_cell(j) for j in jobs_list]
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    dump_json({"rows": rows, "trend": sweep_trend(rows)}, out / "sweep_summary.json")
    plot_sweep(rows, out / "sweep.png")
    return rows


def sweep_trend(rows: list[dict]) -> dict:
    """Per strong size: in how many seeds each weak size beat the no-weak cell."""
    base = {(r["n_strong"], r["seed"]): r["corloc"] for r in rows if r["n_weak"] == 0}
    trend: dict = {}
    for r in rows:
        if r["n_weak"] == 0 or (r["n_strong"], r["seed"]) not in base:
            continue
        key = f"{r['n_strong']}(+{r['n_weak']})"
        wins, total = trend.get(key, (0, 0))
        trend[key] = (wins + int(r["corloc"] > base[(r["n_strong"], r["seed"])]), total + 1)
    return {k: {"improved": w, "seeds": n} for k, (w, n) in sorted(trend.items())}


def plot_sweep(rows: list[dict], path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for n_weak in sorted({r["n_weak"] for r in rows}):
        sizes = sorted({r["n_strong"] for r in rows if r["n_weak"] == n_weak})
        mean, lo, hi = [], [], []
        for s in sizes:
            cell = [r for r in rows if r["n_weak"] == n_weak and r["n_strong"] == s]
            mean.append(np.mean([r["corloc"] for r in cell]))
            lo.append(np.mean([r["ci_low"] for r in cell]))
            hi.append(np.mean([r["ci_high"] for r in cell]))
        mean, lo, hi = map(np.asarray, (mean, lo, hi))
        err = np.vstack([mean - lo, hi - mean]).clip(min=0)
        ax.errorbar(sizes, mean, yerr=err, marker="o", capsize=3, label=f"+{n_weak} weak")
    ax.set_xlabel("strongly annotated training images")
    ax.set_ylabel("held-out CorLoc")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON experiment config (or a resolved_config.json)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest (JSON lines)")

    def training(p):
        p.add_argument("--variant", choices=("combined", "alternating"))
        p.add_argument("--moi", choices=("benign", "malignant", "discriminative", "abnormal"))
        p.add_argument("--alpha", help="'gradual' or 'static:VALUE'")
        p.add_argument("--iterations", type=int)

    common(sub.add_parser("gen-data", help="write a synthetic dataset"), manifest=False)
    p = sub.add_parser("train", help="train a detector")
    common(p)
    training(p)
    p = sub.add_parser("selftrain", help="train, promote weak images, retrain")
    common(p)
    training(p)
    p.add_argument("--promote-fraction", type=float)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("sweep", help="train and evaluate a strong x weak grid over seeds")
    common(p)
    training(p)
    p.add_argument("--strong", type=int, nargs="+")
    p.add_argument("--weak", type=int, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        spec = load_spec(args.config)
        if args.command == "sweep":
            if args.strong:
                spec.grid["strong"] = args.strong
            if args.weak:
                spec.grid["weak"] = args.weak
            if args.seeds:
                spec.seeds = args.seeds
        spec = apply_overrides(spec, args)
        spec.data.validate()
        out = _prepare_out(args, args.command)
        write_resolved(spec, args.command, out)
        if args.command == "gen-data":
            cmd_gen_data(spec, out)
        elif args.command == "train":
            cmd_train(spec, out)
        elif args.command == "selftrain":
            cmd_selftrain(spec, out)
        elif args.command == "eval":
            cmd_eval(spec, out)
        else:
            cmd_sweep(spec, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
