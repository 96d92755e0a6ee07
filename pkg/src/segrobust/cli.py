"""Command-line front end: ``segrobust {gen-data,train,attack,evaluate,report}``.

Every command reads a JSON experiment config, writes only under its output
directory and leaves the effective config (all defaults filled in) there as
``config.json``. Exit codes: 0 success, 1 usage or config error, 2 numerical
divergence, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from segrobust.attacks import run_attack
from segrobust.config import ExperimentConfig, load_config
from segrobust.data import Dataset, Subject, label_bytes, load_labels, load_volume, make_dataset, save_volume, to_external, volume_bytes
from segrobust.defenses import train_defense
from segrobust.errors import ConfigError, DivergenceError, FormatError, ShapeError, UndefinedTestError
from segrobust.evaluation import DICE_METRICS, RobustnessReport, curve, evaluate_robustness, iteration_sweep
from segrobust.metrics import all_region_dice, quality
from segrobust.plots import save_line_chart
from segrobust.unet import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
REGION_TITLES = {"dice_whole": "Whole tumor", "dice_core": "Tumor core", "dice_enh": "Enhancing tumor"}

log = logging.getLogger("segrobust")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segrobust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--out", help="override output.directory")
        p.add_argument("--seed", type=int, help="override the data and training seeds")
        return p

    add("gen-data", "generate phantoms and the train/test manifest")
    add("train", "train the model(s) selected by defense.kind")
    p = add("attack", "attack one subject and write the adversarial volume")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (default: the trained deployment model)")
    p.add_argument("--subject", help="subject id (default: first test subject)")
    p = add("evaluate", "robustness curves, paired tests and plots for one or more models")
    p.add_argument("--checkpoint", type=Path, action="append", help="repeatable; default: the trained deployment model")
    add("report", "re-aggregate saved evaluation records and redraw the plots")
    return parser


# ---------------------------------------------------------------- layout


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output.directory)


def _persist_config(cfg: ExperimentConfig) -> None:
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_json())


def _data_dir(cfg):
    return _out(cfg) / "data"


def _ckpt_dir(cfg):
    return _out(cfg) / "checkpoints"


def _report_dir(cfg):
    return _out(cfg) / "reports"


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = _data_dir(cfg)
    manifest_path = d / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{manifest_path} not found; run gen-data first") from None

    def read(ids):
        return [Subject(i, load_volume(d / f"{i}.srtv"), load_labels(d / f"{i}.srtl")) for i in ids]

    return Dataset(read(manifest["train"]), read(manifest["test"]))


def _default_checkpoint(cfg: ExperimentConfig) -> Path:
    name = "student.srck" if cfg.defense.kind == "distillation" else "model.srck"
    return _ckpt_dir(cfg) / name


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig) -> None:
    ds = make_dataset(cfg.data.n_subjects, cfg.data.extent, cfg.data.seed, cfg.data.test_fraction)
    d = _data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    for s in ds.subjects:
        (d / f"{s.subject_id}.srtv").write_bytes(volume_bytes(s.image))
        (d / f"{s.subject_id}.srtl").write_bytes(label_bytes(s.labels))
    manifest = {
        "extent": cfg.data.extent,
        "seed": cfg.data.seed,
        "test": [s.subject_id for s in ds.test],
        "test_fraction": cfg.data.test_fraction,
        "train": [s.subject_id for s in ds.train],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.subjects)} subjects ({len(ds.train)} train, {len(ds.test)} test) to {d}")


def cmd_train(cfg: ExperimentConfig) -> None:
    ds = load_dataset(cfg)
    models, train_log = train_defense(cfg.unet(), ds.train, cfg.defense_spec(), val=ds.test)
    ck = _ckpt_dir(cfg)
    ck.mkdir(parents=True, exist_ok=True)
    for name, model in models.items():
        save_checkpoint(model, ck / f"{name}.srck")
    train_log.to_csv(_out(cfg) / "train_log.csv")
    last = train_log.records[-1] if train_log.records else None
    summary = f"final loss {last.loss:.4f}, val whole Dice {last.val_dice_whole:.3f}" if last else "no epochs run"
    print(f"trained {cfg.defense.kind} ({', '.join(models)}): {summary}")


def cmd_attack(cfg: ExperimentConfig, checkpoint: Path | None, subject_id: str | None) -> None:
    ds = load_dataset(cfg)
    model = load_checkpoint(checkpoint or _default_checkpoint(cfg))
    pool = {s.subject_id: s for s in ds.subjects}
    if subject_id is None:
        subject = ds.test[0]
    elif subject_id in pool:
        subject = pool[subject_id]
    else:
        raise ConfigError(f"unknown subject {subject_id!r}")
    spec = cfg.single_attack()
    adv = run_attack(model, subject.image, subject.labels, spec).adversarial
    out = _out(cfg) / "attacks"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{subject.subject_id}_{spec.method.value}.srtv"
    save_volume(adv, path)
    before = all_region_dice(to_external(model.predict(subject.image)), subject.labels)
    after = all_region_dice(to_external(model.predict(adv)), subject.labels)
    q = quality(subject.image, adv)
    print(
        f"{subject.subject_id} {spec.method.value} eps={spec.epsilon:g} steps={spec.steps} "
        f"psnr={q.psnr_db:.3f} ssim={q.ssim:.5f} rmse={q.rmse:.6f} "
        + " ".join(f"{k}={before[k]:.4f}->{after[k]:.4f}" for k in before)
    )
    print(f"adversarial volume: {path}")


def _model_names(paths: Sequence[Path]) -> list[str]:
    names, seen = [], {}
    for p in paths:
        base = p.stem
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}{seen[base]}")
    return names


def _plot_reports(reports: dict[str, RobustnessReport], out: Path, stem: str, x_label: str) -> list[Path]:
    written = []
    for metric in DICE_METRICS:
        series = {name: curve(rep, metric) for name, rep in reports.items()}
        path = out / f"{stem}_{metric}.svg"
        save_line_chart(path, series, title=f"{REGION_TITLES[metric]} Dice", x_label=x_label, y_label="mean Dice")
        written.append(path)
    return written


def _sweep_plots(sweeps: dict[str, RobustnessReport], out: Path) -> None:
    if not sweeps:
        return
    _plot_reports(sweeps, out, "sweep", "iterations")
    series = {name: curve(rep, "psnr_db") for name, rep in sweeps.items()}
    save_line_chart(out / "sweep_psnr_db.svg", series, title="PSNR vs iterations", x_label="iterations", y_label="mean PSNR (dB)")


def cmd_evaluate(cfg: ExperimentConfig, checkpoints: Sequence[Path] | None) -> None:
    ds = load_dataset(cfg)
    paths = list(checkpoints or [_default_checkpoint(cfg)])
    models = {name: load_checkpoint(p) for name, p in zip(_model_names(paths), paths)}
    out = _report_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.attack_specs()
    iterative = cfg.attack_grid.method != "fgsm"
    reports, sweeps = {}, {}
    for name, model in models.items():
        log.info("evaluating %s", name)
        reports[name] = rep = evaluate_robustness(model, ds.test, grid)
        rep.write_records(out / f"{name}_records.csv")
        rep.write_aggregates(out / f"{name}_aggregate.csv")
        if iterative:
            sweeps[name] = sw = iteration_sweep(model, ds.test, cfg.attack_grid.method, cfg.attack_grid.alpha, cfg.attack_grid.steps)
            sw.write_records(out / f"{name}_sweep_records.csv")
            sw.write_aggregates(out / f"{name}_sweep_aggregate.csv")
    _plot_reports(reports, out, "curve", "attack budget (fraction of max |voxel|)")
    _sweep_plots(sweeps, out)
    _print_summary(reports)


def cmd_report(cfg: ExperimentConfig) -> None:
    out = _report_dir(cfg)
    files = sorted(p for p in out.glob("*_records.csv") if not p.name.endswith("_sweep_records.csv")) if out.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no evaluation records under {out}; run evaluate first")
    reports = {}
    for p in files:
        name = p.name[: -len("_records.csv")]
        reports[name] = rep = RobustnessReport.read_records(p)
        rep.write_aggregates(out / f"{name}_aggregate.csv")
    _plot_reports(reports, out, "curve", "attack budget (fraction of max |voxel|)")
    sweeps = {}
    for p in sorted(out.glob("*_sweep_records.csv")):
        name = p.name[: -len("_sweep_records.csv")]
        sweeps[name] = rep = RobustnessReport.read_records(p)
        rep.write_aggregates(out / f"{name}_sweep_aggregate.csv")
    _sweep_plots(sweeps, out)
    _print_summary(reports)


def _print_summary(reports: dict[str, RobustnessReport]) -> None:
    for name, rep in reports.items():
        print(f"{name}:")
        for cond in rep.conditions:
            cells = []
            for m in DICE_METRICS:
                a = rep.aggregates[(cond, m)]
                mark = "*" if a.significant else ""
                cells.append(f"{m[5:]}={a.mean:.3f}{mark}")
            print(f"  {cond:<22} " + " ".join(cells))


# ---------------------------------------------------------------- entry point


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(out=args.out, seed=args.seed)
        _persist_config(cfg)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "attack":
            cmd_attack(cfg, args.checkpoint, args.subject)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        else:
            cmd_report(cfg)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, UndefinedTestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
