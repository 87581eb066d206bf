"""``octpair`` command line: simulate, preprocess, pretrain, finetune, evaluate, sweep, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from pathlib import Path

import click
import yaml

from . import __version__
from .config import ConfigError, PipelineConfig
from .models import CheckpointError, init_weights, load_model, save_checkpoint, save_model
from .phantom import DatasetManifest, SceneError, generate_dataset, plan_dataset
from .preprocess import (
    CropSet,
    PreprocessError,
    file_digest,
    load_crop_store,
    preprocess_record,
    simulate_crops,
    write_crop_store,
)
from .seeding import derive_seed
from .splits import SplitError, make_splits, subsample_labeled
from .sweep import SweepError, run_sweep, write_reports
from .training import RunConfig, TrainingError, deterministic_kernels, evaluate, finetune, pretrain

log = logging.getLogger("octpair")

USAGE_ERRORS = (click.UsageError, ConfigError, FileExistsError, FileNotFoundError, CheckpointError)
RUNTIME_ERRORS = (SceneError, PreprocessError, SplitError, TrainingError, SweepError, RuntimeError, ValueError, OSError)


def data_root() -> Path:
    return Path(os.environ.get("OCTPAIR_DATA_DIR", "octpair-data"))


def _resolve(config, seed, toy, paper_grid, workers=None) -> PipelineConfig:
    return PipelineConfig.resolve(config, toy=toy, paper_grid=paper_grid, seed=seed, workers=workers)


def config_options(fn):
    fn = click.option("--config", "config", type=click.Path(dir_okay=False), help="YAML config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the master seed.")(fn)
    fn = click.option("--toy", is_flag=True, help="Use the small seeded toy benchmark preset.")(fn)
    fn = click.option("--paper-grid", is_flag=True, help="Force batch 28, tau 0.1, D 512, 100 epochs, all fractions.")(fn)
    return fn


def _write_resolved(out: Path, cfg: PipelineConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.config_hash, "config": cfg.to_dict()}
    doc.update(extra or {})
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _load_crops(path) -> CropSet:
    path = Path(path)
    if not (path / "crops.json").exists() and not path.is_file():
        raise FileNotFoundError(f"no crop manifest at {path}; run `octpair preprocess` first")
    return load_crop_store(path)


def _fold(crops: CropSet, cfg: PipelineConfig, k: int):
    plan = make_splits(crops.meat_class, cfg["sweep"]["n_folds"], derive_seed(cfg.seed, "splits"))
    if not 0 <= k < len(plan.folds):
        raise click.BadParameter(f"fold must be in [0, {len(plan.folds) - 1}]", param_hint="--fold")
    return plan, plan.folds[k]


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose):
    """Contrastive intensity/phase pretraining for OCT needle-tip tissue classification."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_options
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Dataset directory.")
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@click.option("--dry-run", is_flag=True, help="Print the insertion plan and write nothing.")
def simulate(config, seed, toy, paper_grid, out, force, dry_run):
    """Simulate phantom insertions and write a dataset manifest."""
    cfg = _resolve(config, seed, toy, paper_grid)
    out = Path(out) if out else data_root() / "dataset"
    sim = cfg["simulate"]
    plans = plan_dataset(sim["counts"], cfg.insertion_base(), cfg.seed, cfg.layout())
    if dry_run:
        for p in plans:
            layers = " ".join(f"{l.tissue_class}:{l.thickness or 'end'}" for l in p.config.layer_sequence)
            click.echo(f"{p.insertion_id}  {p.config.duration:6.1f}s  {p.config.n_ascans:8d} A-scans  {layers}")
        click.echo(f"{len(plans)} insertions planned; nothing written")
        return
    manifest = generate_dataset(sim["counts"], cfg.insertion_base(), cfg.seed, out, cfg.layout(), force=force)
    _write_resolved(out, cfg)
    counts = manifest.class_counts()
    click.echo(f"wrote {len(manifest.insertions)} insertions to {out}")
    for meat in sorted(counts):
        click.echo(f"  {meat}: {counts[meat]}")


@cli.command()
@config_options
@click.option("--dataset", type=click.Path(), default=None, help="Dataset directory or manifest.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Crop store directory.")
@click.option("--force", is_flag=True, help="Overwrite an existing crop store.")
def preprocess(config, seed, toy, paper_grid, dataset, out, force):
    """Average, crop and label every insertion of a dataset."""
    cfg = _resolve(config, seed, toy, paper_grid)
    dataset = Path(dataset) if dataset else data_root() / "dataset"
    manifest_path = dataset if dataset.is_file() else dataset / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest {manifest_path} not found; run `octpair simulate` first")
    out = Path(out) if out else data_root() / "crops"
    if (out / "crops.json").exists() and not force:
        raise FileExistsError(f"{out / 'crops.json'} exists; pass --force to overwrite")
    manifest = DatasetManifest.load(manifest_path)
    pcfg = cfg.preprocess()
    pairs = {}
    for entry in manifest.insertions:
        pairs[entry["id"]] = preprocess_record(manifest.load_record(entry["id"]), pcfg)
    extra = {
        "config_hash": cfg.section_hash("preprocess"),
        "dataset_manifest_sha256": file_digest(manifest_path),
    }
    path = write_crop_store(pairs, out, manifest.meat_class_of(), pcfg, extra)
    _write_resolved(out, cfg)
    crops = load_crop_store(path)
    click.echo(f"wrote {len(crops)} crop pairs to {out} (manifest sha256 {file_digest(path)[:16]})")
    _echo_counts(crops)


def _echo_counts(crops: CropSet) -> None:
    by_meat = {}
    for ins, label in zip(crops.insertion_ids, crops.labels):
        meat = crops.meat_class.get(str(ins), "?")
        row = by_meat.setdefault(meat, {"labeled": 0, "unlabeled": 0})
        row["labeled" if label >= 0 else "unlabeled"] += 1
    for meat in sorted(by_meat):
        click.echo(f"  {meat} phantoms: {by_meat[meat]['labeled']} labeled, {by_meat[meat]['unlabeled']} unlabeled")
    counts = crops.label_counts()
    click.echo("  labels: " + ", ".join(f"{k} {v}" for k, v in counts.items()))


@cli.command("pretrain")
@config_options
@click.option("--crops", "crops_dir", type=click.Path(), default=None, help="Crop store directory.")
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Checkpoint path.")
def pretrain_cmd(config, seed, toy, paper_grid, crops_dir, fold, out):
    """Contrastive pretraining on all crops of a fold's training insertions."""
    cfg = _resolve(config, seed, toy, paper_grid)
    crops = _load_crops(crops_dir or data_root() / "crops")
    _, f = _fold(crops, cfg, fold)
    pool = crops.subset(crops.from_insertions(f.train))
    run_seed = derive_seed(cfg.seed, "pretrain", fold)
    run = RunConfig(**{**cfg.run_config().to_dict(), "seed": run_seed})
    with deterministic_kernels(cfg["train"]["deterministic"]):
        res = pretrain(pool, cfg.encoder(), run)
    out = Path(out) if out else data_root() / "checkpoints" / f"pretrain-fold{fold}.pt"
    save_checkpoint(out, res.model, run_seed, {"fold": fold, "config_hash": cfg.config_hash, "config": cfg.to_dict()})
    curve = {"initial_loss": res.initial_loss, "epoch_losses": res.epoch_losses, "steps": res.steps}
    out.with_suffix(".json").write_text(json.dumps(curve, indent=2) + "\n")
    click.echo(f"pretrained on {len(pool)} pairs, {res.steps} steps; loss {res.epoch_losses[0]:.4f} -> {res.epoch_losses[-1]:.4f}")
    click.echo(f"checkpoint: {out}")


@cli.command("finetune")
@config_options
@click.option("--crops", "crops_dir", type=click.Path(), default=None)
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--init", "init_mode", type=click.Choice(["scratch", "generic_pretrained", "contrastive_checkpoint"]), default="scratch")
@click.option("--modality", type=click.Choice(["dual", "intensity_only", "phase_only"]), default="dual")
@click.option("--fraction", type=float, default=1.0, show_default=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None, help="Contrastive checkpoint.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Model path.")
def finetune_cmd(config, seed, toy, paper_grid, crops_dir, fold, init_mode, modality, fraction, checkpoint, out):
    """Supervised training of head and encoders on a labeled subset."""
    cfg = _resolve(config, seed, toy, paper_grid)
    crops = _load_crops(crops_dir or data_root() / "crops")
    _, f = _fold(crops, cfg, fold)
    tr = crops.from_insertions(f.train)
    labeled = tr[crops.labels[tr] >= 0]
    keys = [f"{crops.insertion_ids[i]}/{crops.time_window_index[i]:06d}" for i in labeled]
    pick = subsample_labeled(crops.labels[labeled], keys, fraction, derive_seed(cfg.seed, "subsample", fold))
    train = crops.subset(labeled[pick])
    val = crops.subset(crops.from_insertions(f.val))
    run_seed = derive_seed(cfg.seed, "finetune", fold)
    run = RunConfig(**{**cfg.run_config().to_dict(), "seed": run_seed, "init_mode": init_mode,
                       "modality_mode": modality, "label_fraction": fraction})
    with deterministic_kernels(cfg["train"]["deterministic"]):
        model = init_weights(init_mode, cfg.encoder(), modality, run_seed, checkpoint, cfg["model"]["pretrained_weights"])
        res = finetune(model, train, val, run)
    out = Path(out) if out else data_root() / "models" / f"{init_mode}-{modality}-f{round(fraction * 100):03d}-fold{fold}.pt"
    save_model(out, res.model, {"fold": fold, "run": run.to_dict(), "config_hash": cfg.config_hash, "config": cfg.to_dict()})
    curves = {"train_losses": res.train_losses, "val_f1": res.val_f1, "best_epoch": res.best_epoch}
    out.with_suffix(".json").write_text(json.dumps(curves, indent=2) + "\n")
    click.echo(f"finetuned on {len(train)} labeled crops; best epoch {res.best_epoch}; model: {out}")


@cli.command("evaluate")
@config_options
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--crops", "crops_dir", type=click.Path(), default=None)
@click.option("--fold", type=int, default=0, show_default=True, help="Evaluate on this fold's test insertions.")
@click.option("--all-crops", is_flag=True, help="Evaluate on every labeled crop instead of a test split.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics CSV path.")
def evaluate_cmd(config, seed, toy, paper_grid, model_path, crops_dir, fold, all_crops, out):
    """Weighted AP and F1 of a saved model."""
    cfg = _resolve(config, seed, toy, paper_grid)
    crops = _load_crops(crops_dir or data_root() / "crops")
    model = load_model(model_path)
    if all_crops:
        test = crops
    else:
        _, f = _fold(crops, cfg, fold)
        test = crops.subset(crops.from_insertions(f.test))
    report = evaluate(model, test)
    out = Path(out) if out else Path(model_path).with_suffix(".metrics.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "ap", "support"])
        for name, row in report.per_class.items():
            w.writerow([name] + [f"{row[k]:.6f}" for k in ("precision", "recall", "f1", "ap")] + [row["support"]])
        w.writerow(["weighted", "", "", f"{report.weighted_f1:.6f}", f"{report.weighted_ap:.6f}", report.n_samples])
    out.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if report.missing_classes:
        click.echo(f"warning: classes absent from the test set: {', '.join(report.missing_classes)}", err=True)
    click.echo(f"weighted AP {report.weighted_ap:.4f}  weighted F1 {report.weighted_f1:.4f}  (n={report.n_samples}) -> {out}")


@cli.command("sweep")
@config_options
@click.option("--crops", "crops_dir", type=click.Path(), default=None,
              help="Crop store; when omitted the dataset is simulated in memory from the config.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Sweep directory (ledger + reports).")
@click.option("--workers", type=int, default=None, help="Parallel cells.")
@click.option("--force", is_flag=True, help="Discard a ledger written under a different config.")
@click.option("--strict", is_flag=True, help="Exit 2 if any cell errored.")
@click.option("--dry-run", is_flag=True, help="List the cells and exit.")
def sweep_cmd(config, seed, toy, paper_grid, crops_dir, out, workers, force, strict, dry_run):
    """Cross-validated sweep over init modes, modality modes and label fractions."""
    cfg = _resolve(config, seed, toy, paper_grid, workers)
    spec = cfg.sweep_spec()
    cells = spec.cells()
    if dry_run:
        for c in cells:
            click.echo(c.key)
        click.echo(f"{len(cells)} cells; config hash {cfg.config_hash}")
        click.echo("--- resolved config")
        click.echo(cfg.to_yaml().rstrip())
        return
    if crops_dir:
        crops = _load_crops(crops_dir)
        source = {"crops": str(crops_dir), "crops_sha256": file_digest(Path(crops_dir) / "crops.json")}
    else:
        sim = cfg["simulate"]
        crops, _, _ = simulate_crops(sim["counts"], cfg.insertion_base(), cfg.seed, cfg.layout(), cfg.preprocess())
        source = {"crops": "simulated in memory"}
    out = Path(out) if out else data_root() / "sweep"
    plan = make_splits(crops.meat_class, spec.n_folds, derive_seed(cfg.seed, "splits"))
    echo = {"pipeline": cfg.to_dict(), "source": source}
    result = run_sweep(
        crops, plan, spec, cfg.run_config(), cfg.encoder(), out, cfg.seed, cfg.config_hash,
        config_echo=echo, workers=cfg["sweep"]["workers"], deterministic=cfg["train"]["deterministic"],
        pretrained_path=cfg["model"]["pretrained_weights"], force=force,
    )
    _write_resolved(out, cfg)
    ran = [r for r in result.executed if r.get("state") != "skipped"]
    click.echo(f"{len(cells)} cells: {len(ran)} run, {len(result.skipped)} resumed, {len(result.errors)} errored")
    for r in result.errors:
        click.echo(f"  error {r['key']}: {r['error']}", err=True)
    click.echo((result.reports["table.md"]).read_text())
    click.echo(f"reports in {out / 'reports'}")
    if strict and result.errors:
        raise SweepError(f"{len(result.errors)} cells errored")


@cli.command("report")
@click.argument("sweep_dir", type=click.Path(file_okay=False), required=False)
def report_cmd(sweep_dir):
    """Re-render tables and curve CSVs from a sweep ledger."""
    sweep_dir = Path(sweep_dir) if sweep_dir else data_root() / "sweep"
    if not sweep_dir.is_dir():
        raise FileNotFoundError(f"sweep directory {sweep_dir} not found")
    if not any((sweep_dir / "ledger").glob("*.json")):
        click.echo(f"warning: ledger in {sweep_dir} is empty", err=True)
    paths = write_reports(sweep_dir)
    click.echo(paths["table.md"].read_text())
    for name, p in sorted(paths.items()):
        click.echo(f"  {name}: {p}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="octpair", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except USAGE_ERRORS as exc:
        msg = exc.format_message() if isinstance(exc, click.ClickException) else str(exc)
        click.echo(f"error: {msg}", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except RUNTIME_ERRORS as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
