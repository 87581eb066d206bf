"""Cross-validated label-fraction sweep with a resumable on-disk run ledger.

Layout of a sweep directory::

    sweep.json                  resolved settings, split plan, config hash
    ledger/<cell>.json          one status record per cell (done | error)
    ledger/<cell>.claim         transient claim, created with O_EXCL
    pretrain/fold<k>.pt         contrastive checkpoint shared by a fold's cells
    pretrain/fold<k>.json       its loss curve
    reports/                    runs.csv, table.md, curves_init.csv, curves_modality.csv
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import multiprocessing
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .models import HEAD_MODES, INIT_MODES, EncoderConfig, init_weights, save_checkpoint
from .preprocess import CropSet
from .seeding import derive_seed
from .splits import FRACTION_GRID, SplitPlan, check_fraction, subsample_labeled
from .training import RunConfig, assert_no_leakage, deterministic_kernels, evaluate, finetune, pretrain

log = logging.getLogger(__name__)

SWEEP_KIND = "octpair-sweep"
METHOD_NAMES = {
    "scratch": "Scratch",
    "generic_pretrained": "ImageNet pretrained",
    "contrastive_checkpoint": "Contrastive pretrained",
}
REPORT_FILES = ("runs.csv", "table.md", "curves_init.csv", "curves_modality.csv")


class SweepError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class Cell:
    init_mode: str
    modality_mode: str
    label_fraction: float
    fold: int

    @property
    def key(self) -> str:
        return f"{self.init_mode}__{self.modality_mode}__f{round(self.label_fraction * 100):03d}__fold{self.fold}"

    def sort_key(self) -> tuple:
        return (INIT_MODES.index(self.init_mode), HEAD_MODES.index(self.modality_mode), self.label_fraction, self.fold)


@dataclass(frozen=True)
class SweepSpec:
    inits: tuple = INIT_MODES
    fractions: tuple = FRACTION_GRID
    modality_modes: tuple = HEAD_MODES
    modality_fractions: Optional[tuple] = None  # None: same as ``fractions``
    modality_init: str = "contrastive_checkpoint"
    n_folds: int = 3

    def __post_init__(self):
        for name in ("inits", "fractions", "modality_modes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.modality_fractions is not None:
            object.__setattr__(self, "modality_fractions", tuple(self.modality_fractions))
        for m in self.inits + (self.modality_init,):
            if m not in INIT_MODES:
                raise ValueError(f"unknown init mode {m!r}")
        for m in self.modality_modes:
            if m not in HEAD_MODES:
                raise ValueError(f"unknown modality mode {m!r}")
        for f in self.fractions + (self.modality_fractions or ()):
            check_fraction(f)
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")

    def cells(self) -> list:
        """Every (init x dual x fraction) and (modality_init x mode x fraction) cell, per fold."""
        out = set()
        for k in range(self.n_folds):
            for init in self.inits:
                for f in self.fractions:
                    out.add(Cell(init, "dual", check_fraction(f), k))
            mod_fracs = self.fractions if self.modality_fractions is None else self.modality_fractions
            for mode in self.modality_modes:
                for f in mod_fracs:
                    out.add(Cell(self.modality_init, mode, check_fraction(f), k))
        return sorted(out, key=Cell.sort_key)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# ledger primitives


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def claim(path: Path) -> bool:
    """Create ``path`` exclusively. A claim left by a dead process is taken over."""
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                return False
            path.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return True
    return False


def read_records(ledger: Path) -> list:
    if not ledger.is_dir():
        return []
    records = []
    for path in sorted(ledger.glob("*.json")):
        records.append(json.loads(path.read_text()))
    return records


# --------------------------------------------------------------------------
# execution


@dataclass
class _Context:
    crops: CropSet
    plan: SplitPlan
    spec: SweepSpec
    run: RunConfig
    encoder: EncoderConfig
    out: Path
    master_seed: int
    config_hash: str
    deterministic: bool
    pretrained_path: Optional[str]


_CTX: Optional[_Context] = None


def _crop_keys(crops: CropSet) -> np.ndarray:
    return np.array([f"{i}/{t:06d}" for i, t in zip(crops.insertion_ids, crops.time_window_index)])


def _pretrain_paths(out: Path, fold: int) -> tuple:
    return out / "pretrain" / f"fold{fold}.pt", out / "pretrain" / f"fold{fold}.json"


def _run_pretrain(fold: int) -> dict:
    ctx = _CTX
    ckpt, meta_path = _pretrain_paths(ctx.out, fold)

    def cached():
        if meta_path.exists() and ckpt.exists():
            meta = json.loads(meta_path.read_text())
            if meta.get("config_hash") == ctx.config_hash:
                return meta
        return None

    if cached():
        return cached()
    lock = meta_path.with_suffix(".claim")
    while not claim(lock):
        time.sleep(1.0)
    try:
        if cached():
            return cached()
        f = ctx.plan.folds[fold]
        pool = ctx.crops.subset(ctx.crops.from_insertions(f.train))
        assert_no_leakage(f, pool)
        seed = derive_seed(ctx.master_seed, "pretrain", fold)
        run = dataclasses.replace(ctx.run, seed=seed)
        with deterministic_kernels(ctx.deterministic):
            res = pretrain(pool, ctx.encoder, run)
        meta = {
            "fold": fold,
            "config_hash": ctx.config_hash,
            "seed": seed,
            "n_pool": len(pool),
            "initial_loss": res.initial_loss,
            "epoch_losses": res.epoch_losses,
            "steps": res.steps,
        }
        save_checkpoint(ckpt, res.model, seed, {"fold": fold, "config_hash": ctx.config_hash})
        _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return meta
    finally:
        lock.unlink(missing_ok=True)


def run_cell(cell: Cell) -> dict:
    """Train and evaluate one cell; the result is also the ledger record."""
    ctx = _CTX
    f = ctx.plan.folds[cell.fold]
    crops = ctx.crops
    train_idx = crops.from_insertions(f.train)
    labeled = train_idx[crops.labels[train_idx] >= 0]
    sub_seed = derive_seed(ctx.master_seed, "subsample", cell.fold)
    picked = labeled[subsample_labeled(crops.labels[labeled], _crop_keys(crops)[labeled], cell.label_fraction, sub_seed)]
    train = crops.subset(picked)
    val = crops.subset(crops.from_insertions(f.val))
    test = crops.subset(crops.from_insertions(f.test))
    assert_no_leakage(f, train, val)

    seed = derive_seed(ctx.master_seed, "finetune", cell.fold)
    run = dataclasses.replace(ctx.run, init_mode=cell.init_mode, modality_mode=cell.modality_mode,
                              label_fraction=cell.label_fraction, seed=seed)
    with deterministic_kernels(ctx.deterministic):
        model = init_weights(
            cell.init_mode,
            ctx.encoder,
            cell.modality_mode,
            seed=seed,
            checkpoint_path=_pretrain_paths(ctx.out, cell.fold)[0],
            pretrained_path=ctx.pretrained_path,
        )
        res = finetune(model, train, val, run)
        report = evaluate(res.model, test)
    return {
        "n_train_labeled": len(train),
        "n_val": int(val.labeled().size),
        "n_test": report.n_samples,
        "best_epoch": res.best_epoch,
        "train_losses": res.train_losses,
        "val_f1": res.val_f1,
        "metrics": report.to_dict(),
        "seed": seed,
        "subsample_seed": sub_seed,
    }


def _execute(cell: Cell) -> dict:
    ctx = _CTX
    ledger = ctx.out / "ledger"
    lock = ledger / f"{cell.key}.claim"
    if not claim(lock):
        return {"key": cell.key, "state": "skipped"}
    t0 = time.perf_counter()
    record = {
        "key": cell.key,
        "init_mode": cell.init_mode,
        "modality_mode": cell.modality_mode,
        "label_fraction": cell.label_fraction,
        "fold": cell.fold,
        "config_hash": ctx.config_hash,
        "learning_rate": ctx.run.learning_rate,
        "modality_init": ctx.spec.modality_init,
    }
    try:
        if cell.init_mode == "contrastive_checkpoint":
            _run_pretrain(cell.fold)
        record.update(run_cell(cell))
        record["state"] = "done"
    except Exception as exc:  # a failing cell must not stop the sweep
        log.exception("cell %s failed", cell.key)
        record["state"] = "error"
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["elapsed_s"] = round(time.perf_counter() - t0, 3)
    try:
        _atomic_write(ledger / f"{cell.key}.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    finally:
        lock.unlink(missing_ok=True)
    return record


def _init_worker(ctx: _Context) -> None:
    global _CTX
    _CTX = ctx
    torch.set_num_threads(1)


@dataclass
class SweepResult:
    records: list
    executed: list
    skipped: list
    reports: dict

    @property
    def errors(self) -> list:
        return [r for r in self.records if r.get("state") == "error"]


def run_sweep(
    crops: CropSet,
    plan: SplitPlan,
    spec: SweepSpec,
    run: RunConfig,
    encoder: EncoderConfig,
    out_dir,
    master_seed: int,
    config_hash: str,
    config_echo: Optional[dict] = None,
    workers: int = 1,
    deterministic: bool = False,
    pretrained_path: Optional[str] = None,
    force: bool = False,
) -> SweepResult:
    """Run every missing cell of ``spec`` and rebuild the reports.

    Cells whose ledger record is ``done`` under the same config hash are
    skipped; errored cells are retried. A ledger written under another
    config hash is refused unless ``force`` wipes it.
    """
    global _CTX
    if len(plan.folds) < spec.n_folds:
        raise SweepError(f"split plan has {len(plan.folds)} folds, sweep needs {spec.n_folds}")
    out = Path(out_dir)
    ledger = out / "ledger"
    meta_path = out / "sweep.json"
    if meta_path.exists():
        previous = json.loads(meta_path.read_text()).get("config_hash")
        if previous != config_hash:
            if not force:
                raise SweepError(
                    f"{out} holds a sweep with config hash {previous}; use another output directory or --force"
                )
            for name in ("ledger", "pretrain", "reports"):
                shutil.rmtree(out / name, ignore_errors=True)
    ledger.mkdir(parents=True, exist_ok=True)
    (out / "pretrain").mkdir(exist_ok=True)
    meta = {
        "kind": SWEEP_KIND,
        "config_hash": config_hash,
        "master_seed": master_seed,
        "spec": spec.to_dict(),
        "run": run.to_dict(),
        "encoder": encoder.to_dict(),
        "split_plan": plan.to_dict(),
        "config": config_echo or {},
    }
    _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")

    done = {r["key"] for r in read_records(ledger) if r.get("state") == "done" and r.get("config_hash") == config_hash}
    todo = [c for c in spec.cells() if c.key not in done]
    skipped = sorted(done)
    log.info("sweep: %d cells, %d already done, %d to run", len(spec.cells()), len(done), len(todo))

    ctx = _Context(crops, plan, spec, run, encoder, out, master_seed, config_hash, deterministic, pretrained_path)
    folds_needing_pretrain = sorted({c.fold for c in todo if c.init_mode == "contrastive_checkpoint"})
    executed = []
    if workers <= 1:
        _CTX = ctx
        for fold in folds_needing_pretrain:
            _run_pretrain(fold)
        for cell in todo:
            executed.append(_execute(cell))
    else:
        mp = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=mp, initializer=_init_worker, initargs=(ctx,)) as pool:
            _CTX = ctx
            list(pool.map(_run_pretrain, folds_needing_pretrain))
            executed = list(pool.map(_execute, todo))
    _CTX = None
    reports = write_reports(out)
    return SweepResult(read_records(ledger), executed, skipped, reports)


# --------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _groups(records, keyfn) -> dict:
    out = {}
    for r in records:
        out.setdefault(keyfn(r), []).append(r)
    return out


def _sorted_records(records) -> list:
    def key(r):
        return Cell(r["init_mode"], r["modality_mode"], r["label_fraction"], r["fold"]).sort_key()

    return sorted(records, key=key)


def render_runs_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["init_mode", "modality_mode", "label_fraction", "fold", "state", "weighted_ap", "weighted_f1",
                "n_train_labeled", "n_test", "best_epoch", "learning_rate", "seed", "config_hash", "error"])
    for r in _sorted_records(records):
        m = r.get("metrics", {})
        done = r.get("state") == "done"
        w.writerow([
            r["init_mode"], r["modality_mode"], f"{r['label_fraction']:.2f}", r["fold"], r["state"],
            _fmt(m["weighted_ap"]) if done else "", _fmt(m["weighted_f1"]) if done else "",
            r.get("n_train_labeled", ""), r.get("n_test", ""), r.get("best_epoch", ""),
            r.get("learning_rate", ""), r.get("seed", ""), r.get("config_hash", ""), r.get("error", ""),
        ])
    return buf.getvalue()


def render_table(records, config_hash: str = "", learning_rate=None) -> str:
    """Markdown table: % training set, method, AP and F1 as mean±std over folds (dual mode)."""
    done = [r for r in records if r.get("state") == "done" and r["modality_mode"] == "dual"]
    lines = []
    if config_hash:
        lines.append(f"config hash: {config_hash}")
    if learning_rate is not None:
        lines.append(f"learning rate: {learning_rate}")
    if lines:
        lines.append("")
    lines += ["| % Training Set | Method | AP | F1 | Folds |", "|---|---|---|---|---|"]
    groups = _groups(done, lambda r: (r["label_fraction"], INIT_MODES.index(r["init_mode"])))
    for frac, init_idx in sorted(groups):
        rs = groups[(frac, init_idx)]
        ap = _mean_std([r["metrics"]["weighted_ap"] for r in rs])
        f1 = _mean_std([r["metrics"]["weighted_f1"] for r in rs])
        lines.append(
            f"| {round(frac * 100)} | {METHOD_NAMES[INIT_MODES[init_idx]]} | "
            f"{ap[0]:.2f}±{ap[1]:.2f} | {f1[0]:.2f}±{f1[1]:.2f} | {len(rs)} |"
        )
    return "\n".join(lines) + "\n"


def _render_curve(groups: dict, label: str, order) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, "label_fraction", "mean_ap", "std_ap", "mean_f1", "std_f1", "n_folds"])
    for name, frac in sorted(groups, key=lambda k: (order.index(k[0]), k[1])):
        rs = groups[(name, frac)]
        ap = _mean_std([r["metrics"]["weighted_ap"] for r in rs])
        f1 = _mean_std([r["metrics"]["weighted_f1"] for r in rs])
        w.writerow([name, f"{frac:.2f}", _fmt(ap[0]), _fmt(ap[1]), _fmt(f1[0]), _fmt(f1[1]), len(rs)])
    return buf.getvalue()


def aggregate(records) -> dict:
    """(init_mode, modality_mode, fraction) -> mean/std of AP and F1 over done folds."""
    done = [r for r in records if r.get("state") == "done"]
    out = {}
    for key, rs in _groups(done, lambda r: (r["init_mode"], r["modality_mode"], r["label_fraction"])).items():
        ap = _mean_std([r["metrics"]["weighted_ap"] for r in rs])
        f1 = _mean_std([r["metrics"]["weighted_f1"] for r in rs])
        out[key] = {"mean_ap": ap[0], "std_ap": ap[1], "mean_f1": f1[0], "std_f1": f1[1], "n_folds": len(rs)}
    return out


def write_reports(sweep_dir) -> dict:
    """Render all reports from the ledger. Output depends only on the ledger contents."""
    sweep_dir = Path(sweep_dir)
    records = read_records(sweep_dir / "ledger")
    meta = {}
    if (sweep_dir / "sweep.json").exists():
        meta = json.loads((sweep_dir / "sweep.json").read_text())
    if not records:
        log.warning("ledger in %s is empty; writing empty reports", sweep_dir)
    modality_init = meta.get("spec", {}).get("modality_init", "contrastive_checkpoint")
    done = [r for r in records if r.get("state") == "done"]
    init_groups = _groups([r for r in done if r["modality_mode"] == "dual"],
                          lambda r: (r["init_mode"], r["label_fraction"]))
    mod_groups = _groups([r for r in done if r["init_mode"] == modality_init],
                         lambda r: (r["modality_mode"], r["label_fraction"]))
    texts = {
        "runs.csv": render_runs_csv(records),
        "table.md": render_table(records, meta.get("config_hash", ""), meta.get("run", {}).get("learning_rate")),
        "curves_init.csv": _render_curve(init_groups, "init_mode", INIT_MODES),
        "curves_modality.csv": _render_curve(mod_groups, "modality_mode", HEAD_MODES),
    }
    out = sweep_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in texts.items():
        path = out / name
        _atomic_write(path, text)
        paths[name] = path
    return paths
