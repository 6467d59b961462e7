"""Experiment orchestration over a content-addressed run ledger.

Every run (pretrain, fine-tune, supervised baseline, transfer-grid cell) is
described by a canonical JSON config; its SHA-256 names the ledger directory
``<out>/ledger/<hash>/`` holding ``config.json``, ``record.json``,
``history.csv`` and ``model.json``/``model.bin``.  Entries are written to a
temporary directory and renamed into place, so a directory either holds a
complete run or does not exist.  Reports are computed from records alone.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import corruption, datapipe, evalstats, trainer, unet

log = logging.getLogger(__name__)

RUN_FORMAT = 1
CLASS_NAMES = ("thin_ring", "thick_ring", "blob", "spots")
TRANSFER_MODELS = (
    (unet.ENCODER_ONLY, trainer.FINETUNE_IMMEDIATELY),
    (unet.ENCODER_ONLY, trainer.FREEZE_THEN_FINETUNE),
    (unet.ENCODER_AND_DECODER, trainer.FINETUNE_IMMEDIATELY),
    (unet.ENCODER_AND_DECODER, trainer.FREEZE_THEN_FINETUNE),
)
# held-out corruption draws for test-time inpainting, disjoint from training and validation
TEST_DRAW_OFFSET = 1 << 41


class ConfigError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "datasets": [
        {"name": "phantom-ct",
         "phantom": {"image_size": 64, "n_images": 200, "modality": "ct"},
         "sizes": dict(datapipe.DEFAULT_SIZES)},
    ],
    "model": {"depth": 3, "base_filters": 8},
    "seeds": {"phantom": 0, "pretrain": 0, "finetune": 0, "bank": 0},
    "batch_size": 2,
    "pretrain": {
        "tasks": list(corruption.TASKS),
        "patch_sizes": [64, 32, 16, 8],
        "samplers": list(corruption.SAMPLERS),
        "lr": 1e-3,
        "threshold": 50.0,
        "patience": 4,
        "max_epochs": 10,
    },
    "finetune": {
        "fractions": list(datapipe.FRACTIONS),
        "strategy": {"scope": unet.ENCODER_ONLY, "policy": trainer.FINETUNE_IMMEDIATELY,
                     "lr_first": 1e-3, "lr_second": None},
        "threshold": 1e-3,
        "patience": 10,
        "max_epochs": 30,
        "min_epoch_samples": 16,
    },
    "transfer": {
        "source": {"task": corruption.PREDICTION, "K": 16, "sampler": corruption.POISSON_DISC},
        "lrs": [1e-2, 1e-3, 1e-4, 1e-5],
        "fraction": 0.1,
    },
    "extent": {"multipliers": [1.0, 1.5, 2.0]},
    "optimal": {"task": corruption.RESTORATION, "K": 32, "sampler": corruption.POISSON_DISC},
    "stats": {"fractions": [0.5, 0.25, 0.1, 0.05], "top_k": 3},
    "clinical": {"pixel_area": 1.0, "voxel_volume": 1.0},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults merged with a JSON config file and then ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    seeds = cfg.get("seeds", {})
    missing = {"phantom", "pretrain", "finetune", "bank"} - set(seeds)
    if missing:
        raise ConfigError(f"seeds block lacks {sorted(missing)}")
    if not cfg["datasets"]:
        raise ConfigError("no datasets configured")
    names = [d.get("name") for d in cfg["datasets"]]
    if len(set(names)) != len(names) or None in names:
        raise ConfigError("datasets need unique names")
    for d in cfg["datasets"]:
        if ("path" in d) == ("phantom" in d):
            raise ConfigError(f"dataset {d['name']}: give exactly one of 'path' or 'phantom'")
    for t in cfg["pretrain"]["tasks"]:
        if t not in corruption.TASKS:
            raise ConfigError(f"unknown pretext task {t!r}")
    for s in cfg["pretrain"]["samplers"]:
        if s not in corruption.SAMPLERS:
            raise ConfigError(f"unknown sampler {s!r}")
    for f in cfg["finetune"]["fractions"]:
        if not 0 < f <= 1:
            raise ConfigError(f"label fraction {f} outside (0, 1]")
    for m in cfg["extent"]["multipliers"]:
        if m < 1:
            raise ConfigError(f"extent multiplier {m} < 1")
    try:
        trainer.TransferStrategy(**cfg["finetune"]["strategy"])
        unet.UNetConfig(**cfg["model"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# hashing and the ledger


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(run_cfg: dict) -> str:
    return hashlib.sha256(canonical(run_cfg).encode()).hexdigest()


class Ledger:
    """Content-addressed run store under ``<root>/ledger``."""

    def __init__(self, root):
        self.root = Path(root)
        self.dir = self.root / "ledger"

    def path(self, h: str) -> Path:
        return self.dir / h

    def has(self, h: str) -> bool:
        return (self.path(h) / "record.json").is_file()

    def record(self, h: str) -> dict:
        p = self.path(h) / "record.json"
        if not p.is_file():
            raise KeyError(h)
        return json.loads(p.read_text())

    def config(self, h: str) -> dict:
        return json.loads((self.path(h) / "config.json").read_text())

    def model(self, h: str) -> unet.UNet:
        return unet.load_checkpoint(self.path(h) / "model")

    def entries(self) -> list:
        if not self.dir.is_dir():
            return []
        return sorted(p.name for p in self.dir.iterdir() if not p.name.startswith(".") and self.has(p.name))

    def clean_partial(self) -> int:
        n = 0
        if self.dir.is_dir():
            for p in self.dir.iterdir():
                if p.name.startswith(".tmp-"):
                    shutil.rmtree(p, ignore_errors=True)
                    n += 1
        return n

    def commit(self, h: str, files: dict, verify: bool = True) -> bool:
        """Write ``files`` (name -> bytes) as entry ``h``; returns True if newly written.

        An existing entry is compared byte-for-byte when ``verify`` is set and
        a mismatch raises :class:`DeterminismError`.
        """
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.path(h)
        if self.has(h):
            if verify:
                for name, data in files.items():
                    old = (final / name).read_bytes() if (final / name).is_file() else None
                    if old != data:
                        raise DeterminismError(f"ledger entry {h[:12]}: {name} differs on re-run")
            return False
        tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=self.dir))
        try:
            for name, data in files.items():
                (tmp / name).write_bytes(data)
            try:
                os.rename(tmp, final)
            except OSError:
                # a concurrent writer got there first; identical content by construction
                if not self.has(h):
                    raise
                shutil.rmtree(tmp, ignore_errors=True)
                return False
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return True


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n").encode()


def _model_bytes(model: unet.UNet) -> dict:
    with tempfile.TemporaryDirectory() as d:
        unet.save_checkpoint(model, Path(d) / "model")
        return {"model.json": (Path(d) / "model.json").read_bytes(),
                "model.bin": (Path(d) / "model.bin").read_bytes()}


# --------------------------------------------------------------------------
# datasets and banks (cached per process)

_DATASETS: dict = {}
_BANKS: dict = {}


def dataset_key(ds_cfg: dict, seeds: dict) -> dict:
    """The part of a dataset entry that determines its contents."""
    if "path" in ds_cfg:
        manifest = Path(ds_cfg["path"]) / "manifest.json"
        if not manifest.is_file():
            raise ConfigError(f"dataset {ds_cfg['name']}: no manifest at {manifest}")
        arrays = json.loads(manifest.read_text())["arrays"]
        return {"name": ds_cfg["name"], "path": str(ds_cfg["path"]),
                "sha256": {k: v["sha256"] for k, v in sorted(arrays.items())}}
    return {"name": ds_cfg["name"], "phantom": ds_cfg["phantom"],
            "sizes": ds_cfg.get("sizes", datapipe.DEFAULT_SIZES), "seed": seeds["phantom"]}


def get_dataset(key: dict) -> datapipe.Dataset:
    k = canonical(key)
    if k not in _DATASETS:
        if "path" in key:
            ds = datapipe.load_dataset(key["path"])
        else:
            spec = datapipe.PhantomSpec(**key["phantom"], seed=key["seed"])
            try:
                spec.validate()
            except datapipe.ConfigError as exc:
                raise ConfigError(str(exc)) from exc
            ds = datapipe.make_dataset(spec, key["sizes"], key["seed"])
        _DATASETS[k] = ds
    return _DATASETS[k]


def extra_unlabeled(key: dict, count: int) -> np.ndarray:
    """Preprocessed extra unlabeled images for the extent sweep (phantom datasets only)."""
    if count <= 0:
        return np.zeros((0,))
    if "phantom" not in key:
        raise ConfigError("extent sweep needs a phantom dataset to mint extra images")
    spec = datapipe.PhantomSpec(**dict(key["phantom"], n_images=count), seed=key["seed"] + 7919)
    ph = datapipe.gen_phantom(spec)
    return datapipe.preprocess(ph.images, spec.modality)


def get_bank(task: str, K: int, sampler: str, size: int, seed: int) -> corruption.MaskBank:
    k = (task, K, sampler, size, seed)
    if k not in _BANKS:
        _BANKS[k] = corruption.make_bank(task, corruption.PatchSpec(K, size, size, sampler), seed)
    return _BANKS[k]


# --------------------------------------------------------------------------
# run configs


def _model_cfg(cfg: dict) -> dict:
    return dict(cfg["model"])


def _seg_train(cfg: dict) -> dict:
    ft = cfg["finetune"]
    return {"threshold": ft["threshold"], "patience": ft["patience"], "max_epochs": ft["max_epochs"],
            "min_epoch_samples": ft["min_epoch_samples"], "batch_size": cfg["batch_size"]}


def pretrain_run(cfg: dict, ds_cfg: dict, task: str, K: int, sampler: str, multiplier: float = 1.0) -> dict:
    pt = cfg["pretrain"]
    return {"format": RUN_FORMAT, "kind": "pretrain", "dataset": dataset_key(ds_cfg, cfg["seeds"]),
            "model": _model_cfg(cfg), "task": task, "K": K, "sampler": sampler,
            "multiplier": float(multiplier),
            "seeds": {"pretrain": cfg["seeds"]["pretrain"], "bank": cfg["seeds"]["bank"]},
            "train": {"lr": pt["lr"], "threshold": pt["threshold"], "patience": pt["patience"],
                      "max_epochs": pt["max_epochs"], "batch_size": cfg["batch_size"]}}


def supervised_run(cfg: dict, ds_cfg: dict, fraction: float, seed: Optional[int] = None) -> dict:
    return {"format": RUN_FORMAT, "kind": "supervised", "dataset": dataset_key(ds_cfg, cfg["seeds"]),
            "model": _model_cfg(cfg), "fraction": float(fraction),
            "seed": cfg["seeds"]["finetune"] if seed is None else seed,
            "lr": cfg["finetune"]["strategy"]["lr_first"], "train": _seg_train(cfg),
            "clinical": cfg["clinical"]}


def finetune_run(cfg: dict, ds_cfg: dict, parent: str, fraction: float, strategy: dict,
                 stage: str = "full", seed: Optional[int] = None) -> dict:
    """``stage``: ``full`` (trainer.finetune), ``first`` (first run only) or ``second``."""
    return {"format": RUN_FORMAT, "kind": "finetune", "stage": stage,
            "dataset": dataset_key(ds_cfg, cfg["seeds"]), "parent": parent, "fraction": float(fraction),
            "strategy": dict(strategy), "seed": cfg["seeds"]["finetune"] if seed is None else seed,
            "train": _seg_train(cfg), "clinical": cfg["clinical"]}


# --------------------------------------------------------------------------
# executing one run


def _train_kw(t: dict) -> dict:
    kw = {"max_epochs": t["max_epochs"], "batch_size": t.get("batch_size")}
    if "min_epoch_samples" in t:
        kw["min_epoch_samples"] = t["min_epoch_samples"]
    return kw


def _seg_data(ds: datapipe.Dataset, fraction: float) -> trainer.TrainData:
    if fraction not in ds.fractions:
        raise ConfigError(f"label fraction {fraction} not among the dataset's splits {sorted(ds.fractions)}")
    ids = ds.fractions[fraction]
    val = ds.splits["val"]
    return trainer.TrainData(ds.inputs[ids], ds.targets[ids], ds.inputs[val], ds.targets[val])


def evaluate_segmentation(model: unet.UNet, ds: datapipe.Dataset, clinical: dict) -> dict:
    """Per-test-item, per-class Dice and clinical percent errors."""
    test = ds.splits["test"]
    probs = unet.run(model, ds.inputs[test]).data
    labels = ds.phantoms.labels[test]
    raw = ds.phantoms.raw[test]
    items = []
    for i in range(len(test)):
        pred = probs[i] > 0.5
        gt = labels[i] > 0
        per_class = []
        for c in range(gt.shape[-1]):
            p, g = pred[..., c], gt[..., c]
            per_class.append({
                "dice": evalstats.dice_coeff(p, g),
                "area_pct_err": evalstats.percent_error(
                    evalstats.tissue_area(p, clinical["pixel_area"]), evalstats.tissue_area(g, clinical["pixel_area"])),
                "volume_pct_err": evalstats.percent_error(
                    evalstats.tissue_volume(p, clinical["voxel_volume"]),
                    evalstats.tissue_volume(g, clinical["voxel_volume"])),
                "mean_intensity_pct_err": evalstats.percent_error(
                    evalstats.mean_intensity(raw[i], p), evalstats.mean_intensity(raw[i], g)),
            })
        items.append({"id": int(test[i]), "classes": per_class,
                      "mean_dice": float(np.mean([c["dice"] for c in per_class]))})
    return {"test": items}


def _execute_pretrain(rc: dict, ledger: Ledger) -> tuple:
    ds = get_dataset(rc["dataset"])
    images = ds.inputs[ds.splits["unlabeled"]]
    m = rc["multiplier"]
    if m != 1.0:
        extra = extra_unlabeled(rc["dataset"], int(round((m - 1.0) * len(images))))
        images = np.concatenate([images, extra])
    size = images.shape[1]
    bank = get_bank(rc["task"], rc["K"], rc["sampler"], size, rc["seeds"]["bank"])
    t = rc["train"]
    val = ds.inputs[ds.splits["val"]]
    model, hist = trainer.pretrain(unet.UNetConfig(**rc["model"]), images, bank, rc["seeds"]["pretrain"],
                                   val_images=val, lr=t["lr"],
                                   stop_rule=trainer.EarlyStopRule(t["threshold"], t["patience"]),
                                   **_train_kw(t))
    test = ds.inputs[ds.splits["test"]]
    corrupted = trainer.corrupt_batch(bank, test, TEST_DRAW_OFFSET)
    pred = unet.run(model, corrupted).data
    l2 = [evalstats.inpaint_l2(pred[i], test[i]) for i in range(len(test))]
    record = {"kind": "pretrain", "task": rc["task"], "K": rc["K"], "sampler": rc["sampler"],
              "multiplier": m, "n_images": int(len(images)), "capped_masks": int(sum(
                  getattr(mk, "capped", False) for mk in bank.masks)),
              "test_l2": l2, "l2_mean": float(np.mean(l2)), "l2_std": float(np.std(l2)),
              "epochs": len(hist.rows), "best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early}
    return model, hist, record


def _execute_segment(rc: dict, ledger: Ledger) -> tuple:
    ds = get_dataset(rc["dataset"])
    data = _seg_data(ds, rc["fraction"])
    t = rc["train"]
    kw = _train_kw(t)
    seed = rc["seed"]
    stop = trainer.EarlyStopRule(t["threshold"], t["patience"])
    if rc["kind"] == "supervised":
        cfg = unet.UNetConfig(**rc["model"], in_channels=ds.spec.channels, out_channels=datapipe.N_CLASSES)
        model, hist = trainer.supervised(cfg, data, seed, rc["lr"], stop_rule=stop, **kw)
    else:
        parent = ledger.model(rc["parent"])
        st = trainer.TransferStrategy(**rc["strategy"])
        if rc["stage"] == "second":
            model, h2 = trainer.second_run(parent, st.lr_second, data, seed, stop_rule=stop, **kw)
            hist = trainer.History()
            hist.extend(h2, phase=2)
        elif rc["stage"] == "first":
            model, h1 = trainer.first_run(parent, st, data, seed, datapipe.N_CLASSES, stop_rule=stop, **kw)
            hist = trainer.History()
            hist.extend(h1, phase=1)
        else:
            model, hist = trainer.finetune(parent, st, data, seed, datapipe.N_CLASSES, stop_rule=stop, **kw)
    record = {"kind": rc["kind"], "fraction": rc["fraction"], "epochs": len(hist.rows),
              "best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early}
    record.update(evaluate_segmentation(model, ds, rc["clinical"]))
    record["mean_dice"] = float(np.mean([it["mean_dice"] for it in record["test"]]))
    return model, hist, record


def execute(rc: dict, root, verify: bool = True) -> str:
    """Run one config and commit it to the ledger; returns its hash."""
    ledger = Ledger(root)
    h = config_hash(rc)
    if rc["kind"] == "pretrain":
        model, hist, record = _execute_pretrain(rc, ledger)
    else:
        model, hist, record = _execute_segment(rc, ledger)
    record = dict(record, run_id=h, dataset=rc["dataset"]["name"])
    files = {"config.json": _json_bytes(rc), "record.json": _json_bytes(record),
             "history.csv": hist.to_csv().encode()}
    files.update(_model_bytes(model))
    ledger.commit(h, files, verify=verify)
    return h


def _execute_job(args):
    rc, root, verify = args
    return execute(rc, root, verify)


def run_all(runs: list, root, resume: bool = True, jobs: int = 1) -> list:
    """Execute independent run configs, skipping completed entries when ``resume``.

    Without ``resume`` completed entries are recomputed and must match the
    stored bytes.  Returns the hashes in input order.
    """
    ledger = Ledger(root)
    hashes = [config_hash(rc) for rc in runs]
    todo, seen = [], set()
    for h, rc in zip(hashes, runs):
        if h in seen or (resume and ledger.has(h)):
            continue
        seen.add(h)
        todo.append(rc)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_execute_job, [(rc, str(root), not resume) for rc in todo]))
    else:
        for i, rc in enumerate(todo):
            log.info("run %d/%d: %s", i + 1, len(todo), describe(rc))
            execute(rc, root, verify=not resume)
    return hashes


def describe(rc: dict) -> str:
    ds = rc["dataset"]["name"]
    if rc["kind"] == "pretrain":
        return f"{ds} pretrain {rc['task']} K={rc['K']} {rc['sampler']} x{rc['multiplier']:g}"
    if rc["kind"] == "supervised":
        return f"{ds} supervised f={rc['fraction']:g} seed={rc['seed']}"
    st = trainer.TransferStrategy(**rc["strategy"])
    return f"{ds} finetune[{rc['stage']}] {st.label} f={rc['fraction']:g} parent={rc['parent'][:10]}"


# --------------------------------------------------------------------------
# CSV helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _atomic_write(Path(path), buf.getvalue().encode())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _median(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def metrics_rows(record: dict) -> list:
    """metrics.csv rows for one segmentation record: one per class.

    Dice is the mean over test items; percent errors are medians over items
    where they are defined.
    """
    rows = []
    n_classes = len(record["test"][0]["classes"])
    for c in range(n_classes):
        per = [it["classes"][c] for it in record["test"]]
        rows.append([record["run_id"], record["dataset"], record["fraction"], CLASS_NAMES[c],
                     float(np.mean([p["dice"] for p in per])),
                     _median(p["area_pct_err"] for p in per),
                     _median(p["volume_pct_err"] for p in per),
                     _median(p["mean_intensity_pct_err"] for p in per)])
    return rows


METRICS_HEADER = ["run_id", "dataset", "label_fraction", "class", "dice", "area_pct_err",
                  "volume_pct_err", "mean_intensity_pct_err"]


# --------------------------------------------------------------------------
# commands


def grid_cells(cfg: dict) -> list:
    pt = cfg["pretrain"]
    return [(t, K, s) for t in pt["tasks"] for K in pt["patch_sizes"] for s in pt["samplers"]]


def plan_pretrain_grid(cfg: dict, ds_cfg: dict) -> dict:
    strategy = cfg["finetune"]["strategy"]
    plan = {"pretrain": {}, "finetune": {}, "supervised": {}}
    for cell in grid_cells(cfg):
        pr = pretrain_run(cfg, ds_cfg, *cell)
        plan["pretrain"][cell] = pr
        for f in cfg["finetune"]["fractions"]:
            plan["finetune"][cell + (f,)] = finetune_run(cfg, ds_cfg, config_hash(pr), f, strategy)
    for f in cfg["finetune"]["fractions"]:
        plan["supervised"][f] = supervised_run(cfg, ds_cfg, f)
    return plan


def cmd_pretrain_grid(cfg: dict, out, resume: bool = True, jobs: int = 1) -> dict:
    out = Path(out)
    ledger = Ledger(out)
    summary = {}
    for ds_cfg in cfg["datasets"]:
        name = ds_cfg["name"]
        plan = plan_pretrain_grid(cfg, ds_cfg)
        run_all(list(plan["pretrain"].values()) + list(plan["supervised"].values()), out, resume, jobs)
        run_all(list(plan["finetune"].values()), out, resume, jobs)
        l2_rows, dice_rows, metric_rows = [], [], []
        for cell, pr in plan["pretrain"].items():
            rec = ledger.record(config_hash(pr))
            l2_rows.append([name, *cell, rec["l2_mean"], rec["l2_std"], len(rec["test_l2"]),
                            rec["capped_masks"], config_hash(pr)])
        for key, fr in plan["finetune"].items():
            rec = ledger.record(config_hash(fr))
            cell, f = key[:3], key[3]
            for row in metrics_rows(rec):
                dice_rows.append([name, *cell, f, row[3], row[4], rec["run_id"]])
                metric_rows.append(row)
        base_rows = []
        for f, sr in plan["supervised"].items():
            rec = ledger.record(config_hash(sr))
            for row in metrics_rows(rec):
                base_rows.append([name, f, row[3], row[4], rec["run_id"]])
                metric_rows.append(row)
        d = out / "reports" / name
        write_csv(d / "inpaint_l2.csv", ["dataset", "task", "K", "sampler", "l2_mean", "l2_std", "n_test",
                                         "capped_masks", "run_id"], l2_rows)
        write_csv(d / "grid_dice.csv", ["dataset", "task", "K", "sampler", "label_fraction", "class",
                                        "dice", "run_id"], dice_rows)
        write_csv(d / "baseline_dice.csv", ["dataset", "label_fraction", "class", "dice", "run_id"], base_rows)
        write_csv(d / "metrics.csv", METRICS_HEADER, metric_rows)
        summary[name] = {"pretrain": len(plan["pretrain"]), "finetune": len(plan["finetune"]),
                         "supervised": len(plan["supervised"])}
    return summary


def transfer_label(scope: str, policy: str, second: bool) -> str:
    return trainer.TransferStrategy(scope, policy, 1.0, 1.0 if second else None).label


def plan_transfer_grid(cfg: dict, ds_cfg: dict) -> dict:
    tr = cfg["transfer"]
    src = tr["source"]
    pr = pretrain_run(cfg, ds_cfg, src["task"], src["K"], src["sampler"])
    parent = config_hash(pr)
    first, second = {}, {}
    for scope, policy in TRANSFER_MODELS:
        for lr1 in tr["lrs"]:
            st = {"scope": scope, "policy": policy, "lr_first": lr1, "lr_second": None}
            fr = finetune_run(cfg, ds_cfg, parent, tr["fraction"], st, stage="first")
            first[(scope, policy, lr1)] = fr
            for lr2 in tr["lrs"]:
                st2 = dict(st, lr_second=lr2)
                second[(scope, policy, lr1, lr2)] = finetune_run(cfg, ds_cfg, config_hash(fr), tr["fraction"],
                                                                 st2, stage="second")
    return {"pretrain": pr, "first": first, "second": second}


def best_transfer(cells: list) -> dict:
    """Highest mean class-averaged test Dice; ties go to the earlier cell in grid order."""
    best = max(range(len(cells)), key=lambda i: (cells[i]["mean_dice"], -i))
    return cells[best]


def cmd_transfer_grid(cfg: dict, out, resume: bool = True, jobs: int = 1) -> dict:
    out = Path(out)
    ledger = Ledger(out)
    result = {}
    for ds_cfg in cfg["datasets"]:
        name = ds_cfg["name"]
        plan = plan_transfer_grid(cfg, ds_cfg)
        run_all([plan["pretrain"]], out, resume, jobs)
        run_all(list(plan["first"].values()), out, resume, jobs)
        run_all(list(plan["second"].values()), out, resume, jobs)
        rows, cells = [], []
        for stage, table in (("first", plan["first"]), ("second", plan["second"])):
            for key, rc in table.items():
                rec = ledger.record(config_hash(rc))
                scope, policy, lr1 = key[:3]
                lr2 = key[3] if stage == "second" else None
                label = transfer_label(scope, policy, stage == "second")
                for it in rec["test"]:
                    rows.append([name, label, stage, lr1, lr2, it["id"], it["mean_dice"], rec["run_id"]])
                cells.append({"label": label, "stage": stage, "scope": scope, "policy": policy,
                              "lr_first": lr1, "lr_second": lr2, "mean_dice": rec["mean_dice"],
                              "run_id": rec["run_id"]})
        d = out / "reports" / name
        write_csv(d / "transfer_grid.csv", ["dataset", "label", "stage", "lr_first", "lr_second",
                                            "test_item", "mean_dice", "run_id"], rows)
        best = best_transfer(cells)
        summary = {"dataset": name, "fraction": cfg["transfer"]["fraction"],
                   "n_first": len(plan["first"]), "n_second": len(plan["second"]),
                   "best": best, "cells": cells}
        _atomic_write(d / "transfer_best.json", _json_bytes(summary))
        result[name] = summary
    return result


def cmd_extent_sweep(cfg: dict, out, resume: bool = True, jobs: int = 1) -> dict:
    out = Path(out)
    ledger = Ledger(out)
    opt = cfg["optimal"]
    strategy = cfg["finetune"]["strategy"]
    fractions = cfg["finetune"]["fractions"]
    result = {}
    for ds_cfg in cfg["datasets"]:
        name = ds_cfg["name"]
        pre = {m: pretrain_run(cfg, ds_cfg, opt["task"], opt["K"], opt["sampler"], m)
               for m in cfg["extent"]["multipliers"]}
        fts = {(m, f): finetune_run(cfg, ds_cfg, config_hash(pr), f, strategy)
               for m, pr in pre.items() for f in fractions}
        sups = {f: supervised_run(cfg, ds_cfg, f) for f in fractions}
        run_all(list(pre.values()) + list(sups.values()), out, resume, jobs)
        run_all(list(fts.values()), out, resume, jobs)
        rows = []
        for f, rc in sups.items():
            rec = ledger.record(config_hash(rc))
            rows.append([name, 0.0, f, rec["mean_dice"], rec["run_id"]])
        avg = {}
        for m in pre:
            vals = []
            for f in fractions:
                rec = ledger.record(config_hash(fts[(m, f)]))
                rows.append([name, m, f, rec["mean_dice"], rec["run_id"]])
                vals.append(rec["mean_dice"])
            avg[m] = float(np.mean(vals))
        chosen = max(sorted(avg), key=lambda m: avg[m])
        d = out / "reports" / name
        write_csv(d / "extent.csv", ["dataset", "multiplier", "label_fraction", "mean_dice", "run_id"], rows)
        summary = {"dataset": name, "average_dice": {repr(m): v for m, v in avg.items()},
                   "supervised_average": float(np.mean([r[3] for r in rows if r[1] == 0.0])),
                   "chosen_multiplier": chosen, "n_pretrain": len(pre), "n_finetune": len(fts)}
        _atomic_write(d / "extent.json", _json_bytes(summary))
        result[name] = summary
    return result


CLINICAL_METRICS = ("area_pct_err", "volume_pct_err", "mean_intensity_pct_err")


def clinical_rows(name: str, ssl: dict, sup: dict) -> list:
    """Median percent error over test items per (fraction, tissue, metric, arm)."""
    rows = []
    for f in sorted(ssl, reverse=True):
        for c, tissue in enumerate(CLASS_NAMES):
            for metric in CLINICAL_METRICS:
                for arm, rec in (("ssl", ssl[f]), ("supervised", sup[f])):
                    med = _median(it["classes"][c][metric] for it in rec["test"])
                    rows.append([name, f, tissue, metric, arm, med])
    return rows


def cmd_compare_clinical(cfg: dict, out) -> dict:
    out = Path(out)
    ledger = Ledger(out)
    opt = cfg["optimal"]
    strategy = cfg["finetune"]["strategy"]
    result = {}
    for ds_cfg in cfg["datasets"]:
        name = ds_cfg["name"]
        pr = pretrain_run(cfg, ds_cfg, opt["task"], opt["K"], opt["sampler"])
        ssl, sup, missing = {}, {}, []
        for f in cfg["finetune"]["fractions"]:
            for store, rc, what in ((ssl, finetune_run(cfg, ds_cfg, config_hash(pr), f, strategy), "ssl"),
                                    (sup, supervised_run(cfg, ds_cfg, f), "supervised")):
                h = config_hash(rc)
                if ledger.has(h):
                    store[f] = ledger.record(h)
                else:
                    missing.append((name, what, f))
        if missing:
            raise evalstats.IncompleteGridError(missing)
        rows = clinical_rows(name, ssl, sup)
        write_csv(out / "reports" / name / "clinical.csv",
                  ["dataset", "label_fraction", "tissue", "metric", "arm", "median_pct_err"], rows)
        result[name] = {"rows": len(rows), "optimal": opt}
    return result


def ranking_inputs(cfg: dict, ledger: Ledger) -> tuple:
    """Paired class-averaged Dice vectors pooled over the ranking fractions."""
    fractions = cfg["stats"]["fractions"]
    ssl, sup, missing = {}, {}, []
    for ds_cfg in cfg["datasets"]:
        name = ds_cfg["name"]
        plan = plan_pretrain_grid(cfg, ds_cfg)
        vec = []
        for f in fractions:
            h = config_hash(plan["supervised"][f])
            if ledger.has(h):
                vec += [it["mean_dice"] for it in ledger.record(h)["test"]]
            else:
                missing.append((name, "supervised", f))
        sup[name] = vec
        ssl[name] = {}
        for cell in grid_cells(cfg):
            v = []
            for f in fractions:
                h = config_hash(plan["finetune"][cell + (f,)])
                if ledger.has(h):
                    v += [it["mean_dice"] for it in ledger.record(h)["test"]]
                else:
                    missing.append((name, *cell, f))
            ssl[name][cell] = v
    if missing:
        raise evalstats.IncompleteGridError(missing)
    return ssl, sup


def stats_report(ssl: dict, sup: dict, top_k: int = 3) -> dict:
    res = evalstats.rank_strategies(ssl, sup, top_k=top_k)
    report = {"datasets": {}, "optimal": None, "candidates": [], "no_intersection": res.no_intersection,
              "top_k": top_k}
    for name, rk in res.rankings.items():
        report["datasets"][name] = [
            {"rank": i + 1, "task": s[0], "K": s[1], "sampler": s[2], "p_value": p,
             "mean_dice_ssl": float(np.mean(ssl[name][s])), "mean_dice_supervised": float(np.mean(sup[name])),
             "n_pairs": len(sup[name])}
            for i, (s, p) in enumerate(rk.rows)]
    if res.optimal is not None:
        report["optimal"] = {"task": res.optimal[0], "K": res.optimal[1], "sampler": res.optimal[2]}
    report["candidates"] = [list(c) for c in res.candidates]
    return report


def write_stats(report: dict, out) -> None:
    out = Path(out)
    _atomic_write(out / "reports" / "stats.json", _json_bytes(report))
    rows = [[name, r["rank"], r["task"], r["K"], r["sampler"], r["p_value"]]
            for name, rs in report["datasets"].items() for r in rs]
    write_csv(out / "reports" / "ranking.csv", ["dataset", "rank", "task", "K", "sampler", "p_value"], rows)


def cmd_stats(cfg: dict, out) -> dict:
    ledger = Ledger(out)
    ssl, sup = ranking_inputs(cfg, ledger)
    report = stats_report(ssl, sup, cfg["stats"]["top_k"])
    write_stats(report, out)
    return report


def directional_check(cfg: dict, out, seeds=(0, 1, 2, 3, 4), fraction: float = 0.05,
                      resume: bool = True, jobs: int = 1) -> dict:
    """SSL (optimal pretraining + configured strategy) vs supervised at one fraction over seeds.

    Each seed sets the pretraining, bank and fine-tuning seeds together; the
    dataset stays fixed.  The report carries ``direction_holds`` and a flag
    when SSL does not reach the supervised mean.
    """
    out = Path(out)
    ledger = Ledger(out)
    opt = cfg["optimal"]
    strategy = cfg["finetune"]["strategy"]
    ds_cfg = cfg["datasets"][0]
    per_seed = []
    for s in seeds:
        c = _merge(cfg, {"seeds": {"pretrain": s, "bank": s, "finetune": s}})
        pr = pretrain_run(c, ds_cfg, opt["task"], opt["K"], opt["sampler"])
        ft = finetune_run(c, ds_cfg, config_hash(pr), fraction, strategy)
        sr = supervised_run(c, ds_cfg, fraction)
        run_all([pr, sr], out, resume, jobs)
        run_all([ft], out, resume, jobs)
        per_seed.append({"seed": s, "ssl": ledger.record(config_hash(ft))["mean_dice"],
                         "supervised": ledger.record(config_hash(sr))["mean_dice"]})
    ssl_mean = float(np.mean([r["ssl"] for r in per_seed]))
    sup_mean = float(np.mean([r["supervised"] for r in per_seed]))
    holds = ssl_mean >= sup_mean
    report = {"dataset": ds_cfg["name"], "fraction": fraction, "optimal": opt, "strategy": strategy,
              "per_seed": per_seed, "ssl_mean": ssl_mean, "supervised_mean": sup_mean,
              "direction_holds": holds,
              "flag": None if holds else "SSL mean Dice below supervised on phantoms"}
    _atomic_write(out / "reports" / ds_cfg["name"] / "directional.json", _json_bytes(report))
    return report


def show_ledger(out) -> list:
    ledger = Ledger(out)
    rows = []
    for h in ledger.entries():
        rc = ledger.config(h)
        rec = ledger.record(h)
        metric = rec.get("l2_mean") if rc["kind"] == "pretrain" else rec.get("mean_dice")
        rows.append({"hash": h, "kind": rc["kind"], "run": describe(rc), "epochs": rec.get("epochs"),
                     "metric": metric})
    return rows


def cmd_gen_phantom(size: int, count: int, seed: int, out, modality: str = "ct") -> datapipe.Dataset:
    """Generate a phantom dataset and write it in the dataset directory format."""
    spec = datapipe.PhantomSpec(image_size=size, n_images=count, modality=modality, seed=seed)
    try:
        spec.validate()
        sizes = scaled_sizes(count)
        ds = datapipe.make_dataset(spec, sizes, seed)
    except datapipe.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    datapipe.save_dataset(ds, out)
    return ds


def scaled_sizes(count: int) -> dict:
    """Split sizes in the default proportions for ``count`` images."""
    total = sum(datapipe.DEFAULT_SIZES.values())
    sizes = {k: int(math.floor(v * count / total)) for k, v in datapipe.DEFAULT_SIZES.items()}
    sizes["unlabeled"] += count - sum(sizes.values())
    if sizes["train"] < 20:
        raise ConfigError(f"{count} images leave only {sizes['train']} labeled training ids; need >= 20")
    return sizes
