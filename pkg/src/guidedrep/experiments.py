"""Ablation grid over head combinations, sanity runs, and summary tables."""

from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evalkit, probe
from .guidance import (Batch, LossWeighter, ModelConfig, MultiTaskModel, categorical_head, main_head,
                       regression_head, save_checkpoint)
from .seeding import substream
from .synthdata import SPLITS, load_dataset, load_generator_config
from .trainloop import TrainConfig, train

log = logging.getLogger(__name__)

REGRESSION_TARGETS = ("area", "count", "contrast", "correlation", "noise")

# Model-ID -> extra heads. "center" is adversarial; "center+" is the same
# head trained cooperatively (no reversal).
GRID: dict[str, tuple[str, ...]] = {
    "1": (),
    "2": ("area",),
    "3": ("count",),
    "4": ("contrast",),
    "5": ("center",),
    "6": ("count", "center"),
    "7": ("area", "count", "center"),
    "8": ("area", "count", "contrast", "center"),
}
EXTRA_MODELS: dict[str, tuple[str, ...]] = {
    "noise": ("noise",),
    "center_aux": ("center+",),
    "correlation": ("correlation",),
}
MODES = ("vanilla", "uncertainty")
PROBE_TAPS = ("gap", "embedding")


def model_heads(model_id: str) -> tuple[str, ...]:
    if model_id in GRID:
        return GRID[model_id]
    if model_id in EXTRA_MODELS:
        return EXTRA_MODELS[model_id]
    raise KeyError(f"unknown model-ID {model_id!r}; known: {', '.join([*GRID, *EXTRA_MODELS])}")


def build_heads(names, n_domains: int):
    heads = [main_head()]
    for name in names:
        if name in REGRESSION_TARGETS:
            heads.append(regression_head(name))
        elif name == "center":
            heads.append(categorical_head("center", n_domains, adversarial=True))
        elif name == "center+":
            heads.append(categorical_head("center", n_domains, adversarial=False))
        else:
            raise KeyError(f"unknown head {name!r}")
    return heads


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat settings for one training run and its evaluation."""

    conv_channels: tuple[int, ...] = (8, 16, 32)
    dense_widths: tuple[int, ...] = (256, 128, 64)
    dropout: float = 0.2
    l2: float = 1e-4
    dtype: str = "float32"
    input_offset: float = 0.5
    input_scale: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    kendall_classification: bool = False
    adv_lambda: float = 1.0
    transductive: bool = False
    n_bootstrap: int = 50
    bootstrap_size: int = 0
    bootstrap_seed: int = 0
    probe_ridge: float = 1e-3
    probe_train_fraction: float = 0.8
    master_seed: int = 0

    def model_config(self, input_shape) -> ModelConfig:
        return ModelConfig(tuple(input_shape), self.conv_channels, self.dense_widths, dropout=self.dropout,
                           l2=self.l2, dtype=self.dtype, input_offset=self.input_offset,
                           input_scale=self.input_scale)

    def train_config(self, seed: int, mode: str) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, seed=self.run_seed(seed),
                           weighting=mode, kendall_classification=self.kendall_classification,
                           transductive=self.transductive)

    def run_seed(self, seed: int) -> int:
        return int(substream(self.master_seed, "init", seed).integers(0, 2 ** 31))


def add_noise_targets(data: dict[str, Batch], master_seed: int) -> None:
    """Standard-normal target fixed per sample id, for the sanity check."""
    for batch in data.values():
        batch.targets["noise"] = np.array([
            substream(master_seed, "noise", zlib.crc32(str(sid).encode())).standard_normal()
            for sid in batch.sample_ids])


@dataclass
class RunRecord:
    model_id: str
    mode: str
    seed: int
    status: str = "ok"
    epochs: int = 0
    best_epoch: int = 0
    int_auc: float = float("nan")
    ext_auc: float = float("nan")
    overall_auc: float = float("nan")
    int_f1: float = float("nan")
    ext_f1: float = float("nan")
    overall_f1: float = float("nan")
    boot_ext_mean: float = float("nan")
    boot_ext_std: float = float("nan")
    boot_overall_mean: float = float("nan")
    boot_overall_std: float = float("nan")
    p_ext_vs_baseline: float = float("nan")
    p_overall_vs_baseline: float = float("nan")
    r2: dict[str, float] = field(default_factory=dict)
    domain_acc: dict[str, float] = field(default_factory=dict)
    log_vars: dict[str, float] = field(default_factory=dict)
    boot: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def run_dir(out_dir, model_id: str, mode: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / f"id{model_id}_{mode}_seed{seed}"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, (np.floating,)):
        return repr(float(x))
    return str(x)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def evaluate_scores(scores: dict[str, evalkit.ScoredSet], cfg: ExperimentConfig) -> dict:
    """Point metrics plus resample-paired bootstrap AUC vectors for int, ext, and pooled sets."""
    pooled = evalkit.ScoredSet(np.concatenate([scores["int_test"].scores, scores["ext_test"].scores]),
                               np.concatenate([scores["int_test"].labels, scores["ext_test"].labels]))
    sets = {"int": scores["int_test"], "ext": scores["ext_test"], "overall": pooled}
    out = {}
    for key, s in sets.items():
        out[f"{key}_auc"] = evalkit.roc_auc(s)
        out[f"{key}_f1"] = evalkit.f1_score(s)
        size = cfg.bootstrap_size or len(s)
        idx = evalkit.bootstrap_indices(s.labels, cfg.n_bootstrap, size, cfg.bootstrap_seed)
        out[f"boot_{key}"] = evalkit.bootstrap_metric(s, evalkit.roc_auc, indices=idx).values
    return out


def probe_model(model: MultiTaskModel, batch: Batch, cfg: ExperimentConfig, concepts) -> tuple[list, dict, dict]:
    rows, r2, acc = [], {}, {}
    for tap in PROBE_TAPS:
        acts = probe.extract_activations(model, batch.inputs, tap, batch.sample_ids)
        for c in concepts:
            if c not in batch.targets:
                continue
            res = probe.fit_linear_probe(acts, batch.targets[c], "regression", cfg.probe_train_fraction,
                                         cfg.probe_ridge, cfg.master_seed)
            rows.append([tap, c, "regression", "r2", res.score, res.train_score])
            r2[f"{tap}:{c}"] = res.score
        res = probe.fit_linear_probe(acts, batch.domain_ids, "classification", cfg.probe_train_fraction,
                                     cfg.probe_ridge, cfg.master_seed)
        rows.append([tap, "domain", "classification", "accuracy", res.score, res.train_score])
        acc[tap] = res.score
    return rows, r2, acc


def run_single(data: dict[str, Batch], model_id: str, mode: str, seed: int, cfg: ExperimentConfig,
               out_dir=None, n_domains: int | None = None) -> RunRecord:
    """Train, evaluate, and probe one grid cell; artifacts go to ``out_dir`` if given."""
    n_domains = n_domains or int(max(int(b.domain_ids.max()) for b in data.values()) + 1)
    heads = build_heads(model_heads(model_id), n_domains)
    model = MultiTaskModel(cfg.model_config(data["train"].inputs.shape[1:]), heads, seed=cfg.run_seed(seed))
    lambdas = {h.name: cfg.adv_lambda for h in model.extra_specs if h.alpha == -1}
    weighter = LossWeighter.for_model(model, mode, lambdas=lambdas, kendall_classification=cfg.kendall_classification)
    tcfg = cfg.train_config(seed, mode)
    history = train(model, weighter, data["train"], data["val"], tcfg,
                    extra_set=Batch.concat([data["int_test"], data["ext_test"]]) if tcfg.transductive else None)
    scores = {split: evalkit.ScoredSet(model.predict(data[split].inputs), data[split].labels, data[split].sample_ids)
              for split in ("int_test", "ext_test")}
    metrics = evaluate_scores(scores, cfg)
    concepts = [c for c in REGRESSION_TARGETS if c in data["int_test"].targets]
    probe_rows, r2, acc = probe_model(model, data["int_test"], cfg, concepts)
    rec = RunRecord(model_id, mode, seed, epochs=history.stopped_epoch, best_epoch=history.best_epoch,
                    **{k: float(v) for k, v in metrics.items() if not k.startswith("boot_")},
                    boot_ext_mean=float(np.mean(metrics["boot_ext"])), boot_ext_std=float(np.std(metrics["boot_ext"])),
                    boot_overall_mean=float(np.mean(metrics["boot_overall"])),
                    boot_overall_std=float(np.std(metrics["boot_overall"])),
                    r2=r2, domain_acc=acc, log_vars=dict(zip(weighter.tasks, map(float, weighter.log_vars.values))),
                    boot={k[5:]: v for k, v in metrics.items() if k.startswith("boot_")})
    if out_dir is not None:
        d = run_dir(out_dir, model_id, mode, seed)
        d.mkdir(parents=True, exist_ok=True)
        history.to_csv(d / "history.csv")
        write_rows(d / "scores.csv", ["sample_id", "split", "label", "score"],
                   [[sid, split, int(lab), float(sc)] for split, s in scores.items()
                    for sid, lab, sc in zip(s.sample_ids, s.labels, s.scores)])
        write_rows(d / "bootstrap.csv", ["resample", "int_auc", "ext_auc", "overall_auc"],
                   [[b, float(rec.boot["int"][b]), float(rec.boot["ext"][b]), float(rec.boot["overall"][b])]
                    for b in range(cfg.n_bootstrap)])
        write_rows(d / "probes.csv", ["tap", "target", "kind", "metric", "heldout", "train"], probe_rows)
        emb = probe.extract_activations(model, data["int_test"].inputs, "embedding", data["int_test"].sample_ids)
        proj = probe.pca_project(emb, 2)
        probe.write_projection_csv(d / "projection.csv", emb.sample_ids, proj.coords, data["int_test"].labels,
                                   data["int_test"].targets.get("count", np.zeros(len(emb.sample_ids))))
        save_checkpoint(d / "model.npz", model, weighter)
    return rec


def _cell(args):
    data_dir, model_id, mode, seed, cfg, out_dir, sanity = args
    try:
        data = load_dataset(data_dir)
        if sanity:
            add_noise_targets(data, cfg.master_seed)
        n_domains = load_generator_config(data_dir).n_domains
        return run_single(data, model_id, mode, seed, cfg, out_dir, n_domains)
    except Exception as exc:  # a failed cell is recorded and the grid continues
        log.exception("cell %s/%s/%s failed", model_id, mode, seed)
        return RunRecord(model_id, mode, seed, status=f"failed: {type(exc).__name__}: {exc}")


@dataclass
class AblationSpec:
    model_ids: tuple[str, ...] = tuple(GRID)
    modes: tuple[str, ...] = MODES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        for mid in self.model_ids:
            model_heads(mid)

    def cells(self):
        return [(mid, mode, seed) for mid in self.model_ids for mode in self.modes for seed in self.seeds]


def run_cells(data_dir, spec: AblationSpec, cfg: ExperimentConfig, out_dir=None, workers: int = 1,
              sanity: bool = False, data: dict[str, Batch] | None = None) -> list[RunRecord]:
    """Run every cell; results come back in grid order regardless of scheduling."""
    jobs = [(str(data_dir), mid, mode, seed, cfg, out_dir, sanity) for mid, mode, seed in spec.cells()]
    if workers <= 1 and data is None:
        data = load_dataset(data_dir)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_cell, jobs))
    elif data is not None:
        if sanity:
            add_noise_targets(data, cfg.master_seed)
        n_domains = load_generator_config(data_dir).n_domains
        records = []
        for _, mid, mode, seed, *_ in jobs:
            try:
                records.append(run_single(data, mid, mode, seed, cfg, out_dir, n_domains))
            except Exception as exc:
                log.exception("cell %s/%s/%s failed", mid, mode, seed)
                records.append(RunRecord(mid, mode, seed, status=f"failed: {type(exc).__name__}: {exc}"))
    attach_pvalues(records)
    return records


def attach_pvalues(records: list[RunRecord], baseline_id: str = "1") -> None:
    """Per-cell Wilcoxon of bootstrap AUCs against the same-mode, same-seed baseline."""
    base = {(r.mode, r.seed): r for r in records if r.model_id == baseline_id and r.status == "ok"}
    for r in records:
        b = base.get((r.mode, r.seed))
        if r.status != "ok" or b is None or r is b:
            continue
        r.p_ext_vs_baseline = _pvalue(r.boot["ext"], b.boot["ext"])
        r.p_overall_vs_baseline = _pvalue(r.boot["overall"], b.boot["overall"])


def _pvalue(a, b) -> float:
    try:
        return evalkit.wilcoxon_two_sided(a, b)
    except ValueError:  # fewer than the minimum number of nonzero pairs
        return float("nan")


def seed_averaged_boot(records: list[RunRecord], model_id: str, mode: str, key: str) -> np.ndarray | None:
    rows = [r.boot[key] for r in records if r.model_id == model_id and r.mode == mode and r.status == "ok"]
    return np.mean(rows, axis=0) if rows else None


def paired_pvalue(records, model_id: str, mode: str, key: str = "ext", baseline_id: str = "1",
                  baseline_mode: str | None = None) -> float:
    """Wilcoxon between seed-averaged bootstrap vectors, paired by resample index."""
    a = seed_averaged_boot(records, model_id, mode, key)
    b = seed_averaged_boot(records, baseline_id, baseline_mode or mode, key)
    if a is None or b is None:
        return float("nan")
    return _pvalue(a, b)


SCALARS = ("int_auc", "ext_auc", "overall_auc", "int_f1", "ext_f1", "overall_f1")


def record_columns(records: list[RunRecord]):
    r2_keys = sorted({k for r in records for k in r.r2})
    acc_keys = sorted({k for r in records for k in r.domain_acc})
    s_keys = sorted({k for r in records for k in r.log_vars})
    return r2_keys, acc_keys, s_keys


def write_records(path, records: list[RunRecord]) -> None:
    r2_keys, acc_keys, s_keys = record_columns(records)
    base = ["model_id", "mode", "seed", "status", "epochs", "best_epoch", *SCALARS, "boot_ext_mean", "boot_ext_std",
            "boot_overall_mean", "boot_overall_std", "p_ext_vs_baseline", "p_overall_vs_baseline"]
    header = base + [f"r2[{k}]" for k in r2_keys] + [f"domain_acc[{k}]" for k in acc_keys] + [f"s[{k}]" for k in s_keys]
    rows = []
    for r in records:
        d = asdict(r)
        rows.append([d[k] for k in base] + [r.r2.get(k, float("nan")) for k in r2_keys]
                    + [r.domain_acc.get(k, float("nan")) for k in acc_keys]
                    + [r.log_vars.get(k, float("nan")) for k in s_keys])
    write_rows(path, header, rows)


def summarize(records: list[RunRecord], baseline_id: str = "1") -> list[dict]:
    """One row per (model-ID, mode): mean and std over successful seeds."""
    r2_keys, acc_keys, _ = record_columns(records)
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.model_id, r.mode), []).append(r)
    out = []
    for (mid, mode), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        row = {"model_id": mid, "mode": mode, "heads": "+".join(("main",) + model_heads(mid)),
               "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        for key in SCALARS:
            vals = np.array([getattr(r, key) for r in ok])
            row[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
        for k in r2_keys:
            vals = np.array([r.r2[k] for r in ok if k in r.r2])
            row[f"r2[{k}]_mean"] = float(vals.mean()) if len(vals) else float("nan")
        for k in acc_keys:
            vals = np.array([r.domain_acc[k] for r in ok if k in r.domain_acc])
            row[f"domain_acc[{k}]_mean"] = float(vals.mean()) if len(vals) else float("nan")
        is_base = mid == baseline_id
        row["p_ext_vs_baseline"] = float("nan") if is_base else paired_pvalue(records, mid, mode, "ext", baseline_id)
        row["p_overall_vs_baseline"] = float("nan") if is_base else paired_pvalue(records, mid, mode, "overall",
                                                                                  baseline_id)
        out.append(row)
    return out


def write_summary(path, summary: list[dict]) -> None:
    keys = list(summary[0]) if summary else []
    for row in summary[1:]:
        keys += [k for k in row if k not in keys]
    write_rows(path, keys, [[row.get(k, float("nan")) for k in keys] for row in summary])


def format_table(summary: list[dict]) -> str:
    lines = [f"{'ID':>10} {'mode':<11} {'heads':<34} {'int AUC':>15} {'ext AUC':>15} {'overall':>15} {'p(ext)':>8}"]
    for row in summary:
        def pm(key):
            return f"{row[key + '_mean']:.3f}±{row[key + '_std']:.3f}"
        p = row["p_ext_vs_baseline"]
        lines.append(f"{row['model_id']:>10} {row['mode']:<11} {row['heads']:<34} {pm('int_auc'):>15} "
                     f"{pm('ext_auc'):>15} {pm('overall_auc'):>15} {'' if np.isnan(p) else f'{p:.2g}':>8}")
    return "\n".join(lines)


def run_ablation(spec: AblationSpec, data_dir, out_dir, cfg: ExperimentConfig, workers: int = 1,
                 sanity: bool = False, data: dict[str, Batch] | None = None) -> tuple[list[RunRecord], list[dict]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = run_cells(data_dir, spec, cfg, out, workers, sanity=sanity, data=data)
    summary = summarize(records)
    write_records(out / "records.csv", records)
    write_summary(out / "summary.csv", summary)
    (out / "summary.txt").write_text(format_table(summary) + "\n")
    return records, summary


def run_sanity_check(data_dir, out_dir, cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4), mode: str = "uncertainty",
                     workers: int = 1, data: dict[str, Batch] | None = None):
    """Baseline vs a count-shaped model whose target is fixed per-sample noise."""
    spec = AblationSpec(("1", "noise"), (mode,), tuple(seeds))
    return run_ablation(spec, data_dir, out_dir, cfg, workers, sanity=True, data=data)


def default_workers() -> int:
    return max(1, int(os.environ.get("GUIDEDREP_WORKERS", "1")))
