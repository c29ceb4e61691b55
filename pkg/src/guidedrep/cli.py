"""Command-line entry point: ``guidedrep <subcommand> [options]``.

Settings come from a flat ``key=value`` file (``--config``), then ``--set``
overrides, then dedicated flags; later sources win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit, experiments, probe
from .experiments import AblationSpec, ExperimentConfig
from .guidance import load_checkpoint
from .kvconfig import apply_kv, parse_overrides, read_kv, write_kv
from .synthdata import GeneratorConfig, generate_dataset, load_dataset

OUT_ENV = "GUIDEDREP_OUT"
log = logging.getLogger("guidedrep")


def _config(cls, args, flags: dict):
    values = read_kv(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    cfg = apply_kv(cls(), values)
    flags = {k: str(v) for k, v in flags.items() if v is not None}
    return apply_kv(cfg, flags)


def _out_dir(args, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "out")) / default


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p for p in text.replace(" ", "").split(",") if p)


def _modes(text: str) -> tuple[str, ...]:
    return experiments.MODES if text == "both" else _csv_list(text)


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _csv_list(text))


def cmd_gen_data(args) -> int:
    cfg = _config(GeneratorConfig, args, {"seed": args.seed, "image_size": args.image_size})
    out = _out_dir(args, "data")
    generate_dataset(cfg, out)
    print(f"wrote dataset to {out}")
    return 0


def _exp_config(args) -> ExperimentConfig:
    return _config(ExperimentConfig, args, {"master_seed": args.master_seed, "max_epochs": args.epochs})


def _finish(records, summary, out: Path) -> int:
    print(experiments.format_table(summary))
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        print(f"cell {r.model_id}/{r.mode}/seed{r.seed}: {r.status}", file=sys.stderr)
    print(f"wrote {out / 'summary.csv'}")
    return 1 if failed else 0


def cmd_train(args) -> int:
    cfg = _exp_config(args)
    out = _out_dir(args, "train")
    spec = AblationSpec((args.model_id,), (args.mode,), (args.seed,))
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "experiment.cfg", cfg)
    records, summary = experiments.run_ablation(spec, args.data, out, cfg)
    return _finish(records, summary, out)


def cmd_ablate(args) -> int:
    cfg = _exp_config(args)
    out = _out_dir(args, "ablation")
    spec = AblationSpec(_csv_list(args.ids), _modes(args.modes), _seeds(args.seeds))
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "experiment.cfg", cfg)
    workers = args.workers or experiments.default_workers()
    records, summary = experiments.run_ablation(spec, args.data, out, cfg, workers=workers)
    return _finish(records, summary, out)


def cmd_sanity(args) -> int:
    cfg = _exp_config(args)
    out = _out_dir(args, "sanity")
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "experiment.cfg", cfg)
    workers = args.workers or experiments.default_workers()
    records, summary = experiments.run_sanity_check(args.data, out, cfg, _seeds(args.seeds), args.mode, workers)
    return _finish(records, summary, out)


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    cfg = _exp_config(args)
    scores = {s: evalkit.ScoredSet(model.predict(data[s].inputs), data[s].labels, data[s].sample_ids)
              for s in ("int_test", "ext_test")}
    metrics = experiments.evaluate_scores(scores, cfg)
    rows = []
    for key in ("int", "ext", "overall"):
        boot = metrics[f"boot_{key}"]
        rows.append([key, metrics[f"{key}_auc"], metrics[f"{key}_f1"], float(np.mean(boot)), float(np.std(boot))])
        print(f"{key:>8}  AUC {rows[-1][1]:.4f}  F1 {rows[-1][2]:.4f}  bootstrap {rows[-1][3]:.4f}±{rows[-1][4]:.4f}")
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    experiments.write_rows(out / "metrics.csv", ["set", "auc", "f1", "boot_mean", "boot_std"], rows)
    return 0


def cmd_probe(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    batch = load_dataset(args.data)[args.split]
    cfg = _exp_config(args)
    out = _out_dir(args, "probe")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tap in _csv_list(args.taps):
        acts = probe.extract_activations(model, batch.inputs, tap, batch.sample_ids)
        if args.dump_activations:
            acts.to_csv(out / f"activations_{tap}.csv")
        for concept in experiments.REGRESSION_TARGETS:
            if concept in batch.targets:
                res = probe.fit_linear_probe(acts, batch.targets[concept], "regression",
                                             cfg.probe_train_fraction, cfg.probe_ridge, cfg.master_seed)
                rows.append([tap, concept, "regression", "r2", res.score, res.train_score])
        res = probe.fit_linear_probe(acts, batch.domain_ids, "classification", cfg.probe_train_fraction,
                                     cfg.probe_ridge, cfg.master_seed)
        rows.append([tap, "domain", "classification", "accuracy", res.score, res.train_score])
        proj = probe.pca_project(acts, 2)
        probe.write_projection_csv(out / f"projection_{tap}.csv", acts.sample_ids, proj.coords, batch.labels,
                                   batch.targets.get("count", np.zeros(len(batch))))
    for row in rows:
        print(f"{row[0]:>10} {row[1]:<12} {row[3]:<8} {row[4]:.4f}")
    experiments.write_rows(out / "probes.csv", ["tap", "target", "kind", "metric", "heldout", "train"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedrep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_config_help):
        p.add_argument("--config", help=f"key=value file of {default_config_help} settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")

    p = sub.add_parser("gen-data", help="render the synthetic benchmark")
    common(p, "GeneratorConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    def experiment(p):
        common(p, "ExperimentConfig")
        p.add_argument("--data", required=True, help="dataset directory from gen-data")
        p.add_argument("--master-seed", type=int)
        p.add_argument("--epochs", type=int, help="maximum epochs")

    p = sub.add_parser("train", help="train and evaluate one model")
    experiment(p)
    p.add_argument("--model-id", default="1")
    p.add_argument("--mode", default="uncertainty", choices=experiments.MODES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the model-ID grid")
    experiment(p)
    p.add_argument("--ids", default=",".join(experiments.GRID))
    p.add_argument("--modes", default="both", help="vanilla, uncertainty, or both")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=0, help="parallel cells (default: $GUIDEDREP_WORKERS or 1)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sanity", help="baseline vs a random-target auxiliary head")
    experiment(p)
    p.add_argument("--mode", default="uncertainty", choices=experiments.MODES)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("eval", help="score a checkpoint on the test splits")
    experiment(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear probes and projections on a checkpoint")
    experiment(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="int_test")
    p.add_argument("--taps", default="gap,embedding")
    p.add_argument("--dump-activations", action="store_true")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
