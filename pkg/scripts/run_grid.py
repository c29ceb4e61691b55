"""Generate the benchmark and run the full ablation grid plus the extra models.

    python scripts/run_grid.py --out out/grid [--workers 4] [--seeds 0,1,2,3,4]

Settings come from configs/acceptance-*.cfg. The grid table lands in
<out>/summary.txt; per-cell artifacts are under <out>/runs/.
"""

import argparse
import logging
from pathlib import Path

from guidedrep.experiments import GRID, MODES, AblationSpec, ExperimentConfig, format_table, run_ablation, summarize
from guidedrep.kvconfig import apply_kv, read_kv
from guidedrep.synthdata import GeneratorConfig, generate_dataset

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/grid")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--data-config", default=str(CONFIGS / "acceptance-data.cfg"))
    ap.add_argument("--experiment-config", default=str(CONFIGS / "acceptance-experiment.cfg"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    gen = apply_kv(GeneratorConfig(), read_kv(args.data_config))
    cfg = apply_kv(ExperimentConfig(), read_kv(args.experiment_config))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    data_dir = out / "data"
    if not (data_dir / "generator.cfg").exists():
        generate_dataset(gen, data_dir)

    records, _ = run_ablation(AblationSpec(tuple(GRID), MODES, seeds), data_dir, out / "grid", cfg, args.workers)
    # The sanity flag adds the per-sample noise target that the "noise" model needs.
    extra, _ = run_ablation(AblationSpec(("1", "noise", "center_aux"), ("uncertainty",), seeds), data_dir,
                            out / "extra", cfg, args.workers, sanity=True)
    print(format_table(summarize(records)))
    print()
    print(format_table(summarize(extra)))


if __name__ == "__main__":
    main()
