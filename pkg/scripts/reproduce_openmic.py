"""Ten-seed ATT / FC_T / FC comparison on OpenMIC-2018 at the published settings.

Expects the release layout::

    OPENMIC/openmic-2018.npz
    OPENMIC/class-map.json
    OPENMIC/partitions/split01_train.csv
    OPENMIC/partitions/split01_test.csv

    python scripts/reproduce_openmic.py /data/openmic-2018 runs/openmic --workers 4

Hours of CPU time. Prints median overall macro-F1 per model and whether ATT
is strictly ahead of both baselines.
"""
import argparse
import logging
from pathlib import Path

from attmil.dataio import import_openmic, save_dataset
from attmil.evaluation import aggregate_seeds, aggregation_to_csv
from attmil.experiments import compare_models, median_f1
from attmil.training import TrainConfig

OPENMIC_CONFIG = TrainConfig(batch_size=128, lr=5e-4, epochs=250, val_fraction=0.15)
KINDS = ("att", "fc_t", "fc")


def run(root: Path, out: Path, seeds=range(1, 11), workers: int = 1) -> dict[str, float]:
    dataset = import_openmic(
        root / "openmic-2018.npz",
        root / "partitions" / "split01_train.csv",
        root / "partitions" / "split01_test.csv",
        root / "class-map.json",
    )
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out / "dataset")
    runs = compare_models(dataset, KINDS, seeds, OPENMIC_CONFIG, workers=workers,
                          checkpoint_root=out / "checkpoints")
    summary = {}
    for kind in KINDS:
        for r in runs[kind]:
            (out / f"{kind}_seed{r.seed}.csv").write_text(r.report.to_csv())
        (out / f"{kind}_summary.csv").write_text(aggregation_to_csv(aggregate_seeds([r.report for r in runs[kind]])))
        summary[kind] = median_f1(runs[kind])
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("openmic", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    summary = run(args.openmic, args.out, range(1, args.seeds + 1), args.workers)
    for kind, f1 in summary.items():
        print(f"{kind:5s} median macro-F1 {f1:.4f}")
    ok = summary["att"] > summary["fc_t"] and summary["att"] > summary["fc"]
    print("ATT ahead of both baselines:", "yes" if ok else "NO")


if __name__ == "__main__":
    main()
