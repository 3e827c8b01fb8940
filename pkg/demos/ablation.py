"""LM-feature ablation on a synthetic corpus.

Runs NCM alone and then the reranker with each LM-feature condition,
sharing cached stages between conditions, and prints f-score and error
rate per condition.  Defaults take about ten minutes on one CPU; raise
--n, --k and --epochs to approach the full desk-scale run.
"""
import argparse
import time

from disfluency.pipeline import (DIRECTION_CONDITIONS, LM_TYPE_CONDITIONS, PipelineConfig, format_table,
                                 run_pipeline)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=3000, help="synthetic utterances")
    ap.add_argument("--rate", type=float, default=0.15)
    ap.add_argument("--k", type=int, default=5, help="LM cross-validation folds")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--hidden", type=int, default=48)
    ap.add_argument("--conditions", choices=["direction", "lm-type"], default="direction")
    ap.add_argument("--work-dir", default="work/ablation")
    args = ap.parse_args()

    cfg = PipelineConfig(synth={"n": args.n, "rate": args.rate, "seed": 0}, k_folds=args.k,
                         lstm={"hidden": args.hidden, "embed": args.hidden, "epochs": args.epochs},
                         test_frac=0.2, work_dir=args.work_dir)
    conditions = DIRECTION_CONDITIONS if args.conditions == "direction" else LM_TYPE_CONDITIONS
    rows = []
    t0 = time.time()
    rows.append(("NCM alone", run_pipeline(cfg.with_lms((), rerank=False)).report))
    for name, lms in conditions.items():
        rows.append((name, run_pipeline(cfg.with_lms(lms)).report))
        print(f"  {name} done after {time.time() - t0:.0f}s")
    print(format_table(rows))


if __name__ == "__main__":
    main()
