"""Source training, then target adaptation with the three-step loss ladder.

Usage: python3 demos/benchmark.py [--source-epochs 30] [--target-epochs 20]

Prints the source-only target accuracy and the final accuracy of the
information-maximization baseline, the consistency term added, and the
full objective. Takes about a minute on one core at the defaults.
"""
import argparse
import time

import numpy as np

from cadtrans import AdaptConfig, DomainSpec, adapt_target, evaluate, generate, train_source


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source-epochs", type=int, default=30)
    ap.add_argument("--target-epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    source, target = generate(DomainSpec(seed=args.seed))
    truth = target.sidecar["labels"]
    hard = target.sidecar["hard"].astype(bool)
    cfg = AdaptConfig(source_epochs=args.source_epochs, target_epochs=args.target_epochs, seed=args.seed)
    model, hist = train_source(source, cfg)
    print(f"source train accuracy {hist[-1]['train_acc']:.3f}")

    def show(tag, m):
        pred = evaluate(m, target, truth)["predictions"]
        ok = pred == truth
        print(f"{tag:10s} target {ok.mean():.3f}  easy {ok[~hard].mean():.3f}  hard {ok[hard].mean():.3f}")

    show("source", model)
    for tag, kw in (("baseline", dict(alpha=0.0, beta=0.0)), ("+L_cst", dict(beta=0.0)), ("full", {})):
        run_cfg = AdaptConfig(source_epochs=args.source_epochs, target_epochs=args.target_epochs,
                              seed=args.seed, **kw)
        res = adapt_target(model, target.without_sidecar(), run_cfg, truth=truth)
        show(tag, res.model)
        if tag == "full":
            curve = " ".join(f"{r['target_acc']:.2f}" for r in res.metrics)
            print(f"  per-epoch accuracy: {curve}")
            print(f"  final easy/hard split: {res.metrics[-1]['easy_count']}/{res.metrics[-1]['hard_count']}")
    print(f"done in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
