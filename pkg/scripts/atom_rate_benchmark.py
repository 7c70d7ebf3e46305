"""RF-50 accuracy of raw vs HDM features on the synthetic atom-rate benchmark.

Also reports an oracle row that builds HDM features from the true atoms, which
bounds what a perfect decomposition could reach.

    python3 scripts/atom_rate_benchmark.py --seeds 0 1 2
    python3 scripts/atom_rate_benchmark.py --block 240 --rounds 3 --rates 1,3,5,7
"""
import argparse
import time

import numpy as np

from hdm.decomposer import DecomposerConfig, Decomposition, decompose
from hdm.harness import Recording, ScenarioConfig, build_features, swtt_evaluate
from hdm.kernel import BaseKernel
from hdm.ml import LABELS, ModelSpec
from hdm.synthetic import AtomRateBenchmark


def run(seed: int, bench: AtomRateBenchmark, L: int, refit_every: int, n_trees: int) -> dict:
    signals, markers, truth = bench.generate(seed)
    rec = Recording(signals, markers, f"s{seed}")
    t0 = time.perf_counter()
    dec = decompose(signals["AFpz"], DecomposerConfig(L=L))
    t_dec = time.perf_counter() - t0
    oracle = Decomposition(truth["AFpz"], 0.0, 0.0, [1.0], 0, BaseKernel(), True, 0.0)
    model = ModelSpec("rf", n_trees=n_trees, seed=seed, name=f"RF-{n_trees}")
    out = {"seed": seed, "atoms": len(dec.atoms), "true_atoms": len(truth["AFpz"]), "decompose_s": t_dec}
    for name, scheme, d in (("raw", "raw", None), ("hdm", "hdm", dec), ("oracle", "hdm", oracle)):
        cfg = ScenarioConfig(channels=("AFpz",), scheme=scheme, model=model, refit_every=refit_every)
        fm = build_features(rec, cfg, {"AFpz": d} if d is not None else None)
        res = swtt_evaluate(rec, cfg, fm)
        out[name] = res.confusion.counts.trace() / res.n_test
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--block", type=float, default=None, help="block length in seconds")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--rates", default=None, help="responses per minute for " + ",".join(LABELS))
    p.add_argument("--equal-power", action="store_true", help="scale amplitudes to equal class power")
    p.add_argument("--L", type=int, default=1000)
    p.add_argument("--refit-every", type=int, default=30)
    p.add_argument("--trees", type=int, default=50)
    args = p.parse_args(argv)
    kw = {}
    if args.block is not None:
        kw["block_s"] = args.block
    if args.rounds is not None:
        kw["n_rounds"] = args.rounds
    if args.rates is not None:
        kw["rates_per_min"] = dict(zip(LABELS, (float(v) for v in args.rates.split(","))))
    bench = AtomRateBenchmark(equal_power=args.equal_power, **kw)
    print("seed,atoms,true_atoms,decompose_s,raw,hdm,oracle,gap")
    gaps = []
    for seed in args.seeds:
        r = run(seed, bench, args.L, args.refit_every, args.trees)
        gaps.append(r["hdm"] - r["raw"])
        print(f"{seed},{r['atoms']},{r['true_atoms']},{r['decompose_s']:.1f},"
              f"{r['raw']:.3f},{r['hdm']:.3f},{r['oracle']:.3f},{gaps[-1]:.3f}", flush=True)
    if len(gaps) > 1:
        print(f"# mean gap {np.mean(gaps):.3f}, min {np.min(gaps):.3f}")


if __name__ == "__main__":
    main()
