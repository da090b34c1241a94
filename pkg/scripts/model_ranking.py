"""Which impedance specification predicts best when the truth uses the group mean?

Each seed generates a dataset from mean-impedance ground truth and scores all
five specifications by 10-fold cross-validated fitting factor.

    python scripts/model_ranking.py --seeds 20
"""

import argparse
from collections import Counter

from groupdest.analysis import cross_validate
from groupdest.estimator import ModelSpec
from groupdest.impedance import ImpedanceKind
from groupdest.sampling import CORRECTIONS, SamplingConfig
from groupdest.synth import ScenarioConfig, TrueModel, synthetic_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--truth", choices=[k.value for k in ImpedanceKind], default="mean")
    p.add_argument("--correction", choices=CORRECTIONS, default="none")
    args = p.parse_args(argv)

    best = Counter()
    kinds = list(ImpedanceKind)
    print("seed," + ",".join(k.value for k in kinds) + ",best")
    for seed in range(args.seeds):
        ds = synthetic_dataset(ScenarioConfig(rng_seed=seed), TrueModel(impedance_kind=args.truth))
        ff = {k: cross_validate(ds, ModelSpec(k), folds=args.folds, rng_seed=seed,
                                sampling=SamplingConfig(correction=args.correction)).fitting_factor
              for k in kinds}
        top = max(ff, key=ff.get)
        best[top.value] += 1
        print(f"{seed}," + ",".join(f"{ff[k]:.2f}" for k in kinds) + f",{top.value}", flush=True)
    print("# best counts: " + ", ".join(f"{k} {best[k.value]}" for k in kinds))


if __name__ == "__main__":
    main()
