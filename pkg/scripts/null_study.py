"""Type-I error of the Wald tests when neither arm has an effect.

Data come from the E2 process with beta = gamma = 0 and alpha = 1. Two tests
are reported per replication: the full three-parameter Wald test, and the
no-effect test that holds alpha at 1 (alpha is not identified when beta = 0).

    python3 scripts/null_study.py --reps 1000
"""

import argparse
import warnings
from functools import partial

import numpy as np

from ivsmm.data import AdherenceMode
from ivsmm.errors import SmmError
from ivsmm.inference import no_effect_test
from ivsmm.parallel import available_workers, pmap
from ivsmm.rng import substream
from ivsmm.simulation import SimConfig, mc_study, simulate
from ivsmm.smm import SmmModel


def _fixed_alpha_pvalues(index, config):
    frame = simulate(config, substream(config.seed, "replication", index))
    frame = frame.replace(mode=AdherenceMode.BOTH_ARMS)
    try:
        table = no_effect_test(SmmModel(frame.mode, frame.schedule), frame)
    except SmmError:
        return np.full(2, np.nan)
    return table["p_value"].to_numpy()


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=SimConfig.seed)
    p.add_argument("--workers", type=int, default=available_workers())
    args = p.parse_args()
    warnings.simplefilter("ignore")

    cfg = SimConfig(outcome_model="E2", beta=0.0, gamma=0.0, alpha=1.0, seed=args.seed)
    study = mc_study(cfg, args.reps, mode="both-arms", workers=args.workers)
    print(f"full model: {study.n_used} usable, {study.failed} failed, {study.nonconverged} non-convergent")
    for name, rate in zip(study.names, study.rejection_rate()):
        print(f"  rejection rate {name:6s} {rate:.3f}")

    pv = np.vstack(pmap(partial(_fixed_alpha_pvalues, config=cfg), range(args.reps), workers=args.workers))
    ok = np.isfinite(pv).all(axis=1)
    print(f"alpha fixed at 1: {ok.sum()} usable")
    for name, rate in zip(("beta", "gamma"), (pv[ok] < 0.05).mean(axis=0)):
        print(f"  rejection rate {name:6s} {rate:.3f}")


if __name__ == "__main__":
    main()
