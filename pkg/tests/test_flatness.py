"""Comparative flatness on the desk dataset, averaged over five seeds.

Runs come from the shared cache in ``desk_runs``, so after the acceptance
module only the ShakeDrop-free stage-1 runs are new.
"""
import numpy as np

from desk_runs import SEEDS, dfp_sharpness, single_run


def test_shakedrop_is_no_sharper_than_plain_residuals():
    with_sd = np.mean([single_run(seed, 0.1)[1] for seed in SEEDS])
    without = np.mean([single_run(seed, 0.1, use_shakedrop=False)[1] for seed in SEEDS])
    print(f"sharpness with ShakeDrop {with_sd:.4f}, without {without:.4f}")
    assert with_sd <= without


def test_mesa_stage_is_no_sharper_than_preceding_ce_stage():
    # stages (1, 2) and (3, 4) share a resolution; the second of each pair adds MESA
    sharp = np.array([dfp_sharpness(seed) for seed in SEEDS]).mean(axis=0)
    print("mean stage sharpness " + " ".join(f"{s:.4f}" for s in sharp))
    assert sharp[1] <= sharp[0]
    assert sharp[3] <= sharp[2]
