"""Sharpness after training at a small and a large learning rate.

Two stage-1 runs on the synthetic desk data differ only in their target lr.
Each trained model is probed along one filter-normalized random direction
and the largest loss rise within the slice is reported, lower being flatter.
Takes a few minutes on one core.
"""
import sys

from flatland.experiments import DeskSetup, single_stage

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
setup = DeskSetup()
ds = setup.data()
for lr in (0.005, 0.1):
    _, res, acc, sharp = single_stage(seed, lr, setup, ds, with_sharpness=True)
    print(f"lr {lr:<6} epochs {res.epochs:4d}  held-out acc {acc:.3f}  sharpness {sharp:.4f}")
