"""Calibration sweep for the training acceptance margins (dev tool)."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from lenslab import codec, world
from lenslab import train as tr
from lenslab.numerics import RngState


def run(seed, steps, lr, pg, k=32, label=""):
    g = codec.PatchGeometry(4, 8, 8, 4)
    basis = codec.permutation_basis(g, 32, RngState(0)).with_k(k)
    w = world.make_lowfreq_world(basis, 8, seed=1, proj_gain=pg)
    cfg = tr.TrainConfig(seed=seed, steps_per_epoch=steps, eval_every=steps,
                         batch_size=8, learning_rate=lr)
    t0 = time.perf_counter()
    params, log = tr.train(w, basis, cfg)
    dt = time.perf_counter() - t0
    _, heldout = tr.split_prompts(w, 0.75)
    rep = tr.evaluate(params, w, basis, heldout, 128, RngState(999))
    row = log.rows[-1]
    print(f"{label} seed={seed} k={k} steps={steps}: delta={rep.mean_delta:.3f} "
          f"frac={rep.frac_improved:.4f} M={row['spectral_norm']:.3f} "
          f"with={rep.mean_with:.4f} time={dt:.0f}s", flush=True)
    return rep


if __name__ == "__main__":
    mode = sys.argv[1] if len(sys.argv) > 1 else "main"
    if mode == "main":
        for seed in (0, 1, 2):
            run(seed, 4000, 5e-3, 1.5, label="main")
    elif mode == "kablate":
        finals = {}
        for k in (8, 16, 32, 64):
            rep = run(0, 3000, 5e-3, 1.5, k=k, label="kab")
            finals[k] = rep.mean_with
        ref = finals[64]
        for k, v in finals.items():
            print(f"k={k}: final={v:.4f} rel_dev={(abs(v - ref) / abs(ref)):.4f}",
                  flush=True)
