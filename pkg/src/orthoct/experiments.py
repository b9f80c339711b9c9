"""Desk-scale experiments: single-phantom overfit, held-out generalization, inference timing.

Each returns a plain dict of measurements so scripts can dump JSON and the
acceptance tests can assert on the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import PhantomSpec, generate_phantom, split_dataset
from .geometry import forward_project
from .metrics import dice, psnr, segment_lung
from .networks import desk_config
from .pipeline import Reconstructor, desk_train_config, init_volume, train_stage1, train_stage2

COARSE = desk_config(3, residual=True)  # same as the desk default, pinned here for the record


def overfit_config(stage1_steps: int = 300, stage2_steps: int = 300, slices: int = 32, batch: int = 8):
    """Stage configs for a single 32^3 phantom; one stage-1 step per epoch, ``slices/batch`` stage-2 steps per epoch.

    Stage 2 runs at least ``stage2_steps + 1`` steps so step index ``stage2_steps`` exists.
    """
    per_epoch = -(-slices // batch)
    s1 = desk_train_config(1, epochs=stage1_steps, lr_init=5e-3, coarse_net=COARSE, checkpoint_every=stage1_steps)
    s2 = desk_train_config(
        2, epochs=-(-(stage2_steps + 1) // per_epoch), batch_size=batch, coarse_net=COARSE, checkpoint_every=10**6
    )
    return s1, s2


def _quality(recon, init, gt) -> dict:
    lung = segment_lung(gt)
    return {
        "psnr_recon": psnr(recon, gt),
        "psnr_init": psnr(init, gt),
        "dice_recon": dice(segment_lung(recon), lung),
        "dice_init": dice(segment_lung(init), lung),
    }


def overfit_experiment(out_dir, seed: int = 0, stage1_steps: int = 300, stage2_steps: int = 300, verbose=False) -> dict:
    out = Path(out_dir)
    t0 = time.perf_counter()
    vol = generate_phantom(PhantomSpec(seed=seed))
    s1, s2 = overfit_config(stage1_steps, stage2_steps, vol.dims[2])
    r1 = train_stage1([vol], s1, out, verbose=verbose)
    t1 = time.perf_counter()
    r2 = train_stage2([vol], r1.checkpoint, s2, out, verbose=verbose)
    t2 = time.perf_counter()
    mse = [r["mse"] for r in r1.trace]
    hyb = [r["loss_total"] for r in r2.trace][: stage2_steps + 1]
    ap, lat = forward_project(vol, "AP"), forward_project(vol, "LAT")
    recon = Reconstructor.load(r1.checkpoint, r2.checkpoint)(ap, lat)
    res = {
        "stage1_steps": len(mse),
        "mse_first": mse[0],
        "mse_last": mse[-1],
        "mse_ratio": mse[-1] / mse[0],
        "stage2_steps": len(hyb) - 1,
        "hybrid_first": hyb[0],
        "hybrid_last": hyb[-1],
        "seconds_stage1": t1 - t0,
        "seconds_stage2": t2 - t1,
        "checkpoint_stage1": str(r1.checkpoint),
        "checkpoint_stage2": str(r2.checkpoint),
    }
    res.update(_quality(recon.values, init_volume(vol).values, vol.values))
    res["seconds_total"] = time.perf_counter() - t0
    return res


def generalization_experiment(
    out_dir,
    count: int = 50,
    train_fraction: float = 0.8,
    seed: int = 0,
    stage1_epochs: int = 15,
    stage2_epochs: int = 6,
    stage2_steps_per_epoch: int = 40,
    verbose=False,
) -> dict:
    """Train on a seeded split of ``count`` phantoms and score the held-out ones."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    manifest = split_dataset(count, train_fraction, seed)
    vols = {i: generate_phantom(PhantomSpec(seed=1000 + int(i))) for i in map(int, manifest.train + manifest.test)}
    train = [vols[int(i)] for i in manifest.train]
    test = [vols[int(i)] for i in manifest.test]
    s1 = desk_train_config(1, epochs=stage1_epochs, lr_init=2e-3, coarse_net=COARSE, checkpoint_every=10**6)
    s2 = desk_train_config(
        2,
        epochs=stage2_epochs,
        batch_size=8,
        coarse_net=COARSE,
        steps_per_epoch=stage2_steps_per_epoch,
        checkpoint_every=10**6,
    )
    r1 = train_stage1(train, s1, out, verbose=verbose)
    r2 = train_stage2(train, r1.checkpoint, s2, out, verbose=verbose)
    rec = Reconstructor.load(r1.checkpoint, r2.checkpoint)
    rows = []
    for v in test:
        recon = rec(forward_project(v, "AP"), forward_project(v, "LAT"))
        rows.append(_quality(recon.values, init_volume(v).values, v.values))
    agg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return {
        "count": count,
        "n_train": len(train),
        "n_test": len(test),
        **{f"mean_{k}": v for k, v in agg.items()},
        "per_volume": rows,
        "seconds_total": time.perf_counter() - t0,
    }


def timing_experiment(coarse_ckpt, refine_ckpt, seed: int = 0, repeats: int = 5) -> dict:
    """Wall time of loading the checkpoints and of reconstructing one 32^3 phantom."""
    vol = generate_phantom(replace(PhantomSpec(), seed=seed))
    ap, lat = forward_project(vol, "AP"), forward_project(vol, "LAT")
    t0 = time.perf_counter()
    rec = Reconstructor.load(coarse_ckpt, refine_ckpt)
    load_s = time.perf_counter() - t0
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        rec(ap, lat)
        times.append(time.perf_counter() - t)
    return {"load_seconds": load_s, "reconstruct_seconds": times, "best": min(times), "worst": max(times)}
