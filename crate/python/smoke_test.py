#!/usr/bin/env python3
"""Smoke test for the boltzlab_py extension module.

Builds the cdylib with cargo (release), stages it under a temporary
directory as an importable module, and exercises the main types and
operations end to end.

Usage: python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_and_stage() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "boltzlab-py", "--release"],
        cwd=REPO,
        check=True,
    )
    if sys.platform == "darwin":
        built = REPO / "target/release/libboltzlab_py.dylib"
    elif sys.platform.startswith("win"):
        built = REPO / "target/release/boltzlab_py.dll"
    else:
        built = REPO / "target/release/libboltzlab_py.so"
    stage = Path(tempfile.mkdtemp(prefix="boltzlab-py-"))
    suffix = ".pyd" if sys.platform.startswith("win") else ".so"
    shutil.copy2(built, stage / f"boltzlab_py{suffix}")
    return stage


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} vs {b} (tol {tol})"


def main():
    stage = build_and_stage()
    sys.path.insert(0, str(stage))
    import boltzlab_py as bl

    # target basics
    dw = bl.DoubleWell(dim=12)
    approx(dw.energy([0.0] * 12), 0.0)
    rho = dw.minor_mode_ratio()
    assert 0.0 < rho < 0.5, rho
    saddle = dw.saddle()
    left, right = dw.minima()
    assert left < saddle < right

    # flow roundtrip and identity init
    flow = bl.Flow(dim=12, blocks=8, hidden=32, seed=1)
    xs, logps = flow.sample(256, seed=7)
    assert len(xs) == 256 and len(xs[0]) == 12
    zs, ld_f = flow.invert(xs)
    xs2, ld_g = flow.generate(zs)
    worst = max(
        abs(a - b) for row, row2 in zip(xs, xs2) for a, b in zip(row, row2)
    )
    assert worst <= 1e-8, worst
    # identity-initialized flow: log p_G equals the standard normal density
    lp = flow.log_prob([[0.0] * 12])[0]
    approx(lp, -12.0 / 2.0 * math.log(2.0 * math.pi), 1e-9)

    # estimators: identity flow against its own base → logZ = 0, ess = n
    log_ptb = [lp + 0.0 for lp in logps]
    q, ess, _, logz = bl.reweighted_expectation(logps, log_ptb, [1.0] * 256)
    approx(q, 1.0, 1e-12)
    approx(ess, 256.0, 1e-6)
    approx(bl.estimate_log_z(logps, log_ptb), 0.0, 1e-12)
    # constant energy shift is recovered exactly
    approx(bl.free_energy_difference(logps, log_ptb, [2.5] * 256), 2.5, 1e-12)
    assert bl.variance_loss(logps, log_ptb) >= 1.0 - 1e-12

    # losses: value + gradient shapes; the l2 loss (near-)vanishes when the
    # target matches the flow's own base density
    base_target = base_well(bl)
    loss, grad = flow.loss_and_grad("l2_masked", xs[:32], base_target)
    assert len(grad) == flow.param_count()
    assert 0.0 <= loss < 1e-6, loss
    loss_klx, grad_klx = flow.loss_and_grad("klx", zs[:8], dw)
    assert math.isfinite(loss_klx) and len(grad_klx) == flow.param_count()

    # Gibbs property of the normalized minibatch KL
    kl = bl.normalized_minibatch_kl([0.5, 0.5], [0.25, 0.75])
    approx(kl, 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0), 1e-12)
    assert bl.normalized_minibatch_kl([1.0, 2.0], [2.0, 4.0]) <= 1e-12

    # unconstrained-mass ODE against its closed form
    q_t = bl.unconstrained_kl_flow([0.0], [1.0], [1.0], 4.0, 1e-3)
    approx(q_t[0], 3.0, 1e-6)

    # PT sampling + a short training run
    data = bl.pt_sample(dw, 4000, seed=3)
    assert len(data) == 4000
    small = bl.Flow(dim=12, blocks=4, hidden=16, seed=2)
    lines = small.pretrain(data, dw, iters=30, batch_size=64, eval_every=10, n_eval=1000)
    assert lines and all("loss_value=" in l for l in lines)
    lines = small.finetune(dw, iters=10, loss="l2_masked", batch_size=64, n_eval=1000)
    assert lines

    # checkpoint roundtrip
    ckpt = stage / "flow.ckpt"
    flow.save(str(ckpt))
    flow2 = bl.Flow.load(str(ckpt))
    approx(flow2.log_prob([[0.1] * 12])[0], flow.log_prob([[0.1] * 12])[0], 0.0)

    print("boltzlab_py smoke test: all checks passed")


def base_well(bl):
    # a target matching the flow's own base distribution on 12 dims:
    # energy = Σx²/2 + const ⇒ r is constant and the masked L² loss is 0
    return bl.DoubleWell(dim=12, a=1e-12, b=-0.5, c=0.0, sigma_wide=1.0)


if __name__ == "__main__":
    main()
