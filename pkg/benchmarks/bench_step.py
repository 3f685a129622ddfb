"""Benchmark one full training step on each kernel backend.

Builds the default desk-scale network (batch 4, 64x64 crops, float32),
then times forward + four-term loss + backward + Adam update with the
backend switched at runtime. Run from the repo root:

    python3 benchmarks/bench_step.py
    python3 benchmarks/bench_step.py --repeats 10 --refine
"""

import argparse
import time

import numpy as np

from occflow import backend, diffcore
from occflow.diffcore import Tensor
from occflow.flowops import FramePair
from occflow.harness import Adam, TrainConfig, build_train_bank
from occflow.losses import (census_loss, inpainting_inputs, inpainting_loss,
                            photometric_loss, smoothness_loss, total_loss)
from occflow.network import OccInpFlowNet, forward_pass


def run_step(net, opt, bank, config, rng, refine):
    idx = rng.integers(0, len(bank), size=config.batch_size)
    margin = bank.raw_size - config.crop_size
    p0 = tuple(int(v) for v in rng.integers(0, margin + 1, size=2))
    pair = FramePair.from_raw(Tensor(bank.raws1[idx]), Tensor(bank.raws2[idx]),
                              p0, config.crop_size, config.crop_size)
    out = forward_pass(net, pair, enable_refine=refine,
                       refine_scales=config.refine_scales() if refine else None)
    ph = photometric_loss(pair, out.full_f, out.full_b,
                          out.full_mask_f, out.full_mask_b)
    ce = census_loss(pair, out.full_f, out.full_b,
                     out.full_mask_f, out.full_mask_b,
                     window=config.census_window)
    if refine:
        inp = inpainting_loss(*inpainting_inputs(out, include_full=False))
    else:
        inp = inpainting_loss([], [], [])
    sm = smoothness_loss(out.full_f, out.full_b)
    report = total_loss(ph, ce, inp, sm, config.weights)
    opt.zero_grad()
    report.total_tensor.backward()
    opt.step()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--refine", action="store_true",
                        help="include the inpainting refinement pass")
    args = parser.parse_args()

    diffcore.set_default_dtype("float32")
    config = TrainConfig(batch_size=4, dtype="float32",
                         inpaint_scales=[0, 1, 2])
    bank = build_train_bank(config)

    print(f"batch={config.batch_size} crop={config.crop_size} "
          f"refine={args.refine} repeats={args.repeats}")
    for name in ("numpy", "numba"):
        try:
            backend.set_backend(name)
        except ImportError:
            print(f"{name:<6} unavailable")
            continue
        net = OccInpFlowNet(config.network_config(), rng=np.random.default_rng(0))
        opt = Adam(net.named_parameters(), lr=1e-4)
        rng = np.random.default_rng(0)
        run_step(net, opt, bank, config, rng, args.refine)  # warm-up
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            run_step(net, opt, bank, config, rng, args.refine)
        dt = (time.perf_counter() - t0) / args.repeats * 1000.0
        print(f"{name:<6} {dt:8.1f} ms/step")


if __name__ == "__main__":
    main()
