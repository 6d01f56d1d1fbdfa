#!/usr/bin/env python3
"""Desk-scale end-to-end run driven through the command-line interface.

Generates a low-rank token dataset, inspects its spectrum, trains the
compressor and then the flow on compact representations, draws and decodes
samples, scores held-out likelihood under two noise schedules, and finishes
with the verification battery. Artifacts land in --workdir.
"""

import argparse
import pathlib
import sys

from compactflow import cli


FLOW_TOKENS = 4
CHANNELS = 16
RANK = 4
COMPACT_D = 4

SRC_CFG = """\
[src]
n={channels}
d={d}
L=2
heads=4
mlp_ratio=2
[train]
epochs=20
batch_size=128
lr=0.002
warmup_epochs=2
cosine_start_epoch=10
seed={seed}
[noise]
mode=per_sample_uniform
sigma=0.2
"""

FLOW_CFG = """\
[flow]
N={tokens}
d={d}
K=4
shallow_layers=1
deep_layers=2
width=64
heads=4
[train]
epochs=12
batch_size=128
lr=0.002
warmup_epochs=1
cosine_start_epoch=6
seed={seed}
[noise]
mode={mode}
sigma={sigma}
"""


def run(argv):
    rc = cli.run([str(a) for a in argv])
    if rc != 0:
        print(f"step failed with exit code {rc}: {argv}", file=sys.stderr)
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="toy_run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=1024)
    args = ap.parse_args()

    wd = pathlib.Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    train_data = wd / "train.sftk"
    test_data = wd / "test.sftk"

    print("== data generation ==")
    run(["gen-data", "--kind", "low-rank", "--out", train_data, "--seed", args.seed,
         "--count", args.count, "--tokens", FLOW_TOKENS, "--channels", CHANNELS, "--rank", RANK])
    run(["gen-data", "--kind", "low-rank", "--out", test_data, "--seed", args.seed,
         "--count", max(128, args.count // 4), "--tokens", FLOW_TOKENS, "--channels", CHANNELS,
         "--rank", RANK])

    print("== spectrum ==")
    run(["stats", "--data", train_data, "--out", wd / "rae_stats.sftk"])
    run(["pca", "--data", train_data, "--out", wd / "pca.csv"])
    print((wd / "pca.csv").read_text().splitlines()[1])

    print("== stage 1: compressor ==")
    src_cfg = wd / "src.cfg"
    src_cfg.write_text(SRC_CFG.format(channels=CHANNELS, d=COMPACT_D, seed=args.seed))
    run(["train-src", "--config", src_cfg, "--data", train_data,
         "--out", wd / "src.sfck", "--metrics", wd / "src_metrics.csv"])

    print("== stage 2: flow, constant vs per-sample noise ==")
    for name, mode, sigma in (("const", "constant", 0.1), ("persample", "per_sample_uniform", 0.2)):
        cfg_path = wd / f"flow_{name}.cfg"
        cfg_path.write_text(FLOW_CFG.format(tokens=FLOW_TOKENS, d=COMPACT_D, seed=args.seed,
                                            mode=mode, sigma=sigma))
        run(["train-flow", "--config", cfg_path, "--data", train_data,
             "--src-ckpt", wd / "src.sfck", "--out", wd / f"flow_{name}.sfck",
             "--metrics", wd / f"flow_{name}_metrics.csv"])

    print("== sampling + decode ==")
    run(["sample", "--ckpt", wd / "flow_const.sfck", "--count", 64, "--seed", args.seed,
         "--out", wd / "samples.sftk", "--src-ckpt", wd / "src.sfck",
         "--rae-stats", wd / "flow_const.sfck.rae_stats",
         "--compact-stats", wd / "flow_const.sfck.compact_stats"])

    print("== likelihood report ==")
    run(["nll", "--ckpt", wd / "flow_const.sfck", "--data", test_data,
         "--out", wd / "nll_const.csv", "--src-ckpt", wd / "src.sfck",
         "--rae-stats", wd / "flow_const.sfck.rae_stats",
         "--compact-stats", wd / "flow_const.sfck.compact_stats",
         "--noise-sigma", 0.1, "--seed", args.seed])
    run(["report", "--data", test_data,
         "--ckpt-const", wd / "flow_const.sfck", "--ckpt-persample", wd / "flow_persample.sfck",
         "--out", wd / "report.csv", "--src-ckpt", wd / "src.sfck",
         "--rae-stats", wd / "flow_const.sfck.rae_stats",
         "--compact-stats", wd / "flow_const.sfck.compact_stats",
         "--noise-sigma", 0.1, "--seed", args.seed])

    print("== verification battery ==")
    run(["verify", "--seed", args.seed, "--precision", "64", "--out", wd / "verify.csv"])
    print(f"done; artifacts in {wd}/")


if __name__ == "__main__":
    main()
