"""Command-line surface: pipeline orchestration and report emission.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O or format error.
Every command is deterministic given --seed.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import data_io
from .compressor import SRCConfig
from .fields import (
    NoiseSpec,
    compute_channel_stats,
    intrinsic_dim,
    normalize,
    pca_spectrum,
)
from .flow import FlowConfig, GuidanceSpec, gaussian_constant


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compactflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SFTK dataset")
    g.add_argument("--kind", choices=["low-rank", "mixture"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--tokens", type=int, default=16)
    g.add_argument("--channels", type=int, default=64)
    g.add_argument("--rank", type=int, default=8)
    g.add_argument("--spectrum", default="", help="comma-separated variances (default: rank..1)")
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--components", type=int, default=1)

    s = sub.add_parser("stats", help="compute channel statistics of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    pc = sub.add_parser("pca", help="explained-variance spectrum of normalized tokens")
    pc.add_argument("--data", required=True)
    pc.add_argument("--out", required=True)

    ts = sub.add_parser("train-src", help="stage 1: train the compressor")
    ts.add_argument("--config", required=True)
    ts.add_argument("--data", required=True)
    ts.add_argument("--out", required=True)
    ts.add_argument("--seed", type=int, default=None)
    ts.add_argument("--metrics", default=None)

    tf = sub.add_parser("train-flow", help="stage 2: train the flow")
    tf.add_argument("--config", required=True)
    tf.add_argument("--data", required=True)
    tf.add_argument("--src-ckpt", default=None)
    tf.add_argument("--out", required=True)
    tf.add_argument("--seed", type=int, default=None)
    tf.add_argument("--metrics", default=None)

    sa = sub.add_parser("sample", help="generate fields from a trained flow")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--count", type=int, default=16)
    sa.add_argument("--label", type=int, default=None)
    sa.add_argument("--cfg", type=float, default=0.0)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", required=True)
    sa.add_argument("--src-ckpt", default=None)
    sa.add_argument("--rae-stats", default=None)
    sa.add_argument("--compact-stats", default=None)

    nl = sub.add_parser("nll", help="per-example negative log-likelihood CSV")
    nl.add_argument("--ckpt", required=True)
    nl.add_argument("--data", required=True)
    nl.add_argument("--out", required=True)
    nl.add_argument("--src-ckpt", default=None)
    nl.add_argument("--rae-stats", default=None)
    nl.add_argument("--compact-stats", default=None)
    nl.add_argument("--noise-sigma", type=float, default=0.0)
    nl.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="run the oracle suite; exit 1 on failure")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.add_argument("--precision", type=int, choices=[32, 64], default=64)

    r = sub.add_parser("report", help="constant vs per-sample noise comparison CSV")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt-const", required=True)
    r.add_argument("--ckpt-persample", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--src-ckpt", default=None)
    r.add_argument("--rae-stats", default=None)
    r.add_argument("--compact-stats", default=None)
    r.add_argument("--noise-sigma", type=float, default=0.4)
    r.add_argument("--seed", type=int, default=0)
    return p


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _cmd_gen_data(args) -> int:
    if args.kind == "low-rank":
        if args.spectrum:
            spectrum = [float(x) for x in args.spectrum.split(",")]
        else:
            spectrum = list(range(args.rank, 0, -1))
        ds = data_io.gen_low_rank(
            args.count, args.tokens, args.channels, args.rank, spectrum, args.noise_std, args.seed
        )
    else:
        ds = data_io.gen_class_mixture(args.count, args.classes, args.components, args.seed)
    data_io.write_dataset(args.out, ds)
    return 0


def _cmd_stats(args) -> int:
    ds = data_io.read_dataset(args.data)
    data_io.write_stats(args.out, compute_channel_stats(ds.fields))
    return 0


def _cmd_pca(args) -> int:
    ds = data_io.read_dataset(args.data)
    stats = compute_channel_stats(ds.fields)
    normed = [normalize(f, stats) for f in ds.fields]
    report = pca_spectrum(normed)
    k99 = intrinsic_dim(report, 0.99)
    rows = [
        [i + 1, ev, cum, k99]
        for i, (ev, cum) in enumerate(zip(report.eigenvalues, report.cumulative_explained))
    ]
    _write_csv(args.out, ["component", "eigenvalue", "cumulative_explained", "intrinsic_dim_099"], rows)
    return 0


def _metrics_writer(path):
    if path is None:
        return None, lambda: None
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "lr", "loss", "logdet_mean", "grad_norm"])

    def on_step(step, lr, loss, logdet_mean, grad_norm):
        writer.writerow([step, lr, loss, logdet_mean, grad_norm])

    return on_step, fh.close


def _cmd_train_src(args) -> int:
    from .training import train_src

    cfg = data_io.load_config_file(args.config)
    src_cfg = cfg.get("src", SRCConfig())
    train_cfg = cfg["train"]
    if args.seed is not None:
        train_cfg = _reseed(train_cfg, args.seed)
    ds = data_io.read_dataset(args.data)
    rae_stats = compute_channel_stats(ds.fields)
    on_step, close = _metrics_writer(args.metrics)
    try:
        model = train_src(ds, rae_stats, src_cfg, train_cfg, on_step=on_step)
    finally:
        close()
    data_io.save_src(args.out, model)
    data_io.write_stats(args.out + ".rae_stats", rae_stats)
    return 0


def _reseed(train_cfg, seed):
    import dataclasses

    return dataclasses.replace(train_cfg, seed=seed)


def _cmd_train_flow(args) -> int:
    from .training import compute_compact_stats, train_flow

    cfg = data_io.load_config_file(args.config)
    flow_cfg = cfg.get("flow", FlowConfig())
    train_cfg = cfg["train"]
    if args.seed is not None:
        train_cfg = _reseed(train_cfg, args.seed)
    ds = data_io.read_dataset(args.data)
    src_model = None
    rae_stats = None
    compact_stats = None
    if args.src_ckpt is not None:
        src_model = data_io.load_src(args.src_ckpt)
        rae_stats = compute_channel_stats(ds.fields)
        compact_stats = compute_compact_stats(
            ds, src_model, rae_stats, train_cfg.noise, seed=train_cfg.seed
        )
        data_io.write_stats(args.out + ".rae_stats", rae_stats)
        data_io.write_stats(args.out + ".compact_stats", compact_stats)
    on_step, close = _metrics_writer(args.metrics)
    try:
        model, ema = train_flow(
            ds, src_model, rae_stats, compact_stats, flow_cfg, train_cfg, on_step=on_step
        )
    finally:
        close()
    data_io.save_flow(args.out, model)
    data_io.save_ema(args.out + ".ema", model, ema)
    return 0


def _cmd_sample(args) -> int:
    from . import flow as flow_mod
    from .fields import TokenField, denormalize

    model = data_io.load_flow(args.ckpt)
    guidance = GuidanceSpec(w=args.cfg)
    fields = flow_mod.sample(model, args.count, args.label, guidance, args.seed)
    ds = data_io.Dataset(
        fields=[TokenField(fields[i].astype(np.float32)) for i in range(args.count)],
        labels=None if args.label is None else [args.label] * args.count,
    )
    data_io.write_dataset(args.out, ds)
    if args.src_ckpt is not None:
        src_model = data_io.load_src(args.src_ckpt)
        rae_stats = data_io.read_stats(args.rae_stats)
        compact_stats = data_io.read_stats(args.compact_stats)
        from .compressor import src_decode

        decoded = []
        for i in range(args.count):
            zc = denormalize(TokenField(fields[i]), compact_stats)
            z_hat = src_decode(zc, src_model)
            decoded.append(TokenField(denormalize(z_hat, rae_stats).data.astype(np.float32)))
        data_io.write_dataset(args.out + ".decoded", data_io.Dataset(fields=decoded, labels=ds.labels))
    return 0


def _prepare_compact(args, ds):
    """Apply the (noise, normalize, encode, normalize) pipeline used before
    flow evaluation; pieces are skipped when the corresponding flag is absent."""
    import torch
    from .fields import _counter_rng, noise_batch

    arr = ds.as_array().astype(np.float64)
    if args.noise_sigma > 0:
        arr = noise_batch(arr, NoiseSpec.constant(args.noise_sigma), _counter_rng(args.seed))
    if args.rae_stats is not None:
        st = data_io.read_stats(args.rae_stats)
        arr = (arr - st.mu) / st.sigma
    if args.src_ckpt is not None:
        src_model = data_io.load_src(args.src_ckpt)
        with torch.no_grad():
            arr = src_model.encode(torch.from_numpy(arr).to(torch.float32)).cpu().numpy().astype(np.float64)
    if args.compact_stats is not None:
        st = data_io.read_stats(args.compact_stats)
        arr = (arr - st.mu) / st.sigma
    return arr


def _per_example_nll(args, ckpt_path, ds):
    from .flow import nll_batch

    model = data_io.load_flow(ckpt_path)
    arr = _prepare_compact(args, ds)
    labels = None if ds.labels is None else np.asarray(ds.labels)
    lnf = nll_batch(arr, labels, model)
    dim = model.config.N * model.config.d
    full = lnf + gaussian_constant(model.config.N, model.config.d)
    return lnf, full, full / dim


def _cmd_nll(args) -> int:
    ds = data_io.read_dataset(args.data)
    lnf, full, per_dim = _per_example_nll(args, args.ckpt, ds)
    labels = ds.labels if ds.labels is not None else [""] * len(ds)
    rows = [[i, labels[i], lnf[i], full[i], per_dim[i]] for i in range(len(ds))]
    _write_csv(args.out, ["index", "label", "flow_loss", "full_nll", "nll_per_dim"], rows)
    return 0


def _cmd_verify(args) -> int:
    from .verify import standard_suite

    reports = standard_suite(seed=args.seed, precision=args.precision)
    rows = [r.row() for r in reports]
    if args.out is not None:
        _write_csv(args.out, ["check", "status", "value", "tolerance", "seconds"], rows)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: value={r.value:.3e} tol={r.tolerance:.3e}")
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_report(args) -> int:
    ds = data_io.read_dataset(args.data)
    rows = []
    means = {}
    for schedule, ckpt in (("constant", args.ckpt_const), ("per_sample", args.ckpt_persample)):
        _, _, per_dim = _per_example_nll(args, ckpt, ds)
        means[schedule] = float(np.mean(per_dim))
        rows.append([schedule, means[schedule]])
    winner = "constant" if means["constant"] <= means["per_sample"] else "per_sample"
    rows.append(["winner", winner])
    _write_csv(args.out, ["schedule", "test_nll_per_dim"], rows)
    print(f"constant={means['constant']:.5f} per_sample={means['per_sample']:.5f} winner={winner}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "stats": _cmd_stats,
    "pca": _cmd_pca,
    "train-src": _cmd_train_src,
    "train-flow": _cmd_train_flow,
    "sample": _cmd_sample,
    "nll": _cmd_nll,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def run(argv) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (data_io.FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
