"""Command-line entry point.

Exit codes: 0 ok, 1 selftest failure, 2 I/O error, 3 empty input,
4 usage error, 5 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_SELFTEST, EXIT_IO, EXIT_EMPTY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5
THREADS_ENV = "FREQSEG_THREADS"

log = logging.getLogger("freqseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}; use 1..5 or 1,2,3") from None


# ----------------------------------------------------------------------------
# freqstats / synth


def cmd_freqstats(args) -> int:
    from .freqstats import dataset_summary, image_freq_summary, partition_spectrum, write_dataset_csv, write_image_csv
    from .netpbm import load_image_gray
    from .tensor import FormatError

    part = partition_spectrum(args.block)
    if args.mode == "image":
        paths = [Path(args.path)]
    else:
        root = Path(args.path)
        if not root.is_dir():
            print(f"not a directory: {root}", file=sys.stderr)
            return EXIT_IO
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm") and p.is_file())
        if not paths:
            print(f"no .pgm/.ppm files in {root}", file=sys.stderr)
            return EXIT_EMPTY
    summaries = []
    for p in paths:
        try:
            img = load_image_gray(p)
            summaries.append(image_freq_summary(img, part, name=p.name))
        except (OSError, FormatError, ValueError) as exc:
            print(f"{p}: {exc}", file=sys.stderr)
            return EXIT_IO
    out = Path(args.out or ("freqstats_image.csv" if args.mode == "image" else "freqstats_images.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image_csv(out, summaries)
    for s in summaries:
        print(s.name + "," + ",".join(f"{v:.6g}" for v in s.region_means))
    if args.mode == "dataset":
        if len(summaries) < 2:
            print("dataset summary needs at least 2 images", file=sys.stderr)
            return EXIT_EMPTY
        summ = dataset_summary(summaries)
        summary_out = Path(args.summary_out or out.with_name(out.stem + "_summary.csv"))
        write_dataset_csv(summary_out, summ)
        for r, m, v in zip(("L", "M1", "M2", "H"), summ.mean_of_means, summ.variance):
            print(f"{r}: mean={m:.6g} variance={v:.6g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .netpbm import save_image
    from .synth import render_scene

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        sc = render_scene(args.seed, i, args.style, args.size, args.classes)
        save_image(out / f"scene_{i:04d}.ppm", sc.image.transpose(1, 2, 0))
        if args.labels:
            save_image(out / f"labels_{i:04d}.pgm", sc.labels.astype(np.uint8))
    _write_csv(out / "synth.csv", ["style", "count", "seed", "size", "classes"],
               [[args.style, args.count, args.seed, args.size, args.classes]])
    print(f"wrote {args.count} {args.style} scenes to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# selftest


def run_selftest(seed: int = 0, break_dct: bool = False) -> list[tuple[str, float, float]]:
    """(check name, max error, threshold) for every bundled check."""
    from . import dct
    from .dct import DctBasis, MultiSpectralVector, dct2_direct
    from .modules import LfeParams, LossConfig, SffParams, lfe_forward, seg_losses, sff_forward
    from .tensor import Param, grad_check, square, weighted_sum

    rng = np.random.default_rng(seed)
    results = []

    def basis(N):
        b = dct.make_basis(N)
        if break_dct:
            m = b.basis1d.copy()
            m[1, 0] *= 1.01
            b = DctBasis(N, m)
        return b

    err = 0.0
    for N in (2, 4, 8, 16):
        m = basis(N).basis1d
        err = max(err, float(np.abs(m @ m.T - np.eye(N)).max()))
    results.append(("dct_orthonormality", err, 1e-12))

    b8 = basis(8)
    blocks = rng.normal(size=(100, 8, 8))
    spec = dct.dct2(blocks, b8).data
    parseval = float(np.max(np.abs((blocks ** 2).sum(axis=(1, 2)) - (spec ** 2).sum(axis=(1, 2)))
                            / (blocks ** 2).sum(axis=(1, 2))))
    results.append(("dct_parseval", parseval, 1e-9))
    back = dct.idct2(spec, b8).data
    results.append(("dct_round_trip", float(np.abs(back - blocks).max()), 1e-9))
    direct = dct2_direct(blocks[0])
    results.append(("dct_vs_direct_sum", float(np.abs(spec[0] - direct).max()), 1e-12))

    # gradient checks
    C, n = 32, 16
    v = Param(rng.normal(size=(2, C)))
    lfe = LfeParams.create(n, C // n, rng)

    def lfe_loss():
        out, _ = lfe_forward(MultiSpectralVector(v, n), lfe)
        return square(out.values).sum()

    results.append(("grad_lfe", grad_check(lfe_loss, [v, lfe.lfcc_weight, lfe.gamma]), 1e-5))

    ctx = Param(rng.normal(size=(2, 6, 3, 3)))
    vf = Param(rng.normal(size=(2, 8)))
    sff = SffParams.create(6, 8, 5, rng)
    sff.alpha.data[:] = rng.normal()
    proj = rng.normal(size=(2, 5, 3, 3))
    results.append(("grad_sff", grad_check(
        lambda: weighted_sum(sff_forward(ctx, MultiSpectralVector(vf, 4), sff), proj), [ctx, vf, *sff.params()]
    ), 1e-5))

    logits = Param(rng.normal(size=(2, 3, 8, 8)))
    labels = rng.integers(0, 3, size=(2, 8, 8))
    results.append(("grad_seg_losses", grad_check(lambda: seg_losses(logits, labels)[0], [logits]), 1e-5))

    net, images, net_labels = gradcheck_network(seed)
    results.append(("grad_full_net", grad_check(
        lambda: seg_losses(net.forward(images), net_labels, LossConfig())[0], checkable_params(net)
    ), 1e-5))
    return results


def gradcheck_network(seed: int):
    """Reduced-width network and 2-image batch used for whole-model gradient checks."""
    from .synth import render_scene
    from .tensor import Tensor
    from .toynet import ToyNet, ToyNetConfig

    cfg = ToyNetConfig(input_size=16, widths=(4, 4, 4), ppm_bins=(1, 2), context_width=4,
                       fusion_width=4, dct_size=2, classes=3, variant="fdl")
    net = ToyNet.create(cfg, seed)
    rng = np.random.default_rng(seed)
    net.params["sff.alpha"].data[:] = rng.uniform(0.5, 1.0)
    for name, p in net.params.items():
        if name.endswith("bias"):
            p.data[:] = rng.normal(0.0, 0.1, p.shape)
    scenes = [render_scene(seed, i, "night", 16, 3) for i in range(2)]
    return net, Tensor(np.stack([s.image for s in scenes])), np.stack([s.labels for s in scenes])


def checkable_params(net):
    """All parameters except the encoder's normalization shift, whose gradient is identically zero."""
    return [p for name, p in net.params.items() if name != "lfe.beta"]


def cmd_selftest(args) -> int:
    results = run_selftest(args.seed, args.break_dct)
    failures = []
    rows = []
    for name, err, tol in results:
        ok = err < tol
        rows.append([name, repr(err), repr(tol), "pass" if ok else "FAIL"])
        print(f"{name:22s} max_error={err:.3e} threshold={tol:.0e} {'pass' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    _write_csv(args.out, ["check", "max_error", "threshold", "status"], rows)
    if failures:
        print("failed checks: " + ", ".join(failures), file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


# ----------------------------------------------------------------------------
# train / eval / ablate


def _configs(args):
    from .modules import LossConfig
    from .toynet import ToyNetConfig, parse_variant
    from .train import AblationConfig, TrainConfig

    loss = LossConfig(lambda1=args.lambda1, lambda2=args.lambda2, ohem_enabled=args.ohem,
                      ohem_keep_fraction=args.keep_fraction)
    train_cfg = TrainConfig(base_lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                            seed=getattr(args, "seed", 0), threads=args.threads, loss=loss)
    variant = parse_variant(getattr(args, "variant", "fdl"))
    net_cfg = ToyNetConfig(input_size=args.size, dct_size=args.dct_size, classes=args.classes, variant=variant)
    return AblationConfig(net_cfg, train_cfg, args.train_count, args.test_count, args.style)


def _parse_data_spec(text: str) -> tuple[str, int, int]:
    try:
        style, count, seed = text.split(":")
        if style not in ("day", "night"):
            raise ValueError
        return style, int(count), int(seed)
    except ValueError:
        raise UsageError(f"bad data spec {text!r}; expected STYLE:COUNT:SEED, e.g. night:100:7") from None


def cmd_train(args) -> int:
    from .modules import write_lfe_weights_csv
    from .dct import zigzag_order
    from .toynet import ToyNet
    from .train import TrainingDiverged, datasets_for_seed, evaluate_net, save_checkpoint, train

    cfg = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = datasets_for_seed(args.seed, cfg)
    net = ToyNet.create(cfg.net, seed=args.seed)
    try:
        tlog = train(net, train_set, cfg.train, out_dir=out / "checkpoint")
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGED
    tlog.write_csv(out / "train_log.csv")
    save_checkpoint(out / "checkpoint", net)
    if tlog.epoch_weights and tlog.epoch_weights[-1] is not None:
        write_lfe_weights_csv(out / "lfe_weights.csv", tlog.epoch_weights[-1], zigzag_order(cfg.net.dct_size))
    res = evaluate_net(net, test_set)
    _write_csv(out / "metrics.csv", ["split", "class", "iou"],
               [["test", c, repr(float(v))] for c, v in enumerate(res.iou)] + [["test", "mean", repr(res.miou)]])
    print(f"final_loss={float(tlog.final_loss)!r}")
    print(f"miou={res.miou!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import synth_dataset
    from .train import evaluate_net, load_checkpoint

    style, count, seed = _parse_data_spec(args.data)
    try:
        net = load_checkpoint(args.ckpt)
    except (OSError, ValueError) as exc:
        print(f"{args.ckpt}: {exc}", file=sys.stderr)
        return EXIT_IO
    scenes = synth_dataset(count, seed, style, net.cfg.input_size, net.cfg.classes)
    res = evaluate_net(net, scenes)
    out = Path(args.out or Path(args.ckpt) / "eval.csv")
    _write_csv(out, ["data", "class", "iou"],
               [[args.data, c, repr(float(v))] for c, v in enumerate(res.iou)] + [[args.data, "mean", repr(res.miou)]])
    for c, v in enumerate(res.iou):
        print(f"class {c}: iou={v:.4f}")
    print(f"miou={res.miou!r}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .toynet import parse_variant
    from .train import TrainingDiverged, ablation_run, summarize, write_ablation_csv

    variants = [parse_variant(v) for v in args.variants.split(",") if v]
    seeds = _seeds(args.seeds)
    if not variants or not seeds:
        raise UsageError("need at least one variant and one seed")
    cfg = _configs(args)
    try:
        rows = ablation_run(variants, seeds, cfg)
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGED
    write_ablation_csv(args.out, rows)
    stats = summarize(rows)
    _write_csv(Path(args.out).with_name(Path(args.out).stem + "_summary.csv"), ["variant", "mean_miou", "std_miou"],
               [[v, repr(m), repr(s)] for v, (m, s) in stats.items()])
    for v, (m, s) in stats.items():
        print(f"{v}: mean={m:.4f} std={s:.4f} over {len(seeds)} seeds")
    print(f"miou={float(np.mean([r[2] for r in rows]))!r}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def _add_training_flags(p, epochs_default=40):
    p.add_argument("--epochs", type=int, default=epochs_default)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-3, help="base learning rate of the poly schedule")
    p.add_argument("--lambda1", type=float, default=1.0, help="segmentation loss weight")
    p.add_argument("--lambda2", type=float, default=0.01, help="edge loss weight")
    p.add_argument("--ohem", action="store_true", help="keep only the hardest pixels in the segmentation loss")
    p.add_argument("--keep-fraction", type=float, default=0.25)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--test-count", type=int, default=100)
    p.add_argument("--style", choices=("day", "night"), default="night")
    p.add_argument("--size", type=int, default=64, help="input image side")
    p.add_argument("--dct-size", type=int, default=8, help="DCT block size N (n = N*N components)")
    p.add_argument("--classes", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freqseg", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("freqstats", help="block-DCT region statistics of netpbm images")
    p.add_argument("mode", choices=("image", "dataset"))
    p.add_argument("path")
    p.add_argument("--out", help="per-image CSV path")
    p.add_argument("--summary-out", help="dataset summary CSV (default: <out>_summary.csv)")
    p.add_argument("--block", type=int, default=8)
    p.set_defaults(func=cmd_freqstats)

    p = sub.add_parser("synth", help="write a synthetic day/night corpus as PPM files")
    p.add_argument("--style", choices=("day", "night"), required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--labels", action="store_true", help="also write label maps as PGM")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="numeric identities and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-dct", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", default="selftest.csv")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("train", help="train one network variant")
    p.add_argument("--variant", default="fdl", help="baseline | fdl | top_k:K | static_all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="STYLE:COUNT:SEED of the synthetic evaluation set")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variants x seeds comparison")
    p.add_argument("--variants", required=True, help="comma-separated, e.g. fdl,baseline,static_all")
    p.add_argument("--seeds", required=True, help="1..5 or 1,2,3")
    p.add_argument("--out", default="ablation.csv")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _thread_count(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    return int(env) if env and env.isdigit() else 1


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .dct import ConfigurationError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args.threads = max(1, _thread_count(args))
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"freqseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"freqseg: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
