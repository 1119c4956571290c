"""Command-line entry point: ``reconnet <subcommand> [flags]``.

Exit codes: 0 success, 2 input error, 3 numerical divergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import datapipe, evalkit, models, sensing, training
from .tensor import Prng

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_USAGE = 0, 2, 3, 64

VARIANTS = ("euc", "euc-adv", "euc-learnphi", "euc-adv-learnphi")
EUCLIDEAN_ITERS = 10_000
GAN_ITERS = 100_000
FINETUNE_ITERS = 1000

INPUT_ERRORS = (OSError, ValueError, KeyError, datapipe.ImageFormatError, datapipe.DatasetError,
                models.CheckpointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rate(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"measurement rate must be in (0, 1], got {text}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in [0, 1), got {text}")
    return v


def _sigmas(text):
    try:
        vals = tuple(float(s) for s in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from exc
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be non-negative")
    return vals


def _repeats(text):
    v = int(text)
    if v < 3:
        raise argparse.ArgumentTypeError("bench needs --repeats >= 3")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reconnet", description="Block compressive-sensing reconstruction networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="extract 33x33 training patches from a directory of images")
    s.add_argument("--images", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--stride", type=_positive, default=datapipe.PATCH_STRIDE)
    s.add_argument("--val-frac", type=_fraction, default=0.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a reconstruction network")
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--mr", type=_rate, required=True)
    s.add_argument("--dataset", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--circulant", type=_positive, metavar="GAMMA",
                   help="use a bank of GAMMA circulant layers as the first stage")
    s.add_argument("--iters", type=_positive,
                   help=f"default {EUCLIDEAN_ITERS} (Euclidean) or {GAN_ITERS} (adversarial)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fc-init", choices=("random", "phit"), default="phit")
    s.add_argument("--batch", type=_positive, default=128)
    s.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd",
                   help="optimizer for Euclidean variants; adversarial variants always use Adam")
    s.add_argument("--lr", type=_non_negative, default=1e-4, help="Euclidean learning rate")
    s.add_argument("--lambda-adv", type=_non_negative, default=1e-4)
    s.add_argument("--g-steps", type=_positive, default=2)
    s.add_argument("--lr-g", type=_non_negative, default=1e-3)
    s.add_argument("--lr-d", type=_non_negative, default=1e-5)
    s.add_argument("--units", type=_positive, help="ReconNet units (default 2, or 1 for adversarial)")

    s = sub.add_parser("finetune-fc", help="retrain only the FC layer for a new measurement matrix")
    s.add_argument("--base", required=True, type=Path)
    s.add_argument("--mr", type=_rate, required=True)
    s.add_argument("--dataset", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--iters", type=_positive, default=FINETUNE_ITERS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=_positive, default=128)
    s.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    s.add_argument("--lr", type=_non_negative, default=1e-4)

    s = sub.add_parser("reconstruct", help="sense and reconstruct one image")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--input", required=True, type=Path)
    s.add_argument("--output", required=True, type=Path)
    s.add_argument("--sigma", type=_non_negative, default=0.0, help="noise std on the 0-255 scale")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="PSNR sweep over test images and noise levels")
    s.add_argument("--models", required=True, nargs="+", type=Path)
    s.add_argument("--testdir", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--sigmas", type=_sigmas, default=evalkit.DEFAULT_SIGMAS)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("bench", help="median reconstruction time of one square image")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--side", type=_positive, default=256)
    s.add_argument("--repeats", type=_repeats, default=11)
    return p


# --- commands ----------------------------------------------------------------


def cmd_make_dataset(args):
    if not args.images.is_dir():
        raise FileNotFoundError(f"{args.images}: not a directory")
    paths = datapipe.list_images(args.images)
    if not paths:
        raise ValueError(f"{args.images}: no images found")
    ds = datapipe.dataset_from_images(paths, stride=args.stride)
    ds = datapipe.split_train_val(ds, args.val_frac, args.seed)
    datapipe.save_dataset(ds, args.out)
    n_val = int((ds.split == datapipe.VAL).sum())
    print(f"{len(ds)} patches from {len(paths)} images ({len(ds) - n_val} train, {n_val} validation)")


def _training_set(path):
    ds = datapipe.load_dataset(path)
    train = ds.train()
    if len(train) == 0:
        raise ValueError(f"{path}: no training patches")
    return train


def _history_path(out: Path) -> Path:
    return out.with_name(out.stem + "_history.csv")


def cmd_train(args):
    adversarial = args.variant.startswith("euc-adv")
    learn_phi = args.variant.endswith("learnphi")
    units = args.units or (1 if adversarial else 2)
    first = "circulant" if args.circulant else "fc"
    spec = models.ReconNetSpec(args.mr, units, first, args.circulant or 1)
    ds = _training_set(args.dataset)

    root = Prng(args.seed)
    phi = sensing.gen_gaussian_orthonormal(mr=args.mr, seed=args.seed)
    if phi.m != spec.measurements:
        raise ValueError("measurement count mismatch")
    init = "phit" if args.fc_init == "phit" and first == "fc" else "gaussian"
    net = models.build_reconnet(spec, root.substream(1), init=init, phi=phi)
    encoder = models.build_encoder(phi.m, root.substream(2), init_phi=phi) if learn_phi else None
    iters = args.iters or (GAN_ITERS if adversarial else EUCLIDEAN_ITERS)

    if adversarial:
        disc = models.build_discriminator(root.substream(3))
        cfg = training.GanConfig(lambda_adv=args.lambda_adv, lr_g=args.lr_g, lr_d=args.lr_d,
                                 g_steps_per_d=args.g_steps, iterations=iters,
                                 batch_size=args.batch, seed=args.seed)
        _, _, hist = training.train_adversarial(net, disc, ds, phi, cfg, encoder=encoder)
        training.write_history_csv(_history_path(args.out), hist.g_loss, hist.d_loss, hist.g_adv)
        final = hist.g_rec[-1]
    else:
        cfg = training.TrainConfig(batch_size=args.batch, iterations=iters, learning_rate=args.lr,
                                   optimizer=args.optimizer, seed=args.seed)
        if learn_phi:
            _, _, loss = training.train_autoencoder(encoder, net, ds, cfg)
        else:
            _, loss = training.train_euclidean(net, ds, phi, cfg)
        training.write_history_csv(_history_path(args.out), loss)
        final = loss[-1]
    if encoder is not None:
        phi = encoder.export_phi(args.mr)
    models.save_checkpoint(net, args.out, phi, {"variant": args.variant, "seed": args.seed,
                                                "iterations": iters})
    print(f"trained {args.variant} at MR {args.mr:g} for {iters} iterations; "
          f"final reconstruction loss {final:.6g}; wrote {args.out}")


def cmd_finetune_fc(args):
    base = models.load_checkpoint(args.base)
    if base.model.spec.first_stage != "fc":
        raise ValueError(f"{args.base}: FC-only retraining needs an FC first stage")
    ds = _training_set(args.dataset)
    phi = sensing.gen_gaussian_orthonormal(mr=args.mr, seed=args.seed)
    cfg = training.TrainConfig(batch_size=args.batch, learning_rate=args.lr,
                               optimizer=args.optimizer, seed=args.seed)
    model = training.finetune_fc(base.model, phi, ds, cfg, iterations=args.iters)
    variant = base.metadata.get("variant", "euc")
    models.save_checkpoint(model, args.out, phi, {"variant": f"{variant}-ft", "seed": args.seed,
                                                  "base": args.base.name, "iterations": args.iters})
    print(f"fine-tuned FC for MR {args.mr:g} over {args.iters} iterations; wrote {args.out}")


def _checkpoint_with_phi(path):
    ckpt = models.load_checkpoint(path)
    if ckpt.phi is None:
        raise ValueError(f"{path}: checkpoint has no measurement matrix")
    return ckpt


def cmd_reconstruct(args):
    ckpt = _checkpoint_with_phi(args.model)
    img = datapipe.read_image(args.input)
    rec, secs = evalkit.reconstruct_image(ckpt.model, ckpt.phi, img, sensing.NoiseSpec(args.sigma),
                                          Prng(args.seed))
    datapipe.write_pgm(rec, args.output)
    print(f"PSNR {evalkit.format_psnr(evalkit.psnr(img, rec))} dB in {secs:.4f} s; wrote {args.output}")


def cmd_eval(args):
    table = {}
    for path in args.models:
        ckpt = _checkpoint_with_phi(path)
        key = (ckpt.metadata.get("variant", path.stem), ckpt.model.spec.mr)
        if key in table:
            key = (path.stem, key[1])
        table[key] = (ckpt.model, ckpt.phi)
    paths = datapipe.list_images(args.testdir)
    if not paths:
        raise ValueError(f"{args.testdir}: no images found")
    images = {p.name: datapipe.read_image(p) for p in paths}
    mrs = sorted({mr for _, mr in table})
    report = evalkit.run_eval(table, images, mrs, args.sigmas, args.out, seed=args.seed)
    for variant, mr in sorted(table):
        for sigma in args.sigmas:
            mean = report.mean_psnr(variant=variant, mr=mr, sigma=sigma)
            print(f"{variant} MR {mr:g} sigma {sigma:g}: mean PSNR {mean:.2f} dB")
    print(f"wrote {len(report.rows)} rows to {args.out}")


def cmd_bench(args):
    ckpt = _checkpoint_with_phi(args.model)
    secs = evalkit.bench(ckpt.model, ckpt.phi, args.side, args.repeats)
    print(f"median {secs:.4f} s for a {args.side}x{args.side} image over {args.repeats} runs")


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "finetune-fc": cmd_finetune_fc,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except training.TrainingDiverged as exc:
        print(f"error: training diverged at iteration {exc.iteration} (loss {exc.loss})", file=sys.stderr)
        return EXIT_DIVERGED
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
