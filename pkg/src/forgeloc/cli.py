"""Command-line entry point: ``forgeloc <subcommand> ...``.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .errors import FileMissing, ForgelocError, SchemaError, UsageError

log = logging.getLogger("forgeloc")

SUBCOMMANDS = ("synth", "pretrain-codec", "train", "eval", "robustness", "ablate", "theory", "version")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _versions() -> dict:
    import numpy
    import torch

    from .robustness import codec_version

    return {"forgeloc": __version__, "torch": torch.__version__, "numpy": numpy.__version__,
            "jpeg_codec": codec_version(), "python": sys.version.split()[0]}


def write_run_manifest(out_dir, command: str, config: dict, seeds: dict, argv) -> Path:
    from .checkpoint import config_hash

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash(config),
        "config": config,
        "seeds": seeds,
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def apply_overrides(config: dict, overrides, allowed=None) -> dict:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    allowed = set(config) if allowed is None else set(allowed)
    config = dict(config)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in allowed:
            raise UsageError(f"--set: unknown config key {key!r}; known keys: {sorted(allowed)}")
        try:
            config[key] = json.loads(raw)
        except json.JSONDecodeError:
            config[key] = raw
    return config


# ------------------------------------------------------------------- plots

def _plot_lines(path, series: dict, xlabel: str, ylabel: str, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_overlays(path, images, masks, probs, n: int = 4):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = min(n, len(images))
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        for ax, img, title in zip(axes[i], (images[i], masks[i], probs[i]), ("image", "mask", "prediction")):
            ax.imshow(img, cmap=None if img.ndim == 3 else "gray", vmin=0, vmax=1)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------- commands

def cmd_synth(args, argv):
    from .data import KINDS, synthesize_dataset

    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise UsageError(f"--kinds: unknown kind(s) {bad}; choose from {KINDS}")
    if args.size < 32:
        raise UsageError("--size must be >= 32")
    seeds = range(args.seed, args.seed + args.count)
    manifest = synthesize_dataset(args.out, seeds, kinds, args.size, args.split)
    write_run_manifest(args.out, "synth", {"count": args.count, "size": args.size, "kinds": kinds,
                                           "split": args.split}, {"seed": args.seed}, argv)
    print(f"wrote {len(manifest)} records to {Path(args.out) / 'manifest.jsonl'}")


def cmd_pretrain_codec(args, argv):
    from .codec import CodecConfig, pretrain_codec
    from .data import read_manifest

    cfg = apply_overrides(asdict(CodecConfig()), args.set)
    cfg["widths"] = tuple(cfg["widths"])
    config = CodecConfig(**cfg)
    result = pretrain_codec(read_manifest(args.manifest), config)
    out = Path(args.out)
    result.codec.save(out, {"config": asdict(config), "curve": result.curve})
    with open(out / "pretrain_log.jsonl", "w") as fh:
        for row in result.curve:
            fh.write(json.dumps(row) + "\n")
    _plot_lines(out / "pretrain_loss.png", {"loss": ([r["epoch"] for r in result.curve],
                                                     [r["loss"] for r in result.curve])},
                "epoch", "MSE", "codec pretraining")
    write_run_manifest(out, "pretrain-codec", asdict(config), {"seed": config.seed}, argv)
    print(f"codec saved to {out} (hash {result.codec.content_hash()[:12]})")


def _train_config(args):
    from .train import TrainConfig

    base = TrainConfig.from_json(args.config).to_dict() if args.config else TrainConfig().to_dict()
    cfg = apply_overrides(base, args.set, allowed=[f.name for f in fields(TrainConfig)])
    if getattr(args, "codec", None):
        cfg["codec_checkpoint"] = str(Path(args.codec).resolve())
    return TrainConfig.from_dict(cfg)


def cmd_train(args, argv):
    from .data import read_manifest
    from .train import train

    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = train(config, read_manifest(args.manifest), log_path=out / "train_log.jsonl")
    model.save(out)
    _plot_lines(out / "loss_curve.png",
                {k: ([h["epoch"] for h in model.history], [h[k] for h in model.history]) for k in ("lm", "loc", "total")},
                "epoch", "loss", "training loss")
    write_run_manifest(out, "train", config.to_dict(), {"seed": config.seed}, argv)
    print(f"checkpoint saved to {out}; final total loss {model.history[-1]['total']:.4f}")


def cmd_eval(args, argv):
    from .data import read_manifest
    from .train import ModelCheckpoint, evaluate, infer_batch, load_arrays

    model = ModelCheckpoint.load(args.checkpoint)
    manifest = read_manifest(args.manifest)
    report = evaluate(model, manifest)
    out = Path(args.out)
    report.write(out / "eval_report.json", csv_mirror=True)
    images, masks = load_arrays(manifest.head(4))
    _plot_overlays(out / "overlays.png", images, masks, list(infer_batch(model, images)))
    write_run_manifest(out, "eval", model.config.to_dict(), {"seed": model.config.seed}, argv)
    s = report.summary["none"]
    print(f"F1 {s['f1']:.4f}  complement-F1 {s['f1_complement_max']:.4f}  IoU {s['iou']:.4f}  (n={s['count']})")


def cmd_robustness(args, argv):
    from .data import read_manifest
    from .robustness import parse_grid, run_suite
    from .train import ModelCheckpoint

    model = ModelCheckpoint.load(args.checkpoint)
    cells = parse_grid(args.grid)
    report = run_suite(model, read_manifest(args.manifest), cells, seed=args.seed)
    out = Path(args.out)
    report.write(out / "robustness_report.json", csv_mirror=True)
    series = {}
    for kind, label in (("gaussian_noise", "noise σ"), ("jpeg", "JPEG quality"), ("resize", "resize factor")):
        pts = [(float(c.parameter), report.summary[c.tag]["f1_complement_max"]) for c in cells if c.kind == kind]
        if pts:
            series[label] = ([p[0] for p in pts], [p[1] for p in pts])
    if series:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, len(series), figsize=(4 * len(series), 3.2), squeeze=False)
        for ax, (label, (xs, ys)) in zip(axes[0], series.items()):
            ax.plot(xs, ys, marker="o")
            ax.axhline(report.summary["none"]["f1_complement_max"], ls="--", c="gray")
            ax.set_xlabel(label)
            ax.set_ylabel("F1")
        fig.tight_layout()
        fig.savefig(out / "robustness.png", metadata={"Software": None})
        plt.close(fig)
    write_run_manifest(out, "robustness", {"grid": args.grid, **model.config.to_dict()}, {"seed": args.seed}, argv)
    for tag, row in report.summary.items():
        print(f"{tag:>14s}  F1 {row['f1_complement_max']:.4f}")


def cmd_ablate(args, argv):
    from .data import read_manifest
    from .train import ABLATIONS, run_ablation

    config = _train_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v != "full" and v not in ABLATIONS]
    if bad:
        raise UsageError(f"--variants: unknown variant(s) {bad}")
    rows = run_ablation(config, read_manifest(args.manifest), read_manifest(args.test_manifest), variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "ablate", config.to_dict(), {"seed": config.seed}, argv)
    for r in rows:
        print(f"{r['variant']:>18s}  F1 {r['f1']:.4f}")


def cmd_theory(args, argv):
    from .theory import theory_report

    report = theory_report(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "theory_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "theory", {}, {"seed": args.seed}, argv)
    print(f"fold_max_err {report['fold_max_err']:.3e}  jensen_gap_min {report['jensen_gap_min']:.3e}  "
          f"mi_gain_min {report['mi_gain_min']:.3e}")


def cmd_version(args, argv):
    for k, v in _versions().items():
        print(f"{k}: {v}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="forgeloc", description="Forgery localization in a frozen latent space.", formatter_class=fmt)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic forgery dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=100, help="number of records")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--kinds", default="copy-move,splice,inpaint", help="comma-separated kinds, cycled")
    s.add_argument("--seed", type=int, default=0, help="first seed; records use seed..seed+count-1")
    s.add_argument("--split", default="train", choices=["train", "val", "test"], help="manifest split")

    s = sub.add_parser("pretrain-codec", help="pretrain and freeze the latent codec", formatter_class=fmt)
    s.add_argument("--manifest", required=True, help="manifest of pristine images and masks")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="codec config override")

    for name, help_ in (("train", "train the mapping networks"), ("ablate", "train and score ablation variants")):
        s = sub.add_parser(name, help=help_, formatter_class=fmt)
        s.add_argument("--config", default=None, help="JSON TrainConfig file (unknown keys rejected)")
        s.add_argument("--codec", default=None, help="frozen codec checkpoint directory")
        s.add_argument("--manifest", required=True, help="training manifest")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        if name == "ablate":
            s.add_argument("--test-manifest", required=True, help="held-out manifest for scoring")
            s.add_argument("--variants", default="full,no_srm_flmm,no_vae_lmm,no_lmm,no_codec_pretrain",
                           help="comma-separated variants")

    s = sub.add_parser("eval", help="score a checkpoint on a manifest", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="mapping-network checkpoint directory")
    s.add_argument("--manifest", required=True, help="evaluation manifest")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("robustness", help="evaluate under a degradation grid", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="mapping-network checkpoint directory")
    s.add_argument("--manifest", required=True, help="evaluation manifest")
    s.add_argument("--grid", default="noise=0.1,0.3,0.5;jpeg=70,80,90;resize=0.7,0.8,0.9;osn=light,medium,heavy",
                   help="grid spec")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("theory", help="run the numerical theory checks", formatter_class=fmt)
    s.add_argument("--out", default="theory_out", help="output directory")
    s.add_argument("--seed", type=int, default=0, help="seed for random cases")

    sub.add_parser("version", help="print package and codec versions", formatter_class=fmt)
    return p


_COMMANDS = {
    "synth": cmd_synth, "pretrain-codec": cmd_pretrain_codec, "train": cmd_train, "eval": cmd_eval,
    "robustness": cmd_robustness, "ablate": cmd_ablate, "theory": cmd_theory, "version": cmd_version,
}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    import torch

    torch.set_num_threads(args.threads)
    try:
        _COMMANDS[args.command](args, argv)
    except (UsageError, SchemaError, FileMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ForgelocError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
