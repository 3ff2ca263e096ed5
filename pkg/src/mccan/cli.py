"""Command line entry point: synth, train, eval, walk, enumerate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_datasets, load_run_config
from .cycles import DomainChain, Variant, compile_loss_graph, enumerate_cycles, term_counts
from .data import load_manifest, read_pgm, save_dataset, write_manifest
from .evaluate import cycle_walk, denoise, evaluate_dataset, write_report_csv, write_strip
from .train import load_checkpoint, train

log = logging.getLogger("mccan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        changes["variant"] = args.variant
    if getattr(args, "k", None) is not None:
        changes["k"] = args.k
    if getattr(args, "out", None) is not None:
        changes["out"] = args.out
    if getattr(args, "steps", None) is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    return replace(cfg, **changes) if changes else cfg


def _write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.dumps())


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out)
    train_sets, test = build_datasets(replace(cfg, variant=Variant.MCCAN.value))
    entries = []
    for ds in train_sets:
        entries += save_dataset(ds, out / "train")
    write_manifest(out / "train" / "manifest.json", entries)
    write_manifest(out / "test" / "manifest.json", save_dataset(test, out / "test"))
    _write_config(cfg, out)
    print(f"wrote {len(entries)} training and {len(test)} test images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out)
    if args.data:
        by_domain = load_manifest(Path(args.data) / "train" / "manifest.json")
        missing = [d for d in cfg.chain.domains if d not in by_domain]
        if missing:
            raise UsageError(f"dataset {args.data} has no images for domain(s) {missing}")
        datasets = [by_domain[d] for d in cfg.chain.domains]
    else:
        datasets, _ = build_datasets(cfg)
    _write_config(cfg, out)
    state, metrics = train(cfg.train, datasets, chain=cfg.chain, arch=cfg.arch, out_dir=out,
                           extra_manifest=cfg.to_dict(), progress=True)
    last = metrics[-1] if metrics else None
    msg = f"trained {cfg.variant} for {state.step} steps -> {out / 'checkpoint'}"
    if last:
        msg += f" (adv_G={last.adv_G:.4f} adv_D={last.adv_D:.4f} cyc={last.cyc:.4f})"
    print(msg)
    return EXIT_OK


def _load_state(path):
    path = Path(path)
    if not (path / "manifest.json").is_file() and (path / "checkpoint" / "manifest.json").is_file():
        path = path / "checkpoint"
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    state, _, manifest = _load_state(args.checkpoint)
    chain = state.bank.chain
    data = Path(args.data)
    mpath = data / "test" / "manifest.json" if (data / "test").is_dir() else data / "manifest.json"
    by_domain = load_manifest(mpath)
    noisy = chain.noisy
    if noisy not in by_domain or by_domain[noisy].rois is None:
        raise UsageError(f"{mpath} has no ROI-annotated images for domain {noisy}")
    ds = by_domain[noisy]
    summary = evaluate_dataset(state.bank, chain, ds.images, ds.rois)
    out = Path(args.out or Path(args.checkpoint) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    names = [f"{noisy}_{i:04d}" for i in range(len(ds))]
    write_report_csv(out / "roi_report.csv", summary.per_image, names)
    doc = {"variant": manifest["train"]["variant"], "step": manifest["step"],
           "area_normalized_mean": summary.area_mean, "area_normalized_sd": summary.area_sd,
           "mean_normalized_sd": summary.mean_normalized_sd}
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    strips = [np.concatenate([img, denoise(state.bank, img, chain)], axis=1) for img in ds.images[:4]]
    write_strip(out / "strip.pgm", [np.concatenate(strips, axis=0)])
    print(f"mean normalized SD {summary.mean_normalized_sd:.3f}; "
          f"normalized means {', '.join(f'{v:.3f}' for v in summary.area_mean.values())}")
    return EXIT_OK


def cmd_walk(args) -> int:
    state, _, _ = _load_state(args.checkpoint)
    image = Path(args.image)
    if not image.is_file():
        raise FileNotFoundError(f"image not found: {image}")
    x = read_pgm(image)
    out = Path(args.out or Path(args.checkpoint) / "walk")
    walk = cycle_walk(state.bank, x, out)
    print(" -> ".join(d for d, _ in walk) + f"  ({len(walk)} images in {out})")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    if args.chain:
        chain = DomainChain.parse(args.chain)
    elif args.variant == Variant.CCADN.value:
        chain = DomainChain(("X", "Y"))
    else:
        chain = DomainChain.with_intermediates(args.k if args.k is not None else 1)
    cycles = enumerate_cycles(chain, args.variant or "mccan")
    graph = compile_loss_graph(cycles, dedup=args.dedup)
    counts = term_counts(graph)
    print(f"chain: {chain}")
    print(f"variant: {Variant.parse(args.variant or 'mccan').value}")
    print(f"cycles: {len(cycles)}")
    for c in cycles:
        print(f"  {c.id} [{c.kind.value}] {c}")
    print(graph.describe())
    print(f"adv_by_end: {counts['adv_by_end']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mccan", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, train_flags=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--out")
        if train_flags:
            sp.add_argument("--variant", choices=[v.value for v in Variant])
            sp.add_argument("--steps", type=int)

    s = sub.add_parser("synth", help="generate unpaired phantom datasets")
    common(s, train_flags=False)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model variant")
    common(s)
    s.add_argument("--data", help="directory written by 'synth' (default: synthesize in memory)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="ROI mean/SD report on held-out noisy images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("walk", help="dump the X->Z->Y->Z->X walk of one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_walk)

    s = sub.add_parser("enumerate", help="print cycles and loss terms")
    s.add_argument("--chain", help="comma separated domain ids, e.g. X,Z,Y")
    s.add_argument("--variant", choices=[v.value for v in Variant])
    s.add_argument("--k", type=int)
    s.add_argument("--dedup", action="store_true")
    s.set_defaults(func=cmd_enumerate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"mccan: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, KeyError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"mccan: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
