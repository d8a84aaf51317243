"""Command-line entry point: ``ummdiff <command> [flags]``.

Each command resolves its configuration (file, then flags), prints the
resolved document as one JSON line prefixed with ``config:``, and only then
starts work. Feeding that JSON back through ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import imageio
from .config import RunConfig, desk_config
from .datagen import build_corpus
from .diffusion import SamplerConfig, check_alpha
from .evaluation import (
    EMBEDDING_CLASSES,
    MetricReport,
    alpha_fixtures,
    check_class_sizes,
    class_crops,
    oracle_metrics,
    pseudo_word_embeddings,
    separation_ratio,
    write_report_csv,
)
from .model import UMMDiffusion
from .numerics import save_checkpoint
from .trainer import pretrain_t2i, train_phase1, train_phase2

log = logging.getLogger("ummdiff")

ABLATION_COLUMNS = ("alpha",) + MetricReport.COLUMNS
DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


class UsageError(Exception):
    """Bad flag values detected after argparse (reported with usage, exit 2)."""


# ---------------------------------------------------------------------------
# argument helpers

def parse_subject(text: str) -> tuple[Path, int]:
    path, sep, pos = text.rpartition("@")
    if not sep or not path:
        raise argparse.ArgumentTypeError(f"expected <path>@<position>, got {text!r}")
    try:
        position = int(pos)
    except ValueError:
        raise argparse.ArgumentTypeError(f"position must be an integer in {text!r}") from None
    return Path(path), position


def parse_alpha(text: str) -> float:
    try:
        value = float(text)
        check_alpha(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def parse_alphas(text: str) -> tuple[float, ...]:
    values = tuple(parse_alpha(v) for v in text.split(","))
    if len(set(values)) != len(values):
        raise argparse.ArgumentTypeError("alpha grid has repeated values")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON (or a previous config echo)")
    common.add_argument("--seed", type=int, help="random seed; a fresh one is generated and printed if omitted")
    common.add_argument("--out", type=Path, required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model_in = argparse.ArgumentParser(add_help=False)
    model_in.add_argument("--checkpoint", type=Path, required=True)

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--guidance", type=float, help="classifier-free guidance weight (default 7.5)")
    sampling.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    sampling.add_argument("--eta", type=float, help="DDIM stochasticity, 0 is deterministic")
    sampling.add_argument("--weights", choices=("ema", "raw"), help="which phase-2 weights to sample with")

    p = argparse.ArgumentParser(prog="ummdiff", description="Toy text+image conditioned diffusion pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("init-config", parents=[common], help="write a run config file")
    c.add_argument("--preset", choices=("published", "desk"), default="published")

    c = sub.add_parser("build-data", parents=[common], help="generate and filter the synthetic corpus")
    c.add_argument("--candidates", type=int)

    for name, text in (("pretrain", "text-to-image pretraining"),
                       ("train1", "phase 1: projector only"),
                       ("train2", "phase 2: projector and denoiser")):
        c = sub.add_parser(name, parents=[common] + ([model_in] if name != "pretrain" else []), help=text)
        c.add_argument("--corpus", type=Path, required=True)
        c.add_argument("--iterations", type=int)
        c.add_argument("--metrics", type=Path, help="append-only training log CSV")

    c = sub.add_parser("sample", parents=[common, model_in, sampling], help="generate images")
    c.add_argument("--prompt", required=True, action="append", help="caption; repeat for a batch")
    c.add_argument("--subject", type=parse_subject, action="append", default=[], metavar="PATH@POS",
                   help="subject image and the caption token it replaces; repeatable")
    c.add_argument("--alpha", type=parse_alpha, help="fuse ratio in [0, 1] (default 0.5)")
    c.add_argument("--trajectory", type=Path, help="also dump the per-step states to this file")

    c = sub.add_parser("ablate-alpha", parents=[common, model_in, sampling],
                       help="sweep the fuse ratio on held-out fixtures")
    c.add_argument("--alphas", type=parse_alphas, default=DEFAULT_ALPHAS)
    c.add_argument("--fixtures", type=int, default=24, help="number of held-out fixtures")

    c = sub.add_parser("export-embeddings", parents=[common, model_in],
                       help="export pseudo-word embeddings of subject classes")
    c.add_argument("--per-class", type=int, default=11)
    return p


# ---------------------------------------------------------------------------
# configuration echo

def resolve_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text().strip()
    text = text.removeprefix("config:")
    data = json.loads(text)
    if "command" in data and "config" in data:   # a previous echo
        data = data["config"]
    return RunConfig.from_dict(data)


def resolve_seed(args, configured: int) -> int:
    if args.seed is not None:
        return args.seed
    if args.config is not None:
        return configured
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed} (generated)")
    return seed


def echo(command: str, cfg: RunConfig, **extra) -> None:
    doc = {"command": command, **extra, "config": cfg.to_dict()}
    print("config: " + json.dumps(doc, sort_keys=True, default=str), flush=True)


def load_model(path: Path, weights: str) -> UMMDiffusion:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, meta = UMMDiffusion.load(path, weights=weights)
    log.info("loaded %s (%s weights, trained phase %s)", path, weights, meta.get("phase"))
    return model


def _sampler(cfg: RunConfig, args, seed: int, alpha=None) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(
        alpha=s.alpha if alpha is None else alpha,
        guidance=s.guidance if args.guidance is None else args.guidance,
        steps=s.steps if args.steps is None else args.steps,
        eta=s.eta if args.eta is None else args.eta,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# commands

def cmd_init_config(args) -> int:
    cfg = desk_config() if args.preset == "desk" else resolve_config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_build_data(args) -> int:
    cfg = resolve_config(args)
    cfg.seed = resolve_seed(args, cfg.seed)
    if args.candidates is not None:
        cfg.candidates = args.candidates
    echo("build-data", cfg, out=args.out)
    manifest = build_corpus(cfg.candidates, args.out, cfg.grammar, cfg.filters, cfg.seed)
    print(json.dumps(manifest.stats, sort_keys=True))
    return 0


def _train_command(args, phase: str) -> int:
    cfg = resolve_config(args)
    tc = getattr(cfg, phase)
    tc.seed = resolve_seed(args, tc.seed)
    if args.iterations is not None:
        tc.iterations = args.iterations
    echo(args.command, cfg, corpus=args.corpus, out=args.out,
         checkpoint=getattr(args, "checkpoint", None))
    if phase == "pretrain":
        pretrain_t2i(tc, args.corpus, args.out, cfg.model, args.metrics)
    elif phase == "phase1":
        train_phase1(tc, args.corpus, args.checkpoint, args.out, args.metrics)
    else:
        train_phase2(tc, args.corpus, args.checkpoint, args.out, args.metrics)
    print(f"wrote {args.out}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    if args.alpha is not None:
        cfg.sampler.alpha = args.alpha
    seed = resolve_seed(args, cfg.sampler.seed)
    sampler = _sampler(cfg, args, seed)
    cfg.sampler = sampler
    echo("sample", cfg, prompt=args.prompt, subject=[f"{p}@{k}" for p, k in args.subject],
         checkpoint=args.checkpoint, out=args.out, weights=args.weights or cfg.weights)
    model = load_model(args.checkpoint, args.weights or cfg.weights)
    subjects = [imageio.load_png(p) for p, _ in args.subject]
    positions = [k for _, k in args.subject]
    order = np.argsort(positions, kind="stable")
    conds = [model.condition(prompt, [subjects[i] for i in order], [positions[i] for i in order])
             for prompt in args.prompt]
    trajectory = [] if args.trajectory else None
    images = model.sample(conds, sampler, trajectory)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_png(out, images[0] if len(images) == 1 else imageio.tile(images, len(images)))
    if args.trajectory:
        write_trajectory(args.trajectory, trajectory, {"sampler": sampler.to_dict(), "prompt": args.prompt})
        print(f"wrote {args.trajectory}")
    print(f"wrote {out}")
    return 0


def write_trajectory(path, trajectory, meta) -> Path:
    arrays = {"t": np.array([t for t, _, _ in trajectory]),
              "x": np.stack([x for _, x, _ in trajectory]),
              "eps": np.stack([e for _, _, e in trajectory])}
    return save_checkpoint(path, arrays, {"kind": "trajectory", **meta})


def cmd_ablate_alpha(args) -> int:
    cfg = resolve_config(args)
    seed = resolve_seed(args, cfg.sampler.seed)
    cfg.sampler = _sampler(cfg, args, seed)
    echo("ablate-alpha", cfg, alphas=list(args.alphas), fixtures=args.fixtures,
         checkpoint=args.checkpoint, out=args.out, weights=args.weights or cfg.weights)
    if args.fixtures < 1:
        raise UsageError("--fixtures must be positive")
    model = load_model(args.checkpoint, args.weights or cfg.weights)
    rows, grid = alpha_sweep(model, alpha_fixtures(args.fixtures, seed), args.alphas, cfg.sampler)
    out = Path(args.out)
    write_report_csv(out / "alpha_sweep.csv", rows, ABLATION_COLUMNS)
    imageio.save_png(out / "alpha_grid.png", grid)
    for r in rows:
        print(",".join(f"{r[c]:.4f}" for c in ABLATION_COLUMNS))
    print(f"wrote {out / 'alpha_sweep.csv'} and {out / 'alpha_grid.png'}")
    return 0


def alpha_sweep(model: UMMDiffusion, fixtures, alphas, sampler: SamplerConfig):
    """One MetricReport row per alpha, plus an image grid (one row per alpha)."""
    conds = [model.condition(f.caption, [f.crop], [f.position]) for f in fixtures]
    truths = [f.truth for f in fixtures]
    rows, images = [], []
    for a in alphas:
        cfg = SamplerConfig(**{**sampler.to_dict(), "alpha": float(a)})
        x = model.sample(conds, cfg)
        rows.append({"alpha": float(a), **oracle_metrics(x, truths).as_row()})
        images.append(x)
    grid = imageio.tile(np.concatenate(images), len(fixtures))
    return rows, grid


def cmd_export_embeddings(args) -> int:
    cfg = resolve_config(args)
    seed = resolve_seed(args, cfg.seed)
    echo("export-embeddings", cfg, per_class=args.per_class, seed=seed,
         checkpoint=args.checkpoint, out=args.out)
    crops, labels = class_crops(args.per_class, seed, EMBEDDING_CLASSES, cfg.grammar)
    check_class_sizes(labels)
    model = load_model(args.checkpoint, "raw")
    emb = pseudo_word_embeddings(model, crops)
    ratio = separation_ratio(emb, labels)
    write_embeddings(args.out, emb, labels)
    print(f"separation_ratio: {ratio:.4f}")
    print(f"wrote {args.out}")
    return 0


def write_embeddings(path, emb: np.ndarray, labels) -> Path:
    """Tab-separated: a header row, then ``label<TAB>v0<TAB>v1...`` per embedding."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["label\t" + "\t".join(f"d{i}" for i in range(emb.shape[1]))]
    lines += [lab + "\t" + "\t".join(f"{v:.8g}" for v in row) for lab, row in zip(labels, emb)]
    path.write_text("\n".join(lines) + "\n")
    return path


COMMANDS = {
    "init-config": cmd_init_config,
    "build-data": cmd_build_data,
    "pretrain": lambda a: _train_command(a, "pretrain"),
    "train1": lambda a: _train_command(a, "phase1"),
    "train2": lambda a: _train_command(a, "phase2"),
    "sample": cmd_sample,
    "ablate-alpha": cmd_ablate_alpha,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        # single-threaded BLAS keeps reruns bit-identical
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ummdiff: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"ummdiff: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
