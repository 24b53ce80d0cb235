"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure, 4 invariant
violation. Failures print one ``error kind=<kind> message=<text>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config_text
from .storage import FormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.lower().replace("_", "-")


def _config_parent() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="key=value file; flags override it")
    for f in fields(RunConfig):
        p.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar=f.name.upper(),
                       help=f"override {f.name} (default {getattr(RunConfig(), f.name)})")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_parent()
    parser = _Parser(prog="tactbind", description="Temporal tactile-visual binding at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic trajectory dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="stage-1 encoder training")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("lstm", "frame"), default="lstm")
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", parents=[common], help="stage-2 decoder and fusion training")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True, help="encoder checkpoint directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", parents=[common], help="encoder comparison and six-cell score grid")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also write scores.svg")
    p.add_argument("--out", required=True)

    sub.add_parser("gradcheck", help="finite-difference checks of every primitive and composite")

    p = sub.add_parser("plan", parents=[common], help="print the layer assignment table")
    return parser


def _resolve_config(args) -> tuple[RunConfig, bool]:
    """Defaults, then ``--config``, then flags. Also reports whether a seed was given explicitly."""
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig)
                 if getattr(args, f"cfg_{f.name}", None) is not None}
    from_file: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        from_file = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    cfg = RunConfig().with_updates(from_file).with_updates(overrides)
    return cfg, "seed" in overrides or "seed" in from_file


def _echo(cfg: RunConfig, out: Path, extra: dict[str, str] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text() + "".join(f"{k}={v}\n" for k, v in sorted((extra or {}).items()))
    (out / "config.txt").write_text(text, encoding="utf-8")


def _load_samples(data_dir: str, cfg: RunConfig):
    from .data import build_all_samples, read_dataset, split_dataset

    records = read_dataset(data_dir)
    if not records:
        raise FormatError(Path(data_dir) / "manifest.txt", 0, "dataset has no trajectories")
    samples = build_all_samples(records, cfg.T)
    train, test = split_dataset(samples, cfg.test_fraction, cfg.seed)
    return records, train, test


def _classes(records):
    seen = {}
    for r in records:
        seen.setdefault(r.material.class_id, r.material)
    return [seen[k] for k in sorted(seen)]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .data import generate_dataset, write_dataset

    records = generate_dataset(cfg.n_trajectories, cfg.length, cfg.seed, grid=(cfg.grid, cfg.grid))
    out = Path(args.out)
    write_dataset(records, out)
    _echo(cfg, out)
    print(f"wrote {len(records)} trajectories to {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .checkpoint import save_encoder
    from .training import evaluate_encoder, pretrain, write_metrics_csv

    records, train, test = _load_samples(args.data, cfg)
    n_classes = max(c.class_id for c in _classes(records)) + 1
    result = pretrain(train, cfg.pretrain_config(), cfg.encoder_config(args.kind, n_classes), test)
    out = Path(args.out)
    _echo(cfg, out, {"kind": args.kind})
    save_encoder(out / "encoder", result.params)
    write_metrics_csv(result.history, out / "metrics.csv")
    m = evaluate_encoder(result.params, test, cfg.batch_size)
    _check_topk(m.top1, m.top5, f"{args.kind} encoder")
    print(f"{args.kind} test top1={m.top1:.2f} top5={m.top5:.2f} "
          f"retrieval_top1={m.retrieval_top1:.2f} retrieval_top5={m.retrieval_top5:.2f}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    from .checkpoint import load_encoder, save_finetune
    from .data import vocabulary
    from .decoder import Vocab
    from .training import finetune, write_metrics_csv

    records, train, test = _load_samples(args.data, cfg)
    encoder = load_encoder(args.encoder)
    vocab = Vocab(vocabulary(_classes(records)))
    result = finetune(train, encoder, cfg.variant, cfg.group, cfg.finetune_config(),
                      cfg.model_config(len(vocab)), vocab, test)
    out = Path(args.out)
    _echo(cfg, out, {"encoder": str(args.encoder)})
    save_finetune(out / "model", result)
    write_metrics_csv(result.history, out / "metrics.csv")
    print(f"{cfg.variant}/{cfg.group} final train loss {result.history[-2 if test else -1].loss:.4f}"
          + (f" test loss {result.history[-1].loss:.4f}" if test else ""))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .ablation import score_cell
    from .checkpoint import load_encoder, load_finetune, read_checkpoint
    from .training import evaluate_encoder

    _, meta = read_checkpoint(args.ckpt)
    _, _, test = _load_samples(args.data, cfg)
    out = Path(args.out)
    _echo(cfg, out, {"ckpt": str(args.ckpt)})
    if meta.get("type") == "encoder":
        m = evaluate_encoder(load_encoder(args.ckpt), test, cfg.batch_size)
        _check_topk(m.top1, m.top5, "encoder")
        lines = [f"top1={m.top1:.6f}", f"top5={m.top5:.6f}", f"retrieval_top1={m.retrieval_top1:.6f}",
                 f"retrieval_top5={m.retrieval_top5:.6f}", f"loss={m.loss:.6f}"]
    else:
        result = load_finetune(args.ckpt)
        score, nonempty, loss = score_cell(result, test, cfg.max_len)
        lines = [f"variant={result.plan.variant}", f"group={result.plan.modality_group}",
                 f"score={score:.6f}", f"nonempty_fraction={nonempty:.6f}", f"test_loss={loss:.6f}"]
    text = "\n".join(lines) + "\n"
    (out / "eval.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .ablation import run_ablation
    from .data import read_dataset

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    records = read_dataset(args.data)
    report = run_ablation(records, seeds, cfg, jobs=args.jobs)
    out = Path(args.out)
    _echo(cfg, out, {"seeds": ",".join(map(str, seeds))})
    report.write(out, plot=args.plot)
    for name, ok, detail in report.orderings():
        print(f"{'holds' if ok else 'VIOLATED'} {name} ({detail})")
    print(f"report written to {out / 'report.txt'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    reports = run_all()
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERICAL


def cmd_plan(args, cfg: RunConfig) -> int:
    from .fusion import assign_layers

    a = assign_layers(cfg.n_layers, cfg.T)
    print(f"n_layers={cfg.n_layers} T={cfg.T}")
    for t, block in enumerate(a.blocks, start=1):
        print(f"h^{t}: layers {block.start}..{block.stop - 1} ({len(block)} layers)")
    return EXIT_OK


def _check_topk(top1: float, top5: float, what: str) -> None:
    from .ablation import InvariantError

    if top1 > top5:
        raise InvariantError(f"{what}: top-1 {top1} exceeds top-5 {top5}")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate, "plan": cmd_plan}
NEEDS_SEED = ("pretrain", "finetune", "eval")


def _fail(kind: str, code: int, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"error kind={kind} message={msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    from .ablation import InvariantError
    from .training import NumericalError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s %(message)s")
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg, seed_given = _resolve_config(args)
        if args.command in NEEDS_SEED and not seed_given:
            raise UsageError(f"{args.command} needs an explicit --seed (flag or config file)")
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except NumericalError as exc:
        return _fail("numerical", EXIT_NUMERICAL, exc)
    except InvariantError as exc:
        return _fail("invariant", EXIT_INVARIANT, exc)
    except ValueError as exc:
        # argument combinations the modules reject (T > n_layers, wrong encoder kind, ...)
        return _fail("usage", EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
