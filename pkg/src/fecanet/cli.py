"""Command-line harness: train, eval, run-episode, grad-check, oracle-diff, export-fixtures.

Exit codes: 0 success, 2 bad usage, 3 missing or unreadable files, 4 validation
or format failures (including a failed numerical check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import RunConfig, apply_seed_env
from .errors import FecaError, FormatError, ValidationError

log = logging.getLogger("fecanet")

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 2, 3, 4
GRAD_TOL = 1e-3
PIVOT_TOL = 1e-5
BANK_PREFIX = "bank/"


# -- config plumbing ---------------------------------------------------------
def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--k", type=int, help="self-similarity window (odd)")
    g.add_argument("--depth", type=int, help="number of strided multi-scale convs")
    g.add_argument("--lr", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--no-fem", action="store_true", help="disable feature enhancement")
    g.add_argument("--no-gc", action="store_true", help="drop the global-context correlation")
    g.add_argument("--filter-background", action="store_true", help="mask support background in dense correlations")
    g.add_argument("--no-bank", action="store_true", help="decode without the memory-bank prior")


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None) is not None:
        cfg = RunConfig.from_dict(json.loads(args.config.read_text()))
    changes = {}
    for name in ("seed", "k", "depth", "lr", "steps", "batch_size", "image_size"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    for flag, field in (("no_fem", "fem"), ("no_gc", "gc"), ("no_bank", "bank")):
        if getattr(args, flag, False):
            changes[field] = False
    if getattr(args, "filter_background", False):
        changes["keep_background"] = False
    cfg = apply_seed_env(cfg.replace(**changes))
    return cfg.validate()


def _episodes(args, cfg: RunConfig):
    from .io import load_manifest
    from .pipeline.episode import synthetic_episodes

    if args.manifest is not None:
        return load_manifest(args.manifest)
    return synthetic_episodes(args.episodes, cfg.image_size, cfg.seed, cfg.shots)


def load_checkpoint(path):
    """Rebuild a model (and its bank, if stored) from a checkpoint bundle."""
    from .decoder import MemoryBank
    from .io import read_bundle
    from .pipeline.model import FecaNet

    tensors, meta = read_bundle(path)
    if "config" not in meta:
        raise FormatError(f"{path}: checkpoint meta lacks a config")
    model = FecaNet(RunConfig.from_dict(meta["config"]))
    model.load_values({k: v for k, v in tensors.items() if not k.startswith(BANK_PREFIX)})
    bank = MemoryBank()
    for k, v in tensors.items():
        if k.startswith(BANK_PREFIX):
            bank.store(k[len(BANK_PREFIX):], v)
    return model, bank, meta


def save_checkpoint(path, model, meta: dict, bank=None) -> None:
    from .io import write_bundle

    tensors = {name: p.data for name, p in model.params.items()}
    if bank is not None:
        for qid in sorted(bank.entries, key=str):
            tensors[f"{BANK_PREFIX}{qid}"] = bank.entries[qid]
    write_bundle(path, tensors, {**meta, "config": model.cfg.to_dict()})


# -- subcommands -------------------------------------------------------------
def cmd_train(args) -> int:
    from .decoder import MemoryBank
    from .pipeline.model import FecaNet
    from .pipeline.train import fit

    cfg = build_config(args)
    episodes = _episodes(args, cfg)
    model = FecaNet(cfg)
    bank = MemoryBank() if cfg.bank else None
    rows = []

    def record(step, loss):
        rows.append(f"{step},{loss!r}")
        if step % 25 == 0:
            log.info("step %d loss %.5f", step, loss)

    losses = fit(model, episodes, cfg.steps, cfg.lr, cfg.batch_size, bank, cfg.seed, record, args.target_loss)
    save_checkpoint(args.out, model, {"steps": len(losses)}, bank if args.save_bank else None)
    if args.loss_log is not None:
        Path(args.loss_log).write_text("step,loss\n" + "".join(r + "\n" for r in rows))
    print(json.dumps({"steps": len(losses), "final_loss": losses[-1] if losses else None}))
    return 0


def cmd_eval(args) -> int:
    from .io import export_mask, load_manifest
    from .pipeline.train import KShotConfig, evaluate

    model, _, _ = load_checkpoint(args.checkpoint)
    kcfg = KShotConfig(args.shots, args.tau)
    result = evaluate(load_manifest(args.manifest), model, kcfg)
    text = json.dumps(result.report(), indent=2, sort_keys=True) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.masks_dir is not None:
        out = Path(args.masks_dir)
        out.mkdir(parents=True, exist_ok=True)
        for qid, mask in sorted(result.masks.items()):
            export_mask(mask, out / f"{qid}.pgm")
    return 0


def cmd_run_episode(args) -> int:
    from .io import export_mask, load_manifest, write_tensor

    model, bank, _ = load_checkpoint(args.checkpoint)
    episodes = load_manifest(args.manifest)
    if not 0 <= args.index < len(episodes):
        raise ValidationError(f"episode index {args.index} outside 0..{len(episodes) - 1}")
    from . import tensor as T

    with T.no_grad():
        pred = model.forward(episodes[args.index], 0, bank if args.use_bank else None)
    export_mask(pred, args.mask_out)
    if args.prob_out is not None:
        write_tensor(args.prob_out, pred.probs.data)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import gradient_check

    cfg = build_config(args)
    report = gradient_check(cfg, seed=cfg.seed, image_size=args.image_size_check, coords=args.coords)
    print(report.table())
    print(f"elapsed {report.seconds:.1f}s")
    return 0 if report.max_rel_err < GRAD_TOL else EXIT_VALIDATION


def cmd_oracle_diff(args) -> int:
    from .encoder4d import pivot_equivalence
    from .oracles import oracle_suite

    cfg = build_config(args)
    worst = max(pivot_equivalence(cfg.seed, args.cases))
    print(f"center-pivot vs full 4D: max abs diff {worst:.3e} over {args.cases} cases")
    ok = worst < PIVOT_TOL
    if args.suite:
        for r in oracle_suite(cfg.seed):
            print(f"{r.op:<36} max_rel {r.max_rel:.3e}  {'ok' if r.passed else 'FAIL'}")
            ok &= r.passed
    return 0 if ok else EXIT_VALIDATION


def cmd_export_fixtures(args) -> int:
    from .io import write_manifest
    from .pipeline.episode import synthetic_episodes

    cfg = build_config(args)
    episodes = synthetic_episodes(args.episodes, cfg.image_size, cfg.seed, args.shots)
    print(write_manifest(episodes, args.out))
    return 0


# -- entry point -------------------------------------------------------------
def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fecanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest (or synthetic episodes) and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--episodes", type=int, default=4, help="synthetic episode count when no manifest is given")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--loss-log", type=Path, help="CSV file with step,loss rows")
    p.add_argument("--target-loss", type=float, help="stop once a batch loss falls below this")
    p.add_argument("--save-bank", action="store_true", help="store the memory bank in the checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="K-shot evaluation, metrics as JSON")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="metrics JSON path (stdout if omitted)")
    p.add_argument("--masks-dir", type=Path, help="export fused masks as <query_id>.pgm")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-episode", help="predict one episode; write mask and probabilities")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask-out", type=Path, required=True)
    p.add_argument("--prob-out", type=Path)
    p.add_argument("--use-bank", action="store_true", help="start from the bank stored in the checkpoint")
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable module")
    _add_config_flags(p)
    p.add_argument("--image-size-check", type=int, default=24)
    p.add_argument("--coords", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("oracle-diff", help="center-pivot vs dense 4D convolution (and optionally all oracles)")
    _add_config_flags(p)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--suite", action="store_true", help="also run the full oracle suite")
    p.set_defaults(func=cmd_oracle_diff)

    p = sub.add_parser("export-fixtures", help="write synthetic episodes and a manifest")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--shots", type=int, default=1)
    p.set_defaults(func=cmd_export_fixtures)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"fecanet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FecaError, ValueError, KeyError) as exc:
        print(f"fecanet: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
