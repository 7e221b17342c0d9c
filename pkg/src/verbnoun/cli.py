"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, dump-attention.
Exit codes: 0 success, 1 assertion/acceptance failure, 2 configuration
error, 3 I/O or file-format error.

An `ablate` run can read defaults from a `key = value` config file;
explicit flags override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .data import (
    BankFileHeader,
    GeneratorSpec,
    generate_dataset,
    read_bank_file,
    write_bank_file,
)
from .errors import ConfigError, FormatError
from .evaluate import estimate_action_prior, evaluate_dataset
from .harness import (
    RunConfig,
    default_outdir,
    dump_attention,
    gradcheck_suite,
    load_params,
    run_ablation,
    save_params,
    summarize,
)
from .sap import SapParams, VARIANTS
from .training import OptimState, train

SPEC_FIELDS = [f.name for f in dataclasses.fields(GeneratorSpec)]


def _add_spec_flags(p: argparse.ArgumentParser):
    for name in SPEC_FIELDS:
        kind = GeneratorSpec.__dataclass_fields__[name].type
        flag = "--" + name.replace("_", "-").lower()
        p.add_argument(flag, dest=f"spec_{name}",
                       type=float if "float" in str(kind) else int, default=None)


def _spec_from_args(args, base: dict | None = None) -> GeneratorSpec:
    values = dict(base or {})
    for name in SPEC_FIELDS:
        v = getattr(args, f"spec_{name}", None)
        if v is not None:
            values[name] = v
    values = {k: (int(v) if k in ("C", "V", "U", "M", "K", "distractor_count",
                                  "seed") else v)
              for k, v in values.items()}
    return GeneratorSpec(**values)


def load_config_file(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _parse_value(key: str, raw: str):
    if key in ("variants",):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if key in ("seeds", "ks"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if key == "outdir":
        return raw
    if key in ("train_size", "val_size", "epochs", "batch_size",
               "C", "V", "U", "M", "K", "distractor_count", "seed"):
        return int(raw)
    return float(raw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="verbnoun")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SAPB feature file")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    _add_spec_flags(g)

    t = sub.add_parser("train", help="train one variant on a SAPB file")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="full", choices=VARIANTS)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--learning-rate", type=float, default=1e-3)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--params-out", default=None)

    e = sub.add_parser("eval", help="evaluate saved parameters on a SAPB file")
    e.add_argument("--data", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--variant", default="full", choices=VARIANTS)
    e.add_argument("--train-data", default=None,
                   help="SAPB file whose labels estimate the action prior")
    e.add_argument("--ks", default="1,5")

    a = sub.add_parser("ablate", help="run the full ablation ladder")
    a.add_argument("--config", default=None, help="key = value defaults file")
    a.add_argument("--variants", default=None, help="comma-separated list")
    a.add_argument("--seeds", default=None, help="comma-separated ints")
    a.add_argument("--train-size", type=int, default=None)
    a.add_argument("--val-size", type=int, default=None)
    a.add_argument("--epochs", type=int, default=None)
    a.add_argument("--batch-size", type=int, default=None)
    a.add_argument("--learning-rate", type=float, default=None)
    a.add_argument("--momentum", type=float, default=None)
    a.add_argument("--weight-decay", type=float, default=None)
    a.add_argument("--outdir", default=None)
    _add_spec_flags(a)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--h", type=float, default=1e-6)
    c.add_argument("--seeds", default="0,1,2")

    d = sub.add_parser("dump-attention", help="per-row attention weight report")
    d.add_argument("--data", required=True)
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--params", default=None,
                   help="saved parameters; defaults to a fresh random init")
    d.add_argument("--init-seed", type=int, default=0)
    d.add_argument("--out", required=True)

    return ap


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    dataset = generate_dataset(spec, args.count)
    write_bank_file(args.out, dataset, BankFileHeader.from_spec(spec))
    print(f"wrote {len(dataset)} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    bank = read_bank_file(args.data)
    h = bank.header
    params = SapParams.init(h.C, h.V, h.U, seed=args.seed)
    opt = OptimState(args.learning_rate, args.momentum, args.weight_decay)
    history = train(bank.episodes, params, opt, args.epochs, seed=args.seed,
                    variant=args.variant, batch_size=args.batch_size)
    for i, m in enumerate(history, 1):
        print(f"epoch {i:3d}  verb {m.verb_loss:.4f}  noun {m.noun_loss:.4f}  "
              f"total {m.total_loss:.4f}")
    if args.params_out:
        save_params(args.params_out, params)
        print(f"saved parameters to {args.params_out}")
    return 0


def cmd_eval(args) -> int:
    bank = read_bank_file(args.data)
    params = load_params(args.params)
    prior = None
    if args.train_data:
        tb = read_bank_file(args.train_data)
        prior = estimate_action_prior([ep.labels for ep in tb],
                                      tb.header.V, tb.header.U)
    ks = tuple(int(k) for k in args.ks.split(","))
    metrics = evaluate_dataset(bank.episodes, params, args.variant, prior, ks)
    for key in sorted(metrics):
        print(f"{key:<18s} {metrics[key]:.4f}")
    return 0


def cmd_ablate(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    parsed = {k: _parse_value(k, v) for k, v in file_values.items()}

    spec_base = {k: parsed.pop(k) for k in list(parsed) if k in SPEC_FIELDS}
    spec = _spec_from_args(args, spec_base)

    cfg = RunConfig(spec=spec)
    for key in ("train_size", "val_size", "epochs", "batch_size",
                "learning_rate", "momentum", "weight_decay", "outdir",
                "variants", "seeds", "ks"):
        if key in parsed:
            setattr(cfg, key, parsed[key])
        flag = getattr(args, key, None)
        if flag is not None:
            if key in ("variants",):
                flag = tuple(v.strip() for v in flag.split(","))
            elif key in ("seeds",):
                flag = tuple(int(s) for s in flag.split(","))
            setattr(cfg, key, flag)
    if cfg.outdir == ".":
        cfg.outdir = default_outdir()
    cfg.validate()

    records = run_ablation(cfg)
    print(summarize(records, cfg))
    print(f"results written under {cfg.outdir}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = gradcheck_suite(tol=args.tol, h=args.h, seeds=seeds)
    print(report.render())
    return 0 if report.passed else 1


def cmd_dump_attention(args) -> int:
    bank = read_bank_file(args.data)
    if not 0 <= args.index < len(bank):
        raise ConfigError(f"--index {args.index} out of range for {len(bank)} episodes")
    h = bank.header
    params = load_params(args.params) if args.params \
        else SapParams.init(h.C, h.V, h.U, seed=args.init_seed)
    dump_attention(params, bank[args.index], args.out)
    print(f"wrote attention report to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
