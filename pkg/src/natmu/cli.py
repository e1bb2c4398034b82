"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad inputs or config),
2 runtime failure, 3 acceptance-check failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, builder, data, masks, metrics, nn
from .errors import NatmuError, ValidationError
from .methods import (
    METHOD_NAMES,
    UNLEARN_METHODS,
    UnlearnRequest,
    retrain,
    unlearning_dataset,
)
from .runner import (
    evaluate_model,
    load_config,
    materialize_data,
    pretrain_model,
    run_experiment,
    write_report_csv,
)
from .seeding import derive_seed

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="natmu", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthesize or inspect UDS datasets")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    synth = ds_sub.add_parser("synth")
    synth.add_argument("--out", required=True)
    synth.add_argument("--k", type=int, default=10)
    synth.add_argument("--per-class", type=int, default=500)
    synth.add_argument("--height", type=int, default=16)
    synth.add_argument("--width", type=int, default=16)
    synth.add_argument("--channels", type=int, default=1)
    synth.add_argument("--spread", type=float, default=data.DEFAULT_SPREAD)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--split", choices=("train", "test"), default="train")
    inspect = ds_sub.add_parser("inspect")
    inspect.add_argument("path")

    mask = sub.add_parser("mask", help="weighting mask utilities")
    mask_sub = mask.add_subparsers(dest="mask_command", required=True)
    dump = mask_sub.add_parser("dump")
    dump.add_argument("--family", choices=masks.MASK_FAMILIES, default=masks.GRADUAL)
    dump.add_argument("--h", "--height", dest="height", type=int, default=32)
    dump.add_argument("--w", "--width", dest="width", type=int, default=32)
    dump.add_argument("--delta", type=float, default=0.0)
    dump.add_argument("--edge-len", type=int, default=None)
    dump.add_argument("--out", required=True)

    pre = sub.add_parser("pretrain", help="train the original model")
    pre.add_argument("--config", required=True)
    pre.add_argument("--seed", type=int, default=1)
    pre.add_argument("--out", required=True)
    pre.add_argument("--trace", default=None,
                     help="write per-sample correct-epoch counts as JSON")

    build = sub.add_parser("build", help="construct an unlearning fine-tuning dataset")
    build.add_argument("--config", required=True)
    build.add_argument("--model", required=True)
    build.add_argument("--variant", choices=builder.VARIANTS, default=builder.NATMU)
    build.add_argument("--n", type=int, default=4)
    build.add_argument("--delta", type=float, default=-0.031)
    build.add_argument("--mask-family", choices=masks.MASK_FAMILIES,
                       default=masks.GRADUAL)
    build.add_argument("--seed", type=int, default=1)
    build.add_argument("--out", required=True)
    build.add_argument("--provenance", default=None, help="JSON-lines sidecar path")

    un = sub.add_parser("unlearn", help="run one unlearning method")
    un.add_argument("--method", choices=METHOD_NAMES, required=True)
    un.add_argument("--config", required=True)
    un.add_argument("--model", default=None,
                    help="original model checkpoint (not needed for retrain)")
    un.add_argument("--seed", type=int, default=1)
    un.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="metrics report against a retrain reference")
    ev.add_argument("--config", required=True)
    ev.add_argument("--seed", type=int, default=1)
    ev.add_argument("--model", required=True)
    ev.add_argument("--retrain", required=True)
    ev.add_argument("--method", choices=METHOD_NAMES, default=None,
                    help="method that produced the model; enables the KL column")
    ev.add_argument("--out", required=True)
    ev.add_argument("--hist-prefix", default=None,
                    help="also export entropy histograms to PREFIX_forget/test.csv")
    ev.add_argument("--hist-bins", type=int, default=40)

    run = sub.add_parser("run", help="full experiment over seeds and methods")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", default=None)

    chk = sub.add_parser("check", help="run the acceptance property suite")
    chk.add_argument("--skip-slow", action="store_true",
                     help="skip the desk-scale pipeline checks")
    chk.add_argument("--workdir", default=None)
    return parser


def _split_for(config, root_seed):
    train_ds, test_ds = materialize_data(config, derive_seed(root_seed, "dataset"))
    spec = data.ForgettingSpec(
        mode=config.forget_mode, ratio=config.forget_ratio,
        class_index=config.forget_class, scope=config.forget_scope,
        seed=derive_seed(root_seed, "forget"))
    trace = None
    if config.forget_mode == "difficult":
        _, trace = pretrain_model(config, train_ds, root_seed, with_trace=True)
    d_f, d_r = data.split_forget(train_ds, spec, trace)
    return train_ds, test_ds, d_f, d_r, spec


def _cmd_dataset(args) -> int:
    if args.dataset_command == "synth":
        ds = data.synth_blobs(args.k, args.per_class, args.height, args.width,
                              args.channels, spread=args.spread, seed=args.seed,
                              split=args.split)
        data.save_raw(ds, args.out)
        print(f"wrote {len(ds)} instances to {args.out}")
        return EXIT_OK
    ds = data.load_raw(args.path)
    ds.validate()
    print(f"{args.path}: N={len(ds)} H={ds.height} W={ds.width} "
          f"C={ds.channels} K={ds.k}")
    hist = np.bincount(ds.labels, minlength=ds.k)
    for label, count in enumerate(hist):
        print(f"  class {label}: {count}")
    return EXIT_OK


def _cmd_mask(args) -> int:
    mask_set = masks.build_mask_set(args.family, args.height, args.width,
                                    args.delta, args.edge_len)
    stem = args.out[:-4] if args.out.endswith(".csv") else args.out
    for path in masks.dump_csv(mask_set, stem):
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    config = load_config(args.config)
    train_ds, _ = materialize_data(config, derive_seed(args.seed, "dataset"))
    model, trace = pretrain_model(config, train_ds, args.seed,
                                  with_trace=args.trace is not None)
    nn.save_model(model, args.out)
    print(f"wrote model to {args.out}")
    if args.trace is not None:
        payload = {"ids": trace.ids.tolist(), "counts": trace.counts.tolist(),
                   "epochs": trace.epochs}
        Path(args.trace).write_text(json.dumps(payload), encoding="ascii")
        print(f"wrote trace to {args.trace}")
    return EXIT_OK


def _cmd_build(args) -> int:
    config = load_config(args.config)
    _, _, d_f, d_r, _ = _split_for(config, args.seed)
    model = nn.load_model(args.model)
    mask_set = masks.build_mask_set(args.mask_family, d_f.height, d_f.width,
                                    args.delta)
    build_seed = derive_seed(derive_seed(args.seed, "method", "natmu"), "build")
    instances = builder.build_unlearning_set(d_f, d_r, model, mask_set,
                                             variant=args.variant, seed=build_seed,
                                             n=args.n)
    finetune = builder.build_finetune_dataset(d_r, instances, n=args.n)
    data.save_raw(finetune.data, args.out)
    print(f"wrote {len(finetune)} instances ({len(instances)} unlearning) to {args.out}")
    if args.provenance is not None:
        with open(args.provenance, "w", encoding="ascii") as fh:
            for inst in instances:
                fh.write(json.dumps({
                    "forget_index": inst.forget_id,
                    "remaining_index": inst.remaining_id,
                    "category": inst.label,
                    "mask_index": inst.mask_index,
                }) + "\n")
        print(f"wrote provenance to {args.provenance}")
    return EXIT_OK


def _cmd_unlearn(args) -> int:
    config = load_config(args.config)
    _, _, d_f, d_r, _ = _split_for(config, args.seed)
    seed_m = derive_seed(args.seed, "method", args.method)
    if args.method == "retrain":
        model, _ = retrain(d_r, config.pretrain.with_seed(seed_m),
                           forbidden_ids=frozenset(int(i) for i in d_f.ids))
    else:
        if args.model is None:
            raise ValidationError("--model is required for unlearning methods")
        original = nn.load_model(args.model)
        request = UnlearnRequest(model=original, d_f=d_f, d_r=d_r,
                                 config=config.unlearn,
                                 params=config.params_for(args.method), seed=seed_m)
        model = UNLEARN_METHODS[args.method](request)
    nn.save_model(model, args.out)
    print(f"wrote {args.method} model to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = load_config(args.config)
    _, test_ds, d_f, d_r, spec = _split_for(config, args.seed)
    model = nn.load_model(args.model)
    model_r = nn.load_model(args.retrain)
    kl = None
    if args.method == "retrain":
        kl = 0.0
    elif args.method in UNLEARN_METHODS:
        request = UnlearnRequest(model=model, d_f=d_f, d_r=d_r,
                                 config=config.unlearn,
                                 params=config.params_for(args.method),
                                 seed=derive_seed(args.seed, "method", args.method))
        d_ul = unlearning_dataset(args.method, request)
        if d_ul is not None:
            kl = metrics.kl_avg(model_r, d_ul)
    report = evaluate_model(model, d_r, d_f, test_ds, spec, kl=kl)
    reference = evaluate_model(model_r, d_r, d_f, test_ds, spec, kl=0.0)
    write_report_csv(Path(args.out), report, reference)
    print(f"wrote report to {args.out}")
    if args.hist_prefix is not None:
        for name, subset in (("forget", d_f), ("test", test_ds)):
            counts, edges = metrics.entropy_histogram(model, subset, args.hist_bins)
            path = f"{args.hist_prefix}_{name}.csv"
            with open(path, "w", encoding="ascii") as fh:
                fh.write("bin_left,count\n")
                for left, count in zip(edges[:-1], counts):
                    fh.write(f"{left:.6f},{int(count)}\n")
            print(f"wrote histogram to {path}")
    return EXIT_OK


def _cmd_run(args) -> int:
    config = load_config(args.config)
    manifest = run_experiment(config, out_dir=args.out_dir)
    print(f"run complete: config {manifest['config_hash'][:12]}, "
          f"{len(manifest['files'])} files")
    return EXIT_OK


def _cmd_check(args) -> int:
    from .properties import run_all
    results = run_all(workdir=args.workdir, skip_slow=args.skip_slow)
    failed = False
    for result in results:
        print(result.line())
        failed = failed or (not result.passed and not result.skipped)
    return EXIT_ACCEPTANCE if failed else EXIT_OK


_COMMANDS = {
    "dataset": _cmd_dataset,
    "mask": _cmd_mask,
    "pretrain": _cmd_pretrain,
    "build": _cmd_build,
    "unlearn": _cmd_unlearn,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
    "check": _cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NatmuError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
