"""Command-line entry point wiring all stages together.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every emitted
JSON document uses sorted keys; nothing in the outputs depends on wall
time, so fixed seeds give bit-identical files.
"""

from __future__ import annotations

import os

# must run before numpy is first imported to take effect
_threads = os.environ.get("NAS_ADAPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import (
    CostConfig,
    build_madds_table,
    expected_cost,
    expected_cost_per_block,
    madds_of_discrete,
    madds_of_discrete_per_block,
    stem_madds,
)
from .derive import (
    default_source_architecture,
    derive_architecture,
    instantiate,
    load_arch,
    save_arch,
)
from .errors import NasAdaptError
from .paramap import (
    ParameterBundle,
    map_to_derived,
    map_to_supernet,
    verify_function_preservation,
)
from .searchloop import SearchSchedule, history_to_csv, search
from .searchspace import load_config
from .seeding import seed_for
from .supernet import build_supernet
from .toytask import (
    DatasetSpec,
    FinetuneConfig,
    evaluate_accuracy,
    finetune,
    generate,
    load_dataset,
    save_dataset,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_json(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _cmd_gen_data(args) -> int:
    spec = DatasetSpec(n_samples=args.samples,
                       resolution=(args.resolution, args.resolution),
                       n_classes=args.classes, seed=args.seed)
    save_dataset(generate(spec), args.out)
    return 0


def _cmd_search(args) -> int:
    config = load_config(args.space)
    dataset = load_dataset(args.data)
    net = build_supernet(config, seed=seed_for(args.seed, "supernet"),
                         mask_mode=args.mask_mode)
    if args.init_from:
        source = ParameterBundle.load(args.init_from)
        if args.init_arch:
            map_to_supernet(source, net, eps=args.eps,
                            seed=seed_for(args.seed, "noise"),
                            source_arch=load_arch(args.init_arch))
        else:
            map_to_supernet(source, net, eps=args.eps,
                            seed=seed_for(args.seed, "noise"))
    schedule = SearchSchedule(total_epochs=args.epochs, warmup_epochs=args.warmup,
                              batch_size=args.batch_size, seed=args.seed,
                              lr_mode=args.lr_mode)
    net, history = search(net, dataset, schedule,
                          CostConfig(lam=getattr(args, "lambda")))
    net.save(args.out)
    if args.history:
        history_to_csv(history, args.history)
    return 0


def _cmd_derive(args) -> int:
    config = load_config(args.space)
    net = build_supernet(config, seed=0, mask_mode=args.mask_mode)
    net.load(args.ckpt)
    arch = derive_architecture(net.alpha, net.beta, config)
    save_arch(arch, args.out)
    return 0


def _cmd_cost(args) -> int:
    config = load_config(args.space)
    if (args.arch is None) == (args.ckpt is None):
        raise SystemExit(_usage_error("cost requires exactly one of --arch or --ckpt"))
    if args.arch:
        arch = load_arch(args.arch)
        doc = {
            "kind": "discrete",
            "total": madds_of_discrete(arch, config),
            "stem": stem_madds(config),
            "per_block": madds_of_discrete_per_block(arch, config),
        }
    else:
        net = build_supernet(config, seed=0, mask_mode=args.mask_mode)
        net.load(args.ckpt)
        table = build_madds_table(config)
        doc = {
            "kind": "expected",
            "total": float(expected_cost(net.alpha, net.beta, table).data),
            "stem": stem_madds(config),
            "per_block": expected_cost_per_block(net.alpha, net.beta, table),
        }
    _write_json(doc, args.out)
    return 0


def _usage_error(message: str) -> int:
    print(f"nasadapt: error: {message}", file=sys.stderr)
    return 1


def _cmd_remap(args) -> int:
    source = ParameterBundle.load(args.src)
    source_arch = load_arch(args.src_arch) if args.src_arch else None
    if (args.dst_arch is None) == (args.space is None):
        raise SystemExit(_usage_error("remap requires exactly one of --dst-arch or --space"))
    if args.dst_arch:
        target = load_arch(args.dst_arch)
        bundle, report = map_to_derived(source, target, eps=args.eps,
                                        seed=seed_for(args.seed, "noise"),
                                        source_arch=source_arch)
        bundle.save(args.out)
    else:
        config = load_config(args.space)
        net = build_supernet(config, seed=seed_for(args.seed, "supernet"),
                             mask_mode=args.mask_mode)
        net, report = map_to_supernet(source, net, eps=args.eps,
                                      seed=seed_for(args.seed, "noise"),
                                      source_arch=source_arch)
        net.save(args.out)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_verify(args) -> int:
    source = ParameterBundle.load(args.src)
    source_arch = load_arch(args.src_arch) if args.src_arch else source.architecture()
    target_arch = load_arch(args.dst_arch)
    mapped, _ = map_to_derived(source, target_arch, eps=0.0, source_arch=source_arch)
    src_net = instantiate(source_arch, seed=0)
    src_net.load_arrays(source.tensors)
    dst_net = instantiate(target_arch, seed=0)
    dst_net.load_arrays(mapped.tensors)
    report = verify_function_preservation(src_net, dst_net, samples=args.samples,
                                          tol=args.tol, seed=args.seed)
    _write_json(report, args.out)
    return 0 if report["passed"] else 2


def _cmd_finetune(args) -> int:
    arch = load_arch(args.arch)
    dataset = load_dataset(args.data)
    params = ParameterBundle.load(args.params) if args.params else None
    cfg = FinetuneConfig(lr=args.lr, batch_size=args.batch_size)
    bundle, curve = finetune(arch, params, dataset, epochs=args.epochs, cfg=cfg,
                             seed=seed_for(args.seed, "finetune"))
    bundle.save(args.out)
    if args.history:
        Path(args.history).write_text(
            "epoch,loss\n" + "".join(f"{i + 1},{repr(v)}\n" for i, v in enumerate(curve)),
            encoding="utf-8")
    accuracy = evaluate_accuracy(arch, bundle, dataset)
    _write_json({"final_loss": curve[-1] if curve else None,
                 "train_accuracy": accuracy, "epochs": args.epochs}, None)
    return 0


def end_to_end(space_path, seed: int, out_dir, samples: int = 256,
               epochs: int = 14, warmup: int = 8, lam: float = 0.1,
               batch_size: int = 8, pretrain_epochs: int = 8,
               finetune_epochs: int = 10, eps: float = 1e-5,
               mask_mode: str = "non_overlapping") -> dict:
    """Generate data, pretrain a source, map, search, derive, remap, fine-tune.

    Returns the summary document; all artifacts land in ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = load_config(space_path)

    data_path = out / "data.nat"
    dataset = generate(DatasetSpec(n_samples=samples, seed=seed_for(seed, "data")))
    save_dataset(dataset, data_path)

    source_arch = default_source_architecture(config)
    save_arch(source_arch, out / "source_arch.json")
    source_bundle, source_curve = finetune(
        source_arch, None, dataset, epochs=pretrain_epochs,
        seed=seed_for(seed, "source"))
    source_bundle.save(out / "source.nat")
    source_madds = madds_of_discrete(source_arch, config)

    net = build_supernet(config, seed=seed_for(seed, "supernet"), mask_mode=mask_mode)
    map_to_supernet(source_bundle, net, eps=eps, seed=seed_for(seed, "noise"))
    schedule = SearchSchedule(total_epochs=epochs, warmup_epochs=warmup,
                              batch_size=batch_size, seed=seed)
    net, history = search(net, dataset, schedule,
                          CostConfig(lam=lam, normalizer=float(source_madds)))
    net.save(out / "supernet.nat")
    history_path = out / "history.csv"
    history_to_csv(history, history_path)

    arch = derive_architecture(net.alpha, net.beta, config)
    arch_path = out / "derived_arch.json"
    save_arch(arch, arch_path)
    derived_madds = madds_of_discrete(arch, config)

    mapped, report = map_to_derived(source_bundle, arch, eps=eps,
                                    seed=seed_for(seed, "noise"),
                                    source_arch=source_arch)
    (out / "remap_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    final_bundle, curve = finetune(arch, mapped, dataset, epochs=finetune_epochs,
                                   seed=seed_for(seed, "finetune"))
    final_bundle.save(out / "derived.nat")
    accuracy = evaluate_accuracy(arch, final_bundle, dataset)

    # paths are relative to out_dir so equal-seed runs emit identical bytes
    summary = {
        "source_madds": source_madds,
        "derived_madds": derived_madds,
        "final_loss": curve[-1] if curve else None,
        "train_accuracy": accuracy,
        "history_path": history_path.name,
        "arch_path": arch_path.name,
        "source_pretrain_loss": source_curve[-1] if source_curve else None,
        "seed": seed,
        "lambda": lam,
        "meta": {"version": __version__},
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _cmd_e2e(args) -> int:
    summary = end_to_end(args.space, args.seed, args.out_dir, samples=args.samples,
                         epochs=args.epochs, warmup=args.warmup,
                         lam=getattr(args, "lambda"), batch_size=args.batch_size,
                         pretrain_epochs=args.pretrain_epochs,
                         finetune_epochs=args.finetune_epochs, eps=args.eps,
                         mask_mode=args.mask_mode)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _add_mask_mode(p):
    p.add_argument("--mask-mode", choices=["non_overlapping", "overlapping"],
                   default="non_overlapping",
                   help="channel mask variant (default non_overlapping)")


def build_parser() -> _Parser:
    parser = _Parser(prog="nasadapt",
                     description="Differentiable backbone adaptation at desk scale")
    parser.add_argument("--version", action="version", version=f"nasadapt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate the synthetic dataset")
    p.add_argument("--samples", type=int, default=256, help="number of samples")
    p.add_argument("--resolution", type=int, default=32, help="square image size")
    p.add_argument("--classes", type=int, default=4, help="number of shape classes")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output container path (.nat)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("search", help="train the supernet with the bi-level schedule")
    p.add_argument("--space", required=True, help="search-space JSON")
    p.add_argument("--data", required=True, help="dataset container (.nat)")
    p.add_argument("--epochs", type=int, default=14, help="total epochs (default 14)")
    p.add_argument("--warmup", type=int, default=8,
                   help="weight-only warm-up epochs (default 8)")
    p.add_argument("--lambda", type=float, default=0.1, dest="lambda",
                   help="cost regularization strength (default 0.1)")
    p.add_argument("--batch-size", type=int, default=8, help="batch size (default 8)")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--lr-mode", choices=["constant", "cosine"], default="constant",
                   help="weight learning-rate schedule")
    p.add_argument("--init-from", help="source bundle to map onto the supernet first")
    p.add_argument("--init-arch", help="architecture JSON of --init-from")
    p.add_argument("--eps", type=float, default=1e-5,
                   help="mapping noise amplitude for --init-from (default 1e-5)")
    p.add_argument("--out", required=True, help="output supernet checkpoint (.nat)")
    p.add_argument("--history", help="per-step history CSV path")
    _add_mask_mode(p)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("derive", help="collapse a supernet checkpoint by argmax")
    p.add_argument("--ckpt", required=True, help="supernet checkpoint (.nat)")
    p.add_argument("--space", required=True, help="search-space JSON")
    p.add_argument("--out", required=True, help="architecture JSON output")
    _add_mask_mode(p)
    p.set_defaults(func=_cmd_derive)

    p = sub.add_parser("cost", help="multiply-add cost of an architecture or supernet")
    p.add_argument("--space", required=True, help="search-space JSON")
    p.add_argument("--arch", help="discrete architecture JSON")
    p.add_argument("--ckpt", help="supernet checkpoint for expected cost")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    _add_mask_mode(p)
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("remap", help="map a source bundle onto an architecture or supernet")
    p.add_argument("--src", required=True, help="source parameter bundle (.nat)")
    p.add_argument("--src-arch", help="source architecture JSON "
                                      "(defaults to the bundle's sidecar)")
    p.add_argument("--dst-arch", help="target discrete architecture JSON")
    p.add_argument("--space", help="target search space (maps onto a fresh supernet)")
    p.add_argument("--eps", type=float, default=1e-5,
                   help="noise amplitude on zero-assigned entries (default 1e-5)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", required=True, help="output bundle/checkpoint (.nat)")
    p.add_argument("--report", help="mapping report JSON path")
    _add_mask_mode(p)
    p.set_defaults(func=_cmd_remap)

    p = sub.add_parser("verify", help="check function preservation of a mapping")
    p.add_argument("--src", required=True, help="source parameter bundle (.nat)")
    p.add_argument("--src-arch", help="source architecture JSON")
    p.add_argument("--dst-arch", required=True, help="target architecture JSON")
    p.add_argument("--samples", type=int, default=16, help="random probe inputs")
    p.add_argument("--tol", type=float, default=1e-5, help="max deviation tolerance")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("finetune", help="train a discrete architecture on the toy task")
    p.add_argument("--arch", required=True, help="architecture JSON")
    p.add_argument("--data", required=True, help="dataset container (.nat)")
    p.add_argument("--params", help="initial parameter bundle (.nat)")
    p.add_argument("--epochs", type=int, default=10, help="training epochs (default 10)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default 0.05)")
    p.add_argument("--batch-size", type=int, default=16, help="batch size (default 16)")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--out", required=True, help="output parameter bundle (.nat)")
    p.add_argument("--history", help="per-epoch loss CSV path")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("e2e", help="full pipeline: data, pretrain, search, derive, remap, finetune")
    p.add_argument("--space", required=True, help="search-space JSON")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--out-dir", required=True, help="artifact directory")
    p.add_argument("--samples", type=int, default=256, help="dataset size (default 256)")
    p.add_argument("--epochs", type=int, default=14, help="search epochs (default 14)")
    p.add_argument("--warmup", type=int, default=8, help="warm-up epochs (default 8)")
    p.add_argument("--lambda", type=float, default=0.1, dest="lambda",
                   help="cost regularization strength (default 0.1)")
    p.add_argument("--batch-size", type=int, default=8, help="search batch size")
    p.add_argument("--pretrain-epochs", type=int, default=8,
                   help="source pretraining epochs (default 8)")
    p.add_argument("--finetune-epochs", type=int, default=10,
                   help="final fine-tuning epochs (default 10)")
    p.add_argument("--eps", type=float, default=1e-5, help="mapping noise amplitude")
    _add_mask_mode(p)
    p.set_defaults(func=_cmd_e2e)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NasAdaptError as exc:
        print(f"nasadapt: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        print(f"nasadapt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
