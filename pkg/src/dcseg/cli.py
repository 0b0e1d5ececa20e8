"""Command-line entry point: ``dcseg {generate,train,eval,gradcheck}``.

Exit codes:
    0  success
    1  gradcheck found a gradient outside tolerance
    2  invalid input: config, checkpoint, dataset path, or config/checkpoint mismatch
    3  training diverged (non-finite loss)
    4  filesystem error while reading or writing outputs
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import config as C
from .data import load_dataset, phantom_cohort, split_by_subject, write_phantom_dataset, ensure_dir_writable
from .evaluation import (evaluate_all_subsets, export_representations, lesion_regions,
                         write_report)
from .gradcheck import format_results, run_gradcheck
from .networks import ModelConfig
from .training import CheckpointError, TrainingDiverged, load_model, run_training

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("dcseg")


class InputError(Exception):
    pass


def device_from_env() -> str:
    name = os.environ.get("DCSEG_DEVICE", "cpu")
    try:
        torch.device(name)
    except RuntimeError as exc:
        raise InputError(f"DCSEG_DEVICE={name!r} is not a valid device") from exc
    return name


def _dataset_for(rc: C.RunConfig):
    """All subjects named by the config's data section."""
    names = rc.model.modality_names
    if rc.data.path is not None:
        if not Path(rc.data.path).is_dir():
            raise InputError(f"data.path: dataset directory not found: {rc.data.path}")
        return load_dataset(rc.data.path, names)
    return phantom_cohort(rc.data.phantom, rc.data.phantom_count)


def cmd_generate(args) -> int:
    spec, count = C.load_phantom_spec(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    count = args.count if args.count is not None else (count if count is not None else 10)
    out = ensure_dir_writable(args.out)
    write_phantom_dataset(spec, out, count)
    print(f"wrote {count} subjects to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = C.load_config(args.config)
    train = rc.train
    if args.ablate:
        train = train.ablated(*args.ablate)
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    rc = replace(rc, train=train, augment=replace(rc.augment, seed=train.seed))
    if args.max_steps is not None:
        rc.train.max_steps = args.max_steps
    out = ensure_dir_writable(args.out or rc.output_dir)
    subjects = _dataset_for(rc)
    train_set, _ = split_by_subject(subjects, rc.data.test_fraction)
    if not train_set:
        raise InputError("data: no training subjects after the subject split")
    (out / "config.yaml").write_text(C.dump_config(rc))

    def progress(step, parts):
        if step % 50 == 0:
            log.info("step %d total %.4f seg %.4f reg %.4f ana %.4f mod %.4f rec %.4f",
                     step, parts["total"], parts["seg"], parts["reg"], parts["ana"], parts["mod"], parts["rec"])

    res = run_training(train_set, rc.model, rc.train, out, rc.augment, resume=not args.restart,
                       device=device_from_env(), progress=progress)
    print(f"trained {res['steps']} steps; checkpoint {res['checkpoint']}")
    return EXIT_OK


def _check_model_match(ckpt_cfg: ModelConfig, cfg: ModelConfig):
    a, b = ckpt_cfg.to_dict(), cfg.to_dict()
    for key in a:
        if a[key] != b[key]:
            raise InputError(f"model.{key}: checkpoint has {a[key]!r}, config has {b[key]!r}")


def _parse_subset(text: str, names) -> tuple[int, ...]:
    wanted = [t.strip().lower() for t in text.split(",") if t.strip()]
    lowered = [n.lower() for n in names]
    unknown = [w for w in wanted if w not in lowered]
    if unknown or not wanted:
        raise InputError(f"--subset: unknown modality {unknown[0] if unknown else '(empty)'}; "
                         f"choose from {','.join(names)}")
    return tuple(int(n in wanted) for n in lowered)


def cmd_eval(args) -> int:
    device = device_from_env()
    try:
        model, payload = load_model(args.checkpoint, device)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    rc = C.load_config(args.config) if args.config else None
    if rc is not None:
        _check_model_match(model.cfg, rc.model)
    names = model.cfg.modality_names
    if args.data:
        if not Path(args.data).is_dir():
            raise InputError(f"--data: dataset directory not found: {args.data}")
        subjects = load_dataset(args.data, names)
        split = args.split or "all"
    elif rc is not None:
        subjects = _dataset_for(rc)
        split = args.split or "test"
    else:
        raise InputError("eval needs --data or --config")
    if split != "all":
        frac = rc.data.test_fraction if rc is not None else 0.2
        train_set, test_set = split_by_subject(subjects, frac)
        subjects = test_set if split == "test" else train_set
    if not subjects:
        raise InputError(f"no subjects to evaluate in split {split!r}")
    for s in subjects:
        if s.modality_count != model.cfg.modality_count:
            raise InputError(f"model.modality_count: checkpoint has {model.cfg.modality_count}, "
                             f"dataset has {s.modality_count}")
    subsets = [_parse_subset(args.subset, names)] if args.subset else None
    out = ensure_dir_writable(args.out)
    report = evaluate_all_subsets(model, subjects, lesion_regions(model.cfg.class_count), subsets)
    csv_path, md_path = write_report(report, out)
    export_representations(model, subjects, out / "embeddings.csv")
    print(report.to_markdown(), end="")
    print(f"wrote {csv_path}, {md_path}, {out / 'embeddings.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(tol=args.tol)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcseg", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog=__doc__.split("\n", 1)[1])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--config", required=True, help="run config or bare phantom spec (YAML/JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--ablate", action="append", choices=["ana", "mod", "rec", "reg"], default=[])
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--restart", action="store_true", help="ignore an existing last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate every modality subset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=["all", "train", "test"])
    e.add_argument("--subset", help="comma-separated modalities, e.g. FLAIR,T1")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
