"""``plmatch`` command line: train, eval, inspect, gradcheck, bench, lambda-sweep.

Exit codes: 0 ok, 1 check failed, 2 usage/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import PIXEL_MEAN, PIXEL_STD, generate_image, sample_aug_pair
from .geometry import (
    DEMO_IMAGE_SIZE,
    DEMO_KEY,
    DEMO_QUERY,
    AugmentationSpec,
    GeometryError,
    Rect,
    inspect_dump,
    match_weights,
    overlap_matrix,
    patch_boxes,
)
from .matching import FeatureGrid, feature_match, location_match, precise_match

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("plmatch")


class UsageError(Exception):
    pass


def _config(args):
    seed = getattr(args, "seed", None)
    overrides = list(args.set or [])
    if seed is not None:
        overrides.append(f"seed={seed}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .trainer import NumericalAbort, train

    cfg = _config(args)
    out = Path(args.out)
    try:
        state, records = train(cfg, out_dir=out, progress=True)
    except NumericalAbort as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "abort.json").write_text(json.dumps(exc.diagnostics, indent=2))
        print(f"numerical abort: {exc}; diagnostics in {out / 'abort.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    first = np.mean([r.combined for r in records[:50]])
    last = np.mean([r.combined for r in records[-50:]])
    print(f"trained {len(records)} steps; combined loss first50={first:.4f} last50={last:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import linear_probe, make_probe_dataset, matching_fidelity, random_init_params, write_json, ProbeReport
    from .model import load_checkpoint

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = None
    if args.checkpoint:
        groups, _ = load_checkpoint(args.checkpoint)
        params = groups["query"]
    n_pairs = args.pairs or cfg.fidelity_pairs
    fid = matching_fidelity(cfg, n_pairs, cfg.eval_seed, params=params)
    write_json(fid.to_dict(), out / "fidelity.json")
    ds = make_probe_dataset(cfg, cfg.eval_seed)
    report = ProbeReport(random_init=linear_probe(random_init_params(cfg), ds, cfg.eval_seed, cfg.probe_ridge, cfg.model(), args.layer))
    if args.checkpoint:
        report.matchers[args.label] = linear_probe(args.checkpoint, ds, cfg.eval_seed, cfg.probe_ridge, layer=args.layer)
    write_json(report.to_dict(), out / "probe.json")
    print(json.dumps({"fidelity": fid.to_dict(), "probe": report.to_dict()}, indent=2))
    return EXIT_OK


def _parse_rect(text: str) -> Rect:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"rect must be x0,y0,w,h; got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"rect must be x0,y0,w,h; got {text!r}")
    try:
        return Rect(*vals)
    except GeometryError as exc:
        raise UsageError(str(exc)) from None


def cmd_inspect(args) -> int:
    if args.preset == "demo":
        aq, ak, size = DEMO_QUERY, DEMO_KEY, DEMO_IMAGE_SIZE
        g = 3
    else:
        if not (args.query and args.key):
            raise UsageError("inspect needs --query and --key (or --preset demo)")
        g = args.grid
        size = args.image_size
        aq = AugmentationSpec(_parse_rect(args.query), out_size=args.out_size, hflip=args.hflip_query)
        ak = AugmentationSpec(_parse_rect(args.key), out_size=args.out_size, hflip=args.hflip_key)
    if g < 1:
        raise UsageError("grid must be >= 1")
    for a in (aq, ak):
        if size is not None and not a.within(size, size):
            raise UsageError(f"crop {a.crop.as_tuple()} outside the {size}x{size} image")
    try:
        pq, pk = patch_boxes(aq, g), patch_boxes(ak, g)
    except GeometryError as exc:
        raise UsageError(str(exc)) from None
    om = overlap_matrix(pq, pk)
    mw = match_weights(om)
    extra = {"matcher": args.matcher}
    if args.matcher == "pl":
        extra["valid"] = [bool(v) for v in (om.m.sum(axis=1) > 0)]
    elif args.matcher == "loc":
        dummy = FeatureGrid(local=np.eye(g * g), global_vec=np.ones(1))
        extra["assignment"] = [int(j) for j in location_match(pq, pk, dummy).assignment]
    else:
        from .model import ModelConfig, encode, init_params, resample

        if size is None:
            raise UsageError("--matcher ft needs --image-size")
        # features from a random-init encoder on a synthetic image
        mcfg = ModelConfig(out_size=args.out_size, g=g, input_mean=PIXEL_MEAN, input_std=PIXEL_STD)
        rng = np.random.default_rng(args.seed)
        params = init_params(mcfg, rng)
        from .data import DataConfig

        img = generate_image(args.seed, DataConfig(height=size, width=size))
        try:
            fq = encode(resample(img.pixels, AugmentationSpec(aq.crop, args.out_size, aq.hflip)), params, mcfg)
            fk = encode(resample(img.pixels, AugmentationSpec(ak.crop, args.out_size, ak.hflip)), params, mcfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        extra["assignment"] = [int(j) for j in feature_match(fq, fk).assignment]
    print(inspect_dump(g, om, mw, **extra))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .trainer import full_loss_gradcheck

    worst = 0.0
    for seed in args.seeds:
        err = full_loss_gradcheck(seed, h=args.h, matcher=args.matcher)
        print(f"seed {seed}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"gradcheck {'passed' if ok else 'FAILED'}: max relative error {worst:.3e} (tolerance {args.tol:g}, h={args.h:g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    from .data import AugSamplerConfig

    g = args.grid
    n = g * g
    aug_cfg = AugSamplerConfig(g=g)
    rng = np.random.default_rng(args.seed)
    feats = FeatureGrid(local=rng.standard_normal((n, 32)), global_vec=np.zeros(1))
    print(f"bench g={g} n={n} pairs={args.pairs}")
    digest = hashlib.sha256()
    t0 = time.perf_counter()
    for p in range(args.pairs):
        aq, ak = sample_aug_pair([args.seed, p], aug_cfg, (64, 64))
        t = time.perf_counter()
        om = overlap_matrix(patch_boxes(aq, g), patch_boxes(ak, g))
        precise_match(om, feats)
        dt = time.perf_counter() - t
        digest.update(om.m.tobytes())
        if args.verbose or args.pairs == 1:
            print(f"pair {p}: {dt * 1e6:.1f} us")
    total = time.perf_counter() - t0
    print(f"pairs/sec {args.pairs / total:.1f}")
    print(f"M checksum {digest.hexdigest()[:16]}")
    return EXIT_OK


def cmd_lambda_sweep(args) -> int:
    from .evaluation import lambda_sweep, matcher_comparison, write_csv

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    if any(not 0 <= v <= 1 for v in lambdas):
        raise UsageError("lambdas must lie in [0, 1]")
    rows = lambda_sweep(cfg, lambdas, layer=args.layer)
    write_csv(rows, out / "lambda_sweep.csv")
    if args.matchers:
        write_csv(matcher_comparison(cfg.with_overrides(steps=cfg.sweep_steps), layer=args.layer), out / "matcher_probe.csv")
    for row in rows:
        print(f"lambda={row['lambda']:.2f} probe_mae={row['probe_mae']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value file (or a config.json echo)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        return p

    p = with_config(sub.add_parser("train", help="run the training loop"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="matching fidelity and linear probe"))
    p.add_argument("--checkpoint")
    p.add_argument("--label", default="trained")
    p.add_argument("--pairs", type=int)
    p.add_argument("--layer", default="local", choices=("backbone", "local"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump the overlap matrix of two crops as JSON")
    p.add_argument("--query", help="x0,y0,w,h of the query crop")
    p.add_argument("--key", help="x0,y0,w,h of the key crop")
    p.add_argument("--preset", choices=("demo",))
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--out-size", type=int, default=96)
    p.add_argument("--image-size", type=int)
    p.add_argument("--hflip-query", action="store_true")
    p.add_argument("--hflip-key", action="store_true")
    p.add_argument("--matcher", choices=("pl", "loc", "ft"), default="pl")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, nargs="+", dest="seeds", default=[0])
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--matcher", choices=("pl", "loc", "ft"), default="pl")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time overlap + precise matching")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("lambda-sweep", help="probe MAE across loss weights"))
    p.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--matchers", action="store_true", help="also compare pl/loc/ft")
    p.add_argument("--layer", default="local", choices=("backbone", "local"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lambda_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "bench" and args.pairs < 1:
        print("error: --pairs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
