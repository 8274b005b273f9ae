"""Command-line entry point: ``ad2cn {train,eval,synth,gradcheck}``.

Exit codes: 0 success, 2 bad configuration or usage, 3 data / checkpoint
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import Ablation, ConfigError, TrainConfig, dump_config, load_config
from .data import DataError, gen_shifted_gaussians, load_features, save_csv
from .metrics import EvaluationError, evaluate, projection_rows, write_projection_csv
from .proto import PrototypeInitError
from .trainer import (CheckpointError, ConfigurationError, NumericalError, load_checkpoint,
                      save_checkpoint, train)

log = logging.getLogger("ad2cn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MANIFEST = "manifest.json"
RUN_LOG = "run_log.jsonl"
CHECKPOINT = "checkpoint.npz"
PRETRAIN_CHECKPOINT = "checkpoint_pretrain.npz"
REPORT = "report.json"
PROJECTION = "projection.csv"


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_config(args) -> TrainConfig:
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        overrides = {}
        for flag, key in (("lambda1", "lambda1"), ("lambda2", "lambda2"), ("sigma", "sigma"),
                          ("iters", "train_iters"), ("pretrain_iters", "pretrain_iters"),
                          ("batch", "batch_size"), ("seed", "seed"), ("eval_every", "eval_every")):
            val = getattr(args, flag, None)
            if val is not None:
                overrides[key] = val
        if getattr(args, "ablate", None):
            ab = cfg.ablation
            extra = Ablation.from_names(args.ablate)
            merged = {k: getattr(ab, k) or getattr(extra, k) for k in vars(ab)}
            overrides["ablation"] = merged
        return cfg.replace(**overrides) if overrides else cfg
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _load_inputs(source_path, target_path):
    try:
        source = load_features(source_path, domain_tag="source")
        target = load_features(target_path, domain_tag="target", class_count=source.class_count)
    except (DataError, OSError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None
    return source, target


def cmd_train(args) -> int:
    if args.manifest:
        try:
            man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            cfg = TrainConfig.from_dict(man["config"])
            src_path, tgt_path = man["inputs"]["source"]["path"], man["inputs"]["target"]["path"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"manifest error: {exc}") from None
        for role, path in (("source", src_path), ("target", tgt_path)):
            if not Path(path).is_file():
                raise CliError(EXIT_DATA, f"data error: {path}: no such file")
            if sha256(path) != man["inputs"][role]["sha256"]:
                raise CliError(EXIT_DATA, f"data error: {path} does not match the manifest hash")
    else:
        if not args.source or not args.target:
            raise CliError(EXIT_CONFIG, "train needs --source and --target (or --manifest)")
        cfg = _build_config(args)
        src_path, tgt_path = args.source, args.target

    source, target = _load_inputs(src_path, tgt_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {role: {"path": str(Path(p).resolve()), "sha256": sha256(p)}
                   for role, p in (("source", src_path), ("target", tgt_path))},
        "output_dir": str(out.resolve()),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.snapshot").write_text(dump_config(cfg), encoding="utf-8")

    with open(out / RUN_LOG, "w", encoding="utf-8") as logf:
        def emit(rec):
            logf.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            state = train(source, target, cfg, on_record=emit,
                          on_pretrained=lambda st: save_checkpoint(st, out / PRETRAIN_CHECKPOINT))
        except NumericalError as exc:
            raise CliError(EXIT_NUMERIC, f"numerical failure: {exc} (iteration {exc.iteration})") from None
        except (ConfigurationError, PrototypeInitError) as exc:
            raise CliError(EXIT_DATA, f"data error: {exc}") from None

    save_checkpoint(state, out / CHECKPOINT)
    if target.labeled:
        rep = evaluate(state, target)
        (out / REPORT).write_text(rep.to_json(), encoding="utf-8")
        print(f"target accuracy: C_P {rep.acc_CP:.4f} (headline), C_N {rep.acc_CN:.4f}")
    proj, domains, labels, preds = projection_rows(state, source, target)
    if proj.degenerate:
        log.warning("embeddings have zero variance; projection is all zeros")
    write_projection_csv(out / PROJECTION, proj, domains, labels, preds)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CliError(EXIT_DATA, f"checkpoint error: {exc}") from None
    try:
        target = load_features(args.target, domain_tag="target", class_count=state.num_classes)
        rep = evaluate(state, target)
    except (DataError, EvaluationError, OSError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None
    text = rep.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    shift = args.shift if len(args.shift) == 2 else args.shift * 2
    src, tgt = gen_shifted_gaussians(n_per_class=args.n_per_class, C=args.classes, d=args.dim,
                                     shift=shift, rotation_deg=args.rotation,
                                     noise_sigma=args.noise, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(src, out / "source.csv")
    save_csv(tgt, out / "target.csv")
    print(f"wrote {out / 'source.csv'} and {out / 'target.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = run_suite(instances=args.instances, seed=args.seed)
    ok = True
    for name, err in worst.items():
        flag = "ok" if err < args.tol else "FAIL"
        ok &= err < args.tol
        print(f"{name:16s} max_rel_err={err:.3e} {flag}")
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ad2cn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out")
        sp.add_argument("--config")

    t = sub.add_parser("train", help="pretrain and adapt, writing run artifacts to --out")
    common(t)
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--manifest", help="rerun exactly from a previous run's manifest.json")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--iters", type=int, help="adversarial training iterations")
    t.add_argument("--pretrain-iters", dest="pretrain_iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--ablate", action="append", choices=["dis", "m", "em", "same", "source"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled target file")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("target")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a shifted-Gaussian source/target pair")
    common(s, seed_default=0)
    s.add_argument("--n-per-class", type=int, default=200)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--rotation", type=float, default=30.0, help="degrees")
    s.add_argument("--shift", type=float, nargs="+", default=[0.5, 0.5])
    s.add_argument("--noise", type=float, default=0.35)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    common(g, seed_default=0)
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "synth") and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ad2cn: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
