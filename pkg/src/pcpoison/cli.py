"""Command-line entry points orchestrating the poisoning pipeline.

Every run writes a manifest (config echo, seeds, version, input hashes)
into its output directory before heavy work starts; rerunning with
--resume skips a stage whose manifest hash and outputs already match.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import VERSION_STRING, _kernels
from .attacks import AttackConfig, PoisonRun, VALID_METHODS, generate_poison
from .core import HAUSDORFF_VARIANTS, LabeledDataset, PerturbationSet
from .formats import read_pcd1, read_pcdd, write_pcd1
from .harness import TrainConfig, materialize, train_victim, transfer_eval
from .model import PointSetClassifier
from .optim import derive_rng


class ValidationError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# config files are flat `key = value` text, echoed verbatim into manifests
_ATTACK_FIELD_TYPES = {
    "method": str, "epochs": int, "model_steps": int, "poison_steps": int,
    "attack_steps": int, "lr_model": float, "lr_poison": float,
    "batch_size": int, "beta": float, "temperature": float, "epsilon": float,
    "zeta": float, "adaptive_beta": bool, "adaptive_scale": float,
    "adaptive_top_fraction": float, "adaptive_clamp": tuple, "target_map": str,
    "cls_loss": str, "step_mode": str, "arch": str, "seed": int,
    "pretrain_exit_acc": float, "plateau_factor": float,
    "plateau_patience": int, "plateau_min_lr": float, "hausdorff_variant": str,
}

_TRAIN_FIELD_TYPES = {
    "epochs": int, "batch_size": int, "lr": float, "plateau_factor": float,
    "plateau_patience": int, "plateau_min_lr": float, "val_fraction": float,
    "arch": str, "seed": int, "hausdorff_variant": str,
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno} is not `key = value`: {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(key, value, typ):
    if value in ("None", "none", ""):
        return None
    try:
        if typ is bool:
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if typ is tuple:
            return tuple(float(v) for v in value.split(","))
        return typ(value)
    except ValueError as exc:
        raise ValidationError(f"config key {key}: cannot parse {value!r}") from exc


def apply_mapping(instance, mapping, types, prefix=""):
    known = {f.name for f in dataclasses.fields(instance)}
    for key, value in mapping.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key in known:
            setattr(instance, key, _coerce(key, value, types[key]))
    return instance


def load_config_file(path) -> tuple[str, dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return text, parse_config_text(text)


# ---------------------------------------------------------------------------
# manifests and resume
# ---------------------------------------------------------------------------

def _stage_hash(command: str, config_text: str, extras: dict) -> str:
    blob = json.dumps(
        {"command": command, "config": config_text, "extras": extras}, sort_keys=True
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_manifest(outdir: Path, command: str, config_text: str, extras: dict,
                   outputs: list) -> str:
    outdir.mkdir(parents=True, exist_ok=True)
    stage = _stage_hash(command, config_text, extras)
    manifest = {
        "command": command,
        "config_echo": config_text,
        "extras": extras,
        "outputs": outputs,
        "stage_hash": stage,
        "version": VERSION_STRING,
        "kernel_backend": _kernels.backend(),
        "threads": os.environ.get("PCPOISON_THREADS", ""),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return stage


def can_resume(outdir: Path, command: str, config_text: str, extras: dict) -> bool:
    mpath = outdir / "manifest.json"
    if not mpath.exists():
        return False
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("stage_hash") != _stage_hash(command, config_text, extras):
        return False
    return all((outdir / name).exists() for name in manifest.get("outputs", []))


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def _resolve_data(data_arg, out_dir: Path, seed: int, allow_generate: bool):
    """Return (train, test, data_dir). Generates the default benchmark when
    no data source is given."""
    if data_arg:
        path = Path(data_arg)
        if path.is_dir():
            train_p, test_p = path / "train.pcd1", path / "test.pcd1"
            if not train_p.exists():
                raise ValidationError(f"missing dataset file: {train_p}")
            train = read_pcd1(train_p)
            test = read_pcd1(test_p) if test_p.exists() else None
            return train, test, str(path)
        if not path.exists():
            raise ValidationError(f"missing dataset file: {path}")
        return read_pcd1(path), None, str(path)
    if not allow_generate:
        raise ValidationError("no dataset given (--data or a `data` config key)")
    from .datasets import generate_benchmark

    train, test, data_dir = None, None, out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_benchmark(seed=seed)
    write_pcd1(data_dir / "train.pcd1", train)
    write_pcd1(data_dir / "test.pcd1", test)
    return train, test, str(data_dir)


def load_poison_run(run_dir) -> PoisonRun:
    """Rebuild a poison run from its saved artifacts."""
    run_dir = Path(run_dir)
    for name in ("deltas.pcdd", "surrogate.pcpm", "attack_config.cfg"):
        if not (run_dir / name).exists():
            raise ValidationError(f"missing poison artifact: {run_dir / name}")
    pert = read_pcdd(run_dir / "deltas.pcdd")
    model = PointSetClassifier.load(run_dir / "surrogate.pcpm")
    cfg = AttackConfig()
    apply_mapping(cfg, parse_config_text((run_dir / "attack_config.cfg").read_text()),
                  _ATTACK_FIELD_TYPES)
    return PoisonRun(perturbations=pert, trajectory=[], model=model, config=cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out)
    config_text = ""
    if args.config:
        config_text, _ = load_config_file(args.config)
    extras = {"seed": args.seed, "n": args.n, "train_per_class": args.train_per_class,
              "test_per_class": args.test_per_class}
    outputs = ["train.pcd1", "test.pcd1"]
    if args.resume and can_resume(out, "gen-data", config_text, extras):
        print(f"resume: {out} is up to date")
        return 0
    write_manifest(out, "gen-data", config_text, extras, outputs)
    from .datasets import generate_benchmark

    train, test = generate_benchmark(
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        n=args.n,
        seed=args.seed,
    )
    write_pcd1(out / "train.pcd1", train)
    write_pcd1(out / "test.pcd1", test)
    print(f"wrote {out}/train.pcd1 ({len(train)} samples) and test.pcd1 ({len(test)})")
    return 0


def _attack_config_from_args(args, mapping):
    cfg = AttackConfig(method=args.method)
    apply_mapping(cfg, mapping, _ATTACK_FIELD_TYPES)
    cfg.method = args.method
    if args.seed is not None:
        cfg.seed = args.seed
    if args.beta is not None:
        cfg.beta = args.beta
    if args.epsilon is not None:
        cfg.epsilon = args.epsilon
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.arch:
        cfg.arch = args.arch
    if args.hausdorff:
        cfg.hausdorff_variant = args.hausdorff
    return cfg


def cmd_poison(args):
    if args.method not in VALID_METHODS:
        raise ValidationError(
            f"unknown method {args.method!r}; valid methods: " + ", ".join(VALID_METHODS)
        )
    out = Path(args.out)
    config_text, mapping = ("", {})
    if args.config:
        config_text, mapping = load_config_file(args.config)
    cfg = _attack_config_from_args(args, mapping)
    extras = {"method": args.method, "cfg": cfg.to_text(), "data": args.data or mapping.get("data", "")}
    outputs = ["deltas.pcdd", "trajectory.csv", "surrogate.pcpm", "attack_config.cfg"]
    if args.resume and can_resume(out, "poison", config_text, extras):
        print(f"resume: {out} is up to date")
        return 0
    write_manifest(out, "poison", config_text, extras, outputs)
    train, _, data_dir = _resolve_data(
        args.data or mapping.get("data"), out, cfg.seed, allow_generate=True
    )
    run = generate_poison(train, cfg)
    run.save(out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["data_dir"] = data_dir
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    rep = run.trajectory[-1]
    print(
        f"{cfg.method}: chamfer_mean={rep.chamfer_mean:.6g} "
        f"hausdorff_mean={rep.hausdorff_mean:.6g} linf_max={rep.linf_max:.6g}"
    )
    return 0


def _train_config_from_args(args, mapping):
    # bare keys apply first, train_-prefixed keys override them
    cfg = TrainConfig()
    apply_mapping(cfg, mapping, _TRAIN_FIELD_TYPES)
    apply_mapping(cfg, mapping, _TRAIN_FIELD_TYPES, prefix="train_")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "arch", None):
        cfg.arch = args.arch
    if getattr(args, "hausdorff", None):
        cfg.hausdorff_variant = args.hausdorff
    return cfg


def _poison_data_dir(poison_dir):
    manifest = Path(poison_dir) / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text()).get("data_dir") or None
    return None


def cmd_train(args):
    out = Path(args.out)
    config_text, mapping = ("", {})
    if args.config:
        config_text, mapping = load_config_file(args.config)
    cfg = _train_config_from_args(args, mapping)
    extras = {"train": cfg.to_dict(), "data": args.data or "", "poison": args.poison or ""}
    outputs = ["report.json", "curves.csv", "victim.pcpm"]
    if args.resume and can_resume(out, "train", config_text, extras):
        print(f"resume: {out} is up to date")
        return 0
    write_manifest(out, "train", config_text, extras, outputs)
    data_arg = args.data or (args.poison and _poison_data_dir(args.poison))
    train, test, _ = _resolve_data(data_arg, out, cfg.seed, allow_generate=False)
    if test is None:
        raise ValidationError("training needs a data directory with test.pcd1")
    clean_reference = None
    if args.poison:
        run = load_poison_run(args.poison)
        clean_reference = train
        train = materialize(train, run.perturbations)
    model, report = train_victim(train, test, cfg, clean_reference=clean_reference)
    report.config["echo"] = config_text
    (out / "report.json").write_text(report.to_json())
    (out / "curves.csv").write_text(report.curves_csv())
    model.save(out / "victim.pcpm")
    print(f"test accuracy {report.accuracy:.4f} (method={report.method})")
    return 0


def cmd_eval(args):
    model = PointSetClassifier.load(args.model)
    path = Path(args.data)
    test_path = path / "test.pcd1" if path.is_dir() else path
    if not test_path.exists():
        raise ValidationError(f"missing dataset file: {test_path}")
    test = read_pcd1(test_path)
    from .harness import evaluate

    report = evaluate(model, test)
    payload = {
        "accuracy": report.accuracy,
        "per_class_accuracy": report.per_class_accuracy,
        "f1": report.f1,
        "arch": report.arch,
        "version": VERSION_STRING,
    }
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
    print(text)
    return 0


def cmd_transfer(args):
    out = Path(args.out)
    config_text, mapping = ("", {})
    if args.config:
        config_text, mapping = load_config_file(args.config)
    train_cfg = TrainConfig()
    apply_mapping(train_cfg, mapping, _TRAIN_FIELD_TYPES, prefix="train_")
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    extras = {"poison": args.poison, "victim_arch": args.arch,
              "train": train_cfg.to_dict(), "data": args.data or ""}
    outputs = ["report.json", "curves.csv", "victim.pcpm"]
    if args.resume and can_resume(out, "transfer", config_text, extras):
        print(f"resume: {out} is up to date")
        return 0
    write_manifest(out, "transfer", config_text, extras, outputs)
    data_arg = args.data or _poison_data_dir(args.poison)
    train, test, _ = _resolve_data(data_arg, out, train_cfg.seed, allow_generate=False)
    if test is None:
        raise ValidationError("transfer needs a data directory with test.pcd1")
    run = load_poison_run(args.poison)
    model, report, _ = transfer_eval(
        train, test, run.config, args.arch, train_cfg, poison_run=run
    )
    report.config["echo"] = config_text
    (out / "report.json").write_text(report.to_json())
    (out / "curves.csv").write_text(report.curves_csv())
    model.save(out / "victim.pcpm")
    print(
        f"transfer {report.surrogate_arch} -> {report.arch}: "
        f"test accuracy {report.accuracy:.4f}"
    )
    return 0


def cmd_sweep(args):
    out = Path(args.out)
    if args.method not in VALID_METHODS:
        raise ValidationError(
            f"unknown method {args.method!r}; valid methods: " + ", ".join(VALID_METHODS)
        )
    betas = [float(b) for b in args.beta.split(",") if b]
    if not betas:
        raise ValidationError("--beta needs a comma-separated list of values")
    config_text, mapping = ("", {})
    if args.config:
        config_text, mapping = load_config_file(args.config)
    cfg = AttackConfig(method=args.method)
    apply_mapping(cfg, mapping, _ATTACK_FIELD_TYPES)
    cfg.method = args.method
    train_cfg = TrainConfig()
    apply_mapping(train_cfg, mapping, _TRAIN_FIELD_TYPES, prefix="train_")
    if args.seed is not None:
        cfg.seed = args.seed
        train_cfg.seed = args.seed
    extras = {"method": args.method, "betas": betas, "cfg": cfg.to_text(),
              "train": train_cfg.to_dict(), "data": args.data or ""}
    outputs = ["sweep.csv", "sweep.json"]
    if args.resume and can_resume(out, "sweep", config_text, extras):
        print(f"resume: {out} is up to date")
        return 0
    write_manifest(out, "sweep", config_text, extras, outputs)
    train, test, _ = _resolve_data(
        args.data or mapping.get("data"), out, cfg.seed, allow_generate=True
    )
    from .analysis import beta_sweep, sweep_csv

    rows = beta_sweep(args.method, train, test, betas, cfg, train_cfg)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
    for r in rows:
        print(
            f"beta={r['beta']:g} acc={r['accuracy']:.4f} "
            f"Dc={r['chamfer_mean']:.6g} Dh={r['hausdorff_mean']:.6g}"
        )
    return 0


def cmd_analyze(args):
    from . import analysis

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.kind == "theorem2":
        if args.lipschitz is None or args.beta is None or args.gap is None:
            raise ValidationError("theorem2 needs --lipschitz, --beta and --gap")
        try:
            bound = analysis.theorem2_bound(
                analysis.BoundInputs(args.lipschitz, args.beta, args.gap)
            )
        except ValueError as exc:
            raise ValidationError(str(exc))
        payload = {"kind": "theorem2", "bound": bound}
    elif args.kind == "theorem3":
        results = []
        for i in range(args.instances):
            inst = analysis.random_separability_instance(
                args.seed + i, n_samples=args.samples, dim=args.dim
            )
            _, cert = analysis.theorem3_construct(inst)
            results.append(cert)
        payload = {
            "kind": "theorem3",
            "instances": results,
            "all_separable": all(c["separable"] for c in results),
            "all_within_budget": all(c["within_budget"] for c in results),
        }
    elif args.kind == "theorem1":
        if not args.run or not args.data:
            raise ValidationError("theorem1 needs --run and --data")
        run = load_poison_run(args.run)
        train, _, _ = _resolve_data(args.data, Path("."), 0, allow_generate=False)
        report = analysis.theorem1_gap_check(run, train, seed=args.seed)
        payload = {"kind": "theorem1", **report.to_dict()}
    elif args.kind == "fc-divergence":
        train, _, _ = _resolve_data(args.data, Path("."), args.seed, allow_generate=False)
        probe = analysis.fc_loss_divergence_probe(
            train, epochs=args.epochs or 30, seed=args.seed
        )
        payload = {
            "kind": "fc-divergence",
            "ce_converged": probe.ce_converged,
            "fc_not_converged": probe.fc_not_converged,
            "ce_curve": probe.ce_curve,
            "fc_curve": probe.fc_curve,
        }
        if out:
            (out / "curves.csv").write_text(probe.curves_csv())
    elif args.kind == "cosine":
        if not args.models:
            raise ValidationError("cosine needs --models name=ckpt[,name=ckpt...]")
        models = {}
        for part in args.models.split(","):
            name, _, path = part.partition("=")
            if not path:
                raise ValidationError(f"bad --models entry {part!r}")
            models[name] = PointSetClassifier.load(path)
        payload = {"kind": "cosine", "cosine": analysis.cosine_diagnostic(models)}
    else:
        raise ValidationError(f"unknown analysis kind {args.kind!r}")
    text = json.dumps(payload, sort_keys=True, indent=2, default=float)
    if out:
        (out / "analysis.json").write_text(text)
    print(text)
    return 0


def cmd_report(args):
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ValidationError(f"missing report: {path}")
        data = json.loads(path.read_text())
        dist = data.get("distances") or {}
        rows.append(
            {
                "method": data.get("method", "?"),
                "acc": data.get("accuracy"),
                "dc": dist.get("chamfer_mean"),
                "dh": dist.get("hausdorff_mean"),
            }
        )
    lines = ["method,acc,Dc_x1e4,Dh_x1e3"]
    for r in rows:
        dc = "-" if r["dc"] is None else f"{r['dc'] * 1e4:.4g}"
        dh = "-" if r["dh"] is None else f"{r['dh'] * 1e3:.4g}"
        lines.append(f"{r['method']},{r['acc']:.4f},{dc},{dh}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="pcpoison", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("poison", help="generate a poisoned perturbation set")
    p.add_argument("--method", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--arch", choices=sorted(("ref-small", "ref-variant")))
    p.add_argument("--hausdorff", choices=HAUSDORFF_VARIANTS)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="train a victim model")
    p.add_argument("--data")
    p.add_argument("--poison")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--arch", choices=sorted(("ref-small", "ref-variant")))
    p.add_argument("--hausdorff", choices=HAUSDORFF_VARIANTS)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="train a different victim on a saved poison")
    p.add_argument("--poison", required=True)
    p.add_argument("--arch", required=True, choices=sorted(("ref-small", "ref-variant")))
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sweep", help="poison + evaluate across beta values")
    p.add_argument("--method", required=True)
    p.add_argument("--beta", required=True, help="comma-separated values")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="theory checks and diagnostics")
    p.add_argument("--kind", required=True,
                   choices=("theorem1", "theorem2", "theorem3", "fc-divergence", "cosine"))
    p.add_argument("--out")
    p.add_argument("--run")
    p.add_argument("--data")
    p.add_argument("--models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lipschitz", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gap", type=float)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="merge run reports into a results table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def _apply_thread_cap():
    cap = os.environ.get("PCPOISON_THREADS")
    if cap and _kernels.backend() == "numba":
        try:
            import numba

            numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))
        except (ValueError, ImportError):
            pass


def main(argv=None) -> int:
    _apply_thread_cap()
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
