"""Command-line front end: dataset generation, training, prediction,
evaluation, the gate ablation table, and a gradient self-check.

Exit codes: 0 success, 1 verification/numerical failure, 2 usage or
configuration error.
"""

import argparse
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .fpa import FUSION_POLICIES, Prototype, fpa_loss, similarity_map
from .metrics import evaluate, write_report
from .nnkit import (FeatureMap, ModelSpec, NumericalError, SegModel,
                    grad_check, loss_seg)
from .phantom import GenerationError
from .pipeline import (ABLATION_ROWS, ExperimentConfig, build_phantom_dataset,
                       load_dataset, load_experiment, predict, run_ablation,
                       run_experiment)
from .volgrid import (ConfigError, FormatError, PvaLabel, ValidationError,
                      Volume, read_volume, write_volume)

ROW_LABELS = {"baseline": "baseline", "pli": "+PLI", "pli_plu": "+PLI+PLU",
              "pli_plu_fpa": "+PLI+PLU+FPA"}


def _wipe(path: Path):
    if path.exists():
        shutil.rmtree(path)


# ----------------------------------------------------------------- commands

def cmd_gen_phantom(args) -> int:
    if not 0.0 < args.fraction <= 1.0:
        raise ConfigError(f"--fraction must be in (0, 1], got {args.fraction}")
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    out = Path(args.out)
    man_path = out / "manifest.json"
    if man_path.exists():
        old = json.loads(man_path.read_text())
        same = (len(old.get("subjects", [])) == args.n
                and old.get("labeled_fraction") == args.fraction
                and old.get("rng_seed") == args.seed)
        if not same and not args.force:
            raise ConfigError(
                f"{out} holds a dataset built with different flags; "
                "pass --force to replace it")
        if not same:
            _wipe(out)
    elif out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(
                f"{out} exists and is not empty; pass --force to replace it")
        _wipe(out)
    manifest = build_phantom_dataset(out, args.n, args.fraction, args.seed)
    for sid in manifest["subjects"]:
        print(f"{sid}: labeled fraction {manifest['achieved'][sid]:.4f}")
    print(f"wrote {args.n} subjects to {out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")
    return 0


def _merge_config(args, extra: dict | None = None) -> ExperimentConfig:
    """Config file values override defaults; CLI flags override the file."""
    merged = {}
    if args.config:
        merged.update(json.loads(Path(args.config).read_text()))
    if extra:
        merged.update(extra)
    if getattr(args, "seed", None) is not None:
        merged["rng_seed"] = args.seed
    if getattr(args, "out", None):
        merged["out_dir"] = args.out
    if getattr(args, "fusion", None):
        merged["fusion"] = args.fusion
    if getattr(args, "rounds", None) is not None:
        merged["self_training_rounds"] = args.rounds
    if getattr(args, "epochs", None) is not None:
        merged["epochs_per_round"] = args.epochs
    if getattr(args, "no_pli", False):
        merged["use_pli"] = False
    if getattr(args, "no_plu", False):
        merged["use_plu"] = False
    if getattr(args, "no_fpa", False):
        merged["use_fpa"] = False
    return ExperimentConfig.from_json_dict(merged)


def cmd_train(args) -> int:
    config = _merge_config(args)
    if args.force:
        _wipe(Path(config.out_dir))
    report = run_experiment(config)
    accepted = sum(1 for recs in report["eta"].values()
                   for r in recs if r[2])
    proposed = sum(len(recs) for recs in report["eta"].values())
    print(f"gate updates accepted: {accepted}/{proposed}")
    if report["metrics"] is not None:
        agg = report["metrics"]["aggregate"]
        print(f"test dice {agg['dice']['mean']:.4f}  "
              f"rdice {agg['rdice']['mean']:.4f}  "
              f"ov {agg['ov']['mean']:.4f}  "
              f"of {agg['of_mean']['mean']:.4f}")
    print(f"report written to {Path(config.out_dir) / 'report.json'}")
    return 0


def _pred_name(path: Path) -> str:
    # dataset images are all called image.vvol; key those by subject dir
    return path.parent.name if path.name == "image.vvol" else path.stem


def cmd_predict(args) -> int:
    config, sg_store, proto = load_experiment(args.experiment)
    if args.fusion:
        config = replace(config, fusion=args.fusion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        image = read_volume(image_path)
        target = out / f"{_pred_name(Path(image_path))}_mask.vvol"
        if target.exists() and not args.force:
            raise ConfigError(
                f"{target} exists; pass --force to overwrite")
        mask = predict(sg_store, proto, image, config)
        write_volume(mask, target)
        print(f"{target}: {int(mask.data.sum())} foreground voxels")
    return 0


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.predictions)
    found = {}
    for f in sorted(pred_dir.glob("*.vvol")):
        sid = f.stem[:-5] if f.stem.endswith("_mask") else f.stem
        found[sid] = f
    if not found:
        raise ConfigError(f"no .vvol predictions found in {pred_dir}")
    subjects, _, _ = load_dataset(args.dataset)
    missing = sorted(set(found) - set(subjects))
    if missing:
        raise ConfigError(
            f"predictions without matching subjects: {missing}")
    out = Path(args.out)
    json_path = out / "report.json"
    if json_path.exists() and not args.force:
        raise ConfigError(f"{json_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    sids = sorted(found)
    report = evaluate([read_volume(found[s]) for s in sids],
                      [subjects[s].gt for s in sids],
                      [subjects[s].tree for s in sids], ids=sids)
    write_report(report, json_path, out / "report.csv")
    for key in ("dice", "rdice", "ov", "of_mean"):
        agg = report.aggregate[key]
        print(f"{key:8s} mean {agg['mean']:.4f}  std {agg['std']:.4f}")
    print(f"report written to {json_path}")
    return 0


def cmd_ablate(args) -> int:
    config = _merge_config(args)
    if args.force:
        _wipe(Path(config.out_dir))
    seeds = [config.rng_seed + i for i in range(args.n)]
    result = run_ablation(config, seeds)
    print(f"{'row':14s} {'Dice':>7s} {'RDice':>7s} {'OV':>7s} {'OF':>7s}")
    for row in ABLATION_ROWS:
        agg = result["summary"][row]
        print(f"{ROW_LABELS[row]:14s} {agg['dice']:7.4f} "
              f"{agg['rdice']:7.4f} {agg['ov']:7.4f} {agg['of_mean']:7.4f}")
    print(f"table written to {Path(config.out_dir) / 'ablation.json'}")
    return 0


def _rho_grad_report(rng, tol: float) -> dict:
    """Finite-difference check of the prototype-loss gradient."""
    c = 4
    z = FeatureMap.from_array(
        rng.standard_normal((c, 5, 5, 5)).astype(np.float32))
    m = (rng.random((5, 5, 5)) > 0.6).astype(np.uint8)
    m[2, 2, 2] = 1
    pva = PvaLabel(mask=Volume.from_array(m, role="mask"),
                   labeled_fraction=1.0)
    proto = Prototype(rho=rng.standard_normal(c).astype(np.float32) * 0.3)
    _, grad = fpa_loss(similarity_map(z, proto), pva, z, proto)

    def loss_at(vec):
        p = Prototype(rho=np.asarray(vec, dtype=np.float32))
        return fpa_loss(similarity_map(z, p), pva)[0]

    eps = 1e-3
    max_rel = 0.0
    rho = proto.rho.astype(np.float64)
    for i in range(c):
        step = np.zeros(c)
        step[i] = eps
        fd = (loss_at(rho + step) - loss_at(rho - step)) / (2 * eps)
        rel = abs(float(grad[i]) - fd) / max(abs(float(grad[i])) + abs(fd),
                                             1e-8)
        max_rel = max(max_rel, rel)
    status = "ok" if max_rel < tol else "fail"
    return {"max_rel_err": max_rel, "status": status}


def cmd_grad_check(args) -> int:
    tol = 1e-3
    rng = np.random.default_rng(args.seed)
    model = SegModel(ModelSpec(widths=(3, 3)), rng=rng)
    patch = rng.random((6, 6, 6)).astype(np.float32)
    target = (rng.random((6, 6, 6)) > 0.7).astype(np.float64)

    def loss_fn(y):
        return loss_seg(y, target)

    # small step: the check runs in float64, and a wide step risks spanning
    # a relu kink, which makes the central difference wrong by O(1)
    report = grad_check(model, patch, loss_fn=loss_fn, eps=1e-5, tol=tol)
    report["fpa.rho"] = _rho_grad_report(rng, tol)
    failed = False
    for name, entry in report.items():
        err = entry["max_rel_err"]
        shown = "-" if err is None else f"{err:.3e}"
        print(f"{name:10s} {shown:>10s}  {entry['status']}")
        failed = failed or entry["status"] == "fail"
    return 1 if failed else 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvaseg",
        description="Vessel segmentation from partial annotations: phantom "
                    "data, progressive training, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom",
                       help="generate a phantom dataset with partial labels")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n", type=int, default=12, help="number of subjects")
    p.add_argument("--fraction", type=float, default=0.2429,
                   help="target labeled fraction of vessel voxels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="replace an existing dataset")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="run the full training pipeline")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="experiment directory")
    p.add_argument("--force", action="store_true",
                   help="discard a previous run in the output directory")
    p.add_argument("--fusion", choices=FUSION_POLICIES, default=None)
    p.add_argument("--no-pli", action="store_true",
                   help="skip pseudo-label initialization")
    p.add_argument("--no-plu", action="store_true",
                   help="skip gated pseudo-label updates")
    p.add_argument("--no-fpa", action="store_true",
                   help="skip prototype fitting")
    p.add_argument("--rounds", type=int, default=None,
                   help="self-training rounds")
    p.add_argument("--epochs", type=int, default=None,
                   help="epochs per self-training round")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment volumes with a trained run")
    p.add_argument("experiment", help="finished experiment directory")
    p.add_argument("images", nargs="+", help=".vvol volumes to segment")
    p.add_argument("--out", required=True, help="directory for masks")
    p.add_argument("--fusion", choices=FUSION_POLICIES, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a dataset")
    p.add_argument("predictions", help="directory of predicted masks")
    p.add_argument("dataset", help="dataset directory with ground truth")
    p.add_argument("--out", required=True, help="directory for the report")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the gate ablation table")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--n", type=int, default=5, help="number of seeds")
    p.add_argument("--seed", type=int, default=None, help="first seed")
    p.add_argument("--out", default=None, help="ablation directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--fusion", choices=FUSION_POLICIES, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check",
                       help="verify gradients by finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FormatError, GenerationError,
            FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
