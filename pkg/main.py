import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from mixattack.attacks import attack_batch
from mixattack.config import AttackMethod, ModelRegistry, RegistryEntry, Task, get_settings, make_attack_config
from mixattack.dataset_io import export_adversarial_set, load_dataset, save_dataset
from mixattack.errors import ArgumentError, ExportError, LoadError, MixAttackError
from mixattack.evaluation import ablation_run, beta_sweep, evaluate_predictions, format_table, robustness_gap, write_reports
from mixattack.model_interface import resolve_model
from mixattack.reference_models import (
    TOY_RECIPE,
    file_checksum,
    make_synthetic,
    make_synthetic_segmentation,
    make_toy_classifier,
    make_toy_segmenter,
    save_weights,
    split_train_test,
    train_toy,
)

# 1. Load environment (.env may set MIXATTACK_MODEL_REGISTRY / MIXATTACK_LOG_LEVEL)
load_dotenv()

logger = logging.getLogger("mixattack.cli")


# -- Data models -------------------------------------------------------------
class RunConfig(BaseModel):
    command: str = Field(description="attack | evaluate | ablate | gen-toy")
    attack: dict = Field(default_factory=dict, description="AttackConfig echo")
    paths: dict = Field(default_factory=dict, description="input/output paths given on the command line")
    report_format: str = "json+csv"


# -- Argument parsing ----------------------------------------------------------

def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--surrogate", required=True, help="model id (registry entry or toy:cls:<seed>)")
    parser.add_argument("--input", required=True, help="manifest CSV of the images to attack")
    parser.add_argument("--epsilon", type=float, default=1.0, help="single-step budget, pixels")
    parser.add_argument("--alpha", type=float, default=1.0, help="per-iteration step size, pixels")
    parser.add_argument("--iters", type=int, default=5, help="iterations T")
    parser.add_argument("--beta", type=float, default=None, help="CE weight (0.0005 mixup, 0.005 mixcut)")
    parser.add_argument("--nmix", type=int, default=10, help="source images in the virtual sample")
    parser.add_argument("--seed", type=int, default=42, help="virtual sample seed")
    parser.add_argument("--mu", type=float, default=1.0, help="C&W weight on the classification loss")
    parser.add_argument("--scale-copies", type=int, default=3, help="scale augmentation copies m")
    parser.add_argument("--no-momentum", action="store_true", help="disable momentum accumulation")
    parser.add_argument("--no-scale-aug", action="store_true", help="disable scale augmentation")
    parser.add_argument("--virtual-source", default=None, help="manifest the virtual sample is drawn from (default: --input)")
    parser.add_argument("--resample-virtual", action="store_true", help="draw a fresh virtual sample per image")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers across images")
    parser.add_argument("--registry", default=None, help="model registry JSON (default: $MIXATTACK_MODEL_REGISTRY)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixattack",
        description="Mixup / Mixcut feature-space adversarial attacks and their evaluation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    attack = sub.add_parser("attack", help="generate an adversarial set", formatter_class=fmt)
    _add_attack_flags(attack)
    attack.add_argument("--method", required=True, choices=[m.value for m in AttackMethod], help="perturbation generator")
    attack.add_argument("--out", required=True, help="bundle directory")
    attack.add_argument("--force", action="store_true", help="replace an existing bundle")
    attack.set_defaults(handler=cmd_attack)

    evaluate = sub.add_parser("evaluate", help="score victims on an adversarial set", formatter_class=fmt)
    evaluate.add_argument("--victim", nargs="+", required=True, help="victim model ids")
    evaluate.add_argument("--adv", required=True, help="manifest of the adversarial set")
    evaluate.add_argument("--clean", required=True, help="manifest of the matching clean set")
    evaluate.add_argument("--task", required=True, choices=[t.value for t in Task], help="classification | segmentation")
    evaluate.add_argument("--out", default=None, help="report directory (default: next to --adv)")
    evaluate.add_argument("--registry", default=None, help="model registry JSON (default: $MIXATTACK_MODEL_REGISTRY)")
    evaluate.set_defaults(handler=cmd_evaluate)

    ablate = sub.add_parser("ablate", help="loss-term / momentum ablation and beta sweep", formatter_class=fmt)
    _add_attack_flags(ablate)
    ablate.add_argument("--victim", required=True, help="victim model id")
    ablate.add_argument("--method", default="mixup", choices=["mixup", "mixcut"], help="virtual sampler")
    ablate.add_argument(
        "--toggles",
        nargs="+",
        default=["ce", "ce,mix", "ce,mix,momentum"],
        help="comma-separated toggle combinations drawn from ce, mix, momentum",
    )
    ablate.add_argument("--betas", nargs="+", type=float, default=None, help="also sweep these CE weights")
    ablate.add_argument("--out", required=True, help="report directory")
    ablate.set_defaults(handler=cmd_ablate)

    gen = sub.add_parser("gen-toy", help="write the synthetic datasets and trained toy models", formatter_class=fmt)
    gen.add_argument("--out", default="fixtures", help="fixture directory")
    gen.add_argument("--seed", type=int, default=42, help="data and weight seed")
    gen.add_argument("--n-per-class", type=int, default=TOY_RECIPE.n_per_class, help="training images per class")
    gen.add_argument("--epochs", type=int, default=TOY_RECIPE.epochs, help="training epochs")
    gen.add_argument("--force", action="store_true", help="replace existing fixtures")
    gen.add_argument("--pin", default=None, help="write the platform-independent checksums to this JSON file")
    gen.add_argument("--verify", default=None, help="compare the written fixtures with a pinned checksum file")
    gen.set_defaults(handler=cmd_gen_toy)
    return parser


def _registry(args) -> ModelRegistry:
    return ModelRegistry.load(args.registry or get_settings().model_registry)


def _attack_config(args, method: str):
    return make_attack_config(
        method=method,
        epsilon=args.epsilon,
        alpha=args.alpha,
        iterations=args.iters,
        beta=args.beta,
        n_mix=args.nmix,
        seed=args.seed,
        mu=args.mu,
        scale_copies=args.scale_copies,
        momentum=False if args.no_momentum else None,
        scale_augmentation=False if args.no_scale_aug else None,
        resample_virtual=args.resample_virtual,
    )


# -- Commands ------------------------------------------------------------------

def cmd_attack(args) -> int:
    config = _attack_config(args, args.method)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ExportError(f"{out} exists and is not empty (use --force)")
    surrogate = resolve_model(args.surrogate, _registry(args))
    dataset = load_dataset(args.input)
    source = load_dataset(args.virtual_source) if args.virtual_source else dataset

    results = attack_batch(surrogate, dataset, config, virtual_source=source, jobs=args.jobs)
    run = RunConfig(
        command="attack",
        attack=config.model_dump(mode="json"),
        paths={"input": args.input, "out": args.out, "surrogate": args.surrogate},
    )
    bundle = export_adversarial_set(results, out, dataset, config=run.model_dump(), overwrite=args.force)

    failed = [r for r in results if r.error]
    for result in failed:
        print(f"❌ {result.name}: {result.error}")
    print(f"📦 Bundle written to {bundle.root}: {len(results)} images, {len(failed)} failed")
    if failed:
        return 1
    print(f"✅ max |delta|_inf = {bundle.max_linf:.4f} (after 8-bit rounding {bundle.max_linf_rounded:.4f}), budget {config.budget:g}")
    return 0


def cmd_evaluate(args) -> int:
    registry = _registry(args)
    victims = [resolve_model(v, registry) for v in args.victim]
    adversarial = load_dataset(args.adv)
    clean = load_dataset(args.clean)
    task = Task(args.task)
    if adversarial.task != task or clean.task != task:
        raise ArgumentError(f"--task {task.value} does not match the manifests")
    if len(adversarial) != len(clean):
        raise ArgumentError(f"adversarial set has {len(adversarial)} records, clean set {len(clean)}")

    reports = [evaluate_predictions(v, adversarial, method="adversarial") for v in victims]
    reports += [evaluate_predictions(v, clean, method="clean") for v in victims]
    out = Path(args.out) if args.out else Path(args.adv).parent / "reports"
    json_path, csv_path = write_reports(reports, out, stem="evaluation")

    for report in reports[: len(victims)]:
        if task == Task.segmentation:
            print(f"✅ {report.victim}: SR {report.success_rate:.4f}  mF1 {report.mean_f1:.4f}")
            print(f"   per-class F1: {report.per_class_f1}")
        else:
            print(f"✅ {report.victim}: SR {report.success_rate:.4f}  OA {report.overall_accuracy:.4f}")
    for row in robustness_gap(victims, clean, adversarial):
        print(f"   {row.victim}: {row.metric} clean {row.clean:.4f} -> adversarial {row.adversarial:.4f} ({row.delta:+.4f})")
    print(f"📦 Reports written to {json_path} and {csv_path}")
    return 0


def parse_toggles(values: Sequence[str]) -> List[set]:
    combos = [{t.strip() for t in v.split(",") if t.strip()} for v in values]
    if not combos or any(not c for c in combos):
        raise ArgumentError("toggle combinations must be nonempty")
    return combos


def cmd_ablate(args) -> int:
    toggles = parse_toggles(args.toggles)
    config = _attack_config(args, args.method)
    registry = _registry(args)
    surrogate = resolve_model(args.surrogate, registry)
    victim = resolve_model(args.victim, registry)
    dataset = load_dataset(args.input)
    source = load_dataset(args.virtual_source) if args.virtual_source else dataset
    method = AttackMethod(args.method)

    reports = ablation_run(
        surrogate, victim, dataset, toggles, method, config, virtual_source=source, jobs=args.jobs
    )
    if args.betas:
        reports += beta_sweep(
            surrogate, victim, dataset, args.betas, method, config, virtual_source=source, jobs=args.jobs
        )
    json_path, csv_path = write_reports(reports, args.out, stem="ablation")
    print(format_table(reports))
    print(f"📦 Reports written to {json_path} and {csv_path}")
    return 0


def _write_checksums(root: Path) -> Path:
    sums = {
        str(path.relative_to(root)): file_checksum(path)
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }
    target = root / "checksums.json"
    target.write_text(json.dumps(sums, indent=2, sort_keys=True))
    return target


def _pinnable_checksums(root: Path) -> Dict[str, str]:
    """Dataset and registry digests; trained weights depend on the BLAS build and are left out."""
    sums = json.loads((root / "checksums.json").read_text())
    return {name: digest for name, digest in sums.items() if not name.startswith("models/")}


def _mismatched_checksums(root: Path, pinned_path: Path) -> List[str]:
    try:
        pinned = json.loads(pinned_path.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"{pinned_path}: not valid JSON ({e})") from e
    actual = _pinnable_checksums(root)
    return [name for name, digest in sorted(pinned.items()) if actual.get(name) != digest]


def cmd_gen_toy(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ExportError(f"{out} already holds fixtures (use --force)")
    seed, recipe = args.seed, TOY_RECIPE
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-fixtures-", dir=out.parent))
    try:
        n_test = recipe.n_test_per_class
        data = make_synthetic(recipe.n_classes, args.n_per_class + n_test, recipe.size, seed=seed)
        train, test = split_train_test(data, fraction=args.n_per_class / (args.n_per_class + n_test), seed=seed)
        save_dataset(train, tmp / "train")
        save_dataset(test, tmp / "test")
        save_dataset(make_synthetic(10, 2, recipe.size, seed=seed + 1), tmp / "virtual_source")
        print(f"✅ Synthetic sets: {len(train)} train, {len(test)} test")

        scenes = make_synthetic_segmentation(n_images=24, seed=seed)
        seg_train, seg_test = split_train_test(scenes, fraction=0.5, seed=seed)
        save_dataset(seg_train, tmp / "seg_train")
        save_dataset(seg_test, tmp / "seg_test")

        # surrogate and victim differ in seed and width
        models = {
            "toy-cls-a": (
                make_toy_classifier(seed=seed, width=8),
                train,
                RegistryEntry(architecture="toy_classifier", seed=seed, width=8),
            ),
            "toy-cls-b": (
                make_toy_classifier(seed=seed + 1, width=12),
                train,
                RegistryEntry(architecture="toy_classifier", seed=seed + 1, width=12),
            ),
            "toy-seg-a": (
                make_toy_segmenter(seed=seed),
                seg_train,
                RegistryEntry(architecture="toy_segmenter", task=Task.segmentation, seed=seed, n_classes=6),
            ),
        }
        registry = ModelRegistry()
        for k, (name, (model, train_set, entry)) in enumerate(models.items()):
            train_toy(model, train_set, epochs=args.epochs, seed=seed + k)
            save_weights(model, tmp / "models" / f"{name}.bin")
            registry.models[name] = entry.model_copy(update={"weights": f"models/{name}.bin"})
            print(f"✅ Trained {name}")
        (tmp / "registry.json").write_text(registry.model_dump_json(indent=2))
        _write_checksums(tmp)

        if out.exists():
            shutil.rmtree(out)
        tmp.replace(out)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"📦 Fixtures written to {out}")
    if args.pin:
        pin = Path(args.pin)
        pin.parent.mkdir(parents=True, exist_ok=True)
        pinned = _pinnable_checksums(out)
        pin.write_text(json.dumps(pinned, indent=2, sort_keys=True))
        print(f"📌 Pinned {len(pinned)} checksums to {pin}")
    if args.verify:
        mismatched = _mismatched_checksums(out, Path(args.verify))
        for name in mismatched:
            print(f"❌ {name} does not match {args.verify}")
        if mismatched:
            return 1
        print(f"✅ Fixtures match {args.verify}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (MixAttackError, OSError) as e:
        print(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
