"""Command-line driver. Every stage reads and writes files in the output directory.

Exit codes: 0 success, 1 configuration error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .config import ExperimentConfig, parse_config
from .errors import ConfigError, DataError, VQPurifyError
from .evaluate import (ablate, classifier_config, grad_align_target, load_data, natural_accuracy,
                       poison_success_rate, prediction_dump, purifier_config, purify,
                       reconstruction_stats, run_experiment)
from .nets import build_classifier, build_generator
from .poison import TriggerSpec, gradient_align_poison, make_trigger, poison_train
from .train import train_classifier, train_purifier

OUT_ENV = "VQPURIFY_OUT"
log = logging.getLogger("vqpurify")

TRAIN_SET = "train.ckpt"
TEST_SET = "test.ckpt"
POISONED_SET = "poisoned.ckpt"
POISON_INDEX = "poisoned_indices.txt"
TRIGGER = "trigger.ckpt"
GENERATOR = "generator.ckpt"
DISCRIMINATOR = "discriminator.ckpt"
CLASSIFIER = "classifier.ckpt"


class MissingArtifact(DataError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{path} not found; run `{stage}` first")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def _seed(cfg: ExperimentConfig) -> int:
    return cfg.eval.seeds[0]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, out: Path, args) -> None:
    train_set, test_set = load_data(cfg)
    dio.save_image_set(train_set, out / TRAIN_SET)
    dio.save_image_set(test_set, out / TEST_SET)
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")


def write_poison_index(path: Path, indices, spec: TriggerSpec | None, attack_type: str) -> None:
    header = spec.header() if spec is not None else "#"
    lines = [f"{header} attack={attack_type}", *map(str, indices)]
    path.write_text("\n".join(lines) + "\n")


def read_poison_index(path: Path) -> list[int]:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing header line")
    try:
        return [int(x) for x in lines[1:] if x.strip()]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_poison(cfg, out: Path, args) -> None:
    train_set = dio.load_image_set(_require(out / TRAIN_SET, "gen-data"))
    a, seed = cfg.attack, _seed(cfg)
    spec = make_trigger(a.budget, a.poison_fraction, a.target_label, seed, shape=train_set.images.shape[1:])
    if a.type == "trigger":
        poisoned = poison_train(train_set, spec)
        dio.save_checkpoint({"pattern": spec.pattern}, out / TRIGGER)
    elif a.type == "grad_align":
        test_set = dio.load_image_set(_require(out / TEST_SET, "gen-data"))
        surrogate = train_classifier(train_set, None, classifier_config(cfg, seed + 5000))
        target = grad_align_target(test_set, a.target_label, seed)
        poisoned = gradient_align_poison(train_set, surrogate, test_set.images[target], a.target_label,
                                         a.budget, a.poison_fraction, a.grad_align_steps, seed)
        dio.save_checkpoint({"target_index": np.array([target], dtype=np.float32)}, out / TRIGGER)
        spec = None
    else:
        raise ConfigError("attack.type = none has nothing to poison; train on train.ckpt directly")
    dio.save_image_set(poisoned.dataset, out / POISONED_SET)
    write_poison_index(out / POISON_INDEX, poisoned.poisoned_indices, spec, a.type)
    print(f"poisoned {len(poisoned.poisoned_indices)} samples of class {a.target_label}")


def _training_set(cfg, out: Path):
    if cfg.attack.type == "none":
        return dio.load_image_set(_require(out / TRAIN_SET, "gen-data"))
    return dio.load_image_set(_require(out / POISONED_SET, "poison"))


def _load_generator(cfg, out: Path):
    tc = purifier_config(cfg, _seed(cfg))
    G = build_generator(tc.encoder_spec(), tc.codebook_K, tc.seed)
    G.load_state_dict(dio.load_checkpoint(_require(out / GENERATOR, "train-purifier")))
    return G


def _load_classifier(cfg, out: Path, n_classes: int):
    cc = classifier_config(cfg, _seed(cfg))
    model = build_classifier(cc.spec(n_classes), cc.seed)
    model.load_state_dict(dio.load_checkpoint(_require(out / CLASSIFIER, "train-classifier")))
    return model


def cmd_train_purifier(cfg, out: Path, args) -> None:
    train = _training_set(cfg, out)
    tc = purifier_config(cfg, _seed(cfg))
    G, D, tlog = train_purifier(train, tc, out / "purifier_log.csv")
    dio.save_checkpoint(G.state_dict(), out / GENERATOR)
    dio.save_checkpoint(D.state_dict(), out / DISCRIMINATOR)
    print(f"purifier trained for {tc.epochs} epochs; {tlog.final_distinct_codes} codes in use")


def cmd_purify(cfg, out: Path, args) -> None:
    if not args.inp:
        raise ConfigError("purify needs --in <image set checkpoint>")
    G = _load_generator(cfg, out)
    src = dio.load_image_set(args.inp)
    result = src.with_images(purify(src.images, G, args.passes or cfg.eval.passes))
    dest = Path(args.dest) if args.dest else out / (Path(args.inp).stem + ".purified.ckpt")
    dio.save_image_set(result, dest)
    print(f"purified {len(src)} images with {args.passes or cfg.eval.passes} pass(es) -> {dest}")


def cmd_train_classifier(cfg, out: Path, args) -> None:
    train = _training_set(cfg, out)
    G = _load_generator(cfg, out) if cfg.purifier.enabled else None
    model = train_classifier(train, G, classifier_config(cfg, _seed(cfg)))
    dio.save_checkpoint(model.state_dict(), out / CLASSIFIER)
    print(f"classifier trained ({'with' if G is not None else 'without'} purification)")


def cmd_evaluate(cfg, out: Path, args) -> None:
    if not args.staged:
        report = run_experiment(cfg, out)
        sys.stdout.write(report.summary())
        if report.failed:
            raise VQPurifyError("one or more seeds failed; see report.csv")
        return
    test = dio.load_image_set(_require(out / TEST_SET, "gen-data"))
    clf = _load_classifier(cfg, out, test.n_classes)
    G = _load_generator(cfg, out) if cfg.purifier.enabled else None
    tp = G if cfg.eval.test_time_purify else None
    passes = cfg.eval.passes
    acc = natural_accuracy(clf, test, tp, passes)
    lines = [f"natural accuracy (%): {acc:.2f}"]
    if cfg.attack.type == "trigger":
        pattern = dio.load_checkpoint(_require(out / TRIGGER, "poison"))["pattern"]
        a = cfg.attack
        spec = TriggerSpec(pattern, a.budget, a.poison_fraction, a.target_label, _seed(cfg))
        lines.insert(0, f"poison success rate (%): {poison_success_rate(clf, test, spec, tp, passes):.2f}")
        (out / "predictions.csv").write_text(prediction_dump(clf, test, spec, tp, passes))
    p, m = reconstruction_stats(test.images, G, passes)
    lines.append(f"reconstruction PSNR (dB): {p:.2f}  MSE: {m:.6f}")
    text = "\n".join(lines) + "\n"
    (out / "staged_summary.txt").write_text(text)
    sys.stdout.write(text)


def cmd_ablate(cfg, out: Path, args) -> None:
    if not args.axis or not args.values:
        raise ConfigError("ablate needs --axis and --values")
    values = [int(v) for v in args.values.split(",") if v]
    grid = ablate(args.axis, values, cfg, out)
    sys.stdout.write(grid.csv_text())


def cmd_report(cfg, out: Path, args) -> None:
    found = False
    for name in ("summary.txt", "staged_summary.txt", "ablation.csv"):
        path = out / name
        if path.exists():
            found = True
            sys.stdout.write(f"== {name}\n{path.read_text()}")
    if not found:
        raise MissingArtifact(out / "summary.txt", "evaluate")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "poison": cmd_poison,
    "train-purifier": cmd_train_purifier,
    "purify": cmd_purify,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqpurify", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="run a single seed (overrides eval.seeds)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or output.directory)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="configuration override, repeatable")
    common.add_argument("--reference", action="store_true",
                        help="single-threaded numerics for bit-exact reproduction")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "purify":
            p.add_argument("--in", dest="inp", help="image set checkpoint to purify")
            p.add_argument("--passes", type=int)
            p.add_argument("--dest", help="output checkpoint (default: next to --out)")
        if name == "evaluate":
            p.add_argument("--seeds", help="comma-separated seed list")
            p.add_argument("--staged", action="store_true",
                           help="evaluate the staged artifacts in --out instead of running the pipeline")
        if name == "ablate":
            p.add_argument("--axis", help="codebook_K (alias K) or model_width (alias width)")
            p.add_argument("--values", help="comma-separated axis values")
            p.add_argument("--seeds", help="comma-separated seed list")
    return parser


def resolve(args) -> tuple[ExperimentConfig, Path]:
    overrides = list(args.set)
    if getattr(args, "seeds", None):
        overrides.append(f"eval.seeds={args.seeds}")
    if args.seed is not None:
        overrides.append(f"eval.seeds={args.seed}")
    cfg = parse_config(args.config, overrides)
    root = args.out or os.environ.get(OUT_ENV) or cfg.output.directory
    cfg.output.directory = str(root)
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    return cfg, out


@contextlib.contextmanager
def reference_mode(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = resolve(args)
        with reference_mode(args.reference):
            COMMANDS[args.command](cfg, out, args)
    except VQPurifyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
