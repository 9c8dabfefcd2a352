"""Layered experiment configuration: built-in defaults, then a flat ``key = value`` file, then overrides.

File syntax::

    # comment
    purifier.codebook_K = 64
    [eval]
    seeds = 0,1,2        # keys under a header get the section prefix

Values may be written as fractions (``8/255``) wherever a real is expected.
"""

from __future__ import annotations

import copy
import difflib
import typing
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataSection:
    source: str = "synthetic"          # synthetic | cifar10
    path: str = ""
    n_train_per_class: int = 500
    n_test_per_class: int = 100
    n_classes: int = 10
    seed: int = 0


@dataclass
class AttackSection:
    type: str = "trigger"              # trigger | grad_align | none
    budget: float = 8 / 255
    poison_fraction: float = 0.01
    target_label: int = 0
    grad_align_steps: int = 10


@dataclass
class PurifierSection:
    enabled: bool = True
    codebook_K: int = 512
    latent_dim: int = 256
    width: int = 64
    n_res_blocks: int = 4
    disc_layers: int = 3
    lambda_gan: float = 0.1
    beta: float = 0.25
    epochs: int = 100
    learning_rate: float = 4e-4
    batch_size: int = 256
    reinit_dead_codes: bool = False
    gan_warmup_epochs: int = 0


@dataclass
class ClassifierSection:
    width: int = 16
    depth: int = 3
    epochs: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 64
    lr_schedule: str = "constant"


@dataclass
class EvalSection:
    passes: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    test_time_purify: bool = True


@dataclass
class OutputSection:
    directory: str = "runs"


SECTIONS = {
    "data": DataSection,
    "attack": AttackSection,
    "purifier": PurifierSection,
    "classifier": ClassifierSection,
    "eval": EvalSection,
    "output": OutputSection,
}

# short spellings accepted on input; the echo always uses the canonical name
ALIASES = {
    "purifier.K": "purifier.codebook_K",
    "purifier.d": "purifier.latent_dim",
    "purifier.lambda": "purifier.lambda_gan",
    "purifier.lr": "purifier.learning_rate",
    "purifier.batch": "purifier.batch_size",
    "classifier.lr": "classifier.learning_rate",
    "classifier.batch": "classifier.batch_size",
    "attack.xi": "attack.budget",
    "attack.alpha": "attack.poison_fraction",
    "attack.y_adv": "attack.target_label",
}


def all_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]


def _field_type(section: str, name: str):
    hints = typing.get_type_hints(SECTIONS[section])
    return hints[name]


def _parse_real(text: str) -> float:
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            value = _parse_real(raw)
            if value != int(value):
                raise ValueError(f"not an integer: {raw!r}")
            return int(value)
        if kind is float:
            return _parse_real(raw)
        if typing.get_origin(kind) is list:
            return [int(p) for p in raw.replace(" ", "").split(",") if p]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def canonical_key(key: str) -> str:
    key = ALIASES.get(key, key)
    if key not in all_keys():
        near = difflib.get_close_matches(key, all_keys() + list(ALIASES), n=1, cutoff=0.6)
        hint = f"; did you mean {ALIASES.get(near[0], near[0])!r}?" if near else ""
        raise ConfigError(f"unknown configuration key {key!r}{hint}")
    return key


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    attack: AttackSection = field(default_factory=AttackSection)
    purifier: PurifierSection = field(default_factory=PurifierSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def set(self, key: str, raw) -> None:
        key = canonical_key(key)
        section, name = key.split(".", 1)
        value = _convert(key, raw, _field_type(section, name)) if isinstance(raw, str) else raw
        setattr(getattr(self, section), name, value)

    def replace_field(self, section: str, name: str, value) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        out.set(f"{section}.{name}", value)
        out.validate()
        return out

    def validate(self) -> None:
        d, a, p, c, e = self.data, self.attack, self.purifier, self.classifier, self.eval
        checks = [
            (d.source in ("synthetic", "cifar10"), f"data.source must be synthetic or cifar10, got {d.source!r}"),
            (1 <= d.n_classes <= 10, "data.n_classes must be in [1, 10]"),
            (d.n_train_per_class > 0 and d.n_test_per_class > 0, "data sizes must be positive"),
            (a.type in ("trigger", "grad_align", "none"), f"attack.type must be trigger, grad_align or none, got {a.type!r}"),
            (a.budget >= 0, "attack.budget must be >= 0"),
            (0 < a.poison_fraction <= 1, "attack.poison_fraction must be in (0, 1]"),
            (0 <= a.target_label < d.n_classes, "attack.target_label must be a valid class"),
            (a.grad_align_steps >= 1, "attack.grad_align_steps must be >= 1"),
            (p.codebook_K >= 1 and p.latent_dim >= 1 and p.width >= 1, "purifier sizes must be positive"),
            (p.lambda_gan >= 0, "purifier.lambda_gan must be >= 0"),
            (p.beta > 0 and p.learning_rate > 0 and p.batch_size > 0, "purifier beta, lr and batch must be positive"),
            (p.epochs >= 0 and c.epochs >= 0, "epochs must be >= 0"),
            (p.gan_warmup_epochs >= 0, "purifier.gan_warmup_epochs must be >= 0"),
            (c.width >= 1 and c.depth >= 1 and c.batch_size > 0 and c.learning_rate > 0, "invalid classifier settings"),
            (c.lr_schedule in ("constant", "cosine"), f"classifier.lr_schedule must be constant or cosine, got {c.lr_schedule!r}"),
            (e.passes >= 1, "eval.passes must be >= 1"),
            (len(e.seeds) >= 1, "eval.seeds must list at least one seed"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_text(self) -> str:
        """Canonical, fully resolved ``key = value`` listing; parses back to an equal config."""
        lines = []
        for section in SECTIONS:
            for f in fields(SECTIONS[section]):
                value = getattr(getattr(self, section), f.name)
                if isinstance(value, bool):
                    text = "true" if value else "false"
                elif isinstance(value, list):
                    text = ",".join(map(str, value))
                elif isinstance(value, float):
                    text = repr(value)
                else:
                    text = str(value)
                lines.append(f"{section}.{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def echo(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved.cfg"
        path.write_text(self.to_text())
        return path


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs, prefix = [], ""
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            key = prefix + key
        pairs.append((key, value))
    return pairs


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` ("key=value" strings or pairs)."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        for key, value in parse_lines(p.read_text(), str(p)):
            cfg.set(key, value)
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            item = item.split("=", 1)
        cfg.set(item[0].strip(), item[1].strip() if isinstance(item[1], str) else item[1])
    cfg.validate()
    return cfg
