"""Experiment configuration: INI parsing, defaults, validation and presets.

A config holds one ``[experiment]`` section and one ``[condition <label>]``
section per compared condition::

    [experiment]
    data_dir = /data/mnist
    seeds = 0-7
    output_dir = results/mnist

    [condition standard]
    mode = standard
    drop_rate = 0.2

    [condition qsd-0.2]
    mode = qsd
    drop_rate = 0.2
    alpha = 0.2

Every condition shares the same seed list, so run ``(A, s)`` and run
``(B, s)`` see the same initial weights and data order.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import MNIST_FILES
from .dilution import DilutionConfig, DilutionMode
from .errors import ConfigError

EXPERIMENT_KEYS = {
    "data_dir", "train_images", "train_labels", "test_images", "test_labels",
    "seeds", "epochs", "batch_size", "learning_rate", "lr_decay", "lr_milestones",
    "momentum", "train_limit", "test_limit", "probe", "probe_bins", "permutation",
    "output_dir", "jobs",
}
CONDITION_KEYS = {"mode", "drop_rate", "alpha", "per_example"}
CONDITION_PREFIX = "condition "

PRESETS = {
    "quick": {"train_limit": 10000, "epochs": 20, "lr_milestones": (6, 12, 16)},
    "full": {"train_limit": None, "epochs": 100, "lr_milestones": (30, 60, 80)},
}


@dataclass(frozen=True)
class Condition:
    label: str
    dilution: DilutionConfig


def _default_conditions() -> list[Condition]:
    return [
        Condition("standard", DilutionConfig(DilutionMode.STANDARD, 0.2)),
        Condition("qsd", DilutionConfig(DilutionMode.QSD, 0.2, 0.2)),
    ]


@dataclass
class ExperimentConfig:
    train_images: Path
    train_labels: Path
    test_images: Path
    test_labels: Path
    conditions: list[Condition] = field(default_factory=_default_conditions)
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    lr_decay: float = 0.2
    lr_milestones: tuple[int, ...] = (30, 60, 80)
    momentum: float = 0.9
    train_limit: int | None = None
    test_limit: int | None = None
    probe: bool = False
    probe_bins: int = 50
    permutation: str = "per_sample"
    output_dir: Path = Path("results")
    jobs: int = 1

    def with_preset(self, name: str | None) -> ExperimentConfig:
        if name is None:
            return self
        if name not in PRESETS:
            raise ConfigError([f"unknown preset {name!r}; choose from {sorted(PRESETS)}"])
        return dataclasses.replace(self, **PRESETS[name])

    def condition(self, label: str) -> Condition:
        for c in self.conditions:
            if c.label == label:
                return c
        raise KeyError(label)

    def to_ini(self) -> str:
        """Effective configuration with every default spelled out."""
        parser = configparser.ConfigParser(interpolation=None)
        parser["experiment"] = {
            "train_images": str(self.train_images),
            "train_labels": str(self.train_labels),
            "test_images": str(self.test_images),
            "test_labels": str(self.test_labels),
            "seeds": ",".join(str(s) for s in self.seeds),
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "learning_rate": repr(self.learning_rate),
            "lr_decay": repr(self.lr_decay),
            "lr_milestones": ",".join(str(m) for m in self.lr_milestones),
            "momentum": repr(self.momentum),
            "train_limit": "" if self.train_limit is None else str(self.train_limit),
            "test_limit": "" if self.test_limit is None else str(self.test_limit),
            "probe": "true" if self.probe else "false",
            "probe_bins": str(self.probe_bins),
            "permutation": self.permutation,
            "output_dir": str(self.output_dir),
            "jobs": str(self.jobs),
        }
        for c in self.conditions:
            parser[CONDITION_PREFIX + c.label] = {
                "mode": c.dilution.mode.value,
                "drop_rate": repr(c.dilution.drop_rate),
                "alpha": repr(c.dilution.alpha),
                "per_example": "true" if c.dilution.per_example else "false",
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _parse_int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


class _Collector:
    def __init__(self):
        self.problems: list[str] = []

    def get(self, section, key, convert, default, where):
        if key not in section:
            return default
        raw = section[key].strip()
        try:
            return convert(raw)
        except (ValueError, TypeError) as exc:
            self.problems.append(f"{where}: cannot parse {key} = {raw!r} ({exc})")
            return default


def _optional_int(raw: str) -> int | None:
    return None if raw.lower() in ("", "none", "all") else int(raw)


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and validate config text; raises ConfigError listing every problem."""
    base_dir = base_dir or Path(".")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.DuplicateSectionError as exc:
        label = exc.section[len(CONDITION_PREFIX):] if exc.section.startswith(CONDITION_PREFIX) else exc.section
        raise ConfigError([f"duplicate condition label {label!r}"]) from exc
    except configparser.Error as exc:
        raise ConfigError([f"unreadable config: {exc}"]) from exc

    col = _Collector()
    problems = col.problems
    for name in parser.sections():
        if name != "experiment" and not name.startswith(CONDITION_PREFIX):
            problems.append(f"unknown section [{name}]")
    if "experiment" not in parser:
        raise ConfigError(problems + ["missing [experiment] section"])
    exp = parser["experiment"]
    for key in exp:
        if key not in EXPERIMENT_KEYS:
            problems.append(f"[experiment]: unknown key {key!r}")

    def path(key: str) -> Path | None:
        if key not in exp:
            return None
        p = Path(exp[key].strip())
        return p if p.is_absolute() else base_dir / p

    data_dir = path("data_dir")
    paths = {}
    for split in ("train", "test"):
        for kind, fname in zip(("images", "labels"), MNIST_FILES[split]):
            key = f"{split}_{kind}"
            p = path(key)
            if p is None and data_dir is not None:
                p = data_dir / fname
            if p is None:
                problems.append(f"[experiment]: missing required {key} (or data_dir)")
            paths[key] = p

    where = "[experiment]"
    defaults = ExperimentConfig(Path(), Path(), Path(), Path())
    seeds = col.get(exp, "seeds", _parse_int_list, defaults.seeds, where)
    epochs = col.get(exp, "epochs", int, defaults.epochs, where)
    batch_size = col.get(exp, "batch_size", int, defaults.batch_size, where)
    learning_rate = col.get(exp, "learning_rate", float, defaults.learning_rate, where)
    lr_decay = col.get(exp, "lr_decay", float, defaults.lr_decay, where)
    milestones = col.get(exp, "lr_milestones", lambda s: tuple(_parse_int_list(s)), defaults.lr_milestones, where)
    momentum = col.get(exp, "momentum", float, defaults.momentum, where)
    train_limit = col.get(exp, "train_limit", _optional_int, None, where)
    test_limit = col.get(exp, "test_limit", _optional_int, None, where)
    probe = col.get(exp, "probe", _bool, False, where)
    probe_bins = col.get(exp, "probe_bins", int, defaults.probe_bins, where)
    permutation = col.get(exp, "permutation", str, defaults.permutation, where)
    output_dir = path("output_dir") or base_dir / "results"
    jobs = col.get(exp, "jobs", int, 1, where)

    if not seeds:
        problems.append(f"{where}: seeds must not be empty")
    if len(set(seeds)) != len(seeds):
        problems.append(f"{where}: seeds contain duplicates")
    if any(s < 0 or s >= 2**64 for s in seeds):
        problems.append(f"{where}: seeds must be 64-bit unsigned integers")
    if epochs < 1:
        problems.append(f"{where}: epochs must be >= 1")
    if batch_size < 1:
        problems.append(f"{where}: batch_size must be >= 1")
    if not learning_rate > 0:
        problems.append(f"{where}: learning_rate must be > 0")
    if not 0 <= momentum < 1:
        problems.append(f"{where}: momentum must lie in [0, 1)")
    if not lr_decay > 0:
        problems.append(f"{where}: lr_decay must be > 0")
    for name, lim in (("train_limit", train_limit), ("test_limit", test_limit)):
        if lim is not None and lim < 1:
            problems.append(f"{where}: {name} must be >= 1")
    if permutation not in ("per_sample", "shared"):
        problems.append(f"{where}: permutation must be per_sample or shared")
    if probe_bins < 1:
        problems.append(f"{where}: probe_bins must be >= 1")
    if jobs < 1:
        problems.append(f"{where}: jobs must be >= 1")

    conditions = []
    for name in parser.sections():
        if not name.startswith(CONDITION_PREFIX):
            continue
        label = name[len(CONDITION_PREFIX):].strip()
        sec = parser[name]
        where = f"[{name}]"
        if not label or any(ch in label for ch in ",/\\ \t"):
            problems.append(f"{where}: condition label must be non-empty without commas, slashes or spaces")
        for key in sec:
            if key not in CONDITION_KEYS:
                problems.append(f"{where}: unknown key {key!r}")
        if "mode" not in sec:
            problems.append(f"{where}: missing required mode")
            continue
        try:
            mode = DilutionMode(sec["mode"].strip().lower())
        except ValueError:
            problems.append(f"{where}: unknown mode {sec['mode']!r}; choose from {[m.value for m in DilutionMode]}")
            continue
        if "drop_rate" not in sec:
            problems.append(f"{where}: missing required drop_rate")
            continue
        drop = col.get(sec, "drop_rate", float, None, where)
        alpha = col.get(sec, "alpha", float, None, where)
        per_example = col.get(sec, "per_example", _bool, False, where)
        if drop is None:
            continue
        if not 0.0 <= drop < 1.0:
            problems.append(f"{where}: drop_rate {drop} outside [0, 1)")
            continue
        if mode.uses_beta:
            if alpha is None:
                problems.append(f"{where}: mode {mode.value} requires alpha")
                continue
            if not alpha > 0:
                problems.append(f"{where}: alpha = {alpha} violates the beta-distribution domain alpha > 0")
                continue
        conditions.append(Condition(
            label, DilutionConfig(mode, drop, alpha if alpha is not None else 1.0, per_example)
        ))

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        train_images=paths["train_images"],
        train_labels=paths["train_labels"],
        test_images=paths["test_images"],
        test_labels=paths["test_labels"],
        conditions=conditions or _default_conditions(),
        seeds=seeds,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        lr_decay=lr_decay,
        lr_milestones=milestones,
        momentum=momentum,
        train_limit=train_limit,
        test_limit=test_limit,
        probe=probe,
        probe_bins=probe_bins,
        permutation=permutation,
        output_dir=output_dir,
        jobs=jobs,
    )


def validate_config(path: str | Path) -> ExperimentConfig:
    """Read, default-fill and validate a config file.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    return parse_config(text, base_dir=path.parent)
