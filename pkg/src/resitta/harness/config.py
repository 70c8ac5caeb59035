"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

ARMS = ("source", "bn", "resibn_only", "resitta")

DEFAULT_DOMAINS = (
    "gaussian_noise-5",
    "blur-5",
    "contrast-5",
    "brightness-5",
    "pixelate_approx-5",
)

# real-benchmark column order for ingested CIFAR-C style data
CORRUPTION_BENCHMARK_ORDER = (
    "motion", "snow", "fog", "shot", "defocus", "contrast", "zoom", "brightness",
    "frost", "elastic", "glass", "gaussian", "pixelate", "jpeg", "impulse",
)


@dataclass
class RunConfig:
    seed: int = 1
    arm: str = "resitta"

    # optimisation / adaptation
    lr: float = 1e-3
    batch_size: int = 64
    capacity: int = 64
    nu_b: float = 0.05
    nu_m: float = 1e-3
    eta_t: float = 0.01
    t_forget: int = 1000
    t_mature: int = 200
    adapt_every: int = 1
    align_every: str = "batch"
    trainable: str = "all"
    refresh_entropy_on_adapt: bool = False
    use_outdated: bool = True
    use_overconfident: bool = True
    use_uncertainty: bool = True

    # stream
    domains: tuple[str, ...] = DEFAULT_DOMAINS
    correlation: str = "dirichlet"
    delta: float = 0.1
    slots: int = 0  # 0 -> number of classes

    # data and source model
    data_dir: str = ""  # empty -> synthesise in memory
    checkpoint: str = ""  # empty -> pretrain in memory
    num_classes: int = 10
    image_size: int = 8
    n_train: int = 4000
    n_per_domain: int = 10000
    pretrain_epochs: int = 5
    pretrain_lr: float = 3e-3

    # outputs
    out_dir: str = ""
    snapshot_every: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.domains, str):
            self.domains = tuple(d.strip() for d in self.domains.split(",") if d.strip())
        else:
            self.domains = tuple(self.domains)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.arm not in ARMS:
            problems.append(f"arm must be one of {ARMS}, got {self.arm!r}")
        if not 0.0 <= self.nu_b <= 1.0:
            problems.append("nu_b must lie in [0, 1]")
        if not 0.0 <= self.nu_m <= 1.0:
            problems.append("nu_m must lie in [0, 1]")
        if not 0.0 <= self.eta_t < 0.5:
            problems.append("eta_t must lie in [0, 0.5)")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            problems.append("learning rates must be positive")
        if self.batch_size < 1 or self.capacity < 1:
            problems.append("batch_size and capacity must be positive")
        if not 0 <= self.t_mature <= self.t_forget:
            problems.append("need 0 <= t_mature <= t_forget")
        if self.adapt_every < 0 or self.snapshot_every < 0 or self.slots < 0:
            problems.append("adapt_every, snapshot_every and slots must be >= 0")
        if self.align_every not in ("batch", "adapt"):
            problems.append("align_every must be 'batch' or 'adapt'")
        if self.trainable not in ("all", "bn_affine_only"):
            problems.append("trainable must be 'all' or 'bn_affine_only'")
        if self.correlation not in ("dirichlet", "label_sorted", "iid"):
            problems.append("correlation must be dirichlet, label_sorted or iid")
        if self.delta <= 0:
            problems.append("delta must be positive")
        if not self.domains:
            problems.append("at least one domain is required")
        if self.num_classes < 2 or self.n_train < 1 or self.n_per_domain < 1 or self.pretrain_epochs < 0:
            problems.append("num_classes >= 2, n_train >= 1, n_per_domain >= 1, pretrain_epochs >= 0")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["domains"] = list(self.domains)
        return d


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(d.strip() for d in raw.split(",") if d.strip())
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
