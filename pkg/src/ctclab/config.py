"""Plain key=value run configuration: parsing, validation, and the canonical
echo that gets embedded into checkpoints so a run can be reproduced from its
artifacts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SyntheticTaskConfig
from .encoder import EncoderConfig
from .objective import IntermediateLossSpec


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


# key -> (caster, default); a default of None means "derived at resolve time"
_KEYS: dict[str, tuple] = {
    "model.kind": (str, "transformer"),
    "model.layers": (int, 4),
    "model.d_model": (int, 64),
    "model.heads": (int, 4),
    "model.d_ff": (int, 128),
    "model.conv_kernel": (int, 7),
    "model.p_last": (float, 0.7),
    "model.separate_heads": (_parse_bool, False),
    "loss.variant": (str, "middle"),
    "loss.w": (float, 0.3),
    "loss.k": (int, 1),
    "loss.position": (int, None),
    "task.vocab": (int, 5),
    "task.dim": (int, 16),
    "task.min_label": (int, 2),
    "task.max_label": (int, 8),
    "task.min_duration": (int, 2),
    "task.max_duration": (int, 4),
    "task.sigma": (float, 0.25),
    "task.train_size": (int, 2048),
    "task.dev_size": (int, 256),
    "task.test_size": (int, 256),
    "task.seed": (int, None),  # defaults to train.seed
    "train.epochs": (int, 20),
    "train.batch": (int, 16),
    "train.seed": (int, 1),
    "train.average_last": (int, 5),
}


@dataclass(frozen=True)
class RunConfig:
    kind: str
    layers: int
    d_model: int
    heads: int
    d_ff: int
    conv_kernel: int
    p_last: float
    separate_heads: bool
    loss_variant: str
    loss_weight: float
    loss_count: int
    loss_position: int | None
    task: SyntheticTaskConfig
    epochs: int
    batch_size: int
    seed: int
    average_last: int

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _KEYS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            caster = _KEYS[key][0]
            try:
                values[key] = caster(value)
            except ValueError as err:
                raise ConfigError(f"line {line_no}: bad value for {key}: {err}") from None

        def get(key):
            return values.get(key, _KEYS[key][1])

        task = SyntheticTaskConfig(
            vocab=get("task.vocab"),
            input_dim=get("task.dim"),
            min_label_length=get("task.min_label"),
            max_label_length=get("task.max_label"),
            min_duration=get("task.min_duration"),
            max_duration=get("task.max_duration"),
            noise_sigma=get("task.sigma"),
            train_size=get("task.train_size"),
            dev_size=get("task.dev_size"),
            test_size=get("task.test_size"),
            seed=values.get("task.seed", get("train.seed")),
        )
        try:
            cfg = cls(
                kind=get("model.kind"),
                layers=get("model.layers"),
                d_model=get("model.d_model"),
                heads=get("model.heads"),
                d_ff=get("model.d_ff"),
                conv_kernel=get("model.conv_kernel"),
                p_last=get("model.p_last"),
                separate_heads=get("model.separate_heads"),
                loss_variant=get("loss.variant"),
                loss_weight=get("loss.w"),
                loss_count=get("loss.k"),
                loss_position=get("loss.position"),
                task=task,
                epochs=get("train.epochs"),
                batch_size=get("train.batch"),
                seed=get("train.seed"),
                average_last=get("train.average_last"),
            )
            cfg.encoder_config()  # validate model fields eagerly
            cfg.loss_spec()
        except ValueError as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from None
        if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.average_last < 1:
            raise ConfigError("train.* values out of range")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.parse("")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.layers,
            kind=self.kind,
            d_model=self.d_model,
            n_heads=self.heads,
            d_ff=self.d_ff,
            conv_kernel=self.conv_kernel,
            survival_floor=self.p_last,
            input_dim=self.task.input_dim,
            seed=self.seed,
        )

    def loss_spec(self) -> IntermediateLossSpec:
        return IntermediateLossSpec(
            variant=self.loss_variant,
            weight=self.loss_weight,
            count=self.loss_count,
            position=self.loss_position,
        )

    def to_text(self) -> str:
        """Canonical echo; parsing it back reproduces this config exactly."""
        t = self.task
        resolved = {
            "model.kind": self.kind,
            "model.layers": self.layers,
            "model.d_model": self.d_model,
            "model.heads": self.heads,
            "model.d_ff": self.d_ff,
            "model.conv_kernel": self.conv_kernel,
            "model.p_last": self.p_last,
            "model.separate_heads": self.separate_heads,
            "loss.variant": self.loss_variant,
            "loss.w": self.loss_weight,
            "loss.k": self.loss_count,
            "loss.position": self.loss_position,
            "task.vocab": t.vocab,
            "task.dim": t.input_dim,
            "task.min_label": t.min_label_length,
            "task.max_label": t.max_label_length,
            "task.min_duration": t.min_duration,
            "task.max_duration": t.max_duration,
            "task.sigma": t.noise_sigma,
            "task.train_size": t.train_size,
            "task.dev_size": t.dev_size,
            "task.test_size": t.test_size,
            "task.seed": t.seed,
            "train.epochs": self.epochs,
            "train.batch": self.batch_size,
            "train.seed": self.seed,
            "train.average_last": self.average_last,
        }
        lines = [f"{key}={_fmt(value)}" for key, value in resolved.items()
                 if value is not None]
        return "\n".join(lines) + "\n"
