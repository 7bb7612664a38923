"""Flat ``key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .extractor import ConfigError
from .generator import DecodeConfig
from .model import AblationConfig, ModelConfig
from .train import TrainConfig

# keys that belong to no dataclass
RUN_KEYS = {
    "n_pairs": 16,
    "train_fraction": 0.8,
    "vocab_min_count": 3,
    "target_nll": None,
    "ablation": "Ours",
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, value = line.split("=", 1)
            values[key.strip()] = parse_value(value)
    return values


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    ablation_override: dict = field(default_factory=dict)
    run: dict = field(default_factory=lambda: dict(RUN_KEYS))

    @classmethod
    def from_dict(cls, values: dict) -> RunConfig:
        model_keys, train_keys, decode_keys = _names(ModelConfig), _names(TrainConfig), _names(DecodeConfig)
        ablation_keys = _names(AblationConfig)
        known = model_keys | train_keys | decode_keys | ablation_keys | RUN_KEYS.keys()
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; known keys: {sorted(known)}")
        if isinstance(values.get("volume_dims"), int):
            values = {**values, "volume_dims": (values["volume_dims"],) * 3}
        try:
            return cls(
                ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys}),
                TrainConfig.from_dict({k: v for k, v in values.items() if k in train_keys}),
                DecodeConfig(**{k: v for k, v in values.items() if k in decode_keys}),
                {k: v for k, v in values.items() if k in ablation_keys},
                {**RUN_KEYS, **{k: v for k, v in values.items() if k in RUN_KEYS}},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    @classmethod
    def load(cls, path=None, seed: int | None = None) -> RunConfig:
        values = read_config_file(path) if path else {}
        if seed is not None:
            values["seed"] = seed
        return cls.from_dict(values)

    def ablation(self, name: str | None = None) -> AblationConfig:
        from .model import ABLATIONS

        name = name or self.run["ablation"]
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{name}'; choose from {list(ABLATIONS)}")
        base = ABLATIONS[name]
        return AblationConfig(**{**base.__dict__, **self.ablation_override})
