"""Flat ``key = value`` run configuration with typed defaults and flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import SynthConfig
from .model import ModelConfig
from .training import PretrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # windowing and inference
    clip_len: int = 32
    context_len: int = 64
    script_len: int = 36
    step: int = 0  # 0 means clip_len // 2
    iterations: int = 2
    top_k: int = 3
    tau: float = 0.5
    nms_iou: float = 0.5
    iou_thresh: float = 0.1
    beam: int = 5
    max_tokens: int = 67
    seed: int = 0
    threads: int = 1
    # model
    width: int = 16
    state_dim: int = 16
    n_layers: int = 2
    decoder_heads: int = 2
    # training
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    det_only_epochs: int = 0
    det_lr: float = 0.0  # 0 means lr
    freeze_vod_in_joint: bool = False
    cut_per_event: int = 2
    random_per_movie: int = 6
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    calibrate_tau: bool = False
    calibrate_nms: bool = False
    # synthetic data
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    frames: int = 256
    n_concepts: int = 8
    sigma: float = 0.3

    def __post_init__(self):
        if self.clip_len < 1 or self.context_len < 0 or self.script_len < 1:
            raise ConfigError("clip_len, script_len must be >= 1 and context_len >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def window_step(self) -> int:
        return self.step or max(self.clip_len // 2, 1)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(width=self.width, state_dim=self.state_dim, n_layers=self.n_layers,
                           clip_len=self.clip_len, context_len=self.context_len, script_len=self.script_len,
                           top_k=self.top_k, vocab_size=vocab_size, decoder_heads=self.decoder_heads,
                           max_tokens=self.max_tokens, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           warmup_steps=self.warmup_steps, weight_decay=self.weight_decay, seed=self.seed,
                           cut_per_event=self.cut_per_event, random_per_movie=self.random_per_movie,
                           det_only_epochs=self.det_only_epochs, det_lr=self.det_lr or self.lr,
                           freeze_vod_in_joint=self.freeze_vod_in_joint)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(steps=self.pretrain_steps, batch_size=self.batch_size, lr=self.pretrain_lr,
                              warmup_steps=min(100, max(self.pretrain_steps // 10, 1)), seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                           frames=self.frames, dim=self.width, n_concepts=self.n_concepts, sigma=self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from None
    return text


def parse(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def resolve(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides (flags win)."""
    values = {}
    if path is not None:
        values.update(parse(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    try:
        return replace(RunConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
