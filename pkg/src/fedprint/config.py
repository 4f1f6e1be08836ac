"""Experiment configuration as flat ``section.key = value`` text.

Every stage seed is derived from the master seed and the stage name, so a
single integer reproduces a whole run.
"""

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import typing

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class GenSection:
    n_classes: int = 8
    feature_dim: int = 16
    latent_dim: int = 8
    embedding_dim: int = 24
    speaker_scale: float = 1.0
    noise_scale: float = 1.0
    class_scale: float = 0.3
    interaction_scale: float = 0.0
    min_frames: int = 40
    max_frames: int = 60
    append_embedding: bool = True


@dataclass(frozen=True)
class CorpusSection:
    train_g: int = 60
    part1: int = 150
    part2: int = 40
    indicator: int = 8
    train_frames_per_speaker: int = 800
    adaptation_frames: int = 6000
    two_set_fraction: float = 0.75
    indicator_utterances: int = 10


@dataclass(frozen=True)
class ModelSection:
    hidden_layers: int = 6
    hidden_width: int = 64
    contexts: str = "-1,0,1|-1,0,1|-1,0,1|0|0|0"


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 8


@dataclass(frozen=True)
class RoundSection:
    weighting: str = "uniform"


@dataclass(frozen=True)
class AttackSection:
    h: tuple = (1, 2, 3, 4, 5, 6)
    alpha_mu: float = 1.0
    alpha_sigma: float = 10.0
    zero_norm_epsilon: float = 1e-12
    a2_h: tuple = (1, 3)
    backend: str = "cosine"


@dataclass(frozen=True)
class ExtractorSection:
    frame_widths: tuple = (64, 64, 64)
    frame_contexts: str = "-2,-1,0,1,2|-1,0,1|0"
    segment_widths: tuple = (32, 32)
    embedding_layer: int = 0
    learning_rate: float = 0.05
    epochs: int = 8
    batch_size: int = 32


@dataclass(frozen=True)
class TrialSection:
    n_nontarget: int = 2000
    combined: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenSection = field(default_factory=GenSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    global_train: TrainSection = field(default_factory=TrainSection)
    finetune: TrainSection = field(default_factory=lambda: TrainSection(0.05, 3, 4))
    rounds: RoundSection = field(default_factory=RoundSection)
    attack: AttackSection = field(default_factory=AttackSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    trials: TrialSection = field(default_factory=TrialSection)
    run: RunSection = field(default_factory=RunSection)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.run.seed, stage)

    def set(self, key: str, value) -> "ExperimentConfig":
        """Copy with one dotted key replaced; ``value`` may be text."""
        section, _, name = key.partition(".")
        if not name or section not in _SECTIONS:
            raise ConfigurationError(f"unknown config key {key!r}")
        sec = getattr(self, section)
        hints = typing.get_type_hints(type(sec))
        if name not in hints:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(hints[name], value, key)
        return replace(self, **{section: replace(sec, **{name: value})})

    def hash(self) -> str:
        """Digest of everything except where output goes and how many threads."""
        body = {k: v for k, v in asdict(self).items()}
        body["run"] = {"seed": self.run.seed}
        raw = json.dumps(body, sort_keys=True, default=list).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


_SECTIONS = {f.name for f in fields(ExperimentConfig)}


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _parse_value(kind, text, key):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def emit(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        for f in fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        cfg = cfg.set(key.strip(), value)
    return cfg


def load(path, base=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse(fh.read(), base)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None


def parse_contexts(text: str):
    """``"-1,0,1|0"`` -> ``[(-1, 0, 1), (0,)]``."""
    try:
        return [tuple(int(v) for v in part.split(",")) for part in text.split("|")]
    except ValueError:
        raise ConfigurationError(f"bad context list {text!r}") from None
