"""Speaker-conditioned synthetic frame-classification corpora.

Every frame is ``class_mean[k] + speaker_scale * M @ latent + noise_scale * eps``
where ``latent`` is drawn once per speaker and ``M`` is a fixed mixing matrix.
When the embedding appendage is on, each frame is extended with the speaker's
embedding vector (an i-vector stand-in), constant over the utterance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

PARTITIONS = ("TrainG", "Part1", "Part2", "Indicator")
_PREFIX = {"TrainG": "tg", "Part1": "p1", "Part2": "p2", "Indicator": "ind"}


@dataclass(frozen=True)
class GenConfig:
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
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "feature_dim", "latent_dim", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if min(self.speaker_scale, self.noise_scale, self.class_scale,
               self.interaction_scale) < 0:
            raise ConfigurationError("scales must be non-negative")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigurationError("need 1 <= min_frames <= max_frames")

    @property
    def input_dim(self):
        """Width of a generated frame, appendage included."""
        return self.feature_dim + (self.embedding_dim if self.append_embedding else 0)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    latent: np.ndarray
    embedding: np.ndarray


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    frames: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n_frames(self):
        return len(self.frames)


@dataclass
class CorpusPartition:
    name: str
    speakers: list
    utterances: list
    adaptation_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PARTITIONS:
            raise ConfigurationError(f"unknown partition {self.name!r}")
        self._by_id = {u.utterance_id: u for u in self.utterances}

    @property
    def speaker_ids(self):
        return [s.speaker_id for s in self.speakers]

    def utterance(self, utterance_id):
        return self._by_id[utterance_id]

    def adaptation_data(self, speaker_id, set_index):
        ids = self.adaptation_sets[speaker_id][set_index]
        return [self._by_id[i] for i in ids]

    @property
    def n_frames(self):
        return sum(u.n_frames for u in self.utterances)


@dataclass(frozen=True)
class PartitionSizes:
    train_g: int = 60
    part1: int = 150
    part2: int = 40
    indicator: int = 8
    train_frames_per_speaker: int = 800
    adaptation_frames: int = 6000
    two_set_fraction: float = 0.75
    indicator_utterances: int = 10

    def __post_init__(self):
        counts = (self.train_g, self.part1, self.part2, self.indicator)
        if min(counts) < 1:
            raise ConfigurationError("every partition needs at least one speaker")
        if min(self.train_frames_per_speaker, self.adaptation_frames,
               self.indicator_utterances) < 1:
            raise ConfigurationError("frame and utterance counts must be positive")
        if not 0.0 <= self.two_set_fraction <= 1.0:
            raise ConfigurationError("two_set_fraction must lie in [0, 1]")

    def count(self, name):
        return {"TrainG": self.train_g, "Part1": self.part1,
                "Part2": self.part2, "Indicator": self.indicator}[name]


class _World:
    """Fixed class means, mixing matrix and embedding projection of one config."""

    def __init__(self, cfg: GenConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        self.class_means = cfg.class_scale * rng.standard_normal(
            (cfg.n_classes, cfg.feature_dim))
        self.mixing = rng.standard_normal((cfg.feature_dim, cfg.latent_dim)) / np.sqrt(
            cfg.latent_dim)
        self.projection = rng.standard_normal(
            (cfg.embedding_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
        self.class_mixing = rng.standard_normal(
            (cfg.n_classes, cfg.feature_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)


_WORLDS: dict = {}


def _world(cfg):
    key = (cfg.seed, cfg.n_classes, cfg.feature_dim, cfg.latent_dim,
           cfg.embedding_dim, cfg.class_scale)
    if key not in _WORLDS:
        _WORLDS[key] = _World(cfg)
    return _WORLDS[key]


def make_speakers(n: int, cfg: GenConfig, rng_seed, prefix="spk") -> list:
    """``n`` speakers with independent standard-normal latents."""
    if n < 1:
        raise ConfigurationError("need at least one speaker")
    world = _world(cfg)
    seeds = np.random.SeedSequence(rng_seed).spawn(n)
    speakers = []
    for i, ss in enumerate(seeds):
        latent = np.random.default_rng(ss).standard_normal(cfg.latent_dim)
        direction = world.projection @ latent
        direction /= max(np.linalg.norm(direction), 1e-12)
        embedding = cfg.speaker_scale * np.sqrt(cfg.embedding_dim) * direction
        speakers.append(SpeakerProfile(f"{prefix}{i:04d}", latent, embedding))
    return speakers


def label_sequence(length, n_classes, rng, min_run=3, max_run=7):
    """Classes cycle ``k, k+1, ...`` with seeded run lengths and start class."""
    labels = np.empty(length, dtype=np.int64)
    k = int(rng.integers(n_classes))
    t = 0
    while t < length:
        run = int(rng.integers(min_run, max_run + 1))
        labels[t:t + run] = k
        t += run
        k = (k + 1) % n_classes
    return labels


def synth_utterance(speaker: SpeakerProfile, length: int, cfg: GenConfig, rng,
                    utterance_id="utt", labels=None) -> Utterance:
    if length < 1:
        raise ConfigurationError("utterance length must be >= 1")
    world = _world(cfg)
    if labels is None:
        labels = label_sequence(length, cfg.n_classes, rng)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != length:
        raise ConfigurationError("labels must have one entry per frame")
    coloration = cfg.speaker_scale * (world.mixing @ speaker.latent)
    noise = rng.standard_normal((length, cfg.feature_dim))
    frames = world.class_means[labels] + coloration + cfg.noise_scale * noise
    if cfg.interaction_scale:
        per_class = world.class_mixing @ speaker.latent
        frames += cfg.speaker_scale * cfg.interaction_scale * per_class[labels]
    if cfg.append_embedding:
        frames = np.hstack([frames, np.tile(speaker.embedding, (length, 1))])
    return Utterance(utterance_id, speaker.speaker_id, frames, labels)


def _utterances_for(speaker, total_frames, cfg, rng, tag):
    """Utterances of random length until ``total_frames`` is reached."""
    out, have = [], 0
    while have < total_frames:
        T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        T = min(T, total_frames - have)
        out.append(synth_utterance(speaker, T, cfg, rng,
                                   f"{speaker.speaker_id}-{tag}{len(out):03d}"))
        have += T
    return out


def make_partition(name: str, cfg: GenConfig, sizes: PartitionSizes) -> CorpusPartition:
    code = PARTITIONS.index(name)
    speakers = make_speakers(sizes.count(name), cfg, [cfg.seed, code, 1], _PREFIX[name])
    utterances, sets = [], {}
    pick_rng = np.random.default_rng([cfg.seed, code, 2])
    n_two = int(round(sizes.two_set_fraction * len(speakers)))
    two_sets = set(pick_rng.choice(len(speakers), size=n_two, replace=False).tolist())
    for i, spk in enumerate(speakers):
        rng = np.random.default_rng([cfg.seed, code, 3, i])
        if name == "TrainG":
            utterances += _utterances_for(spk, sizes.train_frames_per_speaker, cfg, rng, "u")
        elif name == "Indicator":
            for j in range(sizes.indicator_utterances):
                T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
                utterances.append(synth_utterance(spk, T, cfg, rng,
                                                  f"{spk.speaker_id}-i{j:03d}"))
        else:
            spk_sets = []
            for s in range(2 if i in two_sets else 1):
                utts = _utterances_for(spk, sizes.adaptation_frames, cfg, rng, f"s{s}u")
                utterances += utts
                spk_sets.append([u.utterance_id for u in utts])
            sets[spk.speaker_id] = spk_sets
    return CorpusPartition(name, speakers, utterances, sets)


def make_partitions(cfg: GenConfig, sizes: PartitionSizes | None = None) -> dict:
    """The four speaker-disjoint partitions keyed by name."""
    sizes = sizes or PartitionSizes()
    return {name: make_partition(name, cfg, sizes) for name in PARTITIONS}
