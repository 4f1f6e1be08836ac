"""Federated round simulation: global training, client fine-tuning, FedAvg."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigurationError, TopologyMismatchError
from .nn import ModelParams, TrainConfig, fine_tune, init_model, train_supervised

logger = logging.getLogger(__name__)

WEIGHTINGS = ("uniform", "by_frame_count")


@dataclass(frozen=True)
class RoundConfig:
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(0.05, 3, 4, 0))
    weighting: str = "uniform"
    rounds: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"weighting must be one of {WEIGHTINGS}")


@dataclass(frozen=True)
class Provenance:
    model_id: str
    speaker_id: str
    set_id: str
    parent_id: str
    n_frames: int


@dataclass
class ModelRegistry:
    """What the attacker sees: the global model and the personalized ones."""

    global_model: ModelParams
    personalized: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def add(self, model: ModelParams, speaker_id, set_id, n_frames):
        if model.parent_id != self.global_model.model_id:
            raise ConfigurationError(
                f"{model.model_id} descends from {model.parent_id}, "
                f"not {self.global_model.model_id}")
        if model.model_id in self.provenance:
            raise ConfigurationError(f"duplicate model id {model.model_id}")
        if len(self.personalized.get(speaker_id, [])) >= 2:
            raise ConfigurationError(f"speaker {speaker_id} already has two models")
        self.personalized.setdefault(speaker_id, []).append(model)
        self.provenance[model.model_id] = Provenance(
            model.model_id, speaker_id, set_id, model.parent_id, int(n_frames))

    def models(self):
        return [m for sid in sorted(self.personalized) for m in self.personalized[sid]]

    def model(self, model_id) -> ModelParams:
        for m in self.personalized.get(self.provenance[model_id].speaker_id, []):
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def speaker_of(self, model_id):
        return self.provenance[model_id].speaker_id

    def __len__(self):
        return len(self.provenance)

    def merged(self, other: "ModelRegistry") -> "ModelRegistry":
        """Union of two registries built on the same global model."""
        if other.global_model.model_id != self.global_model.model_id:
            raise ConfigurationError("registries built on different global models")
        out = ModelRegistry(self.global_model)
        for reg in (self, other):
            for m in reg.models():
                p = reg.provenance[m.model_id]
                out.add(m, p.speaker_id, p.set_id, p.n_frames)
            out.skipped += reg.skipped
        return out


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.blake2b("/".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def train_global(train_g, specs, cfg: TrainConfig, model_id="global") -> ModelParams:
    """Initialise from ``cfg.seed`` and train on every Train-G utterance."""
    if not train_g.utterances:
        raise ConfigurationError("Train-G partition is empty")
    init = init_model(specs, cfg.seed, model_id=model_id)
    out = train_supervised(init, train_g.utterances, cfg, model_id=model_id)
    return replace(out, parent_id=None)


def _client_jobs(part):
    for speaker_id in part.speaker_ids:
        for index, _ in enumerate(part.adaptation_sets.get(speaker_id, [])):
            yield speaker_id, index


def personalize_all(global_model: ModelParams, part, cfg: RoundConfig, threads=None,
                    round_index=1) -> ModelRegistry:
    """One fine-tuned copy of ``global_model`` per (speaker, adaptation set)."""
    registry = ModelRegistry(global_model)
    jobs = []
    for speaker_id, index in _client_jobs(part):
        data = part.adaptation_data(speaker_id, index)
        if not data:
            logger.warning("speaker %s set %d has no adaptation data; skipped",
                           speaker_id, index)
            registry.skipped.append((speaker_id, f"s{index}", "empty adaptation set"))
            continue
        jobs.append((speaker_id, index, data))
    if not registry.skipped and not jobs:
        raise ConfigurationError(f"partition {part.name} has no adaptation sets")

    def run(job):
        speaker_id, index, data = job
        seed = derive_seed(cfg.finetune.seed, round_index, speaker_id, index)
        tcfg = replace(cfg.finetune, seed=seed)
        return fine_tune(global_model, data, tcfg, model_id=f"{speaker_id}__s{index}")

    if threads == 1 or len(jobs) < 2:
        models = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(run, jobs))
    for (speaker_id, index, data), model in zip(jobs, models):
        registry.add(model, speaker_id, f"s{index}", sum(len(u.frames) for u in data))
    return registry


def federated_average(models, weights=None, model_id="fedavg") -> ModelParams:
    """Weight-normalised elementwise mean of ``models``.

    Inputs are reduced in a canonical order so the result does not depend on
    how the (model, weight) pairs are listed.
    """
    models = list(models)
    if not models:
        raise ConfigurationError("federated_average needs at least one model")
    weights = np.ones(len(models)) if weights is None else np.asarray(weights, float)
    if len(weights) != len(models):
        raise ConfigurationError("one weight per model is required")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ConfigurationError("weights must be finite and non-negative")
    ref = models[0]
    for m in models[1:]:
        if not ref.same_topology(m):
            raise TopologyMismatchError(f"{m.model_id} differs in topology from {ref.model_id}")
    order = sorted(range(len(models)),
                   key=lambda i: (models[i].content_hash(), float(weights[i])))
    total = 0.0
    for i in order:
        total += float(weights[i])
    if total <= 0:
        raise ConfigurationError("weights sum to zero")
    ws, bs = [], []
    for li, layer in enumerate(ref.layers):
        w = np.zeros_like(layer.weight)
        b = np.zeros_like(layer.bias)
        for i in order:
            w += weights[i] * models[i].layers[li].weight
            b += weights[i] * models[i].layers[li].bias
        ws.append(w / total)
        bs.append(b / total)
    return ref.with_params(ws, bs, model_id=model_id, parent_id=None)


def aggregation_weights(registry: ModelRegistry, weighting="uniform"):
    models = registry.models()
    if weighting == "uniform":
        return models, np.ones(len(models))
    return models, np.array([registry.provenance[m.model_id].n_frames for m in models],
                            dtype=float)


def run_rounds(global_model: ModelParams, partitions, cfg: RoundConfig, threads=None):
    """Loop personalise -> aggregate for ``cfg.rounds`` rounds.

    Returns ``(final_global, history)``; ``history[r]`` is the registry of
    round ``r + 1``, whose global model is the FedAvg of round ``r``'s clients.
    """
    if not isinstance(partitions, (list, tuple)):
        partitions = [partitions]
    history = []
    current = global_model
    for r in range(1, cfg.rounds + 1):
        registry = None
        for part in partitions:
            reg = personalize_all(current, part, cfg, threads=threads, round_index=r)
            registry = reg if registry is None else registry.merged(reg)
        history.append(registry)
        models, weights = aggregation_weights(registry, cfg.weighting)
        current = federated_average(models, weights, model_id=f"global-r{r + 1}")
    return current, history
