"""Statistical footprint attack.

A personalized model is summarised by the mean and standard deviation, over
every frame of a fixed indicator corpus, of how far its hidden-layer outputs
move away from the global model's.  Two models are compared with a
norm-normalised distance between those summaries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, TopologyMismatchError, UnknownModelError
from .nn import ModelParams, hidden_activations


@dataclass(frozen=True)
class DeltaSequence:
    layer_index: int
    utterance_id: str
    deltas: np.ndarray


@dataclass(frozen=True)
class DeltaStats:
    layer_index: int
    mu: np.ndarray
    sigma: np.ndarray
    n_frames: int

    @property
    def width(self):
        return len(self.mu)


@dataclass(frozen=True)
class SimilarityConfig:
    alpha_mu: float = 1.0
    alpha_sigma: float = 10.0
    zero_norm_epsilon: float = 1e-12

    def __post_init__(self):
        if self.alpha_mu < 0 or self.alpha_sigma < 0:
            raise ConfigurationError("alphas must be non-negative")
        if self.alpha_mu == 0 and self.alpha_sigma == 0:
            raise ConfigurationError("alpha_mu and alpha_sigma cannot both be zero")
        if not self.zero_norm_epsilon > 0:
            raise ConfigurationError("zero_norm_epsilon must be positive")


#: Fig.-5-style ablation variants: means only, deviations only, both.
VARIANTS = {
    "mu": SimilarityConfig(1.0, 0.0),
    "sigma": SimilarityConfig(0.0, 10.0),
    "combined": SimilarityConfig(1.0, 10.0),
}


def _check_pair(global_model: ModelParams, personalized: ModelParams):
    if not global_model.same_topology(personalized):
        raise TopologyMismatchError(
            f"{personalized.model_id} and {global_model.model_id} differ in topology")


def delta_sequences(global_model, personalized, h, utterances, global_acts=None):
    """Per-utterance activation deltas for many utterances in one batched pass."""
    _check_pair(global_model, personalized)
    if global_acts is None:
        global_acts = hidden_activations(global_model, utterances, h)
    pers = hidden_activations(personalized, utterances, h)
    return [DeltaSequence(h, getattr(u, "utterance_id", str(i)), p - g)
            for i, (u, p, g) in enumerate(zip(utterances, pers, global_acts))]


def compute_delta(global_model: ModelParams, personalized: ModelParams, h,
                  utt) -> DeltaSequence:
    """Frame-wise difference of post-activation outputs at hidden layer ``h``."""
    return delta_sequences(global_model, personalized, h, [utt])[0]


def accumulate_stats(deltas) -> DeltaStats:
    """Frame-pooled mean and population standard deviation over all sequences."""
    deltas = list(deltas)
    if not deltas:
        raise ConfigurationError("no delta sequences to accumulate")
    h = deltas[0].layer_index
    width = deltas[0].deltas.shape[1]
    if any(d.deltas.shape[1] != width or d.layer_index != h for d in deltas):
        raise ConfigurationError("delta sequences disagree on layer or width")
    frames = np.vstack([d.deltas for d in deltas])
    mu = frames.mean(axis=0)
    sigma = np.sqrt(np.mean((frames - mu) ** 2, axis=0))
    return DeltaStats(h, mu, sigma, len(frames))


def _term(a, b, eps):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / (max(na, eps) * max(nb, eps)))


def similarity(a: DeltaStats, b: DeltaStats, cfg: SimilarityConfig | None = None) -> float:
    """Footprint distance rho; 0 for identical footprints, lower is more similar."""
    cfg = cfg or SimilarityConfig()
    if a.width != b.width or a.layer_index != b.layer_index:
        raise ConfigurationError("footprints differ in layer or width")
    rho = 0.0
    if cfg.alpha_mu:
        rho += cfg.alpha_mu * _term(a.mu, b.mu, cfg.zero_norm_epsilon)
    if cfg.alpha_sigma:
        rho += cfg.alpha_sigma * _term(a.sigma, b.sigma, cfg.zero_norm_epsilon)
    return rho


class StatsCache:
    """Write-once map from (model_id, h) to DeltaStats."""

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, stats):
        with self._lock:
            return self._data.setdefault(key, stats)

    def __contains__(self, key):
        return key in self._data

    def __len__(self):
        return len(self._data)

    def items(self):
        return list(self._data.items())


class FootprintStats(TransformerMixin, BaseEstimator):
    """Map personalized models to their layer-``h`` delta statistics.

    ``fit`` stores the global model and indicator utterances and caches the
    global activations; ``transform`` returns one row ``[mu, sigma]`` per model.
    """

    def __init__(self, global_model=None, indicator=None, h=1):
        self.global_model = global_model
        self.indicator = indicator
        self.h = h

    def fit(self, X=None, y=None):
        if self.global_model is None or not self.indicator:
            raise ConfigurationError("FootprintStats needs a global model and indicator data")
        self.global_acts_ = hidden_activations(self.global_model, self.indicator, self.h)
        self.n_frames_ = int(sum(len(a) for a in self.global_acts_))
        return self

    def stats(self, model: ModelParams) -> DeltaStats:
        if not hasattr(self, "global_acts_"):
            self.fit()
        seqs = delta_sequences(self.global_model, model, self.h, self.indicator,
                               self.global_acts_)
        return accumulate_stats(seqs)

    def transform(self, X):
        rows = [self.stats(m) for m in X]
        return np.array([np.concatenate([s.mu, s.sigma]) for s in rows])


def score_all(global_model, models, indicator, h, trials, cfg=None, cache=None,
              threads=None):
    """Score every trial with ``-rho`` so that larger means more likely the same speaker.

    ``models`` maps model id to ModelParams.  Footprints are computed once per
    model (and stored in ``cache`` when one is passed).
    """
    from .asv import ScoredTrials

    cfg = cfg or SimilarityConfig()
    needed = []
    for t in trials:
        for mid in (t.enroll_model_id, t.test_model_id):
            if mid not in models:
                raise UnknownModelError(mid)
            if mid not in needed:
                needed.append(mid)
    cache = StatsCache() if cache is None else cache
    extractor = FootprintStats(global_model, indicator, h).fit()
    missing = [m for m in needed if (m, h) not in cache]

    def work(mid):
        cache.put((mid, h), extractor.stats(models[mid]))

    if threads == 1 or len(missing) < 2:
        for mid in missing:
            work(mid)
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, missing))
    scores = [-similarity(cache.get((t.enroll_model_id, h)), cache.get((t.test_model_id, h)), cfg)
              for t in trials]
    return ScoredTrials(list(trials), np.asarray(scores, dtype=np.float64),
                        {"attack": "A1", "h": h, "alpha_mu": cfg.alpha_mu,
                         "alpha_sigma": cfg.alpha_sigma})
