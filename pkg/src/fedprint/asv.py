"""Verification trials built from a model registry, EER and DET curves."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, EvaluationError

TARGET, NONTARGET = "target", "nontarget"


@dataclass(frozen=True)
class Trial:
    trial_id: str
    enroll_model_id: str
    test_model_id: str
    label: str

    def __post_init__(self):
        if self.enroll_model_id == self.test_model_id:
            raise ConfigurationError(f"trial {self.trial_id} pairs a model with itself")
        if self.label not in (TARGET, NONTARGET):
            raise ConfigurationError(f"bad trial label {self.label!r}")


@dataclass
class ScoredTrials:
    trials: list
    scores: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.trials):
            raise EvaluationError("every trial needs exactly one score")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("scores must be finite")

    @property
    def is_target(self):
        return np.array([t.label == TARGET for t in self.trials], dtype=bool)

    def split(self):
        mask = self.is_target
        return self.scores[mask], self.scores[~mask]


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int
    det_points: tuple = ()


def build_trials(registry, n_nontarget=2000, rng_seed=0):
    """All same-speaker pairs as targets plus sampled cross-speaker pairs.

    Target trials do not depend on the seed.  Non-target pairs are drawn
    uniformly without replacement, or all of them when fewer exist.
    """
    by_speaker = {}
    for m in registry.models():
        by_speaker.setdefault(registry.speaker_of(m.model_id), []).append(m.model_id)
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise ConfigurationError("need models from at least two speakers")
    targets = []
    for spk in speakers:
        ids = sorted(by_speaker[spk])
        for a, b in itertools.combinations(ids, 2):
            pa, pb = registry.provenance[a], registry.provenance[b]
            if pa.set_id != pb.set_id:
                targets.append((a, b))
    if not targets:
        raise EvaluationError("no speaker has two models: no target trials")

    owner = [(mid, k) for k, spk in enumerate(speakers) for mid in sorted(by_speaker[spk])]
    spk_index = np.array([k for _, k in owner])
    # flat upper-triangle indices, filtered to cross-speaker pairs
    iu, ju = np.triu_indices(len(owner), k=1)
    cross = np.flatnonzero(spk_index[iu] != spk_index[ju])
    if n_nontarget >= len(cross):
        chosen = cross
    else:
        rng = np.random.default_rng(rng_seed)
        chosen = np.sort(rng.choice(cross, size=n_nontarget, replace=False))
    trials = [Trial(f"T{i:06d}", a, b, TARGET) for i, (a, b) in enumerate(targets)]
    base = len(trials)
    for k, flat in enumerate(chosen):
        trials.append(Trial(f"T{base + k:06d}", owner[iu[flat]][0], owner[ju[flat]][0],
                            NONTARGET))
    return trials


def _scores_of(scored):
    if isinstance(scored, ScoredTrials):
        tar, non = scored.split()
    else:
        tar, non = scored
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    if len(tar) == 0 or len(non) == 0:
        raise EvaluationError("EER needs at least one target and one non-target score")
    return tar, non


def _sweep(tar, non):
    """Error rates at each unique score used as an accept-if-``>=`` threshold."""
    thresholds = np.unique(np.concatenate([tar, non]))
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    p_miss = np.searchsorted(tar_sorted, thresholds, side="left") / len(tar)
    p_fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / len(non)
    return thresholds, p_fa, p_miss


def det_curve(scored):
    """``(p_fa, p_miss, theta)`` rows ordered by increasing threshold.

    Bracketed by the ``(1, 0)`` point at ``theta=-inf`` and ``(0, 1)`` at
    ``theta=+inf``.
    """
    tar, non = _scores_of(scored)
    thr, p_fa, p_miss = _sweep(tar, non)
    pts = [(1.0, 0.0, -np.inf)]
    pts += [(float(a), float(b), float(t)) for a, b, t in zip(p_fa, p_miss, thr)]
    pts.append((0.0, 1.0, np.inf))
    return pts


def compute_eer(scored) -> EerResult:
    """EER with linear interpolation between the ROC points that bracket it."""
    tar, non = _scores_of(scored)
    thr, p_fa, p_miss = _sweep(tar, non)
    thr = np.append(thr, np.inf)
    p_fa = np.append(p_fa, 0.0)
    p_miss = np.append(p_miss, 1.0)
    diff = p_fa - p_miss  # starts at 1 (lowest threshold accepts all), ends at -1
    i = int(np.flatnonzero(diff <= 0)[0])
    if diff[i] == 0:
        eer, theta = p_fa[i], thr[i]
    else:
        lam = diff[i - 1] / (diff[i - 1] - diff[i])
        eer = p_fa[i - 1] + lam * (p_fa[i] - p_fa[i - 1])
        hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
        theta = thr[i - 1] + lam * (hi - thr[i - 1])
    det = det_curve((tar, non))
    return EerResult(float(eer), float(theta), len(tar), len(non), tuple(det))


def layer_sweep(scorer, h_list, variants=None):
    """EER per hidden layer and statistic variant.

    ``scorer(h, variant_cfg) -> ScoredTrials``.  Returns ``{h: {name: EerResult}}``.
    """
    from .attack_a1 import VARIANTS

    variants = variants or VARIANTS
    table = {}
    for h in h_list:
        table[h] = {name: compute_eer(scorer(h, cfg)) for name, cfg in variants.items()}
    return table
