"""Data-poisoning attack modes applied to cached datasets.

Attacks only rewrite reported CSI labels; pilot inputs are left untouched.
Widespread deployment poisons a fixed fraction of every cache; targeted
deployment concentrates one widespread-sized share of adversaries on a
single station.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .channel import CachedDataset, ChannelSample, lagged_label

ATTACK_MODES = ("outdate", "collusion", "reverse")
DEPLOYMENTS = ("widespread", "targeted")


@dataclass(frozen=True)
class AttackPlan:
    mode: str
    deployment: str = "widespread"
    ratio: float = 0.0
    target_sbs: Optional[int] = None
    collusion_payload: Optional[np.ndarray] = None
    outdate_lag: float = 1.0
    outdate_pool_depth: int = 5

    def validate(self, n_sbs: Optional[int] = None) -> None:
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.deployment not in DEPLOYMENTS:
            raise ValueError(f"unknown deployment {self.deployment!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"attack ratio {self.ratio} outside [0, 1]")
        if self.deployment == "targeted":
            if self.target_sbs is None:
                raise ValueError("targeted deployment needs target_sbs")
            if n_sbs is not None and not 0 <= self.target_sbs < n_sbs:
                raise ValueError(f"target_sbs {self.target_sbs} out of range for N={n_sbs}")
        if self.outdate_pool_depth < 1:
            raise ValueError("outdate_pool_depth must be >= 1")


def reverse_label(label: np.ndarray) -> np.ndarray:
    """Reflect every element about the label's overall mean (an involution)."""
    m = label.mean()
    return 2.0 * m - label


def collude_label(sample: ChannelSample, payload: np.ndarray) -> ChannelSample:
    if payload.shape != sample.label.shape:
        raise ValueError(f"payload shape {payload.shape} != label {sample.label.shape}")
    return replace(_as_poisoned(sample, "collusion"), label=payload)


def outdate_label(
    sample: ChannelSample, outdated_pool: list[np.ndarray], rng: np.random.Generator
) -> ChannelSample:
    if not outdated_pool:
        raise ValueError("empty outdated-CSI pool")
    pick = int(rng.integers(len(outdated_pool)))
    return replace(_as_poisoned(sample, "outdate"), label=outdated_pool[pick])


def _as_poisoned(sample: ChannelSample, mode: str) -> ChannelSample:
    # fresh object: authentic samples are never mutated; fading params are
    # dropped because the poisoned label no longer matches them
    return ChannelSample(
        input=sample.input, label=sample.label, provenance=mode,
        origin_mu_id=sample.origin_mu_id, uid=sample.uid, fading=None,
    )


def _poison_count(plan: AttackPlan, cache_len: int, total_len: int, n_caches: int) -> int:
    if plan.deployment == "widespread":
        return int(plan.ratio * cache_len)
    return min(int(plan.ratio * total_len / n_caches), cache_len)


def poison_caches(
    caches: list[CachedDataset], plan: AttackPlan, rng: np.random.Generator
) -> list[CachedDataset]:
    """Apply one attack plan to a round's caches, marking victims as poisoned.

    Sample selection is uniform without replacement; the default collusion
    payload freezes to the first victim's original label, in draw order.
    """
    plan.validate(len(caches))
    if plan.ratio == 0.0:
        return caches
    total_len = sum(c.l_n for c in caches)
    payload = plan.collusion_payload
    out = []
    for cache in caches:
        attacked = plan.deployment == "widespread" or cache.sbs_id == plan.target_sbs
        count = _poison_count(plan, cache.l_n, total_len, len(caches)) if attacked else 0
        if count == 0:
            out.append(cache)
            continue
        chosen = rng.choice(cache.l_n, size=count, replace=False)
        samples = list(cache.samples)
        for idx in chosen:
            victim = samples[idx]
            if plan.mode == "reverse":
                samples[idx] = replace(
                    _as_poisoned(victim, "reverse"), label=reverse_label(victim.label)
                )
            elif plan.mode == "collusion":
                if payload is None:
                    payload = victim.label.copy()
                samples[idx] = collude_label(victim, payload)
            else:  # outdate
                pool = [
                    lagged_label(victim, plan.outdate_lag * k)
                    for k in range(1, plan.outdate_pool_depth + 1)
                ]
                samples[idx] = outdate_label(victim, pool, rng)
        out.append(CachedDataset(
            samples=samples, sbs_id=cache.sbs_id, round_index=cache.round_index,
            aggregation_len=cache.aggregation_len,
        ))
    return out
