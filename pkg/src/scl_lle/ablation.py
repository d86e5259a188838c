"""Ablation switches: each maps to a single config delta."""

from __future__ import annotations

from .trainer import TrainConfig

ABLATION_SWITCHES: dict[str, dict] = {
    "no-lc": {"w_c": 0.0},
    "no-lsc": {"w_sc": 0.0},
    "no-lfr": {"w_fr": 0.0},
    # no negatives at all: pools emptied, the contrastive loss keeps only the positive distances
    "no-neg": {"use_neg_over": False, "use_neg_under": False},
    "no-over": {"use_neg_over": False},
    "no-under": {"use_neg_under": False},
}


class UnknownSwitchError(ValueError):
    pass


def derive_config(base: TrainConfig, switch: str) -> TrainConfig:
    if switch not in ABLATION_SWITCHES:
        raise UnknownSwitchError(f"unknown ablation switch {switch!r}; choose from {sorted(ABLATION_SWITCHES)}")
    tag = f"{base.tag}+{switch}" if base.tag else switch
    return base.updated(tag=tag, **ABLATION_SWITCHES[switch])
