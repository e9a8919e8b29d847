"""Synthetic token-sequence task: each token id owns a fixed prototype
vector, utterances concatenate per-token prototypes held for a few frames,
and Gaussian noise is added on top.  Stands in for a real corpus at desk
scale."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ctc import required_length

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticTaskConfig:
    vocab: int = 5
    input_dim: int = 16
    min_label_length: int = 2
    max_label_length: int = 8
    min_duration: int = 2    # frames emitted per token
    max_duration: int = 4
    noise_sigma: float = 0.25
    train_size: int = 2048
    dev_size: int = 256
    test_size: int = 256
    seed: int = 1

    def __post_init__(self):
        if self.vocab < 1:
            raise ValueError("vocab must be positive")
        if self.min_duration < 1:
            raise ValueError("per-token duration must be at least 1 frame")
        if not 1 <= self.min_label_length <= self.max_label_length:
            raise ValueError("bad label length range")
        if self.min_duration > self.max_duration:
            raise ValueError("bad duration range")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    def size_of(self, split: str) -> int:
        return {"train": self.train_size, "dev": self.dev_size,
                "test": self.test_size}[split]


class Utterance(NamedTuple):
    features: np.ndarray        # (T, input_dim)
    labels: tuple[int, ...]


def token_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    """One fixed vector per token id, rows 0..vocab-1 for ids 1..vocab."""
    rng = np.random.default_rng([cfg.seed, 0])
    return rng.normal(size=(cfg.vocab, cfg.input_dim))


def generate_dataset(cfg: SyntheticTaskConfig, split: str,
                     dtype=np.float32) -> list[Utterance]:
    """Deterministic per (seed, split); splits use disjoint derived seeds."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    protos = token_prototypes(cfg)
    rng = np.random.default_rng([cfg.seed, 1 + SPLITS.index(split)])
    utterances = []
    for _ in range(cfg.size_of(split)):
        while True:
            length = int(rng.integers(cfg.min_label_length, cfg.max_label_length + 1))
            labels = tuple(int(t) for t in rng.integers(1, cfg.vocab + 1, size=length))
            durations = rng.integers(cfg.min_duration, cfg.max_duration + 1,
                                     size=length)
            frames = np.repeat(protos[np.array(labels) - 1], durations, axis=0)
            if cfg.noise_sigma > 0:
                frames = frames + rng.normal(scale=cfg.noise_sigma, size=frames.shape)
            # guaranteed when min_duration >= 2; regenerate if a custom range
            # ever produces an infeasible pair
            if frames.shape[0] >= required_length(labels):
                break
        utterances.append(Utterance(frames.astype(dtype), labels))
    return utterances
