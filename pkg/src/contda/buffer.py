"""Class-balanced replay buffer with confidence-based or random retention.

The buffer is split into C equal sections of floor(L/C) slots; incoming
chunk samples take priority over previously stored ones when a section is
repopulated, and leftover capacity from a non-divisible L stays unused to
preserve exact class balance.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigurationError, InputValidationError

POLICIES = ("confidence", "random")


@dataclasses.dataclass
class StoredSample:
    image: np.ndarray
    pseudolabel: int
    confidence: float


@dataclasses.dataclass
class MergedSet:
    """Union of an incoming chunk with the replayed buffer content."""

    images: np.ndarray  # (N, H, W, 3)
    incoming_mask: np.ndarray  # (N,) bool, True = incoming, False = replay

    def __len__(self) -> int:
        return len(self.images)

    @property
    def tags(self) -> list:
        return ["incoming" if m else "replay" for m in self.incoming_mask]


class ReplayBuffer:
    """Bounded class-balanced store of raw samples with pseudolabel metadata."""

    def __init__(self, capacity: int, class_count: int, policy: str, seed: int = 0):
        if policy not in POLICIES:
            raise ConfigurationError(f"unknown buffer policy {policy!r}")
        if capacity < 1 or class_count < 1:
            raise ConfigurationError("capacity and class_count must be positive")
        self.capacity = capacity
        self.class_count = class_count
        self.policy = policy
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)
        self.slots: list = [[] for _ in range(class_count)]

    @property
    def per_class_cap(self) -> int:
        return self.capacity // self.class_count

    def __len__(self) -> int:
        return sum(len(s) for s in self.slots)

    def occupancy(self) -> np.ndarray:
        return np.asarray([len(s) for s in self.slots])

    def is_empty(self) -> bool:
        return len(self) == 0

    def contents(self):
        """All stored samples as (images, pseudolabels, confidences)."""
        items = [item for slot in self.slots for item in slot]
        if not items:
            return (
                np.zeros((0,), dtype=np.float32),
                np.zeros((0,), dtype=np.int64),
                np.zeros((0,), dtype=np.float64),
            )
        images = np.stack([it.image for it in items])
        labels = np.asarray([it.pseudolabel for it in items], dtype=np.int64)
        confs = np.asarray([it.confidence for it in items], dtype=np.float64)
        return images, labels, confs

    def _select(self, items: list, k: int) -> list:
        """Up to k items under the retention policy; stable confidence ties."""
        if k <= 0 or not items:
            return []
        if self.policy == "confidence":
            order = np.argsort([-it.confidence for it in items], kind="stable")
        else:
            order = self.rng.permutation(len(items))
        return [items[i] for i in order[:k]]

    def repopulate(self, chunk_images, pseudolabels, confidences):
        """Refill each class section from the chunk first, then from the
        previous buffer content under the same policy."""
        chunk_images = np.asarray(chunk_images)
        pseudolabels = np.asarray(pseudolabels, dtype=np.int64)
        confidences = np.asarray(confidences, dtype=np.float64)
        if not (len(chunk_images) == len(pseudolabels) == len(confidences)):
            raise InputValidationError("chunk samples, pseudolabels and confidences must align")
        if len(pseudolabels) and (pseudolabels.min() < 0 or pseudolabels.max() >= self.class_count):
            raise InputValidationError("pseudolabel out of range")

        cap = self.per_class_cap
        new_slots = []
        for k in range(self.class_count):
            incoming = [
                StoredSample(chunk_images[i].copy(), k, float(confidences[i]))
                for i in np.flatnonzero(pseudolabels == k)
            ]
            kept = self._select(incoming, cap)
            kept += self._select(self.slots[k], cap - len(kept))
            new_slots.append(kept)
        self.slots = new_slots

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "class_count": self.class_count,
            "policy": self.policy,
            "rng_seed": self.rng_seed,
            "rng_state": self.rng.bit_generator.state,
            "slots": [
                [(it.image, it.pseudolabel, it.confidence) for it in slot]
                for slot in self.slots
            ],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "ReplayBuffer":
        buf = cls(state["capacity"], state["class_count"], state["policy"], state["rng_seed"])
        buf.rng.bit_generator.state = state["rng_state"]
        buf.slots = [
            [StoredSample(img, lab, conf) for img, lab, conf in slot]
            for slot in state["slots"]
        ]
        return buf


def merge(chunk_images: np.ndarray, buffer: ReplayBuffer | None) -> MergedSet:
    """Incoming chunk united with the buffer; every sample tagged by origin."""
    chunk_images = np.asarray(chunk_images, dtype=np.float32)
    n_in = len(chunk_images)
    if buffer is None or buffer.is_empty():
        return MergedSet(chunk_images.copy(), np.ones(n_in, dtype=bool))
    replay_images, _, _ = buffer.contents()
    images = np.concatenate([chunk_images, replay_images], axis=0)
    mask = np.zeros(len(images), dtype=bool)
    mask[:n_in] = True
    return MergedSet(images, mask)
