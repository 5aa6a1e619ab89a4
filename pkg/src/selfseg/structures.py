"""Containers passed between the CAM, CRF, loss and pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CamStack:
    """Per-class activation maps in [0, 1].

    ``maps[c - 1]`` holds the map of class ``c``; classes are numbered from 1
    because label 0 is reserved for background.
    """

    maps: np.ndarray
    present_classes: frozenset[int]
    image_id: str = ""

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.present_classes = frozenset(int(c) for c in self.present_classes)
        if self.maps.ndim != 3:
            raise ValueError(f"CamStack maps must be C x H x W, got {self.maps.shape}")
        bad = [c for c in self.present_classes if not 1 <= c <= self.num_classes]
        if bad:
            raise ValueError(f"present classes {bad} outside 1..{self.num_classes}")

    @property
    def num_classes(self) -> int:
        return self.maps.shape[0]

    @property
    def extent(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass
class PseudoMask:
    labels: np.ndarray
    image_id: str = ""
    pre_crf: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def all_background(self) -> bool:
        return not bool(self.labels.any())
