"""Fixed-size window planning over large source images.

Each source yields seven windows: the four corners, the centre and two
uniformly random positions (which may overlap the others). Windows with too
little medial-line content are filtered out afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .image_metrics import skeletonize

DEFAULT_WINDOW = 256
DEFAULT_MIN_SKELETON_LENGTH = 32.0
KINDS = ("corner-tl", "corner-tr", "corner-bl", "corner-br", "center", "random-1", "random-2")


@dataclass(frozen=True)
class PatchSpec:
    source_id: str
    x: int
    y: int
    size: int
    kind: str

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}__{self.kind}"

    @property
    def group(self) -> str:
        return self.source_id

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        return pixels[self.y:self.y + self.size, self.x:self.x + self.size]

    def sort_key(self) -> tuple[str, int]:
        return self.source_id, KINDS.index(self.kind)


def _source_seed(source_id: str, rng_seed: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(source_id.encode("utf-8")).digest()
    return np.random.SeedSequence([rng_seed, int.from_bytes(digest[:8], "little")])


def plan_windows(
    source_id: str, width: int, height: int, size: int = DEFAULT_WINDOW, rng_seed: int = 0
) -> list[PatchSpec]:
    if size < 1:
        raise ValueError(f"window size must be positive, got {size}")
    if width < size or height < size:
        raise InputError(f"source too small: {width}x{height} for a {size}px window")
    right, bottom = width - size, height - size
    fixed = [
        ("corner-tl", 0, 0),
        ("corner-tr", right, 0),
        ("corner-bl", 0, bottom),
        ("corner-br", right, bottom),
        ("center", right // 2, bottom // 2),
    ]
    rng = np.random.default_rng(_source_seed(source_id, rng_seed))
    xs = rng.integers(0, right + 1, size=2)
    ys = rng.integers(0, bottom + 1, size=2)
    fixed += [("random-1", int(xs[0]), int(ys[0])), ("random-2", int(xs[1]), int(ys[1]))]
    return [PatchSpec(source_id, x, y, size, kind) for kind, x, y in fixed]


def window_skeleton_length(spec: PatchSpec, mask: np.ndarray) -> float:
    return skeletonize(spec.crop(mask)).arc_length


def filter_windows(
    specs: Sequence[PatchSpec],
    masks: Mapping[str, np.ndarray],
    min_length: float = DEFAULT_MIN_SKELETON_LENGTH,
) -> list[PatchSpec]:
    """Keep windows whose cropped mask has at least ``min_length`` pixels of medial line."""
    return [s for s in specs if window_skeleton_length(s, masks[s.source_id]) >= min_length]
