"""Seeded synthetic scenes and templated instructions.

Frames are color gradients with a few solid rectangles; instructions are
"<verb> the <color> block on the <place>" drawn from the probe vocabulary,
so the text pathway sees action verbs and spatial words.
"""

from __future__ import annotations

import numpy as np

__all__ = ["generate_dataset"]

_VERBS = ("put", "place", "push")
_COLORS = ("red", "green", "blue", "yellow", "purple", "white")
_PLACES = ("left", "right", "top", "bottom", "middle", "front", "back")


def _scene(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    c0 = rng.uniform(0.0, 1.0, 3)
    c1 = rng.uniform(0.0, 1.0, 3)
    ramp = np.linspace(0.0, 1.0, width if rng.integers(2) else height)
    if ramp.size == width:
        t = np.broadcast_to(ramp, (height, width))
    else:
        t = np.broadcast_to(ramp[:, None], (height, width))
    img = c0 + t[:, :, None] * (c1 - c0)
    for _ in range(int(rng.integers(1, 4))):
        r0, r1 = np.sort(rng.integers(0, height, 2))
        c0_, c1_ = np.sort(rng.integers(0, width, 2))
        img[r0 : r1 + 1, c0_ : c1_ + 1] = rng.uniform(0.0, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def _instruction(rng: np.random.Generator) -> str:
    verb = _VERBS[rng.integers(len(_VERBS))]
    color = _COLORS[rng.integers(len(_COLORS))]
    place = _PLACES[rng.integers(len(_PLACES))]
    return f"{verb} the {color} block on the {place}"


def generate_dataset(
    count: int, seed: int, height: int = 32, width: int = 32
) -> list[tuple[np.ndarray, str]]:
    """Deterministic list of (frame, instruction) pairs."""
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return [(_scene(rng, height, width), _instruction(rng)) for _ in range(count)]
