"""Positional machinery for the pyramid sequence.

Within a scale, token coordinates are rescaled to a shared (grid_h, grid_w) frame
before entering axial 2D rotary encoding, so "one cell to the right" means the same
thing at every scale: coordinates that coincide after rescaling get bit-identical
rotation angles. `raw` mode skips the rescaling (the degradation control) and
`absolute` replaces rotation with learned per-position tables (the baseline that
cannot extend to longer schedules). Cross-scale membership is a learned per-scale
vector added to token embeddings in every mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn.tensor import Tensor
from .tokenizer import ScaleSchedule

MODES = ("normalized", "raw", "absolute")

# scale-membership vectors are allocated up to this many scales so checkpoints can
# be evaluated and fine-tuned at longer schedules without new parameters
MAX_SCALES = 12


@dataclass(frozen=True)
class RopeConfig:
    grid_h: float = 8.0
    grid_w: float = 8.0
    d_head: int = 32
    freq_base: float = 10000.0
    mode: str = "normalized"

    def __post_init__(self):
        if self.d_head % 4:
            raise ValueError("d_head must be divisible by 4 (two axes, paired channels)")
        if self.freq_base <= 0:
            raise ValueError("freq_base must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def validate_schedule(self, schedule: ScaleSchedule) -> None:
        h, w = schedule.latent
        if self.mode == "normalized" and (self.grid_h < h or self.grid_w < w):
            raise ValueError(f"normalized grid ({self.grid_h}, {self.grid_w}) smaller than latent ({h}, {w})")


def rope_angles(i: int, j: int, h_s: int, w_s: int, config: RopeConfig) -> np.ndarray:
    """Rotation angles (length d_head/2) for 1-based cell (i, j) of an h_s x w_s map.

    The first d_head/4 entries rotate x-channel pairs at position (i/h_s)*grid_h, the
    rest rotate y-channel pairs at (j/w_s)*grid_w; pair t spins at freq_base^(-4t/d_head).
    In `raw` mode the positions are the unscaled (i, j); `absolute` mode has no
    rotation at all (zero angles).
    """
    if not (1 <= i <= h_s and 1 <= j <= w_s):
        raise ValueError(f"cell ({i}, {j}) outside {h_s} x {w_s} grid")
    pairs = config.d_head // 4
    if config.mode == "absolute":
        return np.zeros(2 * pairs, dtype=np.float64)
    if config.mode == "normalized":
        px = (i / h_s) * config.grid_h
        py = (j / w_s) * config.grid_w
    else:
        px, py = float(i), float(j)
    freqs = config.freq_base ** (-4.0 * np.arange(pairs) / config.d_head)
    return np.concatenate([px * freqs, py * freqs])


def angle_table(schedule: ScaleSchedule, config: RopeConfig) -> np.ndarray:
    """Angles for every token position of the flattened pyramid: (total_tokens, d_head/2)."""
    rows = []
    for h, w in schedule.sides:
        for i in range(1, h + 1):
            for j in range(1, w + 1):
                rows.append(rope_angles(i, j, h, w, config))
    return np.stack(rows)


def cos_sin_table(schedule: ScaleSchedule, config: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-position cos/sin expanded to d_head channels (each angle covers a pair)."""
    ang = angle_table(schedule, config)
    cos = np.repeat(np.cos(ang), 2, axis=1).astype(np.float32)
    sin = np.repeat(np.sin(ang), 2, axis=1).astype(np.float32)
    return cos, sin


def apply_rope(vec, cos: np.ndarray, sin: np.ndarray):
    """Rotate channel pairs: out = vec*cos + rotate_pairs(vec)*sin.

    Works on Tensors inside the graph; cos/sin broadcast over leading axes.
    """
    v = nn.as_tensor(vec)
    if v.shape[-1] != cos.shape[-1]:
        raise ValueError(f"head dim {v.shape[-1]} does not match rope table {cos.shape[-1]}")
    return nn.add(nn.mul(v, cos), nn.mul(nn.rotate_pairs(v), sin))


def apply_rope_array(vec: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Plain-ndarray rope application for a single vector (tests, oracles)."""
    cos = np.repeat(np.cos(angles), 2)
    sin = np.repeat(np.sin(angles), 2)
    rot = np.empty_like(vec)
    rot[0::2] = -vec[1::2]
    rot[1::2] = vec[0::2]
    return vec * cos + rot * sin


class ScaleEmbedding:
    """Learned scale-membership vectors, one per scale index (allocated to MAX_SCALES)."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        self.params: dict[str, Tensor] = {"pos.scale_emb": nn.normal_param(rng, (MAX_SCALES, d_model), 0.02)}

    def term(self, s: int) -> Tensor:
        """Vector added to every token embedding of (1-based) scale s."""
        if not 1 <= s <= MAX_SCALES:
            raise ValueError(f"unknown scale {s} (supported 1..{MAX_SCALES})")
        return nn.narrow(self.params["pos.scale_emb"], 0, s - 1, 1)
