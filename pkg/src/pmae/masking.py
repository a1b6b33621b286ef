"""
Mask plans for the pre-training pretext task.

``periodic`` keeps every ``step``-th frame (from a random phase offset) and
masks every token of the other frames. ``random``, ``frame`` and ``tube`` are
the VideoMAE-style baselines used by the masking ablation.

Token order everywhere is raster order over the ``(T, h, w)`` lattice:
time-major, then row, then column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

STRATEGIES = ("periodic", "random", "frame", "tube")
STEP_RANGE = (2, 5)
DEFAULT_RATIO = 0.75


class MaskError(ValueError):
    pass


@dataclass
class MaskPlan:
    strategy: str
    T: int
    grid: Tuple[int, int]
    visible: np.ndarray  # bool (T, h, w); True = visible to the encoder
    ratio: float
    seed: int
    step: Optional[int] = None
    offset: Optional[int] = None
    visible_frames: Optional[np.ndarray] = None

    @property
    def n_tokens(self) -> int:
        return self.visible.size

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    @property
    def masked_fraction(self) -> float:
        return 1.0 - self.n_visible / self.n_tokens

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy, "T": self.T, "grid": list(self.grid),
            "ratio": self.ratio, "seed": self.seed, "step": self.step, "offset": self.offset,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        params = {"step": d["step"], "offset": d["offset"]} if d["strategy"] == "periodic" else {"ratio": d["ratio"]}
        return make_mask(d["strategy"], d["T"], tuple(d["grid"]), params, d["seed"])


def make_mask(strategy: str, T: int, grid: Tuple[int, int], params: Optional[dict] = None,
              seed: int = 0) -> MaskPlan:
    """Build a deterministic :class:`MaskPlan`.

    ``params`` holds ``step`` (and optionally ``offset``) for the periodic
    strategy, or ``ratio`` for the others (default 0.75).
    """
    params = dict(params or {})
    h, w = grid
    if T < 1 or h < 1 or w < 1:
        raise MaskError(f"invalid lattice {T}x{h}x{w}")
    rng = np.random.default_rng(seed)

    if strategy == "periodic":
        step = params.get("step")
        if step is None or not (STEP_RANGE[0] <= int(step) <= STEP_RANGE[1]) or int(step) != step:
            raise MaskError(f"periodic step must be an integer in [2, 5], got {step!r}")
        step = int(step)
        offset = params.get("offset")
        if offset is None:
            # short clips: keep at least one frame visible
            offset = int(rng.integers(0, min(step, T)))
        if not (0 <= offset < min(step, T)):
            raise MaskError(f"offset must lie in [0, {min(step, T)}), got {offset}")
        frames = np.arange(offset, T, step)
        vis = np.zeros((T, h, w), dtype=bool)
        vis[frames] = True
        ratio = 1.0 - len(frames) / T
        return MaskPlan("periodic", T, (h, w), vis, ratio, seed, step=step, offset=int(offset),
                        visible_frames=frames)

    if strategy not in STRATEGIES:
        raise MaskError(f"unknown masking strategy {strategy!r}")
    ratio = float(params.get("ratio", DEFAULT_RATIO))
    if not (0.0 < ratio < 1.0):
        raise MaskError(f"masking ratio must lie in (0, 1), got {ratio}")

    if strategy == "random":
        n = T * h * w
        n_mask = _n_masked(ratio, n)
        flat = np.ones(n, dtype=bool)
        flat[rng.permutation(n)[:n_mask]] = False
        vis = flat.reshape(T, h, w)
        return MaskPlan("random", T, (h, w), vis, ratio, seed)

    if strategy == "tube":
        n = h * w
        n_mask = _n_masked(ratio, n)
        cells = np.ones(n, dtype=bool)
        cells[rng.permutation(n)[:n_mask]] = False
        vis = np.broadcast_to(cells.reshape(1, h, w), (T, h, w)).copy()
        return MaskPlan("tube", T, (h, w), vis, ratio, seed)

    # frame
    n_mask = _n_masked(ratio, T)
    keep = np.sort(rng.permutation(T)[n_mask:])
    vis = np.zeros((T, h, w), dtype=bool)
    vis[keep] = True
    return MaskPlan("frame", T, (h, w), vis, ratio, seed, visible_frames=keep)


def _n_masked(ratio: float, units: int) -> int:
    # the encoder needs at least one visible unit
    return min(int(round(ratio * units)), units - 1)


def sample_step(epoch: int, seed: int) -> int:
    """Periodic step for ``epoch``, uniform over {2, 3, 4, 5}."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(epoch)])
    return int(rng.integers(STEP_RANGE[0], STEP_RANGE[1] + 1))


def no_mask(T: int, grid: Tuple[int, int]) -> MaskPlan:
    """Plan that keeps every token visible (fine-tuning / inference)."""
    h, w = grid
    return MaskPlan("none", T, (h, w), np.ones((T, h, w), dtype=bool), 0.0, 0)


@dataclass
class MaskIndex:
    """Where the visible and masked tokens sit in the flattened lattice."""

    shape: Tuple[int, int, int]
    visible_idx: torch.Tensor
    masked_idx: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return math.prod(self.shape)

    def masked_selector(self) -> torch.Tensor:
        sel = torch.zeros(self.n_tokens, dtype=torch.bool)
        sel[self.masked_idx] = True
        return sel

    def check(self) -> None:
        n = self.n_tokens
        allidx = torch.cat([self.visible_idx, self.masked_idx])
        if allidx.numel() != n or not torch.equal(torch.sort(allidx).values, torch.arange(n)):
            raise MaskError("mask index does not partition the token lattice")


def mask_index(plan: MaskPlan) -> MaskIndex:
    flat = torch.from_numpy(plan.visible.reshape(-1))
    return MaskIndex(
        shape=(plan.T,) + tuple(plan.grid),
        visible_idx=torch.nonzero(flat, as_tuple=False).flatten(),
        masked_idx=torch.nonzero(~flat, as_tuple=False).flatten(),
    )


def apply_mask(tokens: torch.Tensor, plan: MaskPlan) -> Tuple[torch.Tensor, MaskIndex]:
    """Gather visible tokens from ``tokens`` of shape ``(..., T, h, w, D)``.

    Returns ``(visible, index)`` with ``visible`` of shape ``(..., N_vis, D)``
    in raster order.
    """
    shape = tuple(tokens.shape[-4:-1])
    if shape != (plan.T,) + tuple(plan.grid):
        raise MaskError(f"token lattice {shape} does not match plan {(plan.T,) + tuple(plan.grid)}")
    idx = mask_index(plan)
    flat = tokens.reshape(tokens.shape[:-4] + (-1, tokens.shape[-1]))
    return flat.index_select(-2, idx.visible_idx.to(tokens.device)), idx


def reassemble(visible: torch.Tensor, fill: torch.Tensor, index: MaskIndex) -> torch.Tensor:
    """Inverse of :func:`apply_mask`: scatter ``visible`` back, ``fill`` elsewhere.

    ``fill`` is either a single ``(D,)`` vector broadcast to every masked slot
    (the learnable mask token) or ``(..., N_masked, D)``. Returns
    ``(..., T, h, w, D)``.
    """
    index.check()
    lead = visible.shape[:-2]
    D = visible.shape[-1]
    if visible.shape[-2] != index.visible_idx.numel():
        raise MaskError(f"{visible.shape[-2]} visible tokens but index expects {index.visible_idx.numel()}")
    n_mask = index.masked_idx.numel()
    if fill.dim() == 1:
        fill = fill.expand(lead + (n_mask, D))
    elif fill.shape[-2] != n_mask:
        raise MaskError(f"{fill.shape[-2]} fill tokens but index expects {n_mask}")
    order = torch.cat([index.visible_idx, index.masked_idx]).to(visible.device)
    inv = torch.argsort(order)
    full = torch.cat([visible, fill.to(visible.dtype)], dim=-2).index_select(-2, inv)
    return full.reshape(lead + index.shape + (D,))
