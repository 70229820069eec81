"""Canonical view/time coordinates and the network-input encodings built from them.

Views sit at u = -0.5 (left) and u = +0.5 (right); frame i of an N-frame
video sits at t = i / (N - 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

U_LEFT = -0.5
U_RIGHT = 0.5


@dataclass(frozen=True)
class ViewTimeCoord:
    u: float
    t: float

    def __post_init__(self):
        if not -0.5 <= self.u <= 0.5:
            raise ValueError(f"view coordinate u={self.u} outside [-0.5, 0.5]")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"time coordinate t={self.t} outside [0, 1]")


@dataclass(frozen=True)
class EncodingConfig:
    view_scale: float = 30.0
    view_pe_freqs: int = 5
    time_pe_freqs: int = 10
    alpha: float = 0.9
    band_limit: bool = True

    def __post_init__(self):
        if self.view_scale <= 0:
            raise ValueError("view_scale must be positive")
        if self.view_pe_freqs < 1 or self.time_pe_freqs < 1:
            raise ValueError("frequency counts must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def for_frames(self, n_frames: int) -> "EncodingConfig":
        """Drop time frequencies that alias at the frame spacing of an N-frame clip.

        sin/cos(2^k pi t) sampled at t = i / (N - 1) is constant or
        alternating once 2^k >= N - 1, so the decoder never sees those
        features vary between training coordinates and meets unseen values
        in between. With ``band_limit`` the counts are capped at the
        largest k with 2^k < N - 1. Idempotent.
        """
        if not self.band_limit:
            return self
        cap = max(1, math.ceil(math.log2(max(n_frames - 1, 1))))
        return replace(self, view_pe_freqs=min(self.view_pe_freqs, cap),
                       time_pe_freqs=min(self.time_pe_freqs, cap))


def frame_time(i: int, n_frames: int) -> float:
    if n_frames < 2:
        raise ValueError("need at least two frames")
    return i / (n_frames - 1)


def frame_spacing(n_frames: int) -> float:
    return 1.0 / (n_frames - 1)


def positional_encode(x: float, n_freq: int) -> np.ndarray:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)]."""
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    angles = np.pi * float(x) * 2.0 ** np.arange(n_freq)
    out = np.empty(2 * n_freq, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def view_network_input(u: float, cfg: EncodingConfig = EncodingConfig()) -> float:
    return u / cfg.view_scale


def non_uniform_tau(t: float, branch: str, delta: float, cfg: EncodingConfig = EncodingConfig()) -> float:
    """Time coordinate at which a Jacobian branch is queried.

    The next-frame branch uses t itself; the previous-frame branch is
    pulled back by ``alpha`` frame spacings, leaving a gap between
    neighbouring frames' coordinates.
    """
    if branch == "next":
        return t
    if branch == "prev":
        return t - cfg.alpha * delta
    raise ValueError(f"branch must be 'next' or 'prev', got {branch!r}")


def assemble_coord(kind: str, coord, cfg: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """Network input vector (float32).

    ``view-net`` takes a :class:`ViewTimeCoord` (or ``(u, t)``) and yields
    ``[u / view_scale] + PE(t, view_pe_freqs)``; ``time-net`` takes a scalar
    tau and yields ``PE(tau, time_pe_freqs)``.
    """
    if kind == "view-net":
        u, t = (coord.u, coord.t) if isinstance(coord, ViewTimeCoord) else coord
        vec = np.concatenate([[view_network_input(u, cfg)], positional_encode(t, cfg.view_pe_freqs)])
    elif kind == "time-net":
        vec = positional_encode(float(coord), cfg.time_pe_freqs)
    else:
        raise ValueError(f"unknown coordinate kind {kind!r}")
    return vec.astype(np.float32)


def coord_dim(kind: str, cfg: EncodingConfig = EncodingConfig()) -> int:
    return 1 + 2 * cfg.view_pe_freqs if kind == "view-net" else 2 * cfg.time_pe_freqs
