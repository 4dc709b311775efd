"""Seeded landmark-sequence augmentation.

Spatial ops act on the first two coordinate channels (x, y) of every
keypoint; any further channels (depth, visibility) pass through untouched.
"""
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class AugmentPolicy:
    flip_p: float = 0.5
    rotate_p: float = 0.3
    translate_p: float = 0.0
    scale_p: float = 0.2
    fusion_p: float = 0.2
    max_angle_deg: float = 13.0
    max_shift: float = 0.05
    fusion_mode: str = "weighted"
    fusion_weight_range: tuple = (0.2, 0.8)
    scale_range: tuple = (0.8, 1.2)
    flip_map: list = None

    def violations(self):
        errs = []
        for name in ("flip_p", "rotate_p", "translate_p", "scale_p", "fusion_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                errs.append(f"augment.{name}={p} outside [0, 1]")
        if self.max_angle_deg < 0:
            errs.append("augment.max_angle_deg must be >= 0")
        if self.max_shift < 0:
            errs.append("augment.max_shift must be >= 0")
        if self.fusion_mode not in ("average", "weighted"):
            errs.append(f"augment.fusion_mode={self.fusion_mode!r} not in (average, weighted)")
        lo, hi = self.fusion_weight_range
        if not 0 < lo <= hi < 1:
            errs.append("augment.fusion_weight_range must satisfy 0 < lo <= hi < 1")
        lo, hi = self.scale_range
        if not (0 < lo <= 1.0 <= hi):
            errs.append("augment.scale_range must be positive and contain 1")
        if self.flip_map is not None and not _is_involution(self.flip_map):
            errs.append("augment.flip_map is not an involution")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)


def _is_involution(perm):
    perm = np.asarray(perm)
    n = len(perm)
    if sorted(perm.tolist()) != list(range(n)):
        return False
    return bool(np.all(perm[perm] == np.arange(n)))


def _require_xy(seq):
    if seq.coords < 2:
        raise ValueError(f"need at least x and y channels, sequence has C={seq.coords}")


def _centroid(pts):
    return pts[..., :2].reshape(-1, 2).mean(axis=0)


def rotate(seq, angle):
    """Rotate every (x, y) pair by ``angle`` radians about the whole-sequence centroid."""
    _require_xy(seq)
    pts = seq.points().astype(np.float64)
    c = _centroid(pts)
    cos, sin = np.cos(angle), np.sin(angle)
    xy = pts[..., :2] - c
    out = pts.copy()
    out[..., 0] = c[0] + cos * xy[..., 0] - sin * xy[..., 1]
    out[..., 1] = c[1] + sin * xy[..., 0] + cos * xy[..., 1]
    return seq.replace(out.reshape(seq.frames, -1))


def translate(seq, dx, dy):
    _require_xy(seq)
    pts = seq.points().astype(np.float64).copy()
    pts[..., 0] += dx
    pts[..., 1] += dy
    return seq.replace(pts.reshape(seq.frames, -1))


def hflip(seq, flip_map=None):
    """Mirror x about the sequence centroid; optionally swap left/right keypoints."""
    _require_xy(seq)
    if flip_map is not None and not _is_involution(flip_map):
        raise ValueError("flip map must be an involution over keypoint indices")
    pts = seq.points().astype(np.float64).copy()
    cx = _centroid(pts)[0]
    pts[..., 0] = 2.0 * cx - pts[..., 0]
    if flip_map is not None:
        if len(flip_map) != seq.keypoints:
            raise ValueError(f"flip map covers {len(flip_map)} keypoints, sequence has {seq.keypoints}")
        pts = pts[:, np.asarray(flip_map)]
    return seq.replace(pts.reshape(seq.frames, -1))


def frame_fuse(seq, positions, mode="average", weight=0.5):
    """Blend frame ``t`` toward frame ``t+1`` at each position, in place in time.

    ``weight`` (scalar or one per position) is the share kept from frame ``t``;
    average mode forces 0.5. Sources are always the unfused input frames.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    T = seq.frames
    if positions.size and (positions.min() < 0 or positions.max() > T - 2):
        raise ValueError(f"fusion positions must lie in [0, {T - 2}]")
    if mode == "average":
        w = np.full(positions.shape, 0.5)
    elif mode == "weighted":
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), positions.shape)
        if np.any((w <= 0) | (w >= 1)):
            raise ValueError("fusion weight must lie in (0, 1)")
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    src = seq.data.astype(np.float64)
    out = src.copy()
    out[positions] = w[:, None] * src[positions] + (1.0 - w[:, None]) * src[positions + 1]
    return seq.replace(out)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def temporal_scale(seq, factor):
    """Linearly resample to ``round(T * factor)`` frames over the same time span."""
    if not factor > 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    T = seq.frames
    T_new = _round_half_up(T * factor)
    if T_new < 1:
        raise ValueError(f"factor {factor} leaves no frames from T={T}")
    if T_new == T:
        return seq.replace(seq.data.copy())
    grid = np.linspace(0.0, T - 1, T_new) if T_new > 1 else np.zeros(1)
    lo = np.clip(np.floor(grid).astype(np.int64), 0, T - 1)
    hi = np.minimum(lo + 1, T - 1)
    frac = (grid - lo)[:, None]
    src = seq.data.astype(np.float64)
    out = (1.0 - frac) * src[lo] + frac * src[hi]
    return seq.replace(out)


# ---------------------------------------------------------------------------
# policy sampling
# ---------------------------------------------------------------------------

@dataclass
class AugmentPlan:
    flip: bool = False
    angle: float = None
    shift: tuple = None
    scale: float = None
    fuse_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fuse_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fuse_candidates: int = 0


def _coord_range(seq, axis):
    vals = seq.points()[..., axis]
    return float(vals.max() - vals.min())


def apply_policy(seq, policy, seed, return_plan=False):
    """Sample and apply ops in the order flip, rotate, translate, scale, fuse.

    Every random draw comes from ``np.random.default_rng(seed)`` and is made
    whether or not the op fires, so the stream layout never depends on the
    outcome of earlier coin flips.
    """
    rng = np.random.default_rng(seed)
    plan = AugmentPlan()

    u_flip = rng.random()
    u_rot, angle = rng.random(), rng.uniform(-1.0, 1.0) * np.deg2rad(policy.max_angle_deg)
    u_tr, shift = rng.random(), rng.uniform(-1.0, 1.0, size=2) * policy.max_shift
    u_sc, factor = rng.random(), rng.uniform(*policy.scale_range)

    if u_flip < policy.flip_p:
        plan.flip = True
        seq = hflip(seq, policy.flip_map)
    if u_rot < policy.rotate_p:
        plan.angle = float(angle)
        seq = rotate(seq, angle)
    if u_tr < policy.translate_p:
        dx, dy = shift[0] * _coord_range(seq, 0), shift[1] * _coord_range(seq, 1)
        plan.shift = (float(dx), float(dy))
        seq = translate(seq, dx, dy)
    if u_sc < policy.scale_p and _round_half_up(seq.frames * factor) >= 1:
        plan.scale = float(factor)
        seq = temporal_scale(seq, factor)

    n = max(seq.frames - 1, 0)
    u_fuse = rng.random(n)
    weights = rng.uniform(*policy.fusion_weight_range, size=n)
    chosen = np.flatnonzero(u_fuse < policy.fusion_p)
    plan.fuse_candidates = n
    if chosen.size:
        plan.fuse_positions = chosen
        plan.fuse_weights = weights[chosen] if policy.fusion_mode == "weighted" else np.full(chosen.size, 0.5)
        seq = frame_fuse(seq, chosen, policy.fusion_mode, plan.fuse_weights)
    return (seq, plan) if return_plan else seq
