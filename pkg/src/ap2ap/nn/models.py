"""Set encoders over current/target point pairs, self-attention blocks, and
the student's transformer action world model.

The paired encoder consumes rows [current_xyz | target_xyz]; keeping each
correspondence inside one 6-vector is what lets the feature distinguish a
pure object rotation from no motion at all. The decoupled and flat variants
exist as controlled degradations of exactly that property.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import NoVisiblePoints, PairedPoints, PointSet
from .autodiff import ShapeMismatch, Tensor, concat, no_grad, softmax
from .layers import MLP, Linear, ParamStore

_MASK_OFFSET = 1e9  # per-point embeddings are tanh-bounded, so this hides masked rows from max


@dataclass(frozen=True)
class EncoderConfig:
    point_widths: tuple = (64, 128)  # per-point MLP widths after the input
    post_widths: tuple = (128,)      # widths after pooled 2 * point_widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.post_widths[-1]


def _pool_masked(h: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean-max mixed pooling over axis 1, restricted to unmasked rows."""
    if mask is None:
        return concat([h.mean(axis=1), h.max(axis=1)], axis=-1)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise NoVisiblePoints("a sample has no visible points to encode")
    m = mask[..., None].astype(np.float64)
    mean = (h * m).sum(axis=1) / counts[:, None].astype(np.float64)
    mx = (h + (m - 1.0) * _MASK_OFFSET).max(axis=1)
    return concat([mean, mx], axis=-1)


class SetEncoder:
    """Shared per-point MLP + mean-max pooling + post-pool MLP.

    ``in_width`` is 6 for paired rows and 3 for plain point sets. Both MLP
    stages end in tanh so features stay bounded and the masked max is exact.
    """

    def __init__(self, store: ParamStore, name: str, in_width: int,
                 cfg: EncoderConfig, rng: np.random.Generator):
        self.in_width = in_width
        self.cfg = cfg
        self.point_mlp = MLP(store, f"{name}.point", (in_width, *cfg.point_widths),
                             rng, final_activation=True)
        self.post_mlp = MLP(store, f"{name}.post",
                            (2 * cfg.point_widths[-1], *cfg.post_widths),
                            rng, final_activation=True)
        self.feature_dim = cfg.feature_dim

    def forward(self, points: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if points.ndim != 3 or points.shape[-1] != self.in_width:
            raise ShapeMismatch(f"expected (B, N, {self.in_width}), got {points.shape}")
        return self.post_mlp(_pool_masked(self.point_mlp(points), mask))


class PairSetEncoder(SetEncoder):
    """Goal encoder over [current | target] correspondence rows."""

    def __init__(self, store, name, cfg: EncoderConfig, rng):
        super().__init__(store, name, 6, cfg, rng)


class DecoupledEncoder:
    """Two independent set encoders on 3-vectors; features concatenated.

    By construction this is invariant to permuting either cloud on its own,
    i.e. it deliberately discards point correspondence.
    """

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig,
                 rng: np.random.Generator, share: bool = False):
        self.current_enc = SetEncoder(store, f"{name}.cur", 3, cfg, rng)
        self.target_enc = self.current_enc if share else SetEncoder(store, f"{name}.tgt", 3, cfg, rng)
        self.feature_dim = 2 * cfg.feature_dim

    def forward(self, points: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Accepts the same (B, N, 6) paired layout as PairSetEncoder and
        splits it, so the two are drop-in interchangeable."""
        cur = points[:, :, 0:3]
        tgt = points[:, :, 3:6]
        return concat([self.current_enc.forward(cur, mask),
                       self.target_enc.forward(tgt, mask)], axis=-1)


class FlatMLPEncoder:
    """Plain MLP over the flattened (current, target) rows at fixed N.

    Not permutation invariant; callers must feed exactly ``fixed_n`` rows
    (see ``fit_points_to_n`` for the deterministic pad/subsample rule).
    """

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 fixed_n: int = 64, widths: tuple = (256, 128)):
        self.fixed_n = fixed_n
        self.mlp = MLP(store, f"{name}.flat", (6 * fixed_n, *widths), rng,
                       final_activation=True)
        self.feature_dim = widths[-1]

    def forward(self, points: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if points.ndim != 3 or points.shape[-1] != 6:
            raise ShapeMismatch(f"expected (B, N, 6), got {points.shape}")
        if points.shape[1] != self.fixed_n:
            raise ShapeMismatch(f"flat encoder requires N={self.fixed_n}, got {points.shape[1]}")
        b = points.shape[0]
        return self.mlp(points.reshape(b, 6 * self.fixed_n))


def fit_points_to_n(pairs: np.ndarray, visibility: np.ndarray, n: int) -> np.ndarray:
    """Deterministically pick n row indices from the visible ones: evenly
    spaced when there are too many, cycled when too few."""
    idx = np.flatnonzero(visibility)
    if idx.size == 0:
        raise NoVisiblePoints("cannot pad an empty point set")
    if idx.size >= n:
        take = np.linspace(0, idx.size - 1, n).round().astype(int)
        return idx[take]
    return np.resize(idx, n)


def make_encoder(kind: str, store: ParamStore, name: str, rng,
                 cfg: EncoderConfig | None = None, fixed_n: int = 64):
    cfg = cfg or EncoderConfig()
    if kind == "paired":
        return PairSetEncoder(store, name, cfg, rng)
    if kind == "decoupled":
        return DecoupledEncoder(store, name, cfg, rng)
    if kind == "flat":
        return FlatMLPEncoder(store, name, rng, fixed_n=fixed_n)
    raise ValueError(f"unknown encoder kind: {kind}")


# -- single-sample conveniences over the geometry types -----------------------

def pair_set_encode(pairs: PairedPoints, encoder: PairSetEncoder) -> np.ndarray:
    with no_grad():
        out = encoder.forward(Tensor(pairs.pairs[None]), pairs.visibility[None])
    return out.data[0]


def decoupled_encode(current: PointSet, target: PointSet, encoder: DecoupledEncoder) -> np.ndarray:
    if not current.visibility.any() or not target.visibility.any():
        raise NoVisiblePoints("decoupled encoder needs visible points in both sets")
    with no_grad():
        cur = encoder.current_enc.forward(Tensor(current.points[None]), current.visibility[None])
        tgt = encoder.target_enc.forward(Tensor(target.points[None]), target.visibility[None])
    return np.concatenate([cur.data[0], tgt.data[0]])


def flat_mlp_encode(current: PointSet, target: PointSet, encoder: FlatMLPEncoder) -> np.ndarray:
    idx = fit_points_to_n(current.points, current.visibility, encoder.fixed_n)
    rows = np.concatenate([current.points[idx], target.points[idx]], axis=1)
    with no_grad():
        out = encoder.forward(Tensor(rows[None]))
    return out.data[0]


# -- attention ----------------------------------------------------------------

class SelfAttention:
    """Multi-head scaled-dot-product self-attention + residual + token MLP.

    With ``attention=False`` the data-dependent routing is replaced by
    uniform 1/T mixing weights while everything else (value path, residuals,
    token MLP) stays identical; that is the no-attention ablation.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 rng: np.random.Generator, attention: bool = True):
        if d % heads != 0:
            raise ShapeMismatch(f"token dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.attention = attention
        if attention:
            self.wq = Linear(store, f"{name}.q", d, d, rng)
            self.wk = Linear(store, f"{name}.k", d, d, rng)
        self.wv = Linear(store, f"{name}.v", d, d, rng)
        self.wo = Linear(store, f"{name}.o", d, d, rng)
        self.mlp = MLP(store, f"{name}.mlp", (d, 2 * d, d), rng)

    def __call__(self, x: Tensor, return_weights: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ShapeMismatch(f"expected (B, T, {self.d}), got {x.shape}")
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(z):  # (B, T, d) -> (B, H, T, hd)
            return z.reshape(b, t, h, hd).swapaxes(1, 2)

        v = split(self.wv(x))
        if self.attention:
            q = split(self.wq(x))
            k = split(self.wk(x))
            scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
            w = softmax(scores, axis=-1)
        else:
            w = Tensor(np.full((b, h, t, t), 1.0 / t))
        mixed = (w @ v).swapaxes(1, 2).reshape(b, t, d)
        y = x + self.wo(mixed)
        out = y + self.mlp(y)
        if return_weights:
            return out, w.data
        return out


# -- action world model ---------------------------------------------------------

# proprio layout: hand pos 3 | hand rot 6 | twist 6 | aperture | aperture rate
ANGLE_COLS = np.r_[0:9, 15]      # pose-like channels -> "joint angle" token
VELOCITY_COLS = np.r_[9:15, 16]  # rate-like channels -> "joint velocity" token


@dataclass(frozen=True)
class AWMConfig:
    token_dim: int = 128
    heads: int = 4
    layers: int = 2
    proprio_dim: int = 17
    action_dim: int = 7
    n_points: int = 64
    encoder: str = "paired"     # paired | decoupled | flat
    attention: bool = True
    world_model: bool = True
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    head_width: int = 64


class ActionWorldModel:
    """Student policy: five tokens (proprio, last action, angle-like, rate-like,
    paired points) through self-attention; the action is decoded from the
    last-action token, next-state deltas from the angle/rate tokens.

    ``forward`` returns the pre-squash action; callers bound it to actuator
    range with tanh. Next-state heads emit deltas added to the current
    channels, so zero head weights predict a frozen state.
    """

    def __init__(self, cfg: AWMConfig, rng: np.random.Generator,
                 store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        s, d = self.store, cfg.token_dim
        self.encoder = make_encoder(cfg.encoder, s, "enc", rng,
                                    cfg.encoder_cfg, fixed_n=cfg.n_points)
        self.tok_proprio = MLP(s, "tok.proprio", (cfg.proprio_dim, d), rng, final_activation=True)
        self.tok_action = MLP(s, "tok.action", (cfg.action_dim, d), rng, final_activation=True)
        self.tok_angle = MLP(s, "tok.angle", (len(ANGLE_COLS), d), rng, final_activation=True)
        self.tok_velocity = MLP(s, "tok.velocity", (len(VELOCITY_COLS), d), rng, final_activation=True)
        self.tok_points = MLP(s, "tok.points", (self.encoder.feature_dim, d), rng, final_activation=True)
        self.blocks = [SelfAttention(s, f"attn.{i}", d, cfg.heads, rng, attention=cfg.attention)
                       for i in range(cfg.layers)]
        self.head_action = MLP(s, "head.action", (d, cfg.head_width, cfg.action_dim), rng)
        if cfg.world_model:
            self.head_angle = MLP(s, "head.angle", (d, cfg.head_width, len(ANGLE_COLS)), rng)
            self.head_velocity = MLP(s, "head.velocity", (d, cfg.head_width, len(VELOCITY_COLS)), rng)

    def forward(self, proprio: Tensor, last_action: Tensor, points: Tensor,
                mask: np.ndarray | None = None):
        """proprio (B, 17), last_action (B, 7), points (B, N, 6) paired rows.

        Returns (action_presquash, next_angle, next_velocity); the last two
        are None when the world-model heads are disabled.
        """
        angle_in = proprio[:, ANGLE_COLS]
        velocity_in = proprio[:, VELOCITY_COLS]
        feature = self.encoder.forward(points, mask)
        tokens = concat([
            self.tok_proprio(proprio).reshape(-1, 1, self.cfg.token_dim),
            self.tok_action(last_action).reshape(-1, 1, self.cfg.token_dim),
            self.tok_angle(angle_in).reshape(-1, 1, self.cfg.token_dim),
            self.tok_velocity(velocity_in).reshape(-1, 1, self.cfg.token_dim),
            self.tok_points(feature).reshape(-1, 1, self.cfg.token_dim),
        ], axis=1)
        for blk in self.blocks:
            tokens = blk(tokens)
        action = self.head_action(tokens[:, 1, :])
        if not self.cfg.world_model:
            return action, None, None
        next_angle = angle_in + self.head_angle(tokens[:, 2, :])
        next_velocity = velocity_in + self.head_velocity(tokens[:, 3, :])
        return action, next_angle, next_velocity

    def act(self, proprio: np.ndarray, last_action: np.ndarray,
            points: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Deterministic squashed action in [-1, 1]^7 for one observation."""
        with no_grad():
            pre, _, _ = self.forward(Tensor(proprio[None]), Tensor(last_action[None]),
                                     Tensor(points[None]),
                                     None if mask is None else mask[None])
        return np.tanh(pre.data[0])


def loss_bc_wm(student_action: Tensor, teacher_action: Tensor,
               pred_next_angle: Tensor | None, pred_next_velocity: Tensor | None,
               true_next_angle, true_next_velocity):
    """L = L_bc + L_wm, both L1 (sum over channels, mean over the batch).

    Returns (total, bc, wm). The L1 subgradient at zero is zero, so exact
    predictions contribute nothing.
    """
    bc = (student_action - teacher_action).abs().sum(axis=-1).mean()
    if pred_next_angle is None:
        return bc, bc, Tensor(0.0)
    wm = ((pred_next_angle - true_next_angle).abs().sum(axis=-1)
          + (pred_next_velocity - true_next_velocity).abs().sum(axis=-1)).mean()
    return bc + wm, bc, wm
