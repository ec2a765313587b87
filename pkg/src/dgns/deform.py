"""Deformation fields.

Two different animals share this module: the splatting branch uses a plain
offset MLP (position/rotation/scale deltas, not invertible), while the
surface branch uses a stack of coupling blocks whose algebraic inverse is
exact, giving a cycle-consistent observation<->canonical map.
"""

from __future__ import annotations

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import DiffArray, Param
from dgns.encoders import FrequencyEncoding, Mlp


class DgsDeformNet:
    """Offset network for the Gaussian set: (x, t) -> (dx, dquat, dlog_scale).

    Output heads are zero-initialized so a fresh net is the identity
    deformation and the first renders match the canonical scene exactly.
    """

    def __init__(self, pos_freqs: int = 6, time_freqs: int = 4,
                 depth: int = 8, width: int = 256,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pos_enc = FrequencyEncoding(pos_freqs, include_identity=True)
        self.time_enc = FrequencyEncoding(time_freqs, include_identity=True)
        in_dim = self.pos_enc.output_dim(3) + self.time_enc.output_dim(1)
        self.net = Mlp([in_dim] + [width] * depth + [10], activation="relu",
                       rng=rng, zero_init_last=True, name="dgs_deform")

    @property
    def params(self) -> list[Param]:
        return self.net.params

    def __call__(self, positions, t: float):
        """positions [N,3] on tape, scalar time -> (dx [N,3], dq [N,4],
        ds [N,3]), all on tape."""
        positions = ad.asdiff(positions)
        n = positions.shape[0]
        pfeat = self.pos_enc(positions)
        tfeat = ad.value(self.time_enc(np.array([[float(t)]])))
        tfeat = DiffArray(np.broadcast_to(tfeat, (n, tfeat.shape[1])).copy())
        out = self.net(ad.concat([pfeat, tfeat], axis=-1))
        return out[:, 0:3], out[:, 3:7], out[:, 7:10]


class _CouplingBlock:
    """One invertible block: a single coordinate gets an affine map whose
    scale/shift are functions of the two untouched coordinates and time."""

    def __init__(self, axis: int, width: int, t_dim: int, scale_bound: float,
                 rng: np.random.Generator, name: str):
        self.axis = axis
        self.others = [i for i in range(3) if i != axis]
        self.scale_bound = scale_bound
        self.net = Mlp([2 + t_dim, width, width, 2], activation="relu",
                       rng=rng, zero_init_last=True, name=name)

    def _scale_shift(self, others_feat, tangents=None):
        if tangents is None:
            h = self.net(others_feat)
        else:
            h, tangents = self.net.forward_jvp(others_feat, tangents)
        raw, shift = h[:, 0], h[:, 1]
        th = ad.tanh(raw)
        scale = ad.exp(th * self.scale_bound)
        return scale, shift, th, tangents


class BijectiveDeformation:
    """Homeomorphic map between observation space (at time t) and canonical
    space, built from coupling blocks with exact algebraic inverses.

    Blocks cycle through the coordinate axes; time conditions every block
    through a frequency encoding. Zero-initialized heads start at identity.
    """

    def __init__(self, n_blocks: int = 4, width: int = 64,
                 time_freqs: int = 4, scale_bound: float = 1.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.time_enc = FrequencyEncoding(time_freqs, include_identity=True)
        t_dim = self.time_enc.output_dim(1)
        self.blocks = [
            _CouplingBlock(k % 3, width, t_dim, scale_bound, rng,
                           name=f"dns_block{k}")
            for k in range(n_blocks)
        ]

    @property
    def params(self) -> list[Param]:
        out = []
        for b in self.blocks:
            out.extend(b.net.params)
        return out

    def _time_feat(self, t: float, n: int) -> np.ndarray:
        tf = ad.value(self.time_enc(np.array([[float(t)]])))
        return np.broadcast_to(tf, (n, tf.shape[1]))

    def forward(self, x, t: float) -> DiffArray:
        """Observation points [M,3] at time t -> canonical points [M,3]."""
        x = ad.asdiff(x)
        tfeat = DiffArray(self._time_feat(t, x.shape[0]).copy())
        for b in self.blocks:
            others = ad.stack([x[:, j] for j in b.others], axis=-1)
            scale, shift, _, _ = b._scale_shift(ad.concat([others, tfeat], axis=-1))
            coord = x[:, b.axis] * scale + shift
            cols = [None, None, None]
            cols[b.axis] = coord
            for j, col in zip(b.others, [others[:, 0], others[:, 1]]):
                cols[j] = col
            x = ad.stack(cols, axis=-1)
        return x

    def inverse(self, y, t: float) -> DiffArray:
        """Exact inverse: blocks applied in reverse with inverted affines."""
        y = ad.asdiff(y)
        tfeat = DiffArray(self._time_feat(t, y.shape[0]).copy())
        for b in reversed(self.blocks):
            others = ad.stack([y[:, j] for j in b.others], axis=-1)
            scale, shift, _, _ = b._scale_shift(ad.concat([others, tfeat], axis=-1))
            coord = (y[:, b.axis] - shift) / scale
            cols = [None, None, None]
            cols[b.axis] = coord
            for j, col in zip(b.others, [others[:, 0], others[:, 1]]):
                cols[j] = col
            y = ad.stack(cols, axis=-1)
        return y

    def forward_jvp(self, x, t: float, tangents: list):
        """Forward map plus tangent propagation (columns of the Jacobian
        times the given tangent vectors), all on tape."""
        x = ad.asdiff(x)
        ts = [ad.asdiff(v) for v in tangents]
        m = x.shape[0]
        tfeat = DiffArray(self._time_feat(t, m).copy())
        zeros_t = np.zeros((m, tfeat.shape[1]))
        for b in self.blocks:
            others = ad.stack([x[:, j] for j in b.others], axis=-1)
            t_others = [ad.concat(
                [ad.stack([tv[:, j] for j in b.others], axis=-1),
                 DiffArray(zeros_t)], axis=-1) for tv in ts]
            scale, shift, th, t_heads = b._scale_shift(
                ad.concat([others, tfeat], axis=-1), tangents=t_others)
            # d(scale)/d(raw) = scale * bound * (1 - tanh^2)
            dscale_draw = scale * (b.scale_bound * (1.0 - th * th))
            xa = x[:, b.axis]
            new_ts = []
            for tv, thead in zip(ts, t_heads):
                t_coord = (tv[:, b.axis] * scale + xa * dscale_draw * thead[:, 0]
                           + thead[:, 1])
                cols = [None, None, None]
                cols[b.axis] = t_coord
                for j_idx, j in enumerate(b.others):
                    cols[j] = tv[:, j]
                new_ts.append(ad.stack(cols, axis=-1))
            coord = xa * scale + shift
            cols = [None, None, None]
            cols[b.axis] = coord
            for j_idx, j in enumerate(b.others):
                cols[j] = others[:, j_idx]
            x = ad.stack(cols, axis=-1)
            ts = new_ts
        return x, ts

    def randomize(self, rng: np.random.Generator, amplitude: float = 0.3):
        """Random non-identity parameters (test/diagnostic helper)."""
        for p in self.params:
            p.value[:] = rng.normal(0.0, amplitude, size=p.value.shape)


def dns_map(deformation: BijectiveDeformation, x, t: float) -> DiffArray:
    return deformation.forward(x, t)


def dns_inverse(deformation: BijectiveDeformation, x_c, t: float) -> DiffArray:
    return deformation.inverse(x_c, t)
