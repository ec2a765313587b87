"""Input encodings and the MLP building block.

Frequency (sin/cos) encoding, a multi-resolution hash grid with trilinear
interpolation, and a plain fully-connected net. The hash grid and the MLP
both expose a forward-mode tangent path (`*_jvp`) used to express spatial
derivatives of downstream fields as ordinary first-order tape expressions.
"""

from __future__ import annotations

import numpy as np

from dgns import autodiff as ad
from dgns.autodiff import DiffArray, Param

_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


class FrequencyEncoding:
    """Per-coordinate sin/cos features at octave frequencies pi * 2^k."""

    def __init__(self, num_frequencies: int, include_identity: bool = True):
        if num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        self.num_frequencies = num_frequencies
        self.include_identity = include_identity

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + int(self.include_identity))

    def __call__(self, x) -> DiffArray:
        """x: [..., D] -> [..., D*(2L + identity)], ordered per coordinate as
        (sin 2^0 pi x, cos 2^0 pi x, sin 2^1 pi x, ...)."""
        x = ad.asdiff(x)
        d = x.shape[-1]
        parts = []
        if self.include_identity:
            parts.append(x)
        if self.num_frequencies > 0:
            freqs = np.pi * (2.0 ** np.arange(self.num_frequencies))
            args = ad.reshape(x, x.shape + (1,)) * freqs  # [..., D, L]
            sc = ad.stack([ad.sin(args), ad.cos(args)], axis=-1)  # [..., D, L, 2]
            parts.append(ad.reshape(sc, x.shape[:-1] + (d * 2 * self.num_frequencies,)))
        if len(parts) == 1:
            return parts[0]
        return ad.concat(parts, axis=-1)


class HashGridEncoding:
    """Multi-resolution hash grid over a fixed scene box.

    Lookup is trilinear over the 8 cell corners at every level; corner slots
    are shared through a spatial hash (collisions sum into shared entries).
    Points are clamped to the box before lookup; clamp events are counted.
    """

    def __init__(self, box_min, box_max, levels: int = 8,
                 features_per_level: int = 2, table_size: int = 2 ** 15,
                 base_resolution: int = 16, max_resolution: int = 256,
                 rng: np.random.Generator | None = None, name: str = "hash"):
        if table_size & (table_size - 1):
            raise ValueError("table_size must be a power of two")
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = table_size
        if levels > 1:
            growth = np.exp((np.log(max_resolution) - np.log(base_resolution))
                            / (levels - 1))
            res = np.floor(base_resolution * growth ** np.arange(levels))
        else:
            res = np.array([base_resolution], dtype=np.float64)
        self.resolutions = res.astype(np.int64)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = Param(
            rng.uniform(-1e-4, 1e-4, size=(levels * table_size, features_per_level)),
            name=f"{name}.table")
        self.clamp_count = 0

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def params(self) -> list[Param]:
        return [self.table]

    def _corner_data(self, x: np.ndarray):
        """Index, weight and weight-derivative tensors for points [M, 3]."""
        xn = (x - self.box_min) / (self.box_max - self.box_min)
        clamped = (xn < 0.0) | (xn > 1.0)
        self.clamp_count += int(clamped.sum())
        xn = np.clip(xn, 0.0, 1.0)

        res = self.resolutions  # [L]
        scaled = xn[:, None, :] * res[None, :, None]  # [M, L, 3]
        c0 = np.minimum(np.floor(scaled), (res - 1)[None, :, None]).astype(np.int64)
        w = scaled - c0  # [M, L, 3] in [0, 1]

        offsets = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)],
                           dtype=np.int64)  # [8, 3]
        corners = c0[:, :, None, :] + offsets[None, None, :, :]  # [M, L, 8, 3]
        h = corners.astype(np.uint64) * _HASH_PRIMES[None, None, None, :]
        idx = (h[..., 0] ^ h[..., 1] ^ h[..., 2]) & np.uint64(self.table_size - 1)
        level_base = (np.arange(self.levels, dtype=np.uint64)
                      * np.uint64(self.table_size))
        flat = (idx + level_base[None, :, None]).astype(np.int64)  # [M, L, 8]

        wb = np.where(offsets[None, None, :, :] == 1, w[:, :, None, :],
                      1.0 - w[:, :, None, :])  # [M, L, 8, 3]
        weights = wb[..., 0] * wb[..., 1] * wb[..., 2]  # [M, L, 8]

        # sr[l, c, j] = sign of the corner bit times d(cell coord)/d(world
        # x_j); zeroed along clamped axes so boundary points stay flat
        signs = np.where(offsets == 1, 1.0, -1.0)  # [8, 3]
        scale = res[:, None].astype(np.float64) / (self.box_max - self.box_min)[None, :]
        sr = signs[None, :, :] * scale[:, None, :]  # [L, 8, 3]
        sr = np.where(clamped[:, None, None, :], 0.0, sr[None])  # [M, L, 8, 3]
        prod_others = np.stack([wb[..., 1] * wb[..., 2],
                                wb[..., 0] * wb[..., 2],
                                wb[..., 0] * wb[..., 1]], axis=-1)
        dweights = sr * prod_others  # [M, L, 8, 3]
        return flat, weights, dweights, wb, sr

    def _scatter_table(self, flat: np.ndarray, g_gathered: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.table.value)
        fr = flat.reshape(-1)
        for f in range(self.features_per_level):
            out[:, f] = np.bincount(fr, weights=g_gathered[..., f].reshape(-1),
                                    minlength=out.shape[0])
        return out

    def __call__(self, x) -> DiffArray:
        """World points [M, 3] -> features [M, L*F]; differentiable w.r.t.
        both the feature table and x."""
        xd = ad.asdiff(x)
        xv = xd.value
        m = xv.shape[0]
        flat, weights, dweights, _, _ = self._corner_data(xv)
        gathered = np.take(self.table.value, flat, axis=0)  # [M, L, 8, F]
        feat = np.einsum("mlc,mlcf->mlf", weights, gathered)

        def vjp(g):
            g3 = g.reshape(m, self.levels, self.features_per_level)
            g_table = self._scatter_table(flat, weights[..., None] * g3[:, :, None, :])
            tmp = np.einsum("mlcf,mlf->mlc", gathered, g3)
            g_x = np.einsum("mlcj,mlc->mj", dweights, tmp)
            return (g_table, g_x)

        return ad.custom("hash_encode", [self.table, xd],
                         feat.reshape(m, self.output_dim), vjp)

    def encode_with_spatial_jvp(self, x):
        """Returns (features [M, L*F], tangents [3 x (M, L*F)]) where
        tangent j is d(features)/d(x_j). Both outputs are differentiable
        w.r.t. the table and x (tangents use the trilinear cross-partials)."""
        xd = ad.asdiff(x)
        xv = xd.value
        m = xv.shape[0]
        flat, weights, dweights, wb, sr = self._corner_data(xv)
        gathered = np.take(self.table.value, flat, axis=0)  # [M, L, 8, F]
        feat = np.einsum("mlc,mlcf->mlf", weights, gathered)
        tans = np.einsum("mlcj,mlcf->mjlf", dweights, gathered)
        packed = np.concatenate(
            [feat.reshape(m, 1, self.output_dim),
             tans.reshape(m, 3, self.output_dim)], axis=1)

        def d2w(j, k):
            # d2(weight)/dx_j dx_k, j != k: both factors replaced by slopes,
            # the remaining axis keeps its weight factor
            other = 3 - j - k
            return sr[..., j] * sr[..., k] * wb[..., other]

        def vjp(g):
            gf = g[:, 0, :].reshape(m, self.levels, self.features_per_level)
            gt = g[:, 1:4, :].reshape(m, 3, self.levels, self.features_per_level)
            g_gathered = weights[..., None] * gf[:, :, None, :]
            g_gathered = g_gathered + np.einsum("mlcj,mjlf->mlcf", dweights, gt)
            g_table = self._scatter_table(flat, g_gathered)

            tmp_f = np.einsum("mlcf,mlf->mlc", gathered, gf)
            g_x = np.einsum("mlcj,mlc->mj", dweights, tmp_f)
            tmp_t = np.einsum("mlcf,mjlf->mjlc", gathered, gt)
            for k in range(3):
                for j in range(3):
                    if j == k:
                        continue
                    g_x[:, k] += np.einsum("mlc,mlc->m", d2w(j, k), tmp_t[:, j])
            return (g_table, g_x)

        packed_d = ad.custom("hash_encode_jvp", [self.table, xd], packed, vjp)
        feat_d = packed_d[:, 0, :]
        tangents = [packed_d[:, 1 + j, :] for j in range(3)]
        return feat_d, tangents


def _activation(kind: str | None, z: DiffArray) -> DiffArray:
    if kind is None or kind == "none":
        return z
    if kind == "relu":
        return ad.relu(z)
    if kind == "softplus100":
        return ad.softplus(z, beta=100.0)
    if kind == "sigmoid":
        return ad.sigmoid(z)
    if kind == "tanh":
        return ad.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_derivative(kind: str | None, z: DiffArray) -> DiffArray | None:
    """act'(z) as a tape expression (None means identity)."""
    if kind is None or kind == "none":
        return None
    if kind == "relu":
        return DiffArray((ad.value(z) > 0).astype(np.float64))
    if kind == "softplus100":
        return ad.sigmoid(z * 100.0)
    if kind == "sigmoid":
        s = ad.sigmoid(z)
        return s * (1.0 - s)
    if kind == "tanh":
        t = ad.tanh(z)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {kind!r}")


class Mlp:
    """Fully-connected net: affine + activation per layer.

    widths: [in, h1, ..., out]. The hidden activation applies to every layer
    except the last, which uses out_activation (default linear).
    """

    def __init__(self, widths: list[int], activation: str = "relu",
                 out_activation: str | None = None,
                 rng: np.random.Generator | None = None,
                 zero_init_last: bool = False, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = list(widths)
        self.activation = activation
        self.out_activation = out_activation
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
            w = rng.normal(0.0, std, size=(n_in, n_out))
            b = np.zeros(n_out)
            if zero_init_last and i == len(widths) - 2:
                w = np.zeros_like(w)
            self.weights.append(Param(w, name=f"{name}.w{i}"))
            self.biases.append(Param(b, name=f"{name}.b{i}"))

    @property
    def params(self) -> list[Param]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __call__(self, x) -> DiffArray:
        """x: [batch, in] -> [batch, out]."""
        h = ad.asdiff(x)
        if h.shape[-1] != self.widths[0]:
            raise ValueError(
                f"input dim {h.shape[-1]} does not match first layer "
                f"{self.widths[0]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, ad.asdiff(w)) + b
            kind = self.out_activation if i == last else self.activation
            h = _activation(kind, h)
        return h

    def forward_jvp(self, x, tangents: list) -> tuple[DiffArray, list[DiffArray]]:
        """Forward pass plus tangent propagation: for each input tangent t,
        returns d(output)/d(input) . t as a tape expression. Tangents ride
        stacked along the batch axis so each layer costs one extra matmul."""
        h = ad.asdiff(x)
        k = len(tangents)
        m = h.shape[0]
        ts = ad.concat([ad.asdiff(t) for t in tangents], axis=0)  # [kM, d]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wd = ad.asdiff(w)
            z = ad.matmul(h, wd) + b
            ts = ad.matmul(ts, wd)
            kind = self.out_activation if i == last else self.activation
            dact = _activation_derivative(kind, z)
            h = _activation(kind, z)
            if dact is not None:
                ts = ts * ad.concat([dact] * k, axis=0)
        return h, [ts[i * m:(i + 1) * m] for i in range(k)]
