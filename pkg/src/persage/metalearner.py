"""Per-person weight generation: a shared weight table plus a learned residual.

Each person gets their own K x D classifier weight matrix. Row i starts from a
common (population-level) row and is corrected by a small conditioning network
that sees the person's identity features, the common row itself, and a one-hot
encoding of the class index. Querying the network once per class, with the
class in the input instead of the output, keeps the output dimension at D
rather than K*D.

Structure of the conditioning network: affine (H x (F+D+K)) -> batch norm ->
ReLU -> affine (D x H). Neither affine layer trains a bias. The hidden bias
would be canceled by the batch-norm mean subtraction; the output bias would
add the same constant to every class's weight row, which the directly-trained
common table already expresses, and which scores, losses, and weight-space
distances are all invariant to. Both stay frozen at zero (their checkpoint
blocks are written as zeros).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import (
    AffineLayer,
    BatchNormLayer,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    batchnorm_forward,
    init_affine,
    init_batchnorm,
    relu_backward,
    relu_forward,
)

CHECKPOINT_MAGIC = b"MAPC"


@dataclass
class Dims:
    n_classes: int   # K
    age_dim: int     # D, age-feature length = per-class weight length
    id_dim: int      # F, identity-feature length
    hidden_dim: int  # H

    def __post_init__(self):
        for name in ("n_classes", "age_dim", "id_dim", "hidden_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
            setattr(self, name, int(v))

    @property
    def residual_in(self):
        return self.id_dim + self.age_dim + self.n_classes


@dataclass
class MetaLearnerParams:
    w_common: np.ndarray        # (K, D) shared weight table
    hidden: AffineLayer         # (H, F+D+K), bias frozen at zero
    bn: BatchNormLayer          # width H
    output: AffineLayer         # (D, H)
    dims: Dims
    grad_w_common: np.ndarray = None

    def __post_init__(self):
        self.w_common = np.asarray(self.w_common, dtype=np.float64)
        d = self.dims
        if self.w_common.shape != (d.n_classes, d.age_dim):
            raise ValueError(f"w_common shape {self.w_common.shape}, "
                             f"expected ({d.n_classes}, {d.age_dim})")
        if self.hidden.in_dim != d.residual_in or self.hidden.out_dim != d.hidden_dim:
            raise ValueError("hidden layer dims disagree with declared dims")
        if self.bn.width != d.hidden_dim:
            raise ValueError("batch-norm width disagrees with hidden dim")
        if self.output.in_dim != d.hidden_dim or self.output.out_dim != d.age_dim:
            raise ValueError("output layer dims disagree with declared dims")
        if self.grad_w_common is None:
            self.grad_w_common = np.zeros_like(self.w_common)

    def zero_grad(self):
        self.grad_w_common[:] = 0.0
        self.hidden.zero_grad()
        self.bn.zero_grad()
        self.output.zero_grad()

    def trainable(self):
        """name -> (param, grad) for every trained array. Biases stay 0."""
        return {
            "w_common": (self.w_common, self.grad_w_common),
            "hidden.weight": (self.hidden.weight, self.hidden.grad_weight),
            "bn.gamma": (self.bn.gamma, self.bn.grad_gamma),
            "bn.beta": (self.bn.beta, self.bn.grad_beta),
            "output.weight": (self.output.weight, self.output.grad_weight),
        }


def init_params(dims, seed):
    """Seeded init: Glorot for all weight matrices including the common table."""
    rng = np.random.default_rng(seed)
    w_common = init_affine(dims.n_classes, dims.age_dim, rng).weight
    hidden = init_affine(dims.hidden_dim, dims.residual_in, rng)
    bn = init_batchnorm(dims.hidden_dim)
    output = init_affine(dims.age_dim, dims.hidden_dim, rng)
    return MetaLearnerParams(w_common=w_common, hidden=hidden, bn=bn,
                             output=output, dims=dims)


def one_hot(i, k):
    i = int(i)
    if not 0 <= i < k:
        raise ValueError(f"class index {i} out of range for K={k}")
    v = np.zeros(k)
    v[i] = 1.0
    return v


def build_residual_input(id_feat, w_common_row, i, k):
    """Concatenate [identity features, common row, one-hot class] in that order."""
    id_feat = np.asarray(id_feat, dtype=np.float64)
    w_common_row = np.asarray(w_common_row, dtype=np.float64)
    if id_feat.ndim != 1 or w_common_row.ndim != 1:
        raise ValueError("identity features and weight row must be vectors")
    return np.concatenate([id_feat, w_common_row, one_hot(i, k)])


def _conditioning_matrix(params, id_feats):
    """(B, F) identity features -> (B*K, F+D+K) stacked conditioning rows.

    Row b*K + i conditions sample b on class i: its common row and one-hot.
    """
    d = params.dims
    b = id_feats.shape[0]
    x = np.empty((b * d.n_classes, d.residual_in))
    x[:, :d.id_dim] = np.repeat(id_feats, d.n_classes, axis=0)
    x[:, d.id_dim:d.id_dim + d.age_dim] = np.tile(params.w_common, (b, 1))
    x[:, d.id_dim + d.age_dim:] = np.tile(np.eye(d.n_classes), (b, 1))
    return x


def _residual_forward(params, x, mode):
    """Forward the conditioning rows; returns (residuals, cache for backward)."""
    pre = affine_forward(x, params.hidden)
    normed, bn_cache = batchnorm_forward(pre, params.bn, mode=mode)
    hidden = relu_forward(normed)
    res = affine_forward(hidden, params.output)
    return res, (x, normed, bn_cache, hidden)


def generate_weights_batch(params, id_feats, mode):
    """Personalized weight matrices for a batch: (B, F) -> (B, K, D).

    In train mode all B*K conditioning rows form one batch-norm batch; eval
    mode uses running statistics, so results are independent of batch makeup.
    Returns (weights, cache); pass the cache to generate_weights_backward.
    """
    d = params.dims
    id_feats = np.asarray(id_feats, dtype=np.float64)
    if id_feats.ndim != 2 or id_feats.shape[1] != d.id_dim:
        raise ValueError(f"identity features must be (B, {d.id_dim}), "
                         f"got {id_feats.shape}")
    if id_feats.shape[0] < 1:
        raise ValueError("need at least one sample")
    x = _conditioning_matrix(params, id_feats)
    res, cache = _residual_forward(params, x, mode)
    weights = params.w_common[None, :, :] + res.reshape(
        id_feats.shape[0], d.n_classes, d.age_dim)
    return weights, cache


def generate_weights_backward(params, grad_weights, cache):
    """Accumulate parameter gradients from d(loss)/d(personalized weights).

    grad_weights: (B, K, D). The common table receives gradient through two
    paths: the additive skip connection and its copy inside the conditioning
    rows. Returns nothing; gradients land in the layers' buffers.
    """
    d = params.dims
    x, normed, bn_cache, hidden = cache
    b = grad_weights.shape[0]
    if grad_weights.shape != (b, d.n_classes, d.age_dim):
        raise ValueError(f"grad_weights shape {grad_weights.shape} unexpected")
    # skip-connection path
    params.grad_w_common += grad_weights.sum(axis=0)
    # residual-network path
    grad_res = grad_weights.reshape(b * d.n_classes, d.age_dim)
    g = affine_backward(grad_res, hidden, params.output)
    g = relu_backward(g, normed)
    g = batchnorm_backward(g, bn_cache, params.bn)
    grad_x = affine_backward(g, x, params.hidden)
    # conditioning rows carry w_common too: slice their gradient back out
    grad_rows = grad_x[:, d.id_dim:d.id_dim + d.age_dim]
    params.grad_w_common += grad_rows.reshape(b, d.n_classes, d.age_dim).sum(axis=0)


def generate_weights(params, id_feat, mode="eval"):
    """Personalized K x D weights for one person's identity features."""
    id_feat = np.asarray(id_feat, dtype=np.float64)
    if id_feat.ndim != 1:
        raise ValueError(f"identity features must be a vector, got {id_feat.shape}")
    weights, _ = generate_weights_batch(params, id_feat[None, :], mode)
    return weights[0]


def generate_class_weight(params, id_feat, i, mode="eval"):
    """Single personalized row: common row i plus the network's correction."""
    d = params.dims
    x = build_residual_input(np.asarray(id_feat, dtype=np.float64),
                             params.w_common[int(i)], i, d.n_classes)
    res, _ = _residual_forward(params, x[None, :], mode)
    return params.w_common[int(i)] + res[0]


# ------------------------------------------------------------- checkpoint io

def save_params(path, params):
    """Single binary file: magic, version byte, dims, then raw float64 blocks."""
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<4I", d.n_classes, d.age_dim, d.id_dim, d.hidden_dim))
        for arr in (params.w_common, params.hidden.weight, params.hidden.bias,
                    params.bn.gamma, params.bn.beta,
                    params.bn.running_mean, params.bn.running_var,
                    params.output.weight, params.output.bias):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class CheckpointError(Exception):
    """Raised with a byte offset when a checkpoint file cannot be decoded."""


def _read_exact(fh, n, offset, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint at byte offset {offset}: "
            f"needed {n} bytes for {what}, got {len(data)}")
    return data


def load_params(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, 0, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at byte offset 0")
        version = _read_exact(fh, 1, 4, "version")[0]
        if version != 1:
            raise CheckpointError(f"unsupported version {version} at byte offset 4")
        k, dd, ff, hh = struct.unpack("<4I", _read_exact(fh, 16, 5, "dims"))
        try:
            dims = Dims(n_classes=k, age_dim=dd, id_dim=ff, hidden_dim=hh)
        except ValueError as exc:
            raise CheckpointError(f"invalid dims at byte offset 5: {exc}") from exc
        offset = 21

        def block(shape, what):
            nonlocal offset
            start = offset
            n = int(np.prod(shape)) * 8
            data = _read_exact(fh, n, offset, what)
            offset += n
            arr = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
            if not np.isfinite(arr).all():
                raise CheckpointError(
                    f"non-finite values in {what} block at byte offset {start}")
            return arr

        w_common = block((k, dd), "common weight table")
        hidden = AffineLayer(weight=block((hh, dims.residual_in), "hidden weight"),
                             bias=block((hh,), "hidden bias"))
        bn_offset = offset
        try:
            bn = BatchNormLayer(gamma=block((hh,), "bn gamma"),
                                beta=block((hh,), "bn beta"),
                                running_mean=block((hh,), "bn running mean"),
                                running_var=block((hh,), "bn running var"))
        except ValueError as exc:
            raise CheckpointError(
                f"invalid batch-norm state at byte offset {bn_offset}: {exc}") from exc
        output = AffineLayer(weight=block((dd, hh), "output weight"),
                             bias=block((dd,), "output bias"))
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"trailing data at byte offset {offset}")
    return MetaLearnerParams(w_common=w_common, hidden=hidden, bn=bn,
                             output=output, dims=dims)
