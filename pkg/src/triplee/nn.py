"""Desk-scale CNN with analytic gradients for cross-entropy plus supervised contrastive loss.

Activations are kept channels-last internally; the public ``forward`` takes
``(n, C, H, W)`` batches. Every array is float64.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import RngStream


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    num_classes: int = 5
    proj_hidden: int = 128
    proj_dim: int = 128
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("the backbone has exactly four conv layers")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8 (three 2x2 pools)")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def block_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = self.in_channels
        for i, c_out in enumerate(self.channels, start=1):
            shapes.append((f"conv{i}.weight", (3, 3, c_in, c_out)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        f, k, hid, p = self.feature_dim, self.num_classes, self.proj_hidden, self.proj_dim
        shapes += [
            ("fc.weight", (f, k)), ("fc.bias", (k,)),
            ("proj1.weight", (f, hid)), ("proj1.bias", (hid,)),
            ("proj_bn.gamma", (hid,)), ("proj_bn.beta", (hid,)),
            ("proj2.weight", (hid, p)), ("proj2.bias", (p,)),
        ]
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.block_shapes())

    def digest(self) -> bytes:
        return hashlib.sha256(repr(self).encode()).digest()[:8]


@dataclass
class ModelParams:
    """Parameter blocks that are views into one flat vector, plus BN running buffers."""

    arch: ArchConfig
    flat: np.ndarray
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.blocks: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.arch.block_shapes():
            size = int(np.prod(shape))
            self.blocks[name] = self.flat[offset:offset + size].reshape(shape)
            offset += size
        if offset != self.flat.size:
            raise ValueError(f"flat vector has {self.flat.size} entries, architecture needs {offset}")
        if not self.buffers:
            hid = self.arch.proj_hidden
            self.buffers = {"proj_bn.running_mean": np.zeros(hid), "proj_bn.running_var": np.ones(hid)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy(), {k: v.copy() for k, v in self.buffers.items()})

    def grad_blocks(self, grad: np.ndarray) -> dict[str, np.ndarray]:
        """View a flat gradient with the same block layout."""
        return ModelParams(self.arch, grad, self.buffers).blocks


def init_params(seed: int | RngStream, arch: ArchConfig = ArchConfig(), model_index: int = 0) -> ModelParams:
    """He-uniform conv/projection weights, 1/sqrt(fan_in) uniform heads and biases.

    Nonzero biases keep the projection output away from the origin even for an
    all-zero input, so its L2 normalization is always defined.
    """
    stream = seed if isinstance(seed, RngStream) else RngStream(seed)
    rng = stream.fork("init", model_index).generator()
    params = ModelParams(arch, np.zeros(arch.parameter_count()))
    fan_in = 1
    for name, shape in arch.block_shapes():
        block = params[name]
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[:-1]))
            he = name.startswith("conv") or name == "proj1.weight"
            bound = np.sqrt(6.0 / fan_in) if he else 1.0 / np.sqrt(fan_in)
            block[...] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("bias"):
            bound = 1.0 / np.sqrt(fan_in)
            block[...] = rng.uniform(-bound, bound, size=shape)
        elif name == "proj_bn.gamma":
            block[...] = 1.0
    return params


# ---------------------------------------------------------------------------
# layer primitives (channels-last)

def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1] = x
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n, h, w, 9 * c)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c))
    for k, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
        dxp[:, i:i + h, j:j + w] += dcols[..., k * c:(k + 1) * c]
    return dxp[:, 1:-1, 1:-1]


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    q = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    # route the gradient to the first maximal element of each window
    taken = q[0] == out
    masks = [taken]
    for part in q[1:3]:
        m = (part == out) & ~taken
        masks.append(m)
        taken = taken | m
    masks.append(~taken)
    return out, tuple(masks)


def _pool_backward(dout: np.ndarray, masks: tuple) -> np.ndarray:
    n, h2, w2, c = dout.shape
    dx = np.empty((n, 2 * h2, 2 * w2, c))
    dx[:, 0::2, 0::2] = dout * masks[0]
    dx[:, 0::2, 1::2] = dout * masks[1]
    dx[:, 1::2, 0::2] = dout * masks[2]
    dx[:, 1::2, 1::2] = dout * masks[3]
    return dx


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    return z / norm, norm


@dataclass
class ForwardOutput:
    logits: np.ndarray
    embeddings: np.ndarray
    normalized: np.ndarray
    features: np.ndarray
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)


def forward(params: ModelParams, images: np.ndarray, training: bool = False) -> ForwardOutput:
    """Run the network. Training mode normalizes the projection head with batch statistics;
    eval mode uses the stored running statistics, making every row independent."""
    arch = params.arch
    x = np.asarray(images, dtype=np.float64)
    expected = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected images of shape (n, {expected}), got {x.shape}")
    cache: dict = {}
    a = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for i in range(1, 5):
        w = params[f"conv{i}.weight"]
        cols = _im2col(a)
        n, h, wd, k = cols.shape
        pre = (cols.reshape(-1, k) @ w.reshape(k, -1)).reshape(n, h, wd, -1) + params[f"conv{i}.bias"]
        act = np.maximum(pre, 0.0)
        cache[f"cols{i}"] = cols
        cache[f"pre{i}"] = pre
        if i < 4:
            act, cache[f"arg{i}"] = _pool_forward(act)
        a = act
    cache["last_hw"] = a.shape[1] * a.shape[2]
    feats = a.mean(axis=(1, 2))
    logits = feats @ params["fc.weight"] + params["fc.bias"]

    h1 = feats @ params["proj1.weight"] + params["proj1.bias"]
    eps = arch.bn_eps
    if training:
        mean = h1.mean(axis=0)
        var = h1.var(axis=0)
    else:
        mean = params.buffers["proj_bn.running_mean"]
        var = params.buffers["proj_bn.running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (h1 - mean) * inv_std
    bn = params["proj_bn.gamma"] * xhat + params["proj_bn.beta"]
    a2 = np.maximum(bn, 0.0)
    z = a2 @ params["proj2.weight"] + params["proj2.bias"]
    u, norm = _normalize_rows(z)
    cache.update(feats=feats, xhat=xhat, inv_std=inv_std, bn=bn, a2=a2, u=u, norm=norm, training=training)
    out = ForwardOutput(logits, z, u, feats, cache=cache)
    if training:
        out.batch_mean, out.batch_var = mean, var
    return out


def update_running_stats(params: ModelParams, out: ForwardOutput) -> None:
    """Fold a training-mode batch's statistics into the BN running buffers."""
    if out.batch_mean is None:
        return
    n = out.features.shape[0]
    mom = params.arch.bn_momentum
    unbiased = out.batch_var * n / (n - 1) if n > 1 else out.batch_var
    rm, rv = params.buffers["proj_bn.running_mean"], params.buffers["proj_bn.running_var"]
    rm *= 1.0 - mom
    rm += mom * out.batch_mean
    rv *= 1.0 - mom
    rv += mom * unbiased


# ---------------------------------------------------------------------------
# losses

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    value = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return value, grad / n


def supcon(normalized: np.ndarray, labels: np.ndarray, tau: float = 0.07) -> tuple[float, np.ndarray]:
    """Summed supervised contrastive loss over anchors, with gradient w.r.t. the embeddings.

    Similarities are plain dot products, so ``normalized`` should hold unit
    rows. Anchors without positives contribute nothing.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(normalized, dtype=np.float64)
    labels = np.asarray(labels)
    n = u.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    logits = (u @ u.T) / tau
    self_mask = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(axis=1)
    active = n_pos > 0

    masked = np.where(self_mask, -np.inf, logits)
    row_max = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - row_max)
    denom = e.sum(axis=1, keepdims=True)
    log_denom = np.log(denom)[:, 0] + row_max[:, 0]
    safe_pos = np.maximum(n_pos, 1)
    mean_pos_logit = np.where(pos, logits, 0.0).sum(axis=1) / safe_pos
    value = float(np.sum(np.where(active, log_denom - mean_pos_logit, 0.0)))

    g = e / denom - pos / safe_pos[:, None]
    g[~active] = 0.0
    grad = (g + g.T) @ u / tau
    return value, grad


# ---------------------------------------------------------------------------
# backward

@dataclass
class LossBreakdown:
    ce: float
    sup: float
    total: float
    grad: np.ndarray
    forward: ForwardOutput | None = field(default=None, repr=False)


def backward_from(params: ModelParams, out: ForwardOutput, dlogits: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given upstream gradients at logits and normalized embeddings."""
    c = out.cache
    grad = np.zeros(params.size)
    gb = params.grad_blocks(grad)
    feats = c["feats"]

    gb["fc.weight"][...] = feats.T @ dlogits
    gb["fc.bias"][...] = dlogits.sum(axis=0)
    dfeat = dlogits @ params["fc.weight"].T

    u, norm = c["u"], c["norm"]
    dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / norm
    gb["proj2.weight"][...] = c["a2"].T @ dz
    gb["proj2.bias"][...] = dz.sum(axis=0)
    dbn = (dz @ params["proj2.weight"].T) * (c["bn"] > 0)
    xhat = c["xhat"]
    gb["proj_bn.gamma"][...] = np.sum(dbn * xhat, axis=0)
    gb["proj_bn.beta"][...] = dbn.sum(axis=0)
    dxhat = dbn * params["proj_bn.gamma"]
    if c["training"]:
        n = dxhat.shape[0]
        dh1 = c["inv_std"] / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dh1 = dxhat * c["inv_std"]
    gb["proj1.weight"][...] = feats.T @ dh1
    gb["proj1.bias"][...] = dh1.sum(axis=0)
    dfeat += dh1 @ params["proj1.weight"].T

    n = feats.shape[0]
    pre = c["pre4"]
    da = np.broadcast_to(dfeat[:, None, None, :] / c["last_hw"], pre.shape)
    for i in range(4, 0, -1):
        if i < 4:
            da = _pool_backward(da, c[f"arg{i}"])
        dpre = da * (c[f"pre{i}"] > 0)
        cols = c[f"cols{i}"]
        k = cols.shape[-1]
        d2 = dpre.reshape(-1, dpre.shape[-1])
        w = params[f"conv{i}.weight"]
        gb[f"conv{i}.weight"][...] = (cols.reshape(-1, k).T @ d2).reshape(w.shape)
        gb[f"conv{i}.bias"][...] = d2.sum(axis=0)
        if i > 1:
            dcols = (d2 @ w.reshape(k, -1).T).reshape(cols.shape)
            da = _col2im(dcols, w.shape[2])
    return grad


def loss_and_grad(params: ModelParams, images: np.ndarray, labels: np.ndarray, tau: float = 0.07,
                  use_supcon: bool = True, supcon_reduction: str = "mean") -> LossBreakdown:
    """Training-mode forward, both losses, and the exact gradient of their sum.

    ``supcon_reduction="sum"`` keeps the contrastive loss summed over anchors;
    ``"mean"`` divides it by the batch size.
    """
    if supcon_reduction not in ("sum", "mean"):
        raise ValueError("supcon_reduction must be 'sum' or 'mean'")
    labels = np.asarray(labels)
    out = forward(params, images, training=True)
    ce, dlogits = cross_entropy(out.logits, labels)
    if use_supcon and len(labels) >= 2:
        sup, du = supcon(out.normalized, labels, tau)
        if supcon_reduction == "mean":
            sup, du = sup / len(labels), du / len(labels)
    else:
        sup, du = 0.0, np.zeros_like(out.normalized)
    grad = backward_from(params, out, dlogits, du)
    return LossBreakdown(ce, sup, ce + sup, grad, out)


def backward(params: ModelParams, batch, tau: float = 0.07, supcon_reduction: str = "mean") -> LossBreakdown:
    """Loss breakdown and gradient for a :class:`~triplee.replay.ReplayBatch`."""
    return loss_and_grad(params, batch.images, batch.labels, tau, supcon_reduction=supcon_reduction)


def predict_proba(params: ModelParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    parts = [softmax(forward(params, images[i:i + chunk]).logits) for i in range(0, len(images), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, params.arch.num_classes))


# ---------------------------------------------------------------------------
# checkpoints: "TRPE" | u32 version | 8-byte arch digest | u32 n_blocks |
# block table (u16 name_len, name, u8 ndim, u32 dims..., u64 offset) | float64 data | u32 crc32

MAGIC = b"TRPE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _checkpoint_blocks(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    blocks = list(params.blocks.items())
    blocks += [(f"buffer:{k}", v) for k, v in sorted(params.buffers.items())]
    return blocks


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    blocks = _checkpoint_blocks(params)
    header = bytearray(MAGIC)
    header += struct.pack("<I", FORMAT_VERSION)
    header += params.arch.digest()
    header += struct.pack("<I", len(blocks))
    offset = 0
    for name, arr in blocks:
        raw = name.encode()
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        offset += arr.size
    data = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    body = bytes(header) + data
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, arch: ArchConfig) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if body[8:16] != arch.digest():
        raise CheckpointError(f"{path}: architecture mismatch")
    (count,) = struct.unpack_from("<I", body, 16)
    pos = 20
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        table.append((name, shape, offset))
    values = np.frombuffer(body, dtype="<f8", offset=pos).astype(np.float64)
    params = ModelParams(arch, np.zeros(arch.parameter_count()))
    for name, shape, offset in table:
        arr = values[offset:offset + int(np.prod(shape))].reshape(shape)
        if name.startswith("buffer:"):
            params.buffers[name[len("buffer:"):]] = arr.copy()
        elif name in params.blocks and params.blocks[name].shape == tuple(shape):
            params.blocks[name][...] = arr
        else:
            raise CheckpointError(f"{path}: unexpected block {name} {shape}")
    return params
