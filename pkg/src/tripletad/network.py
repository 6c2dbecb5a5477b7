"""The fixed fully-convolutional feature extractor and its training loop.

Architecture: three 3x3 valid convolutions (16 filters, ReLU) and one 2x2/2
max pool, followed by seven residual blocks. Each block runs two 3x3 valid
convolutions with ReLU on the main path and crops 2 pixels from every border
of the skip path so the shapes line up for the elementwise add; nothing
follows the add. A square input of side H embeds to side ((H - 6) // 2) - 28,
so 64 -> 1 and 1024 -> 481, always with 16 channels.

Training follows the triplet scheme: one shared network embeds anchor,
positive, and negative patches; the two Euclidean distances (d2, d1) pass
through a softmax and the result is pulled toward [1, 0] with mean absolute
error, which rewards d1 < d2.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .autodiff import (Parameter, Tensor, adam_step, add, conv2d_valid, crop2d,
                       mae_loss, maxpool2x2, no_grad, pairwise_distance, relu,
                       softmax2, stack_pair, weighted_sum)
from .errors import (ConfigError, CorruptCheckpointError,
                     FingerprintMismatchError, NumericError, ShapeError,
                     TruncatedCheckpointError)
from .rng import RngStream

CHANNELS = 16
KERNEL = 3
STEM_CONVS = 3
DEFAULT_BLOCKS = 7

CHECKPOINT_MAGIC = b"TGCKPT"
CHECKPOINT_VERSION = 1
_FLAG_OPTIMIZER = 0x01


def min_input_side(n_blocks: int = DEFAULT_BLOCKS) -> int:
    """Smallest square input that still yields a 1x1 embedding."""
    return 8 * n_blocks + 8


def output_side(input_side: int, n_blocks: int = DEFAULT_BLOCKS) -> int:
    """Embedding side for a square input: ((side - 6) // 2) - 4 * n_blocks."""
    side = int(input_side)
    if side < min_input_side(n_blocks):
        raise ShapeError(
            f"input side {side} below minimum {min_input_side(n_blocks)} "
            f"for {n_blocks} residual blocks")
    return (side - 6) // 2 - 4 * n_blocks


@dataclass
class ConvLayer:
    kernels: Tensor  # (3, 3, cin, cout)
    bias: Tensor     # (cout,)


@dataclass
class ResidualBlock:
    conv_a: ConvLayer
    conv_b: ConvLayer


class FeatureExtractor:
    """Stem + residual stack with a flat, ordered parameter list."""

    def __init__(self, stem: list[ConvLayer], blocks: list[ResidualBlock]):
        self.stem = stem
        self.blocks = blocks

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def min_input_side(self) -> int:
        return min_input_side(self.n_blocks)

    def parameters(self) -> list[Tensor]:
        """All trainables in declaration order (kernels before bias, stem first)."""
        params: list[Tensor] = []
        for layer in self.stem:
            params.extend((layer.kernels, layer.bias))
        for block in self.blocks:
            params.extend((block.conv_a.kernels, block.conv_a.bias,
                           block.conv_b.kernels, block.conv_b.bias))
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def architecture_fingerprint(self) -> bytes:
        spec = (f"stem={STEM_CONVS}x(conv{KERNEL}x{KERNEL}->{CHANNELS},relu);"
                f"pool=2x2s2;"
                f"blocks={self.n_blocks}x(conv+relu,conv+relu,crop2d,add);"
                f"in_channels=1")
        return hashlib.sha256(spec.encode("ascii")).digest()

    def with_parameters(self, params: list[Tensor]) -> "FeatureExtractor":
        """Structural copy referencing the given tensors (same ordering)."""
        expected = len(self.parameters())
        if len(params) != expected:
            raise ShapeError(f"expected {expected} parameter tensors, got {len(params)}")
        it = iter(params)
        stem = [ConvLayer(next(it), next(it)) for _ in self.stem]
        blocks = [ResidualBlock(ConvLayer(next(it), next(it)),
                                ConvLayer(next(it), next(it)))
                  for _ in self.blocks]
        return FeatureExtractor(stem, blocks)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.stem:
            x = relu(conv2d_valid(x, layer.kernels, layer.bias))
        x = maxpool2x2(x)
        for block in self.blocks:
            y = relu(conv2d_valid(x, block.conv_a.kernels, block.conv_a.bias))
            y = relu(conv2d_valid(y, block.conv_b.kernels, block.conv_b.bias))
            x = add(y, crop2d(x))
        return x

    def embed(self, image) -> np.ndarray:
        """Feature map of one grayscale image: (H, W[, 1]) -> (h, w, 16)."""
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3 or arr.shape[-1] != 1:
            raise ShapeError(f"embed: expected (H, W) or (H, W, 1), got {arr.shape}")
        if min(arr.shape[0], arr.shape[1]) < self.min_input_side:
            raise ShapeError(
                f"embed: input {arr.shape[0]}x{arr.shape[1]} below minimum side "
                f"{self.min_input_side}")
        with no_grad():
            out = self.forward(Tensor(arr))
        return out.data


def build_feature_extractor(seed: int, n_blocks: int = DEFAULT_BLOCKS) -> FeatureExtractor:
    """Fresh network with He-style init: kernels ~ N(0, 2 / fan_in), zero bias."""
    rng = RngStream(seed).substream("init")

    def conv(cin: int) -> ConvLayer:
        std = np.sqrt(2.0 / (KERNEL * KERNEL * cin))
        k = rng.normal(0.0, std, size=(KERNEL, KERNEL, cin, CHANNELS)).astype(np.float32)
        b = np.zeros(CHANNELS, dtype=np.float32)
        return ConvLayer(Parameter(k), Parameter(b))

    stem = [conv(1)] + [conv(CHANNELS) for _ in range(STEM_CONVS - 1)]
    blocks = [ResidualBlock(conv(CHANNELS), conv(CHANNELS)) for _ in range(n_blocks)]
    net = FeatureExtractor(stem, blocks)
    for i, p in enumerate(net.parameters()):
        p.name = f"param{i}"
    return net


# ---------------------------------------------------------------------------
# triplet head


@dataclass
class TripletOutput:
    d1: float            # anchor-positive distance
    d2: float            # anchor-negative distance
    probs: np.ndarray    # softmax([d2, d1]); sums to 1
    loss: float          # MAE against target [1, 0]


def _patch_batch(arr: np.ndarray, side: int, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[None]
    elif a.ndim == 2:
        a = a[None, ..., None]
    elif a.ndim == 3:
        a = a[..., None]
    elif a.ndim != 4:
        raise ShapeError(f"{name}: cannot interpret shape {arr.shape} as patches")
    if a.shape[1] != side or a.shape[2] != side or a.shape[3] != 1:
        raise ShapeError(f"{name}: expected {side}x{side}x1 patches, got {a.shape[1:]}")
    return a


def triplet_batch_loss(net: FeatureExtractor, anchors, positives, negatives):
    """Mean loss over a batch of triplets.

    Returns (loss Tensor, d1 array, d2 array, probs array); backward on the
    loss accumulates into the shared network parameters.
    """
    side = net.min_input_side
    a = _patch_batch(anchors, side, "anchors")
    p = _patch_batch(positives, side, "positives")
    n = _patch_batch(negatives, side, "negatives")
    if not (len(a) == len(p) == len(n)):
        raise ShapeError("triplet batch arrays must have equal length")
    ea = net.forward(Tensor(a))
    ep = net.forward(Tensor(p))
    en = net.forward(Tensor(n))
    d1 = pairwise_distance(ea, ep)
    d2 = pairwise_distance(ea, en)
    probs = softmax2(stack_pair(d2, d1))
    target = np.zeros((len(a), 2), dtype=np.float32)
    target[:, 0] = 1.0
    loss = mae_loss(probs, target)
    return loss, d1.data, d2.data, probs.data


def triplet_forward(net: FeatureExtractor, anchor, positive, negative) -> TripletOutput:
    """Evaluate one (a, p, n) triplet; patches must be min_input_side squares."""
    with no_grad():
        loss, d1, d2, probs = triplet_batch_loss(net, anchor, positive, negative)
    return TripletOutput(d1=float(d1[0]), d2=float(d2[0]),
                         probs=probs[0], loss=float(loss.data))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 256
    epochs: int = 40
    seed: int = 0
    image_size: int = 1024
    micro_batch: int = 32      # triplets per forward/backward slice
    deterministic_reduction: bool = True
    cache_images: bool = True


def train(net: FeatureExtractor, index, config: TrainConfig):
    """Run the triplet training loop; returns (net, per-epoch mean losses).

    One epoch visits every known-class training image once to sample a fresh
    patch pool, then walks the shuffled pool in batches: each pooled patch
    anchors one triplet, the positive is another patch of the same class and
    the negative is a random-erased fresh patch of that class. Every batch
    takes one Adam step on its mean loss. Gradient reduction is a fixed-order
    batched summation, so runs are reproducible given the seed; the
    `deterministic_reduction` flag selects that mode and is the only
    implemented reduction.
    """
    classes = sorted(name for name, entry in index.classes.items()
                     if entry.role == "known" and entry.train_images)
    if not classes:
        raise ConfigError("training requires at least one known class with images")

    def load_all() -> dict[str, list[np.ndarray]]:
        return {cls: [data_mod.load_and_preprocess(path, size=config.image_size)
                      for path in index.classes[cls].train_images]
                for cls in classes}

    cached = load_all() if config.cache_images else None
    stream = RngStream(config.seed)
    params = net.parameters()
    side = net.min_input_side
    history: list[float] = []

    for _epoch in range(config.epochs):
        images = cached if cached is not None else load_all()
        pools = data_mod.build_patch_pools(images, stream, patch_size=side)
        pool_list = [pools[cls] for cls in classes]
        anchors = [(ci, pi) for ci, pool in enumerate(pool_list)
                   for pi in range(len(pool))]
        order = stream.substream("shuffle").permutation(len(anchors))
        triplet_rng = stream.substream("triplet")
        erase_rng = stream.substream("erase")

        epoch_sum = 0.0
        for start in range(0, len(order), config.batch):
            batch_ids = [anchors[i] for i in order[start:start + config.batch]]
            bn = len(batch_ids)
            a = np.empty((bn, side, side), dtype=np.float32)
            p = np.empty_like(a)
            n = np.empty_like(a)
            for row, (ci, pi) in enumerate(batch_ids):
                pool = pool_list[ci]
                a[row] = pool[pi]
                p[row] = pool[triplet_rng.integers(len(pool))]
                fresh = pool[triplet_rng.integers(len(pool))]
                n[row] = data_mod.random_erase(fresh, erase_rng)

            batch_sum = 0.0
            for ms in range(0, bn, config.micro_batch):
                sl = slice(ms, min(ms + config.micro_batch, bn))
                loss, _, _, _ = triplet_batch_loss(net, a[sl], p[sl], n[sl])
                mn = sl.stop - sl.start
                scaled = weighted_sum(loss, np.asarray(mn / bn, dtype=loss.data.dtype))
                scaled.backward()
                batch_sum += float(loss.data) * mn
            adam_step(params, lr=config.lr)
            epoch_sum += batch_sum

        epoch_loss = epoch_sum / len(order)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"non-finite training loss in epoch {_epoch}")
        history.append(epoch_loss)

    return net, history


# ---------------------------------------------------------------------------
# checkpoints


def _param_byte_count(net: FeatureExtractor) -> int:
    return 4 * net.parameter_count()


def save_checkpoint(net: FeatureExtractor, path, epoch: int = 0, seed: int = 0,
                    include_optimizer: bool = False) -> None:
    """Write magic, version, fingerprint, flags, shape metadata, then the
    parameter payload as little-endian float32 in declaration order."""
    params = net.parameters()
    flags = _FLAG_OPTIMIZER if include_optimizer else 0
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += net.architecture_fingerprint()
    blob += struct.pack("<BIIQ", flags, net.n_blocks, epoch, seed)
    for p in params:
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    if include_optimizer:
        for attr in ("adam_m", "adam_v"):
            for p in params:
                blob += np.ascontiguousarray(getattr(p, attr), dtype="<f4").tobytes()
        blob += struct.pack(f"<{len(params)}Q", *(p.step_count for p in params))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> FeatureExtractor:
    """Rebuild the network from a checkpoint; bit-exact inverse of save."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = struct.calcsize("<6sI") + 32 + struct.calcsize("<BIIQ")
    if len(raw) < header:
        raise TruncatedCheckpointError(f"{path}: file shorter than header")
    magic, version = struct.unpack_from("<6sI", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    off = struct.calcsize("<6sI")
    fingerprint = raw[off:off + 32]
    off += 32
    flags, n_blocks, _epoch, _seed = struct.unpack_from("<BIIQ", raw, off)
    off += struct.calcsize("<BIIQ")

    net = build_feature_extractor(seed=0, n_blocks=n_blocks)
    if fingerprint != net.architecture_fingerprint():
        raise FingerprintMismatchError(f"{path}: architecture fingerprint mismatch")

    params = net.parameters()
    values_bytes = _param_byte_count(net)
    expected = header + values_bytes
    if flags & _FLAG_OPTIMIZER:
        expected += 2 * values_bytes + 8 * len(params)
    if len(raw) < expected:
        raise TruncatedCheckpointError(
            f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise CorruptCheckpointError(f"{path}: {len(raw) - expected} trailing bytes")

    def take(count: int) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr

    for p in params:
        p.data = take(p.data.size).reshape(p.data.shape).astype(np.float32)
    if flags & _FLAG_OPTIMIZER:
        for attr in ("adam_m", "adam_v"):
            for p in params:
                setattr(p, attr, take(p.data.size).reshape(p.data.shape).astype(np.float32))
        steps = struct.unpack_from(f"<{len(params)}Q", raw, off)
        for p, s in zip(params, steps):
            p.step_count = int(s)
    return net
