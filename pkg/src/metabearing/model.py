"""Four-block convolutional classifier and its checkpoint format.

Each block is conv3x3 (64 filters, same padding) -> batch norm -> ReLU ->
2x2 max pool. A 64x64 input comes out of the fourth block as 4x4x64 = 1024
features, and a single dense layer maps them to ``num_ways`` logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import ParamSet, Tensor, ops

MAGIC = b"MFLT1"


@dataclass(frozen=True)
class ModelSpec:
    num_ways: int
    blocks: int = 4
    filters: int = 64
    input_side: int = 64

    def __post_init__(self):
        if self.num_ways < 1:
            raise ValueError("num_ways must be >= 1")
        if self.input_side % (2 ** self.blocks):
            raise ValueError(f"input_side {self.input_side} is not divisible by 2**{self.blocks}")

    @property
    def feature_size(self) -> int:
        side = self.input_side // 2 ** self.blocks
        return side * side * self.filters

    @classmethod
    def from_params(cls, params: ParamSet) -> ModelSpec:
        blocks = sum(1 for n in params.names if n.startswith("conv"))
        filters = params["conv1.weight"].shape[0]
        features, ways = params["fc.weight"].shape
        side = int(round(np.sqrt(features / filters))) * 2 ** blocks
        return cls(num_ways=ways, blocks=blocks, filters=filters, input_side=side)


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ParamSet:
    """Fan-in scaled uniform weights, unit BN scale, zero shifts and bias."""
    rng = np.random.default_rng(seed)
    entries = []
    cin = 1
    for b in range(1, spec.blocks + 1):
        fan_in = cin * 9
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(spec.filters, cin, 3, 3))
        entries.append((f"conv{b}.weight", w))
        entries.append((f"bn{b}.weight", np.ones(spec.filters)))
        entries.append((f"bn{b}.bias", np.zeros(spec.filters)))
        cin = spec.filters
    bound = 1.0 / np.sqrt(spec.feature_size)
    entries.append(("fc.weight", rng.uniform(-bound, bound, size=(spec.feature_size, spec.num_ways))))
    entries.append(("fc.bias", np.zeros(spec.num_ways)))
    return ParamSet((n, Tensor(np.asarray(a, dtype=dtype), requires_grad=True)) for n, a in entries)


def forward(params: ParamSet, batch) -> Tensor:
    """Logits ``[B, N]`` for a batch of images ``[B, 1, S, S]``.

    Batch-norm statistics come from ``batch`` itself, so B must be at least 2.
    Operations are recorded on whichever tape is active.
    """
    spec = ModelSpec.from_params(params)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params["fc.weight"].dtype))
    side = spec.input_side
    if x.ndim != 4 or x.shape[1:] != (1, side, side):
        raise ValueError(f"expected input [B,1,{side},{side}], got {list(x.shape)}")
    B = x.shape[0]
    if B < 2:
        raise ValueError(f"batch of {B} is too small for batch statistics (need >= 2)")
    h = ops.reshape(x, (B, side, side, 1))
    for b in range(1, spec.blocks + 1):
        h = ops.conv2d(h, params[f"conv{b}.weight"])
        h = ops.batch_norm(h, params[f"bn{b}.weight"], params[f"bn{b}.bias"])
        h = ops.relu(h)
        h = ops.max_pool2d(h)
    h = ops.reshape(h, (B, spec.feature_size))
    return ops.linear(h, params["fc.weight"], params["fc.bias"])


def loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels in ``[0, N)``."""
    return ops.cross_entropy(logits, labels)


def accuracy(logits: Tensor, labels) -> float:
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ------------------------------------------------------------------ checkpoint

def encode_params(entries: list[tuple[str, np.ndarray]], width: int) -> bytes:
    if width not in (4, 8):
        raise ValueError("float width must be 4 or 8 bytes")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    chunks = [MAGIC, struct.pack("<BI", width, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes) -> tuple[int, list[tuple[str, np.ndarray]]]:
    if blob[:5] != MAGIC:
        raise ValueError("not an MFLT1 checkpoint (bad magic)")
    width, count = struct.unpack_from("<BI", blob, 5)
    if width not in (4, 8):
        raise ValueError(f"unsupported float width {width}")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    pos = 10
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            nbytes = n * width
            if pos + nbytes > len(blob):
                raise ValueError("truncated checkpoint")
            arr = np.frombuffer(blob, dtype=dtype, count=n, offset=pos).reshape(shape)
            pos += nbytes
            entries.append((name, arr.astype(dtype.newbyteorder("="))))
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise ValueError("trailing bytes after last checkpoint entry")
    return width, entries


INNER_LR_ENTRY = "inner_lr.rates"


def save_checkpoint(path, params: ParamSet, inner_lr: np.ndarray | None = None) -> None:
    width = params["fc.weight"].dtype.itemsize
    entries = [(n, t.data) for n, t in params.items()]
    if inner_lr is not None:
        entries.append((INNER_LR_ENTRY, np.asarray(inner_lr)))
    Path(path).write_bytes(encode_params(entries, width))


def load_checkpoint(path) -> tuple[ParamSet, np.ndarray | None]:
    _, entries = decode_params(Path(path).read_bytes())
    rates = None
    kept = []
    for name, arr in entries:
        if name == INNER_LR_ENTRY:
            rates = arr
        else:
            kept.append((name, Tensor(arr, requires_grad=True)))
    return ParamSet(kept), rates
