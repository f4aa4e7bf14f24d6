"""Multi-resolution, three-bank, shared-weight descriptor network.

Each bank sees one 64x64 view of a patch. The banks run one shared stack
of three convolutions; their outputs are concatenated along channels, fused
by two more convolutions, flattened and projected to the descriptor.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

VIEW_SIZE = 64
MAGIC = b"MRDN"
VERSION = 1


class CheckpointError(Exception):
    pass


class MagicError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    bank_widths: tuple[int, int, int] = (32, 64, 128)
    fusion_widths: tuple[int, int] = (128, 64)
    kernel: int = 3
    out_dim: int = 128
    view_size: int = VIEW_SIZE

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        for i, f in enumerate(self.bank_widths, 1):
            shapes[f"bank.conv{i}.weight"] = (f, cin, k, k)
            shapes[f"bank.conv{i}.bias"] = (f,)
            cin = f
        cin = 3 * self.bank_widths[-1]
        for i, f in enumerate(self.fusion_widths, 1):
            shapes[f"fusion.conv{i}.weight"] = (f, cin, k, k)
            shapes[f"fusion.conv{i}.bias"] = (f,)
            cin = f
        shapes["head.weight"] = (self.out_dim, self.flat_dim)
        shapes["head.bias"] = (self.out_dim,)
        return shapes

    def spatial_chain(self) -> list[int]:
        """Side length after each stage: bank input, pool, pool, fusion pool."""
        s = self.view_size
        return [s, s // 2, s // 4, s // 8]

    @property
    def flat_dim(self) -> int:
        return self.fusion_widths[-1] * self.spatial_chain()[-1] ** 2

    def fingerprint(self) -> bytes:
        text = ";".join(f"{k}:{'x'.join(map(str, v))}" for k, v in self.layer_shapes().items())
        return hashlib.blake2b(text.encode("ascii"), digest_size=8).digest()


DEFAULT_ARCH = Architecture()


def count_parameters(arch: Architecture = DEFAULT_ARCH) -> int:
    return sum(int(np.prod(s)) for s in arch.layer_shapes().values())


@dataclass
class DescriptorNet:
    arch: Architecture
    params: dict[str, Tensor]
    precision: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def __post_init__(self):
        chain = self.arch.spatial_chain()
        if self.arch.view_size % 8:
            raise T.ShapeError(f"view size {self.arch.view_size} not divisible by 8")
        if self.arch == DEFAULT_ARCH:
            # 64 -> 32 -> 16 in a bank, 16 -> 8 in fusion, 64 * 8 * 8 = 4096 into the head
            assert chain == [64, 32, 16, 8], chain
            assert self.arch.flat_dim == 4096
            assert self.arch.out_dim == 128
        expected = self.arch.layer_shapes()
        if set(expected) != set(self.params):
            raise T.ShapeError("parameter names do not match architecture")
        for name, shape in expected.items():
            t = self.params[name]
            if t.shape != shape:
                raise T.ShapeError(f"{name}: shape {t.shape}, expected {shape}")
            if t.dtype != self.precision:
                raise T.PrecisionError(f"{name}: dtype {t.dtype} vs net precision {self.precision}")

    @property
    def fingerprint(self) -> bytes:
        return self.arch.fingerprint()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> "DescriptorNet":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return DescriptorNet(self.arch, params, self.precision)

    def astype(self, precision) -> "DescriptorNet":
        dt = T.resolve_dtype(precision)
        params = {k: Tensor(v.data.astype(dt), requires_grad=True) for k, v in self.params.items()}
        return DescriptorNet(self.arch, params, dt)

    # forward pieces

    def bank(self, view: Tensor) -> Tensor:
        """Shared bank: conv, relu, pool, conv, relu, pool, conv, relu."""
        p, pad = self.params, self.arch.kernel // 2
        h = T.relu(T.conv2d(view, p["bank.conv1.weight"], p["bank.conv1.bias"], pad))
        h = T.max_pool2(h)
        h = T.relu(T.conv2d(h, p["bank.conv2.weight"], p["bank.conv2.bias"], pad))
        h = T.max_pool2(h)
        return T.relu(T.conv2d(h, p["bank.conv3.weight"], p["bank.conv3.bias"], pad))

    def fuse(self, banks: Tensor) -> Tensor:
        p, pad = self.params, self.arch.kernel // 2
        h = T.relu(T.conv2d(banks, p["fusion.conv1.weight"], p["fusion.conv1.bias"], pad))
        h = T.max_pool2(h)
        h = T.relu(T.conv2d(h, p["fusion.conv2.weight"], p["fusion.conv2.bias"], pad))
        return T.affine(T.flatten(h), p["head.weight"], p["head.bias"])

    def bank_outputs(self, wide, mid, fine) -> tuple[Tensor, Tensor, Tensor]:
        views = [self._as_view(v) for v in (wide, mid, fine)]
        n = views[0].shape[0]
        for v in views[1:]:
            if v.shape[0] != n:
                raise T.ShapeError("views have different batch sizes")
        # one pass through the shared bank for all three positions
        stacked = Tensor(np.concatenate([v.data for v in views], axis=0), requires_grad=False)
        if any(v.requires_grad for v in views):
            out = [self.bank(v) for v in views]
            return out[0], out[1], out[2]
        h = self.bank(stacked)
        return (T.take_rows(h, np.arange(0, n)), T.take_rows(h, np.arange(n, 2 * n)),
                T.take_rows(h, np.arange(2 * n, 3 * n)))

    def forward(self, wide, mid, fine) -> Tensor:
        """Descriptors (batch x out_dim) for three views of shape batch x 1 x 64 x 64."""
        a, b, c = self.bank_outputs(wide, mid, fine)
        return self.fuse(T.concat_channels(a, b, c))

    __call__ = forward

    def describe(self, views: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Descriptors for an array of triples shaped batch x 3 x 64 x 64, without grad."""
        views = np.asarray(views)
        out = []
        for s in range(0, len(views), chunk):
            v = views[s:s + chunk].astype(self.precision)
            out.append(self.forward(v[:, 0:1], v[:, 1:2], v[:, 2:3]).data)
        if not out:
            return np.zeros((0, self.arch.out_dim), dtype=self.precision)
        return np.concatenate(out, axis=0)

    def _as_view(self, v) -> Tensor:
        if not isinstance(v, Tensor):
            v = Tensor(np.asarray(v, dtype=self.precision))
        s = self.arch.view_size
        if v.data.ndim != 4 or v.shape[1:] != (1, s, s):
            raise T.ShapeError(f"view must be batch x 1 x {s} x {s}, got {v.shape}")
        if v.dtype != self.precision:
            raise T.PrecisionError(f"view dtype {v.dtype} vs net precision {self.precision}")
        return v


def init(seed: int, arch: Architecture = DEFAULT_ARCH, precision="32") -> DescriptorNet:
    """Uniform(-b, b) weights with b = sqrt(6 / fan_in), zero biases."""
    dt = T.resolve_dtype(precision)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dt)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dt)
        params[name] = Tensor(data, requires_grad=True)
    return DescriptorNet(arch, params, dt)


def siamese_distance(net: DescriptorNet, triple_a, triple_b) -> Tensor:
    """D_W between two batches of triples, each given as (wide, mid, fine)."""
    n = np.shape(triple_a[0])[0]
    views = [np.concatenate([np.asarray(_data(a)), np.asarray(_data(b))], axis=0)
             for a, b in zip(triple_a, triple_b)]
    desc = net.forward(*views)
    return T.euclidean_distance(T.take_rows(desc, np.arange(n)), T.take_rows(desc, np.arange(n, 2 * n)))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# checkpoint format

def save(net: DescriptorNet, path) -> None:
    """Write an MRDN checkpoint: magic, version, fingerprint, then named float32 blocks."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += net.fingerprint
    for name, t in net.parameters():
        raw = name.encode("ascii")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load(path, arch: Architecture = DEFAULT_ARCH, precision="32") -> DescriptorNet:
    """Read a checkpoint written by :func:`save` for the given architecture.

    Raises MagicError, TruncatedError or FingerprintError (all CheckpointError).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short for header")
    if raw[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FingerprintError(f"{path}: unsupported checkpoint version {version}")
    if take(8) != arch.fingerprint():
        raise FingerprintError(f"{path}: architecture fingerprint mismatch")
    expected = arch.layer_shapes()
    blocks: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("ascii", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if expected.get(name) != dims:
            raise FingerprintError(f"{path}: unexpected block {name} with shape {dims}")
        count = int(np.prod(dims)) if rank else 1
        blocks[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
    missing = set(expected) - set(blocks)
    if missing:
        raise TruncatedError(f"{path}: missing parameter blocks {sorted(missing)}")
    dt = T.resolve_dtype(precision)
    params = {name: Tensor(blocks[name].astype(dt), requires_grad=True) for name in expected}
    return DescriptorNet(arch, params, dt)
