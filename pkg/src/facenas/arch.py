"""Search space, shared parameter store, and the child network built over it.

The network is described once, in ``_run``, against a small executor
interface. Running it with ``_ShapeExec`` yields the declared layer list
(shapes, MAC counts, parameter keys); running it with ``_ValueExec`` computes
tensors. Both walks visit layers in the same order, which is what lets
compile-time shapes be audited against forward-time shapes.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

OPS = ("sep3x3", "sep5x5", "avgpool", "maxpool")
OP_KERNEL = {0: 3, 1: 5}
N_REDUCTIONS = 3
# prefix activations are cached only for the first nodes: they run at the highest
# resolution and dominate eval cost, while deep prefixes are many and cheap
CACHE_DEPTH = 2


class ParseError(ValueError):
    def __init__(self, msg: str, position: int):
        super().__init__(f"{msg} at position {position}")
        self.position = position


# -- encoding ------------------------------------------------------------------

@dataclass(frozen=True)
class ArchEncoding:
    ops: tuple[int, ...]
    skips: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        ops = tuple(int(o) for o in self.ops)
        skips = tuple(tuple(sorted(set(int(s) for s in sk))) for sk in self.skips)
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "skips", skips)
        if len(ops) != len(skips):
            raise ContractError(f"{len(ops)} ops but {len(skips)} skip sets")
        for i, (op, sk) in enumerate(zip(ops, skips)):
            if op not in range(len(OPS)):
                raise ContractError(f"node {i}: op id {op} not in 0..{len(OPS) - 1}")
            if any(s < 0 or s >= i for s in sk):
                raise ContractError(f"node {i}: skip set {sk} must reference earlier nodes only")

    @property
    def L(self) -> int:
        return len(self.ops)

    def __str__(self) -> str:
        return encode(self)


def encode(arch: ArchEncoding) -> str:
    return "|".join(f"{op}:{','.join(map(str, sk))}" if sk else str(op) for op, sk in zip(arch.ops, arch.skips))


def decode(s: str) -> ArchEncoding:
    ops, skips = [], []
    pos = 0
    for i, node in enumerate(s.split("|")):
        head, sep, tail = node.partition(":")
        if not head.isdigit():
            raise ParseError(f"node {i}: expected an op id, got {head!r}", pos)
        op = int(head)
        if op >= len(OPS):
            raise ParseError(f"node {i}: op id {op} out of range", pos)
        sk = []
        if tail:
            p = pos + len(head) + 1
            for tok in tail.split(","):
                if not tok.isdigit():
                    raise ParseError(f"node {i}: bad skip index {tok!r}", p)
                j = int(tok)
                if j >= i:
                    raise ParseError(f"node {i}: skip {j} does not reference an earlier node", p)
                if sk and j <= sk[-1]:
                    raise ParseError(f"node {i}: skips must be strictly ascending", p)
                sk.append(j)
                p += len(tok) + 1
        ops.append(op)
        skips.append(tuple(sk))
        pos += len(node) + 1
    return ArchEncoding(tuple(ops), tuple(skips))


def all_architectures(L: int) -> Iterator[ArchEncoding]:
    pairs = [(i, j) for i in range(L) for j in range(i)]
    for ops in itertools.product(range(len(OPS)), repeat=L):
        for bits in itertools.product((0, 1), repeat=len(pairs)):
            skips = [[] for _ in range(L)]
            for (i, j), b in zip(pairs, bits):
                if b:
                    skips[i].append(j)
            yield ArchEncoding(ops, tuple(tuple(s) for s in skips))


def random_architecture(L: int, rng: np.random.Generator) -> ArchEncoding:
    ops = tuple(int(o) for o in rng.integers(0, len(OPS), size=L))
    skips = tuple(tuple(j for j in range(i) if rng.random() < 0.5) for i in range(L))
    return ArchEncoding(ops, skips)


# -- geometry ------------------------------------------------------------------

def level_in(i: int) -> int:
    """Number of reductions applied before node i's input."""
    return min(i, N_REDUCTIONS)


def level_out(i: int) -> int:
    """Number of reductions applied to node i's output once it leaves the node."""
    return min(i + 1, N_REDUCTIONS)


# -- shared parameters ---------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass
class SharedParams:
    L: int
    in_channels: int
    stem_channels: int
    n_classes: int
    params: dict = field(default_factory=dict)
    bns: dict = field(default_factory=dict)

    @classmethod
    def create(cls, L: int, in_channels: int, stem_channels: int, n_classes: int, seed: int = 0) -> "SharedParams":
        sp = cls(L, in_channels, stem_channels, n_classes)
        rng = np.random.default_rng(seed)
        C0 = stem_channels

        def conv(key, cout, cin, k=1):
            sp.params[key] = T.parameter(_he(rng, (cout, cin, k, k), cin * k * k), key)

        def bn(key, c):
            sp.bns[key] = nn.BatchNormState.create(c, key)

        def reduction(prefix, c):
            conv(f"{prefix}/path1", c, c)
            conv(f"{prefix}/path2", c, c)

        conv("stem/conv", C0, in_channels, 3)
        bn("stem/bn", C0)
        for i in range(L):
            c = C0 * 2 ** level_in(i)
            for op in range(len(OPS)):
                pre = f"node{i}/op{op}"
                if op in OP_KERNEL:
                    k = OP_KERNEL[op]
                    conv(f"{pre}/in1x1", c, c)
                    sp.params[f"{pre}/dw"] = T.parameter(_he(rng, (c, k, k), k * k), f"{pre}/dw")
                    conv(f"{pre}/pw", c, c)
                else:
                    conv(f"{pre}/conv1x1", c, c)
                bn(f"{pre}/bn", c)
            if i < N_REDUCTIONS:
                reduction(f"node{i}/reduce", c)
            for j in range(i):
                cj = C0 * 2 ** level_out(j)
                pre = f"skip{j}to{i}"
                conv(f"{pre}/nl_conv", cj, cj)
                bn(f"{pre}/nl_bn", cj)
                for r in range(level_in(i) - level_out(j)):
                    reduction(f"{pre}/reduce{r}", cj * 2 ** r)
        cf = C0 * 2 ** level_out(L - 1)
        conv("head/merge", cf, cf)
        bn("head/bn", cf)
        bound = math.sqrt(6.0 / (cf + n_classes))
        sp.params["head/fc_w"] = T.parameter(rng.uniform(-bound, bound, (cf, n_classes)), "head/fc_w")
        sp.params["head/fc_b"] = T.parameter(np.zeros(n_classes), "head/fc_b")
        return sp

    @property
    def final_channels(self) -> int:
        return self.stem_channels * 2 ** level_out(self.L - 1)

    def trainable(self) -> dict[str, Tensor]:
        """Every trainable tensor by key, BN affine parameters included."""
        out = dict(self.params)
        for key, s in self.bns.items():
            out[f"{key}.gamma"] = s.gamma
            out[f"{key}.beta"] = s.beta
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All tensors that define the store, in sorted key order."""
        out = {k: t.data for k, t in self.trainable().items()}
        for key, s in self.bns.items():
            out[f"{key}.running_mean"] = s.running_mean
            out[f"{key}.running_var"] = s.running_var
        return dict(sorted(out.items()))

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        tr = self.trainable()
        for key, arr in arrays.items():
            if key in tr:
                if tr[key].shape != arr.shape:
                    raise ContractError(f"{key}: stored shape {arr.shape} != {tr[key].shape}")
                tr[key].data[...] = arr
            elif key.endswith(".running_mean"):
                self.bns[key[: -len(".running_mean")]].running_mean = arr.copy()
            elif key.endswith(".running_var"):
                self.bns[key[: -len(".running_var")]].running_var = arr.copy()
            else:
                raise ContractError(f"unknown store key {key!r}")


# -- layer specs and executors ---------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    name: str
    op_name: str
    in_shape: tuple
    out_shape: tuple
    macs: int
    param_keys: tuple = ()


class _ShapeExec:
    """Propagates per-sample shapes (C, H, W) and records layer specs."""

    def __init__(self):
        self.layers: list[LayerSpec] = []

    def _rec(self, name, op_name, x, out, macs, keys=()):
        self.layers.append(LayerSpec(name, op_name, tuple(x), tuple(out), int(macs), tuple(keys)))
        return tuple(out)

    def conv(self, name, key, x, w_shape, stride=1, padding=0):
        cout, cin, k, _ = w_shape
        if cin != x[0]:
            raise DimensionError(f"{name}: weight expects {cin} channels, input has {x[0]}")
        h, w = nn.out_size(x[1], k, stride, padding), nn.out_size(x[2], k, stride, padding)
        return self._rec(name, "conv" if k > 1 else "conv1x1", x, (cout, h, w), cout * cin * k * k * h * w, (key,))

    def depthwise(self, name, key, x, k):
        return self._rec(name, "depthwise", x, x, x[0] * k * k * x[1] * x[2], (key,))

    def bn(self, name, key, x, training):
        return self._rec(name, "bn", x, x, 2 * x[0] * x[1] * x[2], (f"{key}.gamma", f"{key}.beta"))

    def relu(self, name, x):
        return self._rec(name, "relu", x, x, x[0] * x[1] * x[2])

    def pool(self, name, x, kind, k, stride, padding):
        h, w = nn.out_size(x[1], k, stride, padding), nn.out_size(x[2], k, stride, padding)
        return self._rec(name, "pool", x, (x[0], h, w), x[0] * k * k * h * w)

    def shift(self, name, x):
        return self._rec(name, "concat", x, x, 0)

    def add(self, name, xs):
        if any(tuple(x) != tuple(xs[0]) for x in xs):
            raise DimensionError(f"{name}: cannot sum shapes {xs}")
        return self._rec(name, "add", xs[0], xs[0], (len(xs) - 1) * int(np.prod(xs[0])))

    def concat(self, name, xs):
        c = sum(x[0] for x in xs)
        return self._rec(name, "concat", xs[0], (c,) + tuple(xs[0][1:]), 0)

    def dropblock(self, name, x):
        return self._rec(name, "dropblock", x, x, 0)

    def gap(self, name, x):
        return self._rec(name, "pool", x, (x[0],), x[0] * x[1] * x[2])

    def fc(self, name, x, n):
        return self._rec(name, "fc", x, (n,), x[0] * n, ("head/fc_w", "head/fc_b"))


class _ValueExec:
    def __init__(self, shared: SharedParams, training: bool, rng, block_size: int, keep_prob: float,
                 record: list | None = None, batch_stats: bool = False):
        self.p = shared.params
        self.bns = shared.bns
        self.training = training
        self.batch_stats = batch_stats
        self.rng = rng
        self.block_size = block_size
        self.keep_prob = keep_prob
        self.record = record

    def _rec(self, name, out):
        if self.record is not None:
            self.record.append((name, tuple(out.shape[1:])))
        return out

    def conv(self, name, key, x, w_shape, stride=1, padding=0):
        return self._rec(name, nn.conv2d(x, self.p[key], stride, padding))

    def depthwise(self, name, key, x, k):
        return self._rec(name, nn.depthwise_conv2d(x, self.p[key], 1, (k - 1) // 2))

    def bn(self, name, key, x, training):
        return self._rec(name, nn.batch_norm(x, self.bns[key], self.training, self.batch_stats))

    def relu(self, name, x):
        return self._rec(name, T.relu(x))

    def pool(self, name, x, kind, k, stride, padding):
        return self._rec(name, nn.pool(x, kind, k, stride, padding))

    def shift(self, name, x):
        return self._rec(name, nn.shift_lower_right(x))

    def add(self, name, xs):
        out = xs[0]
        for x in xs[1:]:
            out = out + x
        return self._rec(name, out)

    def concat(self, name, xs):
        return self._rec(name, xs[0] if len(xs) == 1 else T.concat(xs, axis=1))

    def dropblock(self, name, x):
        bs = min(self.block_size, x.shape[2], x.shape[3])
        return self._rec(name, nn.dropblock(x, bs, self.keep_prob, self.training, self.rng))

    def gap(self, name, x):
        self.embedding = self._rec(name, nn.global_avg_pool(x))
        return self.embedding

    def fc(self, name, x, n):
        return self._rec(name, nn.linear(x, self.p["head/fc_w"], self.p["head/fc_b"]))


def _shape(ex, x):
    return x if isinstance(ex, _ShapeExec) else tuple(x.shape[1:])


def stem(ex, shared: SharedParams, x):
    x = ex.conv("stem.conv", "stem/conv", x, (shared.stem_channels, shared.in_channels, 3, 3), 1, 1)
    return ex.bn("stem.bn", "stem/bn", x, True)


def nonlinear_module(ex, prefix: str, x, c: int):
    x = ex.relu(f"{prefix}.relu", x)
    x = ex.conv(f"{prefix}.conv", f"{prefix}/nl_conv", x, (c, c, 1, 1))
    return ex.bn(f"{prefix}.bn", f"{prefix}/nl_bn", x, True)


def factor_reduction(ex, prefix: str, x, c: int):
    p1 = ex.pool(f"{prefix}.path1.pool", x, "avg", 1, 2, 0)
    p1 = ex.conv(f"{prefix}.path1.conv", f"{prefix}/path1", p1, (c, c, 1, 1))
    p2 = ex.shift(f"{prefix}.path2.shift", x)
    p2 = ex.pool(f"{prefix}.path2.pool", p2, "avg", 1, 2, 0)
    p2 = ex.conv(f"{prefix}.path2.conv", f"{prefix}/path2", p2, (c, c, 1, 1))
    return ex.concat(f"{prefix}.concat", [p1, p2])


def search_block(ex, i: int, op: int, x, c: int):
    pre = f"node{i}/op{op}"
    name = f"node{i}.{OPS[op]}"
    if op in OP_KERNEL:
        k = OP_KERNEL[op]
        x = ex.conv(f"{name}.in1x1", f"{pre}/in1x1", x, (c, c, 1, 1))
        x = ex.depthwise(f"{name}.dw", f"{pre}/dw", x, k)
        x = ex.conv(f"{name}.pw", f"{pre}/pw", x, (c, c, 1, 1))
        x = ex.bn(f"{name}.bn", f"{pre}/bn", x, True)
        return ex.relu(f"{name}.relu", x)
    kind = "avg" if op == 2 else "max"
    x = ex.pool(f"{name}.pool", x, kind, 3, 1, 1)
    x = ex.conv(f"{name}.conv1x1", f"{pre}/conv1x1", x, (c, c, 1, 1))
    return ex.bn(f"{name}.bn", f"{pre}/bn", x, True)


def loose_ends(arch: ArchEncoding) -> list[int]:
    consumed = set(range(arch.L - 1))  # every node feeds its chain successor
    for sk in arch.skips:
        consumed.update(sk)
    return [i for i in range(arch.L) if i not in consumed]


def _run(ex, arch: ArchEncoding, shared: SharedParams, x, cache=None, cache_key=None):
    C0 = shared.stem_channels
    if cache is not None and (cache_key, "stem") in cache:
        prev = cache[(cache_key, "stem")]
    else:
        prev = stem(ex, shared, x)
        if cache is not None:
            cache[(cache_key, "stem")] = prev
    outs = []
    for i in range(arch.L):
        use_cache = cache is not None and i < CACHE_DEPTH
        if use_cache:
            prefix_key = (cache_key, encode(ArchEncoding(arch.ops[: i + 1], arch.skips[: i + 1])))
        if use_cache and prefix_key in cache:
            prev = cache[prefix_key]
            outs.append(prev)
            continue
        c = C0 * 2 ** level_in(i)
        terms = [prev]
        for j in arch.skips[i]:
            cj = C0 * 2 ** level_out(j)
            pre = f"skip{j}to{i}"
            b = nonlinear_module(ex, pre, outs[j], cj)
            for r in range(level_in(i) - level_out(j)):
                b = factor_reduction(ex, f"{pre}/reduce{r}", b, cj * 2 ** r)
            terms.append(b)
        h = ex.add(f"node{i}.sum", terms) if len(terms) > 1 else prev
        h = search_block(ex, i, arch.ops[i], h, c)
        if i < N_REDUCTIONS:
            h = factor_reduction(ex, f"node{i}/reduce", h, c)
        if use_cache:
            cache[prefix_key] = h
        outs.append(h)
        prev = h
    ends = loose_ends(arch)
    cf = shared.final_channels
    merged = ex.concat("head.concat", [outs[i] for i in ends])
    if _shape(ex, merged)[0] != cf:
        raise ContractError(f"loose ends {ends} give {_shape(ex, merged)[0]} channels, head expects {cf}")
    h = ex.conv("head.merge", "head/merge", merged, (cf, cf, 1, 1))
    h = ex.bn("head.bn", "head/bn", h, True)
    h = ex.relu("head.relu", h)
    h = ex.dropblock("head.dropblock", h)
    h = ex.gap("head.gap", h)
    return ex.fc("head.fc", h, shared.n_classes)


# -- plans -----------------------------------------------------------------------

@dataclass
class NetworkPlan:
    arch: ArchEncoding
    shared: SharedParams
    input_shape: tuple
    n_classes: int
    layers: list
    block_size: int = 3
    keep_prob: float = 0.9

    @property
    def param_keys(self) -> tuple[str, ...]:
        seen = dict.fromkeys(k for layer in self.layers for k in layer.param_keys)
        return tuple(seen)

    def parameters(self) -> list[Tensor]:
        tr = self.shared.trainable()
        return [tr[k] for k in self.param_keys]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)


def compile(arch: ArchEncoding, shared: SharedParams, input_shape, n_classes: int,
            block_size: int = 3, keep_prob: float = 0.9) -> NetworkPlan:
    if arch.L != shared.L:
        raise ContractError(f"architecture has {arch.L} nodes but the store was built for {shared.L}")
    if n_classes != shared.n_classes:
        raise ContractError(f"store built for {shared.n_classes} classes, asked for {n_classes}")
    input_shape = tuple(input_shape)
    if input_shape[0] != shared.in_channels:
        raise ContractError(f"store expects {shared.in_channels} input channels, got shape {input_shape}")
    H, W = input_shape[1:]
    levels = min(arch.L, N_REDUCTIONS)
    if H % 2 ** levels or W % 2 ** levels:
        raise DimensionError(f"input {H}x{W} must be divisible by {2 ** levels}")
    ex = _ShapeExec()
    _run(ex, arch, shared, input_shape)
    return NetworkPlan(arch, shared, input_shape, n_classes, ex.layers, block_size, keep_prob)


def forward(plan: NetworkPlan, batch, training: bool, rng: np.random.Generator | None = None,
            record: list | None = None, cache: dict | None = None, cache_key=None,
            return_embedding: bool = False, batch_stats: bool = False):
    """Logits, or (logits, pooled embedding) when ``return_embedding`` is set.

    ``batch_stats`` makes eval-mode batch norm use the batch moments.
    """
    batch = T.as_tensor(batch)
    if tuple(batch.shape[1:]) != plan.input_shape:
        raise DimensionError(f"batch shape {batch.shape} does not match plan input {plan.input_shape}")
    if cache is not None and (training or T.grad_enabled()):
        raise ContractError("activation caching is only valid for eval-mode forwards under no_grad")
    if training and rng is None:
        rng = np.random.default_rng(0)
    ex = _ValueExec(plan.shared, training, rng, plan.block_size, plan.keep_prob, record, batch_stats)
    logits = _run(ex, plan.arch, plan.shared, batch, cache, cache_key)
    return (logits, ex.embedding) if return_embedding else logits


# -- checkpoint files ----------------------------------------------------------------

MAGIC = b"NASF"
VERSION = 1


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header magic + u16 version, u32 entry count, then (u16 key length, key, tensor)
    in key order, then a u32-length JSON metadata blob."""
    import json
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(arrays))]
    for key in sorted(arrays):
        kb = key.encode()
        parts += [struct.pack("<H", len(kb)), kb, T.serialize(arrays[key])]
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    import json
    buf = open(path, "rb").read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", buf, 6)
    off = 10
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, off)
        key = buf[off + 2: off + 2 + klen].decode()
        arrays[key], off = T.deserialize(buf, off + 2 + klen)
    (blen,) = struct.unpack_from("<I", buf, off)
    meta = json.loads(buf[off + 4: off + 4 + blen].decode())
    return arrays, meta
