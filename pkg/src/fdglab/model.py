"""Small CNN classifier: conv blocks -> global average pool -> linear head.

The model is a flat, ordered registry of named float64 arrays.  Each entry
carries a partition tag (``GLOBAL`` or ``LOCAL``) that decides whether the
server's broadcast overwrites it, and running statistics are registered
alongside trainable weights so that aggregation and checkpoints see one
uniform list.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import norms
from . import tensor as T
from .errors import CheckpointError, DimensionError, SpecValidationError

GLOBAL = "GLOBAL"
LOCAL = "LOCAL"

BN, IN_FIRST, STAT_MIX, XAN = "BN", "IN_FIRST", "STAT_MIX", "XAN"
NORM_SCHEMES = (BN, IN_FIRST, STAT_MIX, XAN)

CKPT_MAGIC = b"FDGLAB01"
CKPT_VERSION = 1
_TAG_CODES = {GLOBAL: 0, LOCAL: 1}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


@dataclass
class ModelSpec:
    blocks: list = field(default_factory=lambda: [(16, 2), (32, 2), (64, 2)])
    norm_scheme: str = XAN
    replace_depth: int = 3
    feature_dim: int = 64
    num_classes: int = 4
    input_channels: int = 3
    input_size: int = 16
    kernel_size: int = 3
    # "channel": one (w_in, w_bn) pair per channel; "layer": one pair per layer
    mix_granularity: str = "channel"
    # "split": w_in GLOBAL, w_bn LOCAL; "global": both GLOBAL
    mix_partition: str = "split"

    def __post_init__(self):
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]

    def validate(self):
        problems = []
        if not self.blocks:
            problems.append("at least one block is required")
        for i, (ch, stride) in enumerate(self.blocks):
            if ch < 1:
                problems.append(f"block {i} has {ch} output channels")
            if stride < 1:
                problems.append(f"block {i} has stride {stride}")
        if self.norm_scheme not in NORM_SCHEMES:
            problems.append(f"unknown norm_scheme {self.norm_scheme!r}")
        if not 0 <= self.replace_depth <= len(self.blocks):
            problems.append(f"replace_depth {self.replace_depth} not in [0, {len(self.blocks)}]")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        elif self.blocks and self.feature_dim != self.blocks[-1][0]:
            problems.append(f"feature_dim {self.feature_dim} != last block width {self.blocks[-1][0]}")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.input_channels < 1:
            problems.append("input_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append(f"kernel_size must be odd, got {self.kernel_size}")
        if self.mix_granularity not in ("channel", "layer"):
            problems.append(f"unknown mix_granularity {self.mix_granularity!r}")
        if self.mix_partition not in ("split", "global"):
            problems.append(f"unknown mix_partition {self.mix_partition!r}")
        size = self.input_size
        for i, (_, stride) in enumerate(self.blocks):
            size = (size + 2 * (self.kernel_size // 2) - self.kernel_size) // stride + 1
            if size < 1:
                problems.append(f"block {i} reduces the spatial extent below 1")
                break
        if problems:
            raise SpecValidationError(problems)
        return self

    def block_scheme(self, i):
        """Norm used by block ``i``: the spec's scheme for replaced blocks, BN otherwise."""
        return self.norm_scheme if i < self.replace_depth else BN

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _norm_entries(scheme, spec, channels):
    """(suffix, shape, tag, trainable) for one block's norm layer."""
    mix = (channels,) if spec.mix_granularity == "channel" else (1,)
    w_bn_tag = LOCAL if spec.mix_partition == "split" else GLOBAL
    c = (channels,)
    if scheme == BN:
        return [("bn.gamma", c, GLOBAL, True), ("bn.beta", c, GLOBAL, True),
                ("bn.running_mean", c, GLOBAL, False), ("bn.running_var", c, GLOBAL, False)]
    if scheme == IN_FIRST:
        return [("in.gamma", c, GLOBAL, True), ("in.beta", c, GLOBAL, True)]
    if scheme == STAT_MIX:
        return [("mix.gamma", c, GLOBAL, True), ("mix.beta", c, GLOBAL, True),
                ("mix.w_in", mix, GLOBAL, True), ("mix.w_bn", mix, GLOBAL, True),
                ("mix.running_mean", c, GLOBAL, False), ("mix.running_var", c, GLOBAL, False)]
    return [("xan.in_gamma", c, GLOBAL, True), ("xan.in_beta", c, GLOBAL, True),
            ("xan.w_in", mix, GLOBAL, True),
            ("xan.bn_gamma", c, LOCAL, True), ("xan.bn_beta", c, LOCAL, True),
            ("xan.w_bn", mix, w_bn_tag, True),
            ("xan.running_mean", c, LOCAL, False), ("xan.running_var", c, LOCAL, False)]


def registry_layout(spec):
    """Ordered (name, shape, tag, trainable) for every registry entry of ``spec``."""
    layout = []
    cin, k = spec.input_channels, spec.kernel_size
    for i, (cout, _) in enumerate(spec.blocks):
        layout.append((f"block{i}.conv.weight", (cout, cin, k, k), GLOBAL, True))
        layout.append((f"block{i}.conv.bias", (cout,), GLOBAL, True))
        for suffix, shape, tag, trainable in _norm_entries(spec.block_scheme(i), spec, cout):
            layout.append((f"block{i}.{suffix}", shape, tag, trainable))
        cin = cout
    layout.append(("head.weight", (spec.num_classes, spec.feature_dim), GLOBAL, True))
    layout.append(("head.bias", (spec.num_classes,), GLOBAL, True))
    return layout


class Model:
    """Parameter registry plus the forward pass for a :class:`ModelSpec`."""

    def __init__(self, spec, params, tags):
        self.spec = spec
        self.params = dict(params)
        self.tags = dict(tags)
        self.trainable = {n for n, _, _, tr in registry_layout(spec) if tr}

    # registry helpers

    @property
    def names(self):
        return list(self.params)

    def num_params(self):
        return int(sum(v.size for v in self.params.values()))

    def local_names(self):
        return [n for n in self.params if self.tags[n] == LOCAL]

    def global_names(self):
        return [n for n in self.params if self.tags[n] == GLOBAL]

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.tags)

    def vector(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def head_snapshot(self):
        return self.params["head.weight"].copy(), self.params["head.bias"].copy()

    def leaves(self):
        """Fresh grad-enabled leaves for every trainable entry."""
        return {n: T.Tensor(self.params[n], requires_grad=True) for n in self.params if n in self.trainable}

    # forward

    def _check_input(self, x):
        s = self.spec
        if x.ndim != 4:
            raise DimensionError(f"model input must be rank 4, got rank {x.ndim}", axis=0)
        expected = (s.input_channels, s.input_size, s.input_size)
        for axis, (got, want) in enumerate(zip(x.shape[1:], expected), start=1):
            if got != want:
                raise DimensionError(f"model input extent {got}, expected {want}", axis=axis)

    def _norm(self, i, h, mode, p):
        scheme = self.spec.block_scheme(i)
        pre = f"block{i}."
        if scheme == IN_FIRST:
            return norms.instance_norm(h, norms.AffinePair(p[pre + "in.gamma"], p[pre + "in.beta"]))
        if scheme == BN:
            running = norms.RunningStats(self.params[pre + "bn.running_mean"], self.params[pre + "bn.running_var"])
            out = norms.batch_norm(h, norms.AffinePair(p[pre + "bn.gamma"], p[pre + "bn.beta"]), running, mode)
            key = pre + "bn."
        else:
            key = pre + ("mix." if scheme == STAT_MIX else "xan.")
            running = norms.RunningStats(self.params[key + "running_mean"], self.params[key + "running_var"])
            if scheme == STAT_MIX:
                shared = norms.AffinePair(p[key + "gamma"], p[key + "beta"])
                state = norms.XanLayerState(None, shared, running, p[key + "w_in"], p[key + "w_bn"])
                out = norms.stat_mix_forward(h, state, mode)
            else:
                state = norms.XanLayerState(
                    norms.AffinePair(p[key + "in_gamma"], p[key + "in_beta"]),
                    norms.AffinePair(p[key + "bn_gamma"], p[key + "bn_beta"]),
                    running, p[key + "w_in"], p[key + "w_bn"])
                out = norms.xan_forward(h, state, mode)
        if mode == "train":
            self.params[key + "running_mean"] = running.mean
            self.params[key + "running_var"] = running.var
        return out

    def activations(self, x, depth=None, mode="eval", leaves=None):
        """Output of the first ``depth`` blocks (all blocks by default), before pooling."""
        if mode not in norms.MODES:
            raise ValueError(f"mode must be one of {norms.MODES}, got {mode!r}")
        x = T.as_tensor(x)
        self._check_input(x)
        p = leaves if leaves is not None else self.params
        h = x
        pad = self.spec.kernel_size // 2
        for i, (_, stride) in enumerate(self.spec.blocks[:depth]):
            h = T.conv2d(h, p[f"block{i}.conv.weight"], stride=stride, padding=pad)
            h = T.add(h, T.reshape(T.as_tensor(p[f"block{i}.conv.bias"]), (1, -1, 1, 1)))
            h = T.relu(self._norm(i, h, mode, p))
        return h

    def features(self, x, mode="eval", leaves=None):
        """Extractor output, B x d.  ``leaves`` (from :meth:`leaves`) enables gradients."""
        return T.mean(self.activations(x, None, mode, leaves), axis=(2, 3))

    def head(self, feats, leaves=None):
        p = leaves if leaves is not None else self.params
        return T.linear(feats, p["head.weight"], p["head.bias"])

    def logits(self, x, mode="eval", leaves=None):
        return self.head(self.features(x, mode, leaves), leaves)

    def predict(self, x, batch_size=256):
        out = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.logits(x[start:start + batch_size], "eval").data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, x, y, batch_size=256):
        """Percentage of correct eval-mode predictions."""
        if len(y) == 0:
            return float("nan")
        return 100.0 * float(np.mean(self.predict(x, batch_size) == np.asarray(y)))


def build_model(spec, seed):
    """Deterministically initialized model for ``spec``."""
    spec.validate()
    rng = T.rng_for(seed, "init")
    params, tags = {}, {}
    per_channel = spec.mix_granularity == "channel"
    for name, shape, tag, _ in registry_layout(spec):
        tags[name] = tag
        leaf = name.rsplit(".", 1)[1]
        if name.endswith("conv.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "head.weight":
            bound = np.sqrt(3.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf in ("gamma", "in_gamma", "bn_gamma", "running_var"):
            params[name] = np.ones(shape)
        elif leaf == "w_in":
            u = rng.uniform(0.3, 0.7, size=shape if per_channel else (1,))
            params[name] = u
            params[name.replace("w_in", "w_bn")] = 1.0 - u
        elif leaf == "w_bn":
            continue
        else:
            params[name] = np.zeros(shape)
    ordered = {name: params[name] for name, *_ in registry_layout(spec)}
    return Model(spec, ordered, tags)


def expected_param_count(spec):
    """Closed-form registry size: conv Cout*Cin*k^2 + Cout, head d*C + C, norms per scheme."""
    k = spec.kernel_size
    per_norm = {BN: 4, IN_FIRST: 2, STAT_MIX: 4, XAN: 6}
    mix_per_layer = {STAT_MIX: 2, XAN: 2}
    total, cin = 0, spec.input_channels
    for i, (cout, _) in enumerate(spec.blocks):
        total += cout * cin * k * k + cout
        scheme = spec.block_scheme(i)
        total += per_norm[scheme] * cout
        if scheme in mix_per_layer:
            total += mix_per_layer[scheme] * (cout if spec.mix_granularity == "channel" else 1)
        cin = cout
    return total + spec.feature_dim * spec.num_classes + spec.num_classes


def forward_features(model, x, mode="eval"):
    return model.features(x, mode)


def forward_logits(model, x, mode="eval"):
    return model.logits(x, mode)


# checkpoints -------------------------------------------------------------

def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model, path):
    """Binary registry dump plus ``<path>.json`` holding the ModelSpec."""
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<Q", CKPT_VERSION), struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(struct.pack("<B", _TAG_CODES[model.tags[name]]))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    _sidecar(path).write_text(model.spec.to_json() + "\n")


def load_checkpoint(path):
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (version,) = struct.unpack_from("<Q", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        spec = ModelSpec.from_dict(json.loads(_sidecar(path).read_text()))
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing spec sidecar for {path}") from exc
    (count,) = struct.unpack_from("<I", blob, 16)
    off = 20
    params, tags = {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        (rank,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{rank}I", blob, off + 1)
        off += 1 + 4 * rank
        tags[name] = _TAG_NAMES[blob[off]]
        off += 1
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    layout = registry_layout(spec)
    if [n for n, *_ in layout] != list(params):
        raise CheckpointError(f"{path}: registry does not match its spec")
    for name, shape, _, _ in layout:
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, spec says {shape}")
    return Model(spec, params, tags)
