"""Synthetic multi-domain images and leave-one-domain-out splits.

Class is carried by a procedural binary shape; domain is carried by a
per-channel affine colour transform, an additive sinusoidal texture and
Gaussian noise.  Everything is a pure function of its arguments and seed.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CapacityError, CheckpointError, ConfigurationError
from .tensor import rng_for

DOMAIN_MAGIC = b"FDGDOM01"
TRAIN_FRACTION = 0.9
TEXTURE_AMP = 0.1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    channel_scale: tuple = (1.0, 1.0, 1.0)
    channel_shift: tuple = (0.0, 0.0, 0.0)
    texture_freq: float = 0.0
    noise_sigma: float = 0.0
    texture_amp: float = TEXTURE_AMP

    def __post_init__(self):
        object.__setattr__(self, "channel_scale", tuple(float(v) for v in self.channel_scale))
        object.__setattr__(self, "channel_shift", tuple(float(v) for v in self.channel_shift))
        if len(self.channel_scale) != 3 or len(self.channel_shift) != 3:
            raise ConfigurationError("channel_scale and channel_shift need 3 entries")
        if min(self.channel_scale) <= 0:
            raise ConfigurationError(f"domain {self.domain_id}: channel_scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"domain {self.domain_id}: noise_sigma must be >= 0")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    domain_id: int


@dataclass
class DomainData:
    """Images (n x 3 x S x S) and labels of one domain."""

    images: np.ndarray
    labels: np.ndarray
    domain_id: int
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Sample(self.images[i], int(self.labels[i]), self.domain_id)

    def subset(self, idx):
        return DomainData(self.images[idx], self.labels[idx], self.domain_id, self.num_classes)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i4").tobytes())
        return h.hexdigest()


# shapes ------------------------------------------------------------------

def _grid(size, cx, cy):
    ii, jj = np.mgrid[0:size, 0:size].astype(float)
    return ii - cy, jj - cx


def _disk(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    return di ** 2 + dj ** 2 <= r ** 2


def _square(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    half = 0.8 * r
    return (np.abs(di) <= half) & (np.abs(dj) <= half)


def _cross(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    arm = max(1.0, 0.3 * r)
    return ((np.abs(di) <= arm) & (np.abs(dj) <= r)) | ((np.abs(dj) <= arm) & (np.abs(di) <= r))


def _stripes(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    box = (np.abs(di) <= r) & (np.abs(dj) <= r)
    return box & (np.floor((di + r) / 2.0) % 2 == 0)


def _ring(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    d2 = di ** 2 + dj ** 2
    return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)


def _triangle(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    return (di <= r) & (di >= -r) & (np.abs(dj) <= (di + r) / 2.0)


def _diagonal(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    box = (np.abs(di) <= r) & (np.abs(dj) <= r)
    return box & ((np.abs(di - dj) <= 1.0) | (np.abs(di + dj) <= 1.0))


def _vstripes(size, cx, cy, r):
    di, dj = _grid(size, cx, cy)
    box = (np.abs(di) <= r) & (np.abs(dj) <= r)
    return box & (np.floor((dj + r) / 2.0) % 2 == 0)


SHAPES = (
    ("disk", _disk),
    ("square", _square),
    ("cross", _cross),
    ("stripes", _stripes),
    ("ring", _ring),
    ("triangle", _triangle),
    ("diagonal", _diagonal),
    ("vstripes", _vstripes),
)


def render_masks(n, num_classes, size, rng):
    """Balanced labels (``i % K``) and jittered binary shape masks, n x S x S."""
    labels = np.arange(n) % num_classes
    masks = np.empty((n, size, size))
    centre = (size - 1) / 2.0
    for i, label in enumerate(labels):
        cx, cy = centre + rng.uniform(-0.5, 0.5, size=2)
        r = size * rng.uniform(0.29, 0.31)
        masks[i] = SHAPES[label][1](size, cx, cy, r)
    return labels, masks


def apply_style(masks, spec, rng):
    """Grey masks (n x S x S) -> styled images (n x 3 x S x S)."""
    n, size, _ = masks.shape
    scale = np.asarray(spec.channel_scale).reshape(1, 3, 1, 1)
    shift = np.asarray(spec.channel_shift).reshape(1, 3, 1, 1)
    ii, jj = np.mgrid[0:size, 0:size]
    texture = spec.texture_amp * np.sin(spec.texture_freq * (ii + jj))
    images = scale * masks[:, None] + shift + texture
    if spec.noise_sigma > 0:
        images = images + rng.normal(0.0, spec.noise_sigma, size=images.shape)
    return images


def generate_domain(spec, n, num_classes, size, seed):
    """``n`` styled samples of ``num_classes`` shapes at ``size`` x ``size``."""
    if num_classes > len(SHAPES):
        raise CapacityError(f"{num_classes} classes requested, shape library has {len(SHAPES)}")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if n < num_classes:
        raise ConfigurationError(f"n={n} is smaller than the number of classes {num_classes}")
    if size < 8:
        raise ConfigurationError(f"image size must be >= 8, got {size}")
    rng = rng_for(seed, f"domain/{spec.domain_id}")
    labels, masks = render_masks(n, num_classes, size, rng)
    images = apply_style(masks, spec, rng)
    return DomainData(images, labels.astype(np.int64), spec.domain_id, num_classes)


# leave-one-domain-out ----------------------------------------------------

@dataclass
class ClientData:
    domain_id: int
    train: DomainData
    val: DomainData
    train_idx: np.ndarray
    val_idx: np.ndarray


@dataclass
class SplitPlan:
    held_out: int
    splits: dict

    def digest(self):
        h = hashlib.sha256()
        for did in sorted(self.splits):
            tr, va = self.splits[did]
            h.update(struct.pack("<q", did))
            h.update(np.asarray(tr, dtype="<i8").tobytes())
            h.update(np.asarray(va, dtype="<i8").tobytes())
        return h.hexdigest()


def split_indices(n, seed, domain_id):
    """Seeded 90/10 shuffle split of ``range(n)``."""
    perm = rng_for(seed, f"split/{domain_id}").permutation(n)
    n_train = int(round(TRAIN_FRACTION * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def leave_one_domain_out(domains, held_out, n_per_domain, seed, num_classes=4, size=16):
    """One client per source domain plus the held-out domain as the test set.

    Returns ``(clients, test_set, plan)``.
    """
    ids = [d.domain_id for d in domains]
    if len(domains) < 2:
        raise ConfigurationError("leave-one-domain-out needs at least two domains")
    if held_out not in ids:
        raise LookupError(f"held-out domain {held_out!r} not among {ids}")
    clients, splits, test = [], {}, None
    for spec in domains:
        data = generate_domain(spec, n_per_domain, num_classes, size, seed)
        if spec.domain_id == held_out:
            test = data
            continue
        tr, va = split_indices(len(data), seed, spec.domain_id)
        splits[spec.domain_id] = (tr, va)
        clients.append(ClientData(spec.domain_id, data.subset(tr), data.subset(va), tr, va))
    return clients, test, SplitPlan(held_out, splits)


# presets and files -------------------------------------------------------

def load_preset(path=None):
    """Domain list from a JSON preset; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("fdglab").joinpath("presets/default.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    return [DomainSpec(**d) for d in raw["domains"]]


def dump_preset(domains, path, version=1):
    payload = {"version": version, "domains": [asdict(d) for d in domains]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def save_domain(data, path):
    n, _, s, _ = data.images.shape
    header = DOMAIN_MAGIC + struct.pack("<iii", n, data.num_classes, s)
    body = np.ascontiguousarray(data.images, dtype="<f8").tobytes()
    labels = np.ascontiguousarray(data.labels, dtype="<i4").tobytes()
    Path(path).write_bytes(header + body + labels)


def load_domain(path, domain_id=-1):
    blob = Path(path).read_bytes()
    if blob[:8] != DOMAIN_MAGIC:
        raise CheckpointError(f"{path}: not a domain file (magic {blob[:8]!r})")
    n, k, s = struct.unpack_from("<iii", blob, 8)
    off = 20
    if len(blob) != off + 8 * n * 3 * s * s + 4 * n:
        raise CheckpointError(f"{path}: size does not match header n={n}, S={s}")
    images = np.frombuffer(blob, dtype="<f8", count=n * 3 * s * s, offset=off).reshape(n, 3, s, s)
    off += 8 * n * 3 * s * s
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off)
    return DomainData(images.astype(np.float64), labels.astype(np.int64), domain_id, k)
