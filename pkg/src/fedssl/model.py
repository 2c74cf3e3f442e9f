"""Encoder/projector/predictor definitions and BN-tagged parameter sets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .errors import DimensionError, IntegrityError, SpecError

LAYER_KINDS = ("conv", "dense", "bn", "relu", "maxpool", "flatten")
BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


@dataclass(frozen=True)
class Layer:
    kind: str
    size: int = 0  # output channels (conv) or units (dense)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and self.size <= 0:
            raise SpecError(f"{self.kind} layer needs a positive size")


def conv(n: int) -> Layer:
    return Layer("conv", n)


def dense(n: int) -> Layer:
    return Layer("dense", n)


BN, RELU, POOL, FLAT = Layer("bn"), Layer("relu"), Layer("maxpool"), Layer("flatten")


@dataclass(frozen=True)
class ArchitectureSpec:
    encoder: tuple[Layer, ...]
    projector: tuple[Layer, ...]
    predictor: Optional[tuple[Layer, ...]] = None
    in_channels: int = 1
    image_size: int = 28
    allow_bn_free: bool = False

    def __post_init__(self):
        if not any(l.kind == "bn" for l in self.encoder) and not self.allow_bn_free:
            raise SpecError("encoder has no batch-norm layer; pass allow_bn_free=True to override")
        # shape inference validates layer ordering
        self.layer_shapes()

    def layer_shapes(self) -> dict[str, list[tuple[int, ...]]]:
        """Per-section input shapes of each layer, without the batch axis."""
        shapes: dict[str, list[tuple[int, ...]]] = {}
        cur: tuple[int, ...] = (self.in_channels, self.image_size, self.image_size)
        for section, layers in self.sections():
            seq = []
            for layer in layers:
                seq.append(cur)
                cur = _infer(layer, cur)
            shapes[section] = seq
            if section == "encoder":
                if len(cur) != 1:
                    raise SpecError("encoder must end in a flat feature vector")
                features = cur
        shapes["_out"] = [cur]
        shapes["_features"] = [features]
        return shapes

    def sections(self) -> Iterator[tuple[str, tuple[Layer, ...]]]:
        yield "encoder", self.encoder
        yield "projector", self.projector
        if self.predictor is not None:
            yield "predictor", self.predictor

    @property
    def feature_dim(self) -> int:
        return self.layer_shapes()["_features"][0][0]

    @property
    def proj_dim(self) -> int:
        shapes = self.layer_shapes()
        cur = shapes["_features"][0]
        for layer in self.projector:
            cur = _infer(layer, cur)
        return cur[0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def _infer(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    k = layer.kind
    if k == "conv":
        if len(shape) != 3:
            raise SpecError("conv layer needs a C x H x W input")
        return (layer.size, shape[1], shape[2])
    if k == "maxpool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise SpecError(f"maxpool needs even spatial dims, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if len(shape) != 1:
            raise SpecError("dense layer needs a flat input; add a flatten layer")
        return (layer.size,)
    return shape  # bn, relu


def projector_dim(method: str) -> int:
    return 128 if method == "simclr" else 512


def desk_spec(method: str = "barlow", in_channels: int = 1) -> ArchitectureSpec:
    """The default small conv encoder with the method's projector and predictor."""
    pdim = projector_dim(method)
    return ArchitectureSpec(
        encoder=(conv(8), BN, RELU, POOL, conv(16), BN, RELU, POOL, FLAT, dense(64)),
        projector=(dense(512), BN, RELU, dense(pdim)),
        predictor=(dense(128), BN, RELU, dense(pdim)) if method == "simsiam" else None,
        in_channels=in_channels,
    )


def tiny_spec(method: str = "barlow", in_channels: int = 1) -> ArchitectureSpec:
    """Same topology as the desk encoder at a size small enough for full finite differences."""
    return ArchitectureSpec(
        encoder=(conv(2), BN, RELU, POOL, conv(2), BN, RELU, POOL, FLAT, dense(8)),
        projector=(dense(16), BN, RELU, dense(8)),
        predictor=(dense(8), BN, RELU, dense(8)) if method == "simsiam" else None,
        in_channels=in_channels,
    )


ARCHITECTURES = {"small": desk_spec, "tiny": tiny_spec}


class ParamSet:
    """Ordered name -> Tensor map with a batch-norm flag per entry.

    ``sample_count`` is the local sample count a client attaches when it exports
    its weights for aggregation.
    """

    def __init__(self, arch: Optional[ArchitectureSpec] = None, sample_count: int = 0):
        self.arch = arch
        self.sample_count = sample_count
        self._entries: dict[str, Tensor] = {}
        self._bn: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, is_batchnorm: bool = False) -> None:
        if name in self._entries:
            raise SpecError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor
        self._bn[name] = is_batchnorm

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_batchnorm(self, name: str) -> bool:
        return self._bn[name]

    def bn_names(self) -> list[str]:
        return [n for n, flag in self._bn.items() if flag]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._entries.items() if t.requires_grad}

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def snapshot(self) -> "ParamSet":
        """Deep copy: fresh arrays, no gradients, same flags."""
        out = ParamSet(self.arch, self.sample_count)
        for name, t in self._entries.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out.add(name, c, self._bn[name])
        return out

    def assign_from(self, other: "ParamSet", names: Optional[Sequence[str]] = None) -> None:
        """Copy values from ``other`` into this set's arrays, in place."""
        for name in (self.names() if names is None else names):
            dst, src = self._entries[name], other[name]
            if dst.shape != src.shape:
                raise DimensionError(f"{name}: shape {dst.shape} vs {src.shape}")
            dst.data[...] = src.data

    def digest(self, names: Optional[Sequence[str]] = None) -> str:
        h = hashlib.sha256()
        for name in (self.names() if names is None else names):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._entries[name].data).tobytes())
        return h.hexdigest()

    def same_layout(self, other: "ParamSet") -> bool:
        return (self.names() == other.names()
                and all(self[n].shape == other[n].shape for n in self)
                and all(self.is_batchnorm(n) == other.is_batchnorm(n) for n in self))


def build_model(spec: ArchitectureSpec, rng: np.random.Generator) -> ParamSet:
    """Initialize parameters: He-uniform weights, zero biases and beta, unit gamma."""
    params = ParamSet(spec)
    shapes = spec.layer_shapes()
    for section, layers in spec.sections():
        for i, (layer, in_shape) in enumerate(zip(layers, shapes[section])):
            prefix = f"{section}.{i}"
            if layer.kind == "conv":
                fan_in = in_shape[0] * 9
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(layer.size, in_shape[0], 3, 3))
                params.add(f"{prefix}.weight", Tensor(w, requires_grad=True))
            elif layer.kind == "dense":
                fan_in = in_shape[0]
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, layer.size))
                params.add(f"{prefix}.weight", Tensor(w, requires_grad=True))
                params.add(f"{prefix}.bias", Tensor(np.zeros(layer.size), requires_grad=True))
            elif layer.kind == "bn":
                d = in_shape[0]
                params.add(f"{prefix}.gamma", Tensor(np.ones(d), requires_grad=True), True)
                params.add(f"{prefix}.beta", Tensor(np.zeros(d), requires_grad=True), True)
                params.add(f"{prefix}.running_mean", Tensor(np.zeros(d)), True)
                params.add(f"{prefix}.running_var", Tensor(np.ones(d)), True)
    return params


def _run(params: ParamSet, section: str, layers: Sequence[Layer], x: Tensor, train: bool) -> Tensor:
    for i, layer in enumerate(layers):
        prefix = f"{section}.{i}"
        k = layer.kind
        if k == "conv":
            x = ops.conv2d(x, params[f"{prefix}.weight"])
        elif k == "dense":
            x = ops.add(ops.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])
        elif k == "bn":
            x = ops.batchnorm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                              params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"], train)
        elif k == "relu":
            x = ops.relu(x)
        elif k == "maxpool":
            x = ops.maxpool2d(x)
        elif k == "flatten":
            x = ops.reshape(x, (x.shape[0], -1))
    return x


def _spec_of(params: ParamSet) -> ArchitectureSpec:
    if params.arch is None:
        raise SpecError("parameter set carries no architecture spec")
    return params.arch


def forward_features(params: ParamSet, images, train: bool = False) -> Tensor:
    """Encoder output (before the projector)."""
    spec = _spec_of(params)
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"expected images of shape B x {' x '.join(map(str, expected))}, got {x.shape}")
    return _run(params, "encoder", spec.encoder, x, train)


def forward_projected(params: ParamSet, images, train: bool = False) -> Tensor:
    spec = _spec_of(params)
    return _run(params, "projector", spec.projector, forward_features(params, images, train), train)


def forward_predictor(params: ParamSet, z: Tensor, train: bool = False) -> Tensor:
    spec = _spec_of(params)
    if spec.predictor is None:
        raise SpecError("this architecture has no predictor head")
    return _run(params, "predictor", spec.predictor, z, train)


# ---------------------------------------------------------------------------
# weight snapshot files
#
# magic "FSSLW1" | 32-byte sha256 of the architecture JSON | u64 sample_count
# | u32 entry count | entries: u16 name length, name (utf-8), u8 is_batchnorm,
# u8 rank, rank x u32 dims, float64 data. All integers little-endian.

WEIGHTS_MAGIC = b"FSSLW1"


def weights_to_bytes(params: ParamSet) -> bytes:
    digest = params.arch.digest() if params.arch is not None else bytes(32)
    parts = [WEIGHTS_MAGIC, digest, struct.pack("<QI", params.sample_count, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", int(params.is_batchnorm(name)), t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def _parse_weights(blob: bytes, arch: Optional[ArchitectureSpec] = None) -> ParamSet:
    if blob[:6] != WEIGHTS_MAGIC:
        raise IntegrityError("not a weight snapshot (bad magic)")
    digest = blob[6:38]
    if arch is not None and digest != arch.digest():
        raise IntegrityError("weight snapshot was written for a different architecture")
    sample_count, count = struct.unpack_from("<QI", blob, 38)
    pos = 38 + 12
    params = ParamSet(arch, sample_count)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        is_bn, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        trainable = not name.endswith(("running_mean", "running_var"))
        params.add(name, Tensor(data, requires_grad=trainable), bool(is_bn))
    if pos != len(blob):
        raise IntegrityError(f"trailing bytes in weight snapshot ({len(blob) - pos})")
    return params


def weights_from_bytes(blob: bytes, arch: Optional[ArchitectureSpec] = None) -> ParamSet:
    """Decode a snapshot; a wrong magic, architecture or length raises IntegrityError."""
    try:
        return _parse_weights(blob, arch)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, IntegrityError):
            raise
        raise IntegrityError(f"corrupt weight snapshot: {exc}") from None


def save_weights(params: ParamSet, path) -> None:
    Path(path).write_bytes(weights_to_bytes(params))


def load_weights(path, arch: Optional[ArchitectureSpec] = None) -> ParamSet:
    return weights_from_bytes(Path(path).read_bytes(), arch)
