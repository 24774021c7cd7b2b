"""Classifier architectures, feature taps and checkpoint persistence."""
from __future__ import annotations

import contextlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import ndgrad as nd
from .ndgrad import ShapeError, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATLAB1\n"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.1
STAGE_WIDTHS = (16, 32, 64)


class Role(str, Enum):
    VANILLA = "vanilla"
    ADV_TRAINED = "adv_trained"
    TROJAN = "trojan"
    ATIM = "atim"
    UNTAGGED = "untagged"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelHandle:
    arch: str
    params: "OrderedDict[str, Tensor]"
    num_classes: int
    input_shape: tuple[int, int, int]
    role: Role = Role.UNTAGGED
    blocks_per_stage: int = 0
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward_with_features(self, x) -> tuple[Tensor, Tensor]:
        x = nd.as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.arch} expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        if self.arch == "lenet":
            return _lenet_forward(self.params, x)
        return _resnet_forward(self.params, x, self.blocks_per_stage)

    def forward(self, x) -> Tensor:
        return self.forward_with_features(x)[0]

    __call__ = forward

    def logits(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with nd.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self.forward(x[s:s + batch_size]).data)
        return np.concatenate(out)

    def predict_proba(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return nd.softmax_np(self.logits(x, batch_size).astype(np.float64))

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return np.argmax(self.logits(x, batch_size), axis=1)

    def features(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with nd.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self.forward_with_features(x[s:s + batch_size])[1].data)
        return np.concatenate(out)

    @contextlib.contextmanager
    def frozen(self):
        """Stop gradients flowing into parameters (input gradients still work)."""
        saved = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, r in zip(self.params.values(), saved):
                p.requires_grad = r

    def copy(self, role: Optional[Role] = None) -> "ModelHandle":
        params = OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k))
                             for k, v in self.params.items())
        return ModelHandle(self.arch, params, self.num_classes, self.input_shape,
                           role if role is not None else self.role, self.blocks_per_stage,
                           dict(self.meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for p in self.params.values():
            n = p.data.size
            p.data = vec[off:off + n].reshape(p.data.shape).astype(p.data.dtype)
            off += n
        if off != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, model has {off}")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


# ----------------------------------------------------------------------
# initialisation


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _param(params, name, arr):
    params[name] = Tensor(arr, requires_grad=True, name=name)


def _conv_param(params, rng, name, kh, kw, cin, cout, bias=True):
    _param(params, name, _he(rng, (kh, kw, cin, cout), kh * kw * cin))
    if bias:
        _param(params, name + ".b", np.zeros(cout, np.float32))


def _dense_param(params, rng, name, fin, fout):
    _param(params, name, _he(rng, (fin, fout), fin))
    _param(params, name + ".b", np.zeros(fout, np.float32))


def _bn_param(params, name, c):
    _param(params, name + ".gamma", np.ones(c, np.float32))
    _param(params, name + ".beta", np.zeros(c, np.float32))


# ----------------------------------------------------------------------
# LeNet


def lenet_flatten_size(input_shape) -> int:
    h, w, _ = input_shape
    h2 = -(-(-(-h // 2)) // 2)
    w2 = -(-(-(-w // 2)) // 2)
    return h2 * w2 * 64


def build_lenet(num_classes: int, input_shape=(28, 28, 1), seed: int = 0,
                role: Role = Role.UNTAGGED) -> ModelHandle:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    c = input_shape[2]
    params: OrderedDict[str, Tensor] = OrderedDict()
    _conv_param(params, rng, "conv1", 5, 5, c, 32)
    _conv_param(params, rng, "conv2", 5, 5, 32, 64)
    _dense_param(params, rng, "dense1", lenet_flatten_size(input_shape), 1000)
    _dense_param(params, rng, "dense2", 1000, num_classes)
    return ModelHandle("lenet", params, num_classes, tuple(input_shape), Role(role),
                       meta={"seed": seed})


def _lenet_forward(p, x):
    h = nd.relu(nd.add(nd.conv2d(x, p["conv1"], 2, "same"), p["conv1.b"]))
    h = nd.relu(nd.add(nd.conv2d(h, p["conv2"], 2, "same"), p["conv2.b"]))
    feat = nd.flatten(h)
    h = nd.relu(nd.linear(feat, p["dense1"], p["dense1.b"]))
    return nd.linear(h, p["dense2"], p["dense2.b"]), feat


# ----------------------------------------------------------------------
# MiniResNet


def _block_names(blocks_per_stage):
    for s, width in enumerate(STAGE_WIDTHS):
        for b in range(blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            cin = STAGE_WIDTHS[s - 1] if (s > 0 and b == 0) else width
            yield f"s{s}b{b}", cin, width, stride


def build_miniresnet(num_classes: int, blocks_per_stage: int = 2, input_shape=(32, 32, 3),
                     seed: int = 0, role: Role = Role.UNTAGGED) -> ModelHandle:
    if blocks_per_stage < 1:
        raise ValueError("blocks_per_stage must be at least 1")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    _conv_param(params, rng, "stem", 3, 3, input_shape[2], STAGE_WIDTHS[0], bias=False)
    _bn_param(params, "stem.bn", STAGE_WIDTHS[0])
    for name, cin, cout, stride in _block_names(blocks_per_stage):
        _conv_param(params, rng, name + ".conv1", 3, 3, cin, cout, bias=False)
        _bn_param(params, name + ".bn1", cout)
        _conv_param(params, rng, name + ".conv2", 3, 3, cout, cout, bias=False)
        _bn_param(params, name + ".bn2", cout)
        if stride != 1 or cin != cout:
            _conv_param(params, rng, name + ".proj", 1, 1, cin, cout, bias=False)
    _bn_param(params, "head.bn", STAGE_WIDTHS[-1])
    _dense_param(params, rng, "dense", STAGE_WIDTHS[-1], num_classes)
    return ModelHandle("miniresnet", params, num_classes, tuple(input_shape), Role(role),
                       blocks_per_stage, meta={"seed": seed})


def residual_block(p, name, x, stride):
    """shortcut(x) + bn(conv(leaky(bn(conv(x))))); a zero second conv gives the shortcut."""
    h = nd.conv2d(x, p[name + ".conv1"], stride, "same")
    h = nd.leaky_relu(nd.batch_norm(h, p[name + ".bn1.gamma"], p[name + ".bn1.beta"]), LEAKY_SLOPE)
    h = nd.conv2d(h, p[name + ".conv2"], 1, "same")
    h = nd.batch_norm(h, p[name + ".bn2.gamma"], p[name + ".bn2.beta"])
    shortcut = nd.conv2d(x, p[name + ".proj"], stride, "same") if name + ".proj" in p else x
    return nd.add(shortcut, h)


def _resnet_trunk(p, x, blocks_per_stage):
    h = nd.conv2d(x, p["stem"], 1, "same")
    h = nd.leaky_relu(nd.batch_norm(h, p["stem.bn.gamma"], p["stem.bn.beta"]), LEAKY_SLOPE)
    for name, _, _, stride in _block_names(blocks_per_stage):
        h = residual_block(p, name, h, stride)
    return nd.leaky_relu(nd.batch_norm(h, p["head.bn.gamma"], p["head.bn.beta"]), LEAKY_SLOPE)


def _resnet_forward(p, x, blocks_per_stage):
    feat = nd.global_avg_pool(_resnet_trunk(p, x, blocks_per_stage))
    return nd.linear(feat, p["dense"], p["dense.b"]), feat


def resnet_feature_map(model: ModelHandle, x) -> Tensor:
    """Pre-pool activation map of a MiniResNet."""
    return _resnet_trunk(model.params, nd.as_tensor(x), model.blocks_per_stage)


def build_model(arch: str, num_classes: int, input_shape, seed: int = 0,
                role: Role = Role.UNTAGGED, blocks_per_stage: int = 2) -> ModelHandle:
    if arch == "lenet":
        return build_lenet(num_classes, input_shape, seed, role)
    if arch == "miniresnet":
        return build_miniresnet(num_classes, blocks_per_stage, input_shape, seed, role)
    raise ValueError(f"unknown architecture {arch!r}")


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ModelHandle, path) -> None:
    lines = [
        f"format_version: {CHECKPOINT_VERSION}",
        f"arch: {model.arch}",
        f"role: {Role(model.role).value}",
        f"num_classes: {model.num_classes}",
        f"input_shape: {','.join(map(str, model.input_shape))}",
        f"blocks_per_stage: {model.blocks_per_stage}",
    ]
    for k, v in sorted(model.meta.items()):
        lines.append(f"meta.{k}: {v}")
    for name, t in model.params.items():
        lines.append(f"param: {name} {','.join(map(str, t.shape))}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    tmp.replace(path)


def _parse_meta(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_checkpoint(path) -> ModelHandle:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = buf.find(b"\n\n", len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: header not terminated")
    fields: dict[str, str] = {}
    meta: dict[str, object] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in buf[len(CHECKPOINT_MAGIC):end].decode("utf-8").splitlines():
        key, _, value = line.partition(": ")
        if key == "param":
            name, dims = value.split(" ")
            shapes.append((name, tuple(int(d) for d in dims.split(","))))
        elif key.startswith("meta."):
            meta[key[5:]] = _parse_meta(value)
        else:
            fields[key] = value
    version = int(fields.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    input_shape = tuple(int(d) for d in fields["input_shape"].split(","))
    model = build_model(fields["arch"], int(fields["num_classes"]), input_shape,
                        role=Role(fields["role"]), blocks_per_stage=int(fields["blocks_per_stage"]))
    model.meta = meta
    expected = [(k, tuple(v.shape)) for k, v in model.params.items()]
    if shapes != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match architecture {fields['arch']}")
    payload = memoryview(buf)[end + 2:]
    need = 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape)
        model.params[name].data = arr.astype(np.float32)
        off += 4 * n
    return model
