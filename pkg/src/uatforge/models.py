"""Small convolutional classifiers with deterministic initialization.

Three architectures, all ending in a linear head over ``num_classes``
logits. Widths below are fixed; parameter counts follow from the layer
tables, so they are a closed-form function of the input shape.

mlp
    flatten -> dense(64) -> relu -> dense(N)

smallconv (widths 8, 16, 32)
    three downsampling blocks of conv(stride 2, pad 1) -> relu, then a
    global average pool and a dense head. The downsampling kernel is 4x4
    when the incoming side length is even and 3x3 when it is odd, which
    keeps the output size integral for any input of side >= 3 (even H
    halves exactly, odd H maps to (H+1)/2).

miniresidual
    smallconv blocks augmented with one identity skip each:
    h = relu(conv_down(x)); out = relu(h + conv_keep(h)) with conv_keep
    a shape-preserving 3x3 convolution.

Weights use He fan-in scaling (normal with std sqrt(2/fan_in)), biases
start at zero, and all draws come from the spec seed, so the same spec
always builds bit-identical parameters.

Example closed-form count, smallconv on 3x32x32 with 10 classes:
8*3*16+8 + 16*8*16+16 + 32*16*16+32 + 32*10+10 = 11010.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .container import read_container, write_container
from .errors import CheckpointError, ConfigError, ShapeError
from .rng import TAG_MODEL_INIT, rng_from

ARCHITECTURES = ("mlp", "smallconv", "miniresidual")
MLP_HIDDEN = 64
CONV_WIDTHS = (8, 16, 32)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be three positive ints, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            architecture=d["architecture"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            seed=int(d["seed"]),
        )


def _down_kernel(side: int) -> int:
    return 4 if side % 2 == 0 else 3


def _down_out(side: int, k: int) -> int:
    return (side + 2 - k) // 2 + 1


class Model:
    """A classifier: spec, parameters, and a differentiable forward pass.

    ``forward_calls`` counts forward passes; the training loops use it to
    assert that weight and perturbation gradients share one pass.
    """

    def __init__(self, spec: ModelSpec, params: ParameterSet, plan: list):
        self.spec = spec
        self.params = params
        self._plan = plan
        self.forward_calls = 0

    def forward(self, batch: Tensor) -> Tensor:
        if batch.data.ndim != 4 or batch.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape} does not match model input {('B',) + self.spec.input_shape}"
            )
        self.forward_calls += 1
        p = self.params
        x = batch
        for step in self._plan:
            op = step[0]
            if op == "flatten":
                x = ad.reshape(x, (x.shape[0], -1))
            elif op == "dense":
                name = step[1]
                x = ad.add(ad.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])
            elif op == "conv":
                name, stride, pad = step[1], step[2], step[3]
                bias = ad.reshape(p[f"{name}.bias"], (-1, 1, 1))
                x = ad.add(ad.conv2d(x, p[f"{name}.weight"], stride=stride, padding=pad), bias)
            elif op == "relu":
                x = ad.relu(x)
            elif op == "skip_start":
                step[1].append(x)
            elif op == "skip_add":
                x = ad.add(step[1].pop(), x)
            elif op == "gap":
                x = ad.mean_spatial(x)
            else:  # pragma: no cover
                raise AssertionError(f"unknown plan op {op}")
        return x


def _he_conv(rng, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * kh * kw))
    return rng.normal(0.0, std, size=(cout, cin, kh, kw))


def _he_dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def build_model(spec: ModelSpec) -> Model:
    """Construct a model with parameters drawn deterministically from the spec seed."""
    rng = rng_from(spec.seed, TAG_MODEL_INIT)
    params = ParameterSet()
    plan: list = []
    c, h, w = spec.input_shape

    def add_param(name, values):
        params.add(name, Tensor(values, requires_grad=True))

    if spec.architecture == "mlp":
        fan_in = c * h * w
        add_param("fc1.weight", _he_dense(rng, fan_in, MLP_HIDDEN))
        add_param("fc1.bias", np.zeros(MLP_HIDDEN))
        add_param("head.weight", _he_dense(rng, MLP_HIDDEN, spec.num_classes))
        add_param("head.bias", np.zeros(spec.num_classes))
        plan = [("flatten",), ("dense", "fc1"), ("relu",), ("dense", "head")]
    else:
        residual = spec.architecture == "miniresidual"
        cin = c
        for i, cout in enumerate(CONV_WIDTHS, start=1):
            kh, kw = _down_kernel(h), _down_kernel(w)
            name = f"block{i}.down"
            add_param(f"{name}.weight", _he_conv(rng, cout, cin, kh, kw))
            add_param(f"{name}.bias", np.zeros(cout))
            plan += [("conv", name, 2, 1), ("relu",)]
            if residual:
                keep = f"block{i}.keep"
                add_param(f"{keep}.weight", _he_conv(rng, cout, cout, 3, 3))
                add_param(f"{keep}.bias", np.zeros(cout))
                stack: list = []
                plan += [("skip_start", stack), ("conv", keep, 1, 1), ("skip_add", stack), ("relu",)]
            h, w = _down_out(h, kh), _down_out(w, kw)
            cin = cout
        add_param("head.weight", _he_dense(rng, cin, spec.num_classes))
        add_param("head.bias", np.zeros(spec.num_classes))
        plan += [("gap",), ("dense", "head")]

    return Model(spec, params, plan)


def forward_logits(model: Model, batch: Tensor) -> Tensor:
    """Logits for a (B, C, H, W) batch; gradients flow to parameters and input."""
    return model.forward(batch)


def predict_class(model: Model, image) -> int:
    """Argmax class for a single (C, H, W) image; ties go to the lowest index."""
    image = ad.as_tensor(image)
    if image.shape != model.spec.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.spec.input_shape}")
    logits = model.forward(Tensor(image.data[None]))
    return int(np.argmax(logits.data[0]))


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    header = {
        "spec": model.spec.to_dict(),
        "meta": dict(meta or {}),
        "param_names": model.params.names(),
    }
    write_container(path, "checkpoint", header, model.params.to_vector())


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint file; returns (model, metadata)."""
    header, payload = read_container(path, expect_kind="checkpoint")
    spec = ModelSpec.from_dict(header["spec"])
    model = build_model(spec)
    if payload.size != model.params.total_size():
        raise CheckpointError(
            f"{path}: payload holds {payload.size} values but spec implies {model.params.total_size()}"
        )
    model.params.load_vector(payload)
    return model, header.get("meta", {})
