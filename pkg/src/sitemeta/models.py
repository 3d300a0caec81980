"""Functional binary classifiers: an MLP and a tiny VGG-style CNN.

Parameters are carried in an explicit :class:`ParamSet` rather than stored on
a model object, so adapted copies can coexist with the originals and gradient
graphs stay intact across adaptation steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    CongruenceError,
    ParamSet,
    ShapeError,
    Tensor,
    bias_add,
    conv2d,
    matmul,
    maxpool2d,
    relu,
    reshape,
)

# spatial shape produced by the volume-to-mosaic preprocessing pipeline
MOSAIC_HW = (68, 432)


class SpecError(ValueError):
    """Model specification is internally inconsistent."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plan; ``kind`` is ``"mlp"`` or ``"vgg_tiny"``.

    Both kinds emit exactly one logit per example (binary head; the class
    probability is the sigmoid of the logit).
    """

    kind: str
    widths: tuple[int, ...] = ()
    input_hw: tuple[int, int] = MOSAIC_HW
    in_channels: int = 1
    channels: tuple[int, int] = (4, 8)
    dense_width: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise SpecError(f"mlp needs at least input and output widths, got {self.widths}")
            if any(w <= 0 for w in self.widths):
                raise SpecError(f"mlp widths must be positive, got {self.widths}")
            if self.widths[-1] != 1:
                raise SpecError(f"final layer must emit exactly 1 logit, got width {self.widths[-1]}")
        elif self.kind == "vgg_tiny":
            h, w = self.input_hw
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise SpecError(f"kernel must be odd and positive, got {self.kernel}")
            if len(self.channels) != 2 or any(c <= 0 for c in self.channels):
                raise SpecError(f"channel plan must be two positive counts, got {self.channels}")
            if self.in_channels <= 0 or self.dense_width <= 0:
                raise SpecError("in_channels and dense_width must be positive")
            if h < 4 or w < 4:
                raise SpecError(f"input {self.input_hw} too small for two 2x2 poolings")
        else:
            raise SpecError(f"unknown model kind {self.kind!r}")

    @classmethod
    def mlp(cls, widths) -> "ModelSpec":
        return cls(kind="mlp", widths=tuple(int(w) for w in widths))

    @classmethod
    def vgg_tiny(
        cls,
        input_hw: tuple[int, int] = MOSAIC_HW,
        in_channels: int = 1,
        channels: tuple[int, int] = (4, 8),
        dense_width: int = 32,
        kernel: int = 3,
    ) -> "ModelSpec":
        return cls(
            kind="vgg_tiny",
            input_hw=(int(input_hw[0]), int(input_hw[1])),
            in_channels=int(in_channels),
            channels=(int(channels[0]), int(channels[1])),
            dense_width=int(dense_width),
            kernel=int(kernel),
        )

    def _conv_spatial(self) -> tuple[int, int]:
        # same-size convs (padding kernel//2), then two 2x2 floor poolings
        h, w = self.input_hw
        return (h // 2) // 2, (w // 2) // 2

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes in deterministic initialization order."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        if self.kind == "mlp":
            for i, (d_in, d_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                shapes.append((f"dense{i}/w", (d_in, d_out)))
                shapes.append((f"dense{i}/b", (d_out,)))
            return shapes
        c1, c2 = self.channels
        k = self.kernel
        shapes.append(("conv0/w", (c1, self.in_channels, k, k)))
        shapes.append(("conv0/b", (c1,)))
        shapes.append(("conv1/w", (c2, c1, k, k)))
        shapes.append(("conv1/b", (c2,)))
        h2, w2 = self._conv_spatial()
        flat = c2 * h2 * w2
        shapes.append(("dense0/w", (flat, self.dense_width)))
        shapes.append(("dense0/b", (self.dense_width,)))
        shapes.append(("dense1/w", (self.dense_width, 1)))
        shapes.append(("dense1/b", (1,)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def feature_shape(self) -> tuple[int, ...]:
        if self.kind == "mlp":
            return (self.widths[0],)
        return (self.in_channels, *self.input_hw)

    def to_plan(self) -> list[int]:
        """Integer encoding used inside checkpoint files."""
        if self.kind == "mlp":
            return [0, *self.widths]
        return [
            1,
            self.input_hw[0],
            self.input_hw[1],
            self.in_channels,
            self.channels[0],
            self.channels[1],
            self.dense_width,
            self.kernel,
        ]

    @classmethod
    def from_plan(cls, plan) -> "ModelSpec":
        plan = [int(x) for x in plan]
        if plan[0] == 0:
            return cls.mlp(plan[1:])
        if plan[0] == 1:
            h, w, cin, c1, c2, dense, k = plan[1:8]
            return cls.vgg_tiny((h, w), cin, (c1, c2), dense, k)
        raise SpecError(f"unknown model kind tag {plan[0]}")


@dataclass
class Batch:
    """Features plus binary labels; one label per leading-axis example."""

    features: Tensor
    labels: Tensor

    def __post_init__(self):
        if self.labels.ndim != 1:
            raise ShapeError(f"labels must be rank 1, got {self.labels.shape}")
        if self.features.ndim < 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"feature/label example counts differ: {self.features.shape} vs {self.labels.shape}"
            )
        vals = self.labels.data
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ValueError("labels must be exactly 0 or 1")

    @classmethod
    def from_arrays(cls, features: np.ndarray, labels: np.ndarray) -> "Batch":
        return cls(Tensor(features), Tensor(np.asarray(labels, dtype=np.float64)))

    def __len__(self) -> int:
        return self.labels.shape[0]


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Fan-in-scaled uniform weights, zero biases; deterministic per (spec, seed)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for name, shape in spec.param_shapes():
        if name.endswith("/b"):
            pairs.append((name, np.zeros(shape)))
            continue
        if len(shape) == 2:
            fan_in = shape[0]
        else:
            fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        pairs.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParamSet.from_arrays(pairs, tracked=True)


def _check_congruent(spec: ModelSpec, params: ParamSet) -> None:
    expected = spec.param_shapes()
    actual = [(name, t.shape) for name, t in params.items()]
    if [(n, tuple(s)) for n, s in expected] != actual:
        raise CongruenceError(
            f"params do not match spec {spec.kind}: expected {expected}, got {actual}"
        )


def forward(spec: ModelSpec, params: ParamSet, batch: Batch) -> Tensor:
    """Logits for a batch, shape (n,), graph-linked to ``params``."""
    _check_congruent(spec, params)
    x = batch.features
    n = x.shape[0]
    if spec.kind == "mlp":
        if x.ndim != 2 or x.shape[1] != spec.widths[0]:
            raise ShapeError(f"mlp expects features (n, {spec.widths[0]}), got {x.shape}")
        h = x
        last = len(spec.widths) - 2
        for i in range(last + 1):
            h = bias_add(matmul(h, params[f"dense{i}/w"]), params[f"dense{i}/b"])
            if i < last:
                h = relu(h)
        return reshape(h, (n,))

    want = (n, spec.in_channels, *spec.input_hw)
    if x.shape != want:
        raise ShapeError(f"vgg_tiny expects features {want}, got {x.shape}")
    p = spec.kernel // 2
    h = maxpool2d(relu(conv2d(x, params["conv0/w"], params["conv0/b"], padding=p)))
    h = maxpool2d(relu(conv2d(h, params["conv1/w"], params["conv1/b"], padding=p)))
    h = reshape(h, (n, h.size // n))
    h = relu(bias_add(matmul(h, params["dense0/w"]), params["dense0/b"]))
    h = bias_add(matmul(h, params["dense1/w"]), params["dense1/b"])
    return reshape(h, (n,))
