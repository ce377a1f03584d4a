"""Feature extractor, classifier and the context-aware modulation adapter.

A meta-source model is ``classifier(extractor(x))``. Stage two inserts a
shared adapter between the two halves; the adapter sees each feature row
together with the mean feature row of the mini-batch it came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EmptyBatchError


@dataclass
class MLPParams:
    """Linear layers with ReLU between them and nothing after the last."""

    layers: list[tuple[Tensor, Tensor]]

    def __post_init__(self):
        for (w_prev, _), (w_next, _) in zip(self.layers, self.layers[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise DimensionError(f"layer dims do not chain: {w_prev.shape} -> {w_next.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MLPParams":
        """Glorot-uniform weights, zero biases."""
        layers = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)
            layers.append((w, Tensor(np.zeros(fan_out), requires_grad=True)))
        return cls(layers)

    @classmethod
    def zeros(cls, dims: list[int]) -> "MLPParams":
        return cls([
            (Tensor(np.zeros((i, o)), requires_grad=True), Tensor(np.zeros(o), requires_grad=True))
            for i, o in zip(dims, dims[1:])
        ])

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def copy(self) -> "MLPParams":
        return MLPParams([
            (Tensor(w.data, w.requires_grad), Tensor(b.data, b.requires_grad)) for w, b in self.layers
        ])

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(params: MLPParams, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match MLP input dim {params.in_dim}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        x = ad.matmul(x, w) + b
        if i < last:
            x = ad.relu(x)
    return x


@dataclass
class ContextVector:
    """Mean pre-adapter feature row of one mini-batch."""

    mu: Tensor


def batch_context(z: Tensor) -> ContextVector:
    if z.data.ndim != 2 or z.shape[0] == 0:
        raise EmptyBatchError("batch_context needs a non-empty [B x C] batch")
    return ContextVector(ad.batch_mean_rows(z))


@dataclass
class CaFiLMParams:
    """The six shared scalars of the modulation adapter.

    For feature value ``z_c`` and batch-mean value ``mu_c`` of dimension
    ``c``: ``(gamma_c, beta_c) = A @ (z_c, mu_c) + b`` and the output is
    ``gamma_c * z_c + beta_c``. The same ``A`` and ``b`` serve every
    dimension.
    """

    A: Tensor = field(default_factory=lambda: Tensor(np.zeros((2, 2)), requires_grad=True))
    b: Tensor = field(default_factory=lambda: Tensor(np.array([1.0, 0.0]), requires_grad=True))

    def __post_init__(self):
        if self.A.shape != (2, 2) or self.b.shape != (2,):
            raise DimensionError(f"CaFiLM needs A [2x2] and b [2], got {self.A.shape} and {self.b.shape}")

    @classmethod
    def identity(cls) -> "CaFiLMParams":
        return cls()

    uses_context = True

    def parameters(self) -> list[Tensor]:
        return [self.A, self.b]

    def set_trainable(self, flag: bool) -> None:
        self.A.requires_grad = flag
        self.b.requires_grad = flag

    def copy(self) -> "CaFiLMParams":
        return CaFiLMParams(Tensor(self.A.data, self.A.requires_grad), Tensor(self.b.data, self.b.requires_grad))

    def apply(self, z: Tensor, ctx: ContextVector | None) -> Tensor:
        return cafilm_forward(self, z, ctx)


def cafilm_forward(adapter: CaFiLMParams, z: Tensor, ctx: ContextVector) -> Tensor:
    if ctx is None:
        raise DimensionError("CaFiLM requires a context vector")
    mu = ctx.mu
    if z.data.ndim != 2 or mu.shape != (z.shape[1],):
        raise DimensionError(f"context of shape {mu.shape} does not match features {z.shape}")
    A, b = adapter.A, adapter.b
    gamma = A[0, 0] * z + A[0, 1] * mu + b[0]
    beta = A[1, 0] * z + A[1, 1] * mu + b[1]
    return gamma * z + beta


def param_count(adapter) -> int:
    return sum(p.data.size for p in adapter.parameters())


@dataclass
class MLPAdapter:
    """MLP replacement for CaFiLM, used by the ablations.

    With ``uses_context`` each row fed to the MLP is ``[z ; mu]`` (width 2C),
    otherwise just ``z`` (width C). Output width is C.
    """

    params: MLPParams
    uses_context: bool = True

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, uses_context: bool, rng: np.random.Generator) -> "MLPAdapter":
        in_dim = 2 * feature_dim if uses_context else feature_dim
        return cls(MLPParams.init([in_dim, hidden_dim, feature_dim], rng), uses_context)

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()

    def set_trainable(self, flag: bool) -> None:
        self.params.set_trainable(flag)

    def copy(self) -> "MLPAdapter":
        return MLPAdapter(self.params.copy(), self.uses_context)

    def apply(self, z: Tensor, ctx: ContextVector | None) -> Tensor:
        return mlp_adapter_forward(self.params, z, ctx if self.uses_context else None)


def mlp_adapter_forward(params: MLPParams, z: Tensor, ctx: ContextVector | None = None) -> Tensor:
    if ctx is not None:
        if ctx.mu.shape != (z.shape[1],):
            raise DimensionError(f"context of shape {ctx.mu.shape} does not match features {z.shape}")
        z = ad.concat_cols(z, ad.add(Tensor(np.zeros(z.shape)), ctx.mu))
    if params.out_dim * (2 if ctx is not None else 1) != params.in_dim:
        raise DimensionError(f"adapter MLP {params.dims} does not fit {'[z;mu]' if ctx is not None else 'z'}")
    return mlp_forward(params, z)


def extract_features(extractor: MLPParams, x) -> Tensor:
    return mlp_forward(extractor, x)


def classify(classifier: MLPParams, z: Tensor) -> Tensor:
    return mlp_forward(classifier, z)


@dataclass
class ModelBundle:
    """One meta-source model plus (a reference to) its adapter.

    ``adapter`` is ``None`` for a plain ``classifier(extractor(x))`` model.
    CASA bundles of one experiment all point to the same adapter object.
    """

    task_id: int
    extractor: MLPParams
    classifier: MLPParams
    adapter: CaFiLMParams | MLPAdapter | None = None

    def __post_init__(self):
        if self.extractor.out_dim != self.classifier.in_dim:
            raise DimensionError(
                f"extractor output {self.extractor.out_dim} != classifier input {self.classifier.in_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    def trainable_parameters(self) -> list[Tensor]:
        params = self.extractor.parameters() + self.classifier.parameters()
        if self.adapter is not None:
            params += self.adapter.parameters()
        return [p for p in params if p.requires_grad]

    def with_adapter(self, adapter) -> "ModelBundle":
        return ModelBundle(self.task_id, self.extractor, self.classifier, adapter)


def adapted_logits(bundle: ModelBundle, x) -> Tensor:
    z = extract_features(bundle.extractor, x)
    if bundle.adapter is not None:
        ctx = batch_context(z) if bundle.adapter.uses_context else None
        z = bundle.adapter.apply(z, ctx)
    return classify(bundle.classifier, z)


def forward_adapted(bundle: ModelBundle, x) -> Tensor:
    """Class probabilities of ``classifier(adapter(extractor(x), batch mean))``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatchError("forward_adapted needs a non-empty [B x F] batch")
    return ad.softmax(adapted_logits(bundle, x))
