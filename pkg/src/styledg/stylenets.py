"""Learnable pixel-wise style fields for feature-level randomization.

Two small purely linear conv stacks map a reference feature map to a
gamma field and a beta field; applying them to a normalized content map
rewrites its style pixel by pixel.  The nets train against a content
reconstruction term plus a Gram-matrix style term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .stylestats import EPS, gram_matrix, instance_stats

INSERTION_STAGES = ("after_stage_1", "after_stage_2", "after_stage_3")

# kernel extent per layer; 3x3 layers use padding 1 so the spatial map survives
_LAYER_KERNELS = (1, 3, 3, 1)


@dataclass
class SrmFlConfig:
    eta: float = 0.01
    reduction: int = 4
    insertion_stage: str = "after_stage_2"
    embeddings: str = "learnable"  # "predefined" keeps the channel-stats baseline

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.reduction < 1:
            raise ValueError("reduction must be >= 1")
        if self.insertion_stage not in INSERTION_STAGES:
            raise ValueError(f"insertion_stage must be one of {INSERTION_STAGES}")
        if self.embeddings not in ("learnable", "predefined"):
            raise ValueError("embeddings must be 'learnable' or 'predefined'")

    @property
    def insertion_index(self) -> int:
        return INSERTION_STAGES.index(self.insertion_stage) + 1


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    padding: int


@dataclass
class StyleNets:
    """Parameters of the gamma and beta field generators.

    Both stacks share the squeeze/expand channel trajectory
    C -> C -> C/r -> C -> C with kernels 1x1, 3x3, 3x3, 1x1 and carry no
    activations or normalization anywhere.
    """

    gamma_net: List[ConvLayer]
    beta_net: List[ConvLayer]
    channels: int
    reduction: int

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for net_name, layers in (("gamma", self.gamma_net), ("beta", self.beta_net)):
            for i, layer in enumerate(layers):
                out[f"stylenet.{net_name}.{i}.w"] = layer.weight
                out[f"stylenet.{net_name}.{i}.b"] = layer.bias
        return out


def _channel_plan(c: int, reduction: int) -> List[Tuple[int, int]]:
    squeezed = c // reduction
    return [(c, c), (c, squeezed), (squeezed, c), (c, c)]


def _init_stack(c: int, reduction: int, rng: np.random.Generator, zero: bool,
                dtype, last_bias_offset: float = 0.0) -> List[ConvLayer]:
    layers = []
    plan = _channel_plan(c, reduction)
    for li, ((cin, cout), k) in enumerate(zip(plan, _LAYER_KERNELS)):
        if zero:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
            b = np.zeros(cout, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(cin * k * k)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
            b = rng.uniform(-bound, bound, size=cout).astype(dtype)
            if li == len(plan) - 1:
                b += dtype(last_bias_offset)
        layers.append(ConvLayer(Tensor(w, requires_grad=True),
                                Tensor(b, requires_grad=True),
                                padding=(k - 1) // 2))
    return layers


def style_nets_init(channels: int, reduction: int, rng: Optional[np.random.Generator] = None,
                    zero_init: bool = False, dtype=np.float64) -> StyleNets:
    """Fan-in-scaled uniform init; ``zero_init`` is a test hook giving phi(x)=0.

    The gamma stack's last bias is centered at 1 so the untrained nets start
    as a near-identity restyle (gamma field about 1, beta field about 0);
    random fields at init would otherwise wreck the main branch's features
    for the first chunk of training.
    """
    if reduction < 1 or channels % reduction != 0:
        raise ValueError(f"reduction {reduction} must divide channel count {channels}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return StyleNets(
        gamma_net=_init_stack(channels, reduction, rng, zero_init, dtype, last_bias_offset=1.0),
        beta_net=_init_stack(channels, reduction, rng, zero_init, dtype),
        channels=channels,
        reduction=reduction,
    )


def _run_stack(layers: List[ConvLayer], x: Tensor) -> Tensor:
    out = x
    for layer in layers:
        out = T.conv2d(out, layer.weight, layer.bias, stride=1, padding=layer.padding,
                       padding_mode="replicate")
    return out


def style_nets_forward(nets: StyleNets, x_rs: Tensor) -> Tuple[Tensor, Tensor]:
    """Gamma and beta fields with the same shape as ``x_rs`` ([B,C,H,W])."""
    if x_rs.ndim != 4 or x_rs.shape[1] != nets.channels:
        raise ValueError(f"expected [B,{nets.channels},H,W], got {x_rs.shape}")
    return _run_stack(nets.gamma_net, x_rs), _run_stack(nets.beta_net, x_rs)


def srm_fl_apply(nets: StyleNets, x_c: Tensor, x_rs: Tensor, eps: float = EPS) -> Tensor:
    """Pixel-wise affine restyling of ``x_c`` driven by ``x_rs``.

    Gradients flow into the nets and through the normalized content
    branch; callers that need the training-time gradient partition wrap
    the inputs/fields in stop_gradient themselves.
    """
    if x_c.shape != x_rs.shape:
        raise ValueError(f"shape mismatch: {x_c.shape} vs {x_rs.shape}")
    gamma_map, beta_map = style_nets_forward(nets, x_rs)
    return apply_style_fields(x_c, gamma_map, beta_map, eps)


def apply_style_fields(x_c: Tensor, gamma_map: Tensor, beta_map: Tensor,
                       eps: float = EPS) -> Tensor:
    """gamma_map * (x_c - mu(x_c)) / sigma(x_c) + beta_map, elementwise."""
    if x_c.shape != gamma_map.shape or x_c.shape != beta_map.shape:
        raise ValueError("field shapes must match the content map")
    return T.add(T.mul(gamma_map, T.instance_normalize(x_c, eps)), beta_map)


def style_net_loss(x_c: Tensor, x_rs: Tensor, x_s: Tensor,
                   eta: float) -> Tuple[Tensor, Tensor, Tensor]:
    """Content/style losses for the field generators.

    Content: squared Frobenius distance between the stylized map and the
    content map.  Style: squared Frobenius distance between Gram matrices
    of the stylized map and the reference, per sample.  Both are sums of
    squared entries, not means.
    """
    if not (x_c.shape == x_rs.shape == x_s.shape):
        raise ValueError("x_c, x_rs and x_s must share one shape")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    diff = T.sub(x_c, x_s)
    l_content = T.reduce_sum(T.mul(diff, diff))

    def per_sample_grams(t: Tensor) -> List[Tensor]:
        if t.ndim == 3:
            return [gram_matrix(t)]
        b = t.shape[0]
        chw = t.shape[1:]
        return [gram_matrix(T.reshape(T.take(t, [i], axis=0), chw)) for i in range(b)]

    l_style = None
    for g_rs, g_s in zip(per_sample_grams(x_rs), per_sample_grams(x_s)):
        gd = T.sub(g_rs, g_s)
        term = T.reduce_sum(T.mul(gd, gd))
        l_style = term if l_style is None else T.add(l_style, term)
    l_phi = T.add(l_content, T.mul(l_style, eta))
    return l_content, l_style, l_phi
