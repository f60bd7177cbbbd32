"""Four-stage convolutional backbone, classifier head, and the dual-branch
forward pass that routes a clean and a style-perturbed view through shared
weights.

Each stage is ``blocks_per_stage`` conv(3x3) + norm + relu blocks followed
by a 2x spatial downsample, except stage 4 which keeps its final map for
pooling.  Stage boundaries give the feature-level randomization module its
insertion points.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .stylestats import EPS, instance_stats
from .stylenets import SrmFlConfig, StyleNets, apply_style_fields, style_nets_forward

_BN_MOMENTUM = 0.1


@dataclass
class BackboneConfig:
    stage_channels: Tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    input_size: int = 64
    num_classes: int = 5
    norm: str = "instance"  # or "batch"
    use_instance_norm_in_early_stages: bool = True  # IBN mix when norm == "batch"
    # scale of the final-stage norm affine at init; from-scratch training with
    # feature-map consistency losses needs this small so the sum-reduced
    # consistency term starts on the classification loss's scale instead of
    # being minimized by collapsing the features (it stays learnable)
    last_stage_gamma_init: float = 1.0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4:
            raise ValueError("exactly four stages are required")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.norm not in ("instance", "batch"):
            raise ValueError("norm must be 'instance' or 'batch'")
        if self.last_stage_gamma_init <= 0:
            raise ValueError("last_stage_gamma_init must be positive")

    def norm_kind(self, stage: int) -> str:
        if self.norm == "instance":
            return "instance"
        return "instance" if (self.use_instance_norm_in_early_stages and stage <= 2) else "batch"


@dataclass
class ModelState:
    """Live parameters, batch-norm buffers, EMA shadow, and the step count."""

    cfg: BackboneConfig
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    step: int = 0

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(cin * k * k)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=cout).astype(dtype)
    return w, b


def model_init(cfg: BackboneConfig, rng: Optional[np.random.Generator] = None,
               dtype=np.float64) -> ModelState:
    """Fan-in-scaled random init; the EMA shadow starts equal to the live weights."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    cin = 1
    for s, cout in enumerate(cfg.stage_channels, start=1):
        gamma0 = cfg.last_stage_gamma_init if s == 4 else 1.0
        for blk in range(cfg.blocks_per_stage):
            prefix = f"stage{s}.block{blk}"
            w, b = _conv_init(rng, cout, cin, 3, dtype)
            params[f"{prefix}.conv.w"] = Tensor(w, requires_grad=True)
            params[f"{prefix}.conv.b"] = Tensor(b, requires_grad=True)
            params[f"{prefix}.norm.gamma"] = Tensor(np.full(cout, gamma0, dtype=dtype), requires_grad=True)
            params[f"{prefix}.norm.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            if cfg.norm_kind(s) == "batch":
                buffers[f"{prefix}.norm.running_mean"] = np.zeros(cout, dtype=dtype)
                buffers[f"{prefix}.norm.running_var"] = np.ones(cout, dtype=dtype)
            cin = cout
    c4 = cfg.stage_channels[-1]
    n = cfg.num_classes
    bound = 1.0 / np.sqrt(c4)
    params["classifier.w"] = Tensor(rng.uniform(-bound, bound, size=(n, c4)).astype(dtype), requires_grad=True)
    params["classifier.b"] = Tensor(rng.uniform(-bound, bound, size=n).astype(dtype), requires_grad=True)

    ema = {k: v.data.copy() for k, v in params.items()}
    return ModelState(cfg=cfg, params=params, buffers=buffers, ema=ema, step=0)


def _batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, buffers: Dict[str, np.ndarray],
                prefix: str, training: bool) -> Tensor:
    c = x.shape[1]
    if training:
        mu = T.reduce_mean(x, axes=(0, 2, 3), keepdims=True)
        centered = T.sub(x, T.expand(mu, x.shape))
        var = T.reduce_mean(T.mul(centered, centered), axes=(0, 2, 3), keepdims=True)
        rm, rv = buffers[f"{prefix}.running_mean"], buffers[f"{prefix}.running_var"]
        buffers[f"{prefix}.running_mean"] = (1 - _BN_MOMENTUM) * rm + _BN_MOMENTUM * mu.data.reshape(-1)
        buffers[f"{prefix}.running_var"] = (1 - _BN_MOMENTUM) * rv + _BN_MOMENTUM * var.data.reshape(-1)
        normed = T.div(centered, T.expand(T.sqrt(T.add(var, EPS)), x.shape))
    else:
        rm = buffers[f"{prefix}.running_mean"].reshape(1, c, 1, 1)
        rv = buffers[f"{prefix}.running_var"].reshape(1, c, 1, 1)
        normed = T.div(T.sub(x, T.expand(Tensor(rm), x.shape)),
                       T.expand(Tensor(np.sqrt(rv + EPS)), x.shape))
    g = T.expand(T.reshape(gamma, (1, c, 1, 1)), x.shape)
    b = T.expand(T.reshape(beta, (1, c, 1, 1)), x.shape)
    return T.add(T.mul(g, normed), b)


def _instance_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    c = x.shape[1]
    normed = T.instance_normalize(x, EPS)
    g = T.expand(T.reshape(gamma, (1, c, 1, 1)), x.shape)
    b = T.expand(T.reshape(beta, (1, c, 1, 1)), x.shape)
    return T.add(T.mul(g, normed), b)


def forward_stages(state: ModelState, x: Tensor, from_stage: int = 1, to_stage: int = 4,
                   training: bool = True, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Run the inclusive stage range; stages 1-3 end in a 2x downsample."""
    if not (1 <= from_stage <= to_stage <= 4):
        raise ValueError(f"invalid stage range {from_stage}..{to_stage}")
    p = params if params is not None else state.params
    cfg = state.cfg
    out = x
    for s in range(from_stage, to_stage + 1):
        for blk in range(cfg.blocks_per_stage):
            prefix = f"stage{s}.block{blk}"
            # replicate padding keeps the conv equivariant to global intensity
            # maps, so early instance norm washes image-level styles exactly
            out = T.conv2d(out, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"],
                           stride=1, padding=1, padding_mode="replicate")
            if cfg.norm_kind(s) == "batch":
                out = _batch_norm(out, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"],
                                  state.buffers, f"{prefix}.norm", training)
            else:
                out = _instance_norm(out, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])
            out = T.relu(out)
        if s < 4:
            out = T.avg_pool2(out)
    return out


def classify(state: ModelState, features: Tensor,
             params: Optional[Dict[str, Tensor]] = None) -> Tuple[Tensor, Tensor]:
    """Pool the final map and apply the linear head; returns (logits, probs)."""
    p = params if params is not None else state.params
    w, b = p["classifier.w"], p["classifier.b"]
    pooled = T.global_avg_pool(features)
    if pooled.shape[1] != w.shape[1]:
        raise ValueError(f"classifier expects {w.shape[1]} channels, got {pooled.shape[1]}")
    logits = T.matmul(pooled, T.transpose(w))
    logits = T.add(logits, T.expand(T.reshape(b, (1, b.shape[0])), logits.shape))
    return logits, T.sigmoid(logits)


@dataclass
class DualForward:
    """Everything the loss terms need from one dual-branch pass."""

    features_clean: Optional[Tensor]
    probs_clean: Optional[Tensor]
    features_stylized: Tensor
    probs_stylized: Tensor
    style_triple: Optional[Tuple[Tensor, Tensor, Tensor]]  # (Z1*, Z2*, Zs_phi)


def forward_dual(state: ModelState, nets: Optional[StyleNets], batch_clean: Tensor,
                 batch_stylized: Tensor, pairing: np.ndarray, cfg: SrmFlConfig,
                 use_srm_fl: bool = True, need_clean_branch: bool = True,
                 training: bool = True) -> DualForward:
    """Shared-weight dual pass with optional mid-network restyling.

    The stylized branch runs stages 1..k, swaps its feature statistics
    toward a permuted partner, then finishes stages k+1..4.  The gamma and
    beta fields enter the main graph through stop-gradient, and the
    style-net objective sees the backbone features only through
    stop-gradient, so the two parameter groups never exchange adjoints.
    """
    b = batch_stylized.shape[0]
    pairing = np.asarray(pairing, dtype=np.intp)
    if sorted(pairing.tolist()) != list(range(b)):
        raise ValueError("pairing must be a permutation of the batch indices")

    f_clean = p_clean = None
    if need_clean_branch:
        f_clean = forward_stages(state, batch_clean, 1, 4, training)
        _, p_clean = classify(state, f_clean)

    k = cfg.insertion_index
    z1 = forward_stages(state, batch_stylized, 1, k, training)
    style_triple = None
    if use_srm_fl:
        z2 = T.take(z1, pairing, axis=0)
        if cfg.embeddings == "predefined":
            # ablation baseline: plain channel-stats restyling, no learnable fields
            stats_mu, stats_std = instance_stats(T.stop_gradient(z2), EPS)
            gamma_map = T.expand(stats_std, z1.shape)
            beta_map = T.expand(stats_mu, z1.shape)
            z_s = apply_style_fields(z1, T.stop_gradient(gamma_map), T.stop_gradient(beta_map), EPS)
        else:
            if nets is None:
                raise ValueError("learnable SRM-FL requires style nets")
            z1d, z2d = T.stop_gradient(z1), T.stop_gradient(z2)
            gamma_map, beta_map = style_nets_forward(nets, z2d)
            # style-net training path: adjoints reach only the nets
            z_s_phi = apply_style_fields(z1d, gamma_map, beta_map, EPS)
            style_triple = (z1d, z2d, z_s_phi)
            # main path: fields are constants, adjoints flow through the content branch
            z_s = apply_style_fields(z1, T.stop_gradient(gamma_map), T.stop_gradient(beta_map), EPS)
    else:
        z_s = z1
    f_styl = forward_stages(state, z_s, k + 1, 4, training)
    _, p_styl = classify(state, f_styl)
    return DualForward(f_clean, p_clean, f_styl, p_styl, style_triple)


# -- EMA and checkpointing -----------------------------------------------------


def ema_update(state: ModelState, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live for every parameter."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for name, p in state.params.items():
        state.ema[name] = decay * state.ema[name] + (1.0 - decay) * p.data


def ema_parameters(state: ModelState) -> Dict[str, Tensor]:
    return {k: Tensor(v) for k, v in state.ema.items()}


def save_checkpoint(path, state: ModelState, nets: Optional[StyleNets] = None) -> None:
    """Self-describing npz container; round-trips bit-exactly."""
    arrays = {}
    for k, v in state.params.items():
        arrays[f"param/{k}"] = v.data
    for k, v in state.ema.items():
        arrays[f"ema/{k}"] = v
    for k, v in state.buffers.items():
        arrays[f"buffer/{k}"] = v
    meta = {"step": state.step, "config": asdict(state.cfg)}
    if nets is not None:
        for k, v in nets.parameters().items():
            arrays[f"net/{k}"] = v.data
        meta["stylenets"] = {"channels": nets.channels, "reduction": nets.reduction}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> Tuple[ModelState, Optional[StyleNets]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        cfg_dict = meta["config"]
        cfg_dict["stage_channels"] = tuple(cfg_dict["stage_channels"])
        cfg = BackboneConfig(**cfg_dict)
        params, ema, buffers, net_arrays = {}, {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[6:]] = Tensor(data[key].copy(), requires_grad=True)
            elif key.startswith("ema/"):
                ema[key[4:]] = data[key].copy()
            elif key.startswith("buffer/"):
                buffers[key[7:]] = data[key].copy()
            elif key.startswith("net/"):
                net_arrays[key[4:]] = data[key].copy()
    state = ModelState(cfg=cfg, params=params, buffers=buffers, ema=ema, step=meta["step"])
    nets = None
    if "stylenets" in meta:
        from .stylenets import style_nets_init

        nets = style_nets_init(meta["stylenets"]["channels"], meta["stylenets"]["reduction"])
        for name, tensor in nets.parameters().items():
            tensor.data = net_arrays[name]
    return state, nets


def config_hash(obj) -> str:
    payload = json.dumps(obj if isinstance(obj, dict) else asdict(obj), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
