"""The profiling network: gradient encoder, transformer block, projection, head.

Parameters live in a flat ordered dict keyed by dotted names
(``encoder.dg.weight``, ``transformer.ln1.gain``, ...). Batch-norm running
statistics are kept separately as buffers; they are updated by train-mode
forwards and read by eval-mode forwards.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvariantError
from .tensor import (
    Tensor,
    batch_norm2d,
    concat,
    conv2d,
    diff_conv2d,
    dropout,
    gelu,
    layer_norm,
    linear,
    make_rng,
    matmul,
    relu,
    softmax_rows,
)

MODES = ("train", "eval")


@dataclass(frozen=True)
class PhenoNetConfig:
    in_channels: int = 5
    image_size: int = 32
    feat_dim: int = 128
    out_dim: int = 32
    num_classes: int = 1
    num_heads: int = 4
    tokens: int | None = None
    ffn_hidden: int = 32
    dropout: float = 0.1
    residual_depth: int = 2
    branch_channels: int = 16
    theta1: float = 0.7
    theta2: float = 0.3
    bn_momentum: float = 0.1
    eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("in_channels", "image_size", "feat_dim", "out_dim", "num_classes",
                     "num_heads", "ffn_hidden", "branch_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.residual_depth < 0:
            raise ValueError("residual_depth must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.feat_dim % self.num_heads:
            raise ValueError("num_heads must divide feat_dim")
        if self.feat_dim % self.n_tokens:
            raise ValueError("tokens must divide feat_dim")
        for name in ("theta1", "theta2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_tokens(self) -> int:
        return self.tokens if self.tokens is not None else self.num_heads * 4

    @property
    def token_dim(self) -> int:
        return self.feat_dim // self.n_tokens

    @property
    def mlp_hidden(self) -> int:
        return self.in_channels * 8

    @classmethod
    def paper_scale(cls, num_classes: int = 1, **overrides) -> "PhenoNetConfig":
        """Dimensions used at full scale (448 px input, 2048-d features, 672-d output)."""
        base = dict(image_size=448, feat_dim=2048, out_dim=672, num_heads=8,
                    ffn_hidden=2048, num_classes=num_classes)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _parameter_shapes(cfg: PhenoNetConfig, part: str) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) triples for one network part, in a fixed order."""
    c, br, hid, feat = cfg.in_channels, cfg.branch_channels, cfg.mlp_hidden, cfg.feat_dim
    d, h, f, out = cfg.token_dim, cfg.num_heads, cfg.ffn_hidden, cfg.out_dim
    spec: list[tuple[str, tuple[int, ...], str]] = []

    def bn(prefix, ch):
        spec.extend([(f"{prefix}.gain", (ch,), "ones"), (f"{prefix}.bias", (ch,), "zeros")])

    if part == "encoder":
        spec.append(("encoder.dg.weight", (br, c, 3, 3), "kaiming"))
        bn("encoder.dg_bn", br)
        spec.append(("encoder.sg.weight", (br, c, 3, 3), "kaiming"))
        bn("encoder.sg_bn", br)
        spec.extend([("encoder.mlp.weight", (hid, 2 * br, 1, 1), "kaiming"),
                     ("encoder.mlp.bias", (hid,), "zeros")])
        bn("encoder.mlp_bn", hid)
        spec.append(("encoder.stem.weight", (feat, hid, 3, 3), "kaiming"))
        bn("encoder.stem_bn", feat)
        for i in range(cfg.residual_depth):
            spec.append((f"encoder.block{i}.conv1.weight", (feat, feat, 3, 3), "kaiming"))
            bn(f"encoder.block{i}.bn1", feat)
            spec.append((f"encoder.block{i}.conv2.weight", (feat, feat, 3, 3), "kaiming"))
            bn(f"encoder.block{i}.bn2", feat)
    elif part == "transformer":
        for name in ("q", "k", "v"):
            spec.append((f"transformer.{name}.weight", (h * d, d), "kaiming"))
        spec.extend([("transformer.out.weight", (d, h * d), "kaiming"),
                     ("transformer.out.bias", (d,), "zeros")])
        bn("transformer.ln1", d)
        spec.extend([("transformer.ffn1.weight", (f, d), "kaiming"),
                     ("transformer.ffn1.bias", (f,), "zeros"),
                     ("transformer.ffn2.weight", (d, f), "kaiming"),
                     ("transformer.ffn2.bias", (d,), "zeros")])
        bn("transformer.ln2", d)
    elif part == "projection":
        spec.extend([("projection.fc1.weight", (out, feat), "kaiming"),
                     ("projection.fc1.bias", (out,), "zeros"),
                     ("projection.fc2.weight", (out, out), "kaiming"),
                     ("projection.fc2.bias", (out,), "zeros")])
        bn("projection.ln", out)
    elif part == "head":
        spec.extend([("head.weight", (cfg.num_classes, out), "kaiming"),
                     ("head.bias", (cfg.num_classes,), "zeros")])
    else:
        raise ValueError(f"unknown part {part!r}")
    return spec


PARTS = ("encoder", "transformer", "projection", "head")
BN_LAYERS_FIXED = ("encoder.dg_bn", "encoder.sg_bn", "encoder.mlp_bn", "encoder.stem_bn")


def init_params(cfg: PhenoNetConfig, parts=PARTS) -> dict[str, Tensor]:
    """Seeded initialisation: Kaiming-uniform weights, zero biases, unit norm gains."""
    rng = make_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for part in PARTS:
        for name, shape, kind in _parameter_shapes(cfg, part):
            if kind == "kaiming":
                fan_in = int(np.prod(shape[1:]))
                arr = _kaiming(rng, shape, fan_in)
            else:
                arr = np.ones(shape) if kind == "ones" else np.zeros(shape)
            if part in parts:
                params[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True, name=name)
    return params


def bn_layer_names(cfg: PhenoNetConfig) -> list[str]:
    names = list(BN_LAYERS_FIXED)
    for i in range(cfg.residual_depth):
        names += [f"encoder.block{i}.bn1", f"encoder.block{i}.bn2"]
    return names


def parameter_count(cfg: PhenoNetConfig) -> int:
    return sum(int(np.prod(shape)) for part in PARTS for _, shape, _ in _parameter_shapes(cfg, part))


class PhenoNet:
    """Parameters, batch-norm buffers and config of one network instance."""

    def __init__(self, config: PhenoNetConfig, params: dict[str, Tensor] | None = None,
                 buffers: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        if buffers is None:
            buffers = {}
            for layer in bn_layer_names(config):
                ch = self.params[f"{layer}.gain"].shape[0]
                buffers[f"{layer}.running_mean"] = np.zeros(ch, dtype=config.dtype)
                buffers[f"{layer}.running_var"] = np.ones(ch, dtype=config.dtype)
        self.buffers = buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype: str) -> "PhenoNet":
        cfg = dataclasses.replace(self.config, dtype=dtype)
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return PhenoNet(cfg, params, buffers)

    def copy(self) -> "PhenoNet":
        return self.astype(self.config.dtype)

    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None):
        return forward(x, self, mode, rng)


# --------------------------------------------------------------------------
# building blocks


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _bn(x: Tensor, net: PhenoNet, layer: str, mode: str) -> Tensor:
    gain, bias = net.params[f"{layer}.gain"], net.params[f"{layer}.bias"]
    mean_key, var_key = f"{layer}.running_mean", f"{layer}.running_var"
    eps = net.config.eps
    if mode == "eval":
        rm, rv = net.buffers.get(mean_key), net.buffers.get(var_key)
        if rm is None or rv is None or not np.all(rv > 0):
            raise InvariantError(f"batch-norm layer {layer} has no valid running statistics")
        return batch_norm2d(x, gain, bias, eps, rm, rv)
    out = batch_norm2d(x, gain, bias, eps)
    m = x.size // x.shape[1]
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3)) * (m / max(m - 1, 1))
    mom = net.config.bn_momentum
    net.buffers[mean_key] = ((1 - mom) * net.buffers[mean_key] + mom * mu).astype(x.dtype)
    net.buffers[var_key] = ((1 - mom) * net.buffers[var_key] + mom * var).astype(x.dtype)
    return out


def gradient_encoder_forward(x: Tensor, net: PhenoNet, mode: str = "eval") -> Tensor:
    """Dual difference-convolution branches, channel MLP, residual stack, pooling."""
    _check_mode(mode)
    cfg, p = net.config, net.params
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [B,{cfg.in_channels},H,W], got {x.shape}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got {x.shape[2:]}")
    g_dg = _bn(relu(diff_conv2d(x, p["encoder.dg.weight"], cfg.theta1)), net, "encoder.dg_bn", mode)
    g_sg = _bn(relu(diff_conv2d(x, p["encoder.sg.weight"], cfg.theta2)), net, "encoder.sg_bn", mode)
    mixed = conv2d(concat([g_dg, g_sg], axis=1), p["encoder.mlp.weight"])
    mixed = mixed + p["encoder.mlp.bias"].reshape(1, -1, 1, 1)
    h1 = _bn(relu(mixed), net, "encoder.mlp_bn", mode)

    h = relu(_bn(conv2d(h1, p["encoder.stem.weight"], stride=2), net, "encoder.stem_bn", mode))
    for i in range(cfg.residual_depth):
        pre = f"encoder.block{i}"
        y = relu(_bn(conv2d(h, p[f"{pre}.conv1.weight"]), net, f"{pre}.bn1", mode))
        y = _bn(conv2d(y, p[f"{pre}.conv2.weight"]), net, f"{pre}.bn2", mode)
        h = relu(h + y)
    return h.mean(axis=(2, 3))


def attention(h2: Tensor, net: PhenoNet) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over the token view of each feature row.

    Returns the attended output [B, D] and the attention weights
    [B, heads, tokens, tokens].
    """
    cfg, p = net.config, net.params
    b = h2.shape[0]
    t, d, nh = cfg.n_tokens, cfg.token_dim, cfg.num_heads
    x = h2.reshape(b, t, d)

    def heads(name):
        return linear(x, p[f"transformer.{name}.weight"]).reshape(b, t, nh, d).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    weights = softmax_rows(scores)
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, nh * d)
    out = linear(ctx, p["transformer.out.weight"], p["transformer.out.bias"])
    return out.reshape(b, t * d), weights


def transformer_forward(h2: Tensor, net: PhenoNet, mode: str = "eval",
                        rng: np.random.Generator | None = None) -> Tensor:
    _check_mode(mode)
    cfg, p = net.config, net.params
    if h2.ndim != 2 or h2.shape[1] != cfg.feat_dim:
        raise ValueError(f"expected features [B,{cfg.feat_dim}], got {h2.shape}")
    b, t, d = h2.shape[0], cfg.n_tokens, cfg.token_dim
    drop = cfg.dropout if mode == "train" else 0.0
    h3, _ = attention(h2, net)
    x = h2.reshape(b, t, d)
    h4 = layer_norm(x + dropout(h3.reshape(b, t, d), drop, rng),
                    p["transformer.ln1.gain"], p["transformer.ln1.bias"], cfg.eps)
    h5 = relu(linear(relu(linear(h4, p["transformer.ffn1.weight"], p["transformer.ffn1.bias"])),
                     p["transformer.ffn2.weight"], p["transformer.ffn2.bias"]))
    h6 = layer_norm(h4 + dropout(h5, drop, rng),
                    p["transformer.ln2.gain"], p["transformer.ln2.bias"], cfg.eps)
    return h6.reshape(b, t * d)


def project(h6: Tensor, net: PhenoNet, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    _check_mode(mode)
    cfg, p = net.config, net.params
    if h6.ndim != 2 or h6.shape[1] != p["projection.fc1.weight"].shape[1]:
        raise ValueError(f"projection input has shape {h6.shape}")
    drop = cfg.dropout if mode == "train" else 0.0
    z1 = linear(h6, p["projection.fc1.weight"], p["projection.fc1.bias"])
    z2 = dropout(linear(gelu(z1), p["projection.fc2.weight"], p["projection.fc2.bias"]), drop, rng)
    return layer_norm(z1 + z2, p["projection.ln.gain"], p["projection.ln.bias"], cfg.eps)


def classify(z_hat: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if z_hat.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError("classifier head dims do not match the embedding")
    return linear(z_hat, weight, bias)


def forward(x: Tensor, net: PhenoNet, mode: str = "eval",
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Full network; returns (embedding [B, out_dim], logits [B, num_classes])."""
    _check_mode(mode)
    if mode == "train" and rng is None and net.config.dropout > 0:
        rng = make_rng(net.config.seed)
    h2 = gradient_encoder_forward(x, net, mode)
    h6 = transformer_forward(h2, net, mode, rng)
    z_hat = project(h6, net, mode, rng)
    return z_hat, classify(z_hat, net.params["head.weight"], net.params["head.bias"])


def embed(net: PhenoNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode embeddings for a stack of images, in input order."""
    out = []
    for start in range(0, len(images), batch_size):
        xb = Tensor(images[start:start + batch_size].astype(net.config.dtype, copy=False))
        z, _ = forward(xb, net, "eval")
        out.append(z.data)
    if not out:
        return np.zeros((0, net.config.out_dim), dtype=net.config.dtype)
    return np.concatenate(out, axis=0)
