"""Vasculature Extraction Transformer (VET).

Layout: a shallow 3x3 conv + LeakyReLU, a stack of residual VFE layers,
and a conv reconstruction head fed with the sum of shallow and deep
features. Each VFE layer downsamples with a stride-2 conv, runs multi-head
self-attention on tokens produced by three 3x3 projection convs, applies a
feed-forward block and upsamples with a stride-2 transposed conv.

Parameter names (frozen, they key checkpoint files)::

    shallow.conv.{kernel,bias}
    vfe{i}.down.{kernel,bias}        stride-2 conv
    vfe{i}.ln1.{gamma,beta}
    vfe{i}.{q,k,v}.{kernel,bias}     3x3 projection convs
    vfe{i}.proj.{kernel,bias}        attention output mix (dense C -> C)
    vfe{i}.ln2.{gamma,beta}
    vfe{i}.ffn1.{kernel,bias}        dense C -> ffn_hidden
    vfe{i}.ffn2.{kernel,bias}        dense ffn_hidden -> C
    vfe{i}.up.{kernel,bias}          stride-2 transposed conv
    recon.conv1.{kernel,bias}        3x3 C -> C (omitted when recon_hidden is off)
    recon.conv2.{kernel,bias}        3x3 C -> output_channels
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.tensor import Parameter, Tensor, as_tensor

PAPER_PARAM_COUNT = 929_000


@dataclass
class VetConfig:
    channels: int = 64
    vfe_layers: int = 4
    residual_scale: float = 0.4
    heads: int = 4
    ffn_hidden: int = 256
    input_channels: int = 1
    output_channels: int = 1
    leaky_alpha: float = 0.3
    attn_proj: bool = True
    recon_hidden: bool = True
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} must be divisible by heads {self.heads}")
        if self.vfe_layers < 0:
            raise ConfigError("vfe_layers must be >= 0")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ConfigError("residual_scale must lie in [0, 1]")
        if min(self.ffn_hidden, self.input_channels, self.output_channels) < 1:
            raise ConfigError("ffn_hidden and channel counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> VetConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _conv_params(ci, co):
    return 9 * ci * co + co


def param_count(cfg: VetConfig) -> int:
    """Trainable scalar count, summed analytically from the weight table."""
    c, h = cfg.channels, cfg.ffn_hidden
    per_layer = (
        _conv_params(c, c)  # down
        + 2 * c  # ln1
        + 3 * _conv_params(c, c)  # q, k, v
        + (c * c + c if cfg.attn_proj else 0)
        + 2 * c  # ln2
        + (c * h + h) + (h * c + c)  # ffn
        + _conv_params(c, c)  # up
    )
    head = _conv_params(c, cfg.output_channels)
    if cfg.recon_hidden:
        head += _conv_params(c, c)
    return _conv_params(cfg.input_channels, c) + cfg.vfe_layers * per_layer + head


def weight_shapes(cfg: VetConfig) -> dict[str, tuple[int, ...]]:
    c, h = cfg.channels, cfg.ffn_hidden
    shapes = {"shallow.conv.kernel": (3, 3, cfg.input_channels, c), "shallow.conv.bias": (c,)}
    for i in range(cfg.vfe_layers):
        p = f"vfe{i}."
        shapes[p + "down.kernel"] = (3, 3, c, c)
        shapes[p + "down.bias"] = (c,)
        shapes[p + "ln1.gamma"] = (c,)
        shapes[p + "ln1.beta"] = (c,)
        for name in "qkv":
            shapes[p + name + ".kernel"] = (3, 3, c, c)
            shapes[p + name + ".bias"] = (c,)
        if cfg.attn_proj:
            shapes[p + "proj.kernel"] = (c, c)
            shapes[p + "proj.bias"] = (c,)
        shapes[p + "ln2.gamma"] = (c,)
        shapes[p + "ln2.beta"] = (c,)
        shapes[p + "ffn1.kernel"] = (c, h)
        shapes[p + "ffn1.bias"] = (h,)
        shapes[p + "ffn2.kernel"] = (h, c)
        shapes[p + "ffn2.bias"] = (c,)
        shapes[p + "up.kernel"] = (3, 3, c, c)
        shapes[p + "up.bias"] = (c,)
    if cfg.recon_hidden:
        shapes["recon.conv1.kernel"] = (3, 3, c, c)
        shapes["recon.conv1.bias"] = (c,)
    shapes["recon.conv2.kernel"] = (3, 3, c, cfg.output_channels)
    shapes["recon.conv2.bias"] = (cfg.output_channels,)
    return shapes


def init_weights(cfg: VetConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    """Glorot-uniform kernels, zero biases, unit/zero LayerNorm scale/shift."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".kernel"):
            if len(shape) == 4:
                receptive = shape[0] * shape[1]
                fan_in, fan_out = receptive * shape[2], receptive * shape[3]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        weights[name] = Parameter(name, arr.astype(dtype))
    return weights


def _check_even(shape):
    h, w = shape[1], shape[2]
    if h % 2 or w % 2:
        raise ConfigError(f"spatial dims must be even, got {h}x{w}")


def shallow_extract(x, weights, cfg: VetConfig) -> Tensor:
    x = as_tensor(x)
    _check_even(x.shape)
    out = F.conv2d(x, weights["shallow.conv.kernel"], weights["shallow.conv.bias"], stride=1)
    return F.leaky_relu(out, cfg.leaky_alpha)


def vfe_layer(f_in, weights, index: int, cfg: VetConfig, trace: dict | None = None) -> Tensor:
    """One VFE block.

    ``Y = MSA(proj(LN(down(F)))) + down(F)`` and
    ``out = up(FFN(LN(Y)) + Y)``. When given, ``trace`` receives the token
    count of the attention sequence under ``"tokens"``.
    """
    f_in = as_tensor(f_in)
    _check_even(f_in.shape)
    p = f"vfe{index}."
    w = weights
    n, h, wd, c = f_in.shape
    f_c1 = F.conv2d(f_in, w[p + "down.kernel"], w[p + "down.bias"], stride=2)
    hh, ww = f_c1.shape[1], f_c1.shape[2]
    tokens = hh * ww
    if trace is not None:
        trace.setdefault("tokens", []).append(tokens)

    normed = F.layer_norm(f_c1, w[p + "ln1.gamma"], w[p + "ln1.beta"], cfg.ln_eps)
    q, k, v = (
        F.conv2d(normed, w[p + name + ".kernel"], w[p + name + ".bias"], stride=1).reshape(n, tokens, c)
        for name in "qkv"
    )
    attn = F.multi_head_attention(q, k, v, cfg.heads)
    if cfg.attn_proj:
        attn = F.linear(attn, w[p + "proj.kernel"], w[p + "proj.bias"])
    y = attn + f_c1.reshape(n, tokens, c)

    z = F.layer_norm(y, w[p + "ln2.gamma"], w[p + "ln2.beta"], cfg.ln_eps)
    z = F.ffn(z, w[p + "ffn1.kernel"], w[p + "ffn1.bias"], w[p + "ffn2.kernel"], w[p + "ffn2.bias"]) + y
    z = z.reshape(n, hh, ww, c)
    return F.conv2d_transpose(z, w[p + "up.kernel"], w[p + "up.bias"], stride=2)


def rvfe(f_s, weights, cfg: VetConfig, trace: dict | None = None) -> Tensor:
    """Residual stack: each layer maps ``F`` to ``beta * F + VFE(F)``."""
    f = as_tensor(f_s)
    for i in range(cfg.vfe_layers):
        f = f * cfg.residual_scale + vfe_layer(f, weights, i, cfg, trace)
    return f


def reconstruct(f_s, f_deep, weights, cfg: VetConfig) -> Tensor:
    f_s, f_deep = as_tensor(f_s), as_tensor(f_deep)
    if f_s.shape != f_deep.shape:
        raise ConfigError(f"shallow {f_s.shape} and deep {f_deep.shape} features differ in shape")
    h = f_s + f_deep
    if cfg.recon_hidden:
        h = F.leaky_relu(F.conv2d(h, weights["recon.conv1.kernel"], weights["recon.conv1.bias"]), cfg.leaky_alpha)
    return F.conv2d(h, weights["recon.conv2.kernel"], weights["recon.conv2.bias"])


def vet_forward(x, weights, cfg: VetConfig, clamp: bool = False, trace: dict | None = None) -> Tensor:
    """Structural patch ``[N, H, W, 1]`` to predicted vascular signal ``[N, H, W, 1]``.

    ``clamp`` limits the output to [0, 1] (inference/metrics only; the
    clamp is not differentiable and training uses the raw output).
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != cfg.input_channels:
        raise ConfigError(f"expected input [N, H, W, {cfg.input_channels}], got {x.shape}")
    f_s = shallow_extract(x, weights, cfg)
    out = reconstruct(f_s, rvfe(f_s, weights, cfg, trace), weights, cfg)
    if clamp:
        return Tensor(np.clip(out.data, 0.0, 1.0))
    return out


@dataclass
class FlopsEstimate:
    conv: int
    dense: int
    attention: int

    @property
    def without_attention(self) -> int:
        return self.conv + self.dense

    @property
    def total(self) -> int:
        return self.conv + self.dense + self.attention

    def as_dict(self) -> dict:
        return {
            "conv": self.conv,
            "dense": self.dense,
            "attention": self.attention,
            "without_attention": self.without_attention,
            "total": self.total,
        }


def conv_flops(h_out: int, w_out: int, cin: int, cout: int, k: int = 3) -> int:
    return 2 * h_out * w_out * k * k * cin * cout


def flops_estimate(cfg: VetConfig, h: int, w: int) -> FlopsEstimate:
    """Multiply-accumulate count times two for convs, dense layers and attention matmuls.

    Normalization, softmax, activations and bias adds are not counted.
    Transposed convs are counted like the conv they are the adjoint of.
    """
    if h % 2 or w % 2:
        raise ConfigError("H and W must be even")
    c = cfg.channels
    t = (h // 2) * (w // 2)
    conv = conv_flops(h, w, cfg.input_channels, c)
    dense = 0
    attention = 0
    for _ in range(cfg.vfe_layers):
        conv += conv_flops(h // 2, w // 2, c, c)  # down
        conv += 3 * conv_flops(h // 2, w // 2, c, c)  # q, k, v
        conv += conv_flops(h // 2, w // 2, c, c)  # up, as adjoint of a stride-2 conv
        if cfg.attn_proj:
            dense += 2 * t * c * c
        dense += 2 * t * c * cfg.ffn_hidden * 2
        attention += 2 * 2 * t * t * c  # QK^T and AV summed over heads
    if cfg.recon_hidden:
        conv += conv_flops(h, w, c, c)
    conv += conv_flops(h, w, c, cfg.output_channels)
    return FlopsEstimate(conv, dense, attention)


class VetModel:
    """Config plus named weights, with checkpoint I/O."""

    def __init__(self, cfg: VetConfig, weights: dict[str, Parameter] | None = None, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.weights = weights if weights is not None else init_weights(cfg, seed, dtype)
        expected = weight_shapes(cfg)
        got = {k: tuple(v.shape) for k, v in self.weights.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ConfigError(f"weights do not match config (missing={missing}, extra={extra}, shape={bad})")

    def parameters(self) -> list[Parameter]:
        return list(self.weights.values())

    def __call__(self, x, clamp: bool = False, trace: dict | None = None) -> Tensor:
        return vet_forward(x, self.weights, self.cfg, clamp=clamp, trace=trace)

    def predict(self, patches: np.ndarray, batch: int = 16) -> np.ndarray:
        """Clamped predictions for ``[N, H, W]`` patches, without recording gradients."""
        from .nn.tensor import no_grad

        dtype = next(iter(self.weights.values())).dtype
        outs = []
        with no_grad():
            for s in range(0, len(patches), batch):
                x = np.asarray(patches[s:s + batch], dtype=dtype)[..., None]
                outs.append(self(x, clamp=True).data[..., 0])
        return np.concatenate(outs, axis=0) if outs else np.zeros((0,) + patches.shape[1:], dtype=dtype)

    def save(self, path, extra: dict | None = None) -> None:
        """Write the weight file plus a ``.json`` sidecar holding the config."""
        path = Path(path)
        save_checkpoint(self.weights, path)
        meta = {"model": asdict(self.cfg)}
        if extra:
            meta.update(extra)
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, cfg: VetConfig | None = None) -> VetModel:
        path = Path(path)
        arrays = load_checkpoint(path)
        if cfg is None:
            side = sidecar_path(path)
            cfg = VetConfig.from_dict(json.loads(side.read_text())["model"]) if side.exists() else infer_config(arrays)
        weights = {k: Parameter(k, v) for k, v in arrays.items()}
        return cls(cfg, weights)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def infer_config(arrays: dict[str, np.ndarray], heads: int = 4) -> VetConfig:
    """Rebuild a config from weight names and shapes (heads and beta take defaults)."""
    try:
        k = arrays["shallow.conv.kernel"]
        c = k.shape[3]
        layers = {int(m.group(1)) for name in arrays if (m := re.match(r"vfe(\d+)\.", name))}
        cfg = VetConfig(
            channels=c,
            vfe_layers=len(layers),
            heads=heads if c % heads == 0 else 1,
            ffn_hidden=arrays["vfe0.ffn1.kernel"].shape[1] if layers else 256,
            input_channels=k.shape[2],
            output_channels=arrays["recon.conv2.kernel"].shape[3],
            attn_proj="vfe0.proj.kernel" in arrays if layers else True,
            recon_hidden="recon.conv1.kernel" in arrays,
        )
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks expected parameter {exc}") from None
    cfg.validate()
    return cfg
