"""Model state: residual encoder, projection head, regression heads.

The state holds two copies of the encoder+head parameters: the online copy,
updated by the optimizer, and the momentum copy, updated as an exponential
moving average of the online copy. Each copy owns its batch-norm running
statistics; the momentum copy refreshes its statistics through its own
training-mode forwards rather than by averaging the online buffers.

Regression heads (for the distillation stage) share the projection head
architecture minus the final batch norm; head index 0 predicts the base
teacher, heads 1..K predict the cluster experts.

Parameters live in flat ``{name: ndarray}`` dicts with ``enc.`` and ``head.``
prefixes so optimizers and serializers can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, NumericError

DEFAULT_DTYPE = np.float32


@dataclass(frozen=True)
class EncoderConfig:
    """Small residual convnet: stem conv + one block per stage entry."""

    input_channels: int = 3
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1

    def validate(self) -> None:
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.stem_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("stem_channels and blocks_per_stage must be positive")
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"bad stage_channels {self.stage_channels}")

    @property
    def pooled_dim(self) -> int:
        return int(self.stage_channels[-1])


@dataclass(frozen=True)
class HeadConfig:
    """Two-layer projection MLP; hidden activation feeds the clustering stage."""

    hidden: int = 512
    output: int = 64
    final_norm: bool = True

    def validate(self) -> None:
        if self.hidden < 1 or self.output < 1:
            raise ConfigError("head dims must be positive")


@dataclass
class ModelState:
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    online: dict = field(repr=False)
    online_stats: dict = field(repr=False)
    momentum: dict | None = field(repr=False, default=None)
    momentum_stats: dict | None = field(repr=False, default=None)
    regressors: list | None = field(repr=False, default=None)
    regressor_stats: list | None = field(repr=False, default=None)
    step: int = 0

    @property
    def num_regressors(self) -> int:
        return 0 if self.regressors is None else len(self.regressors)

    @property
    def has_momentum(self) -> bool:
        return self.momentum is not None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def _init_conv(rng, c_in, c_out, k, dtype):
    fan_in = c_in * k * k
    return _normal(rng, (c_out, c_in, k, k), math.sqrt(2.0 / fan_in), dtype)


def _init_bn(params, stats, prefix, channels, dtype):
    params[prefix + ".gamma"] = np.ones(channels, dtype=dtype)
    params[prefix + ".beta"] = np.zeros(channels, dtype=dtype)
    stats[prefix + ".mean"] = np.zeros(channels, dtype=np.float32)
    stats[prefix + ".var"] = np.ones(channels, dtype=np.float32)


def _block_plan(cfg: EncoderConfig):
    """Yield (prefix, c_in, c_out, stride, has_proj) for every residual block."""
    c_in = cfg.stem_channels
    for si, c_out in enumerate(cfg.stage_channels):
        for bi in range(cfg.blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            has_proj = stride != 1 or c_in != c_out
            yield f"enc.s{si}.b{bi}", c_in, int(c_out), stride, has_proj
            c_in = int(c_out)


def _init_encoder(cfg: EncoderConfig, rng, dtype):
    params, stats = {}, {}
    params["enc.stem.conv.w"] = _init_conv(rng, cfg.input_channels, cfg.stem_channels, 3, dtype)
    _init_bn(params, stats, "enc.stem.bn", cfg.stem_channels, dtype)
    for prefix, c_in, c_out, stride, has_proj in _block_plan(cfg):
        params[prefix + ".conv1.w"] = _init_conv(rng, c_in, c_out, 3, dtype)
        _init_bn(params, stats, prefix + ".bn1", c_out, dtype)
        params[prefix + ".conv2.w"] = _init_conv(rng, c_out, c_out, 3, dtype)
        _init_bn(params, stats, prefix + ".bn2", c_out, dtype)
        if has_proj:
            params[prefix + ".proj.w"] = _init_conv(rng, c_in, c_out, 1, dtype)
            _init_bn(params, stats, prefix + ".projbn", c_out, dtype)
    return params, stats


def _init_mlp_head(in_dim, hidden, out_dim, final_norm, rng, dtype, out_scale=1.0):
    # Biases are omitted wherever a batch norm follows; it cancels them.
    params, stats = {}, {}
    params["fc1.w"] = _normal(rng, (in_dim, hidden), math.sqrt(2.0 / in_dim), dtype)
    _init_bn(params, stats, "bn1", hidden, dtype)
    params["fc2.w"] = _normal(rng, (hidden, out_dim), out_scale * math.sqrt(2.0 / hidden), dtype)
    if final_norm:
        _init_bn(params, stats, "bn2", out_dim, dtype)
    else:
        params["fc2.b"] = np.zeros(out_dim, dtype=dtype)
    return params, stats


def init_model(
    encoder_cfg: EncoderConfig | None = None,
    head_cfg: HeadConfig | None = None,
    num_regressors: int = 0,
    rng=None,
    dtype=DEFAULT_DTYPE,
    momentum_copy: bool = True,
) -> ModelState:
    """Fresh model state. ``num_regressors`` counts total regression heads
    (base plus experts); 0 means no distillation heads."""
    from .data import ensure_rng

    encoder_cfg = encoder_cfg or EncoderConfig()
    head_cfg = head_cfg or HeadConfig()
    encoder_cfg.validate()
    head_cfg.validate()
    rng = ensure_rng(rng)
    params, stats = _init_encoder(encoder_cfg, rng, dtype)
    head_params, head_stats = _init_mlp_head(
        encoder_cfg.pooled_dim, head_cfg.hidden, head_cfg.output, head_cfg.final_norm, rng, dtype
    )
    for k, v in head_params.items():
        params["head." + k] = v
    for k, v in head_stats.items():
        stats["head." + k] = v

    regressors, regressor_stats = None, None
    if num_regressors:
        regressors, regressor_stats = [], []
        for _ in range(num_regressors):
            # Regression heads start near zero output: their targets are unit
            # vectors, and a full-scale init makes the first distillation
            # steps swamp the trust-ratio optimizer.
            rp, rs = _init_mlp_head(
                head_cfg.output, head_cfg.hidden, head_cfg.output, False, rng, dtype,
                out_scale=0.1,
            )
            regressors.append(rp)
            regressor_stats.append(rs)

    momentum = {k: v.copy() for k, v in params.items()} if momentum_copy else None
    momentum_stats = {k: v.copy() for k, v in stats.items()} if momentum_copy else None
    return ModelState(
        encoder_cfg=encoder_cfg,
        head_cfg=head_cfg,
        online=params,
        online_stats=stats,
        momentum=momentum,
        momentum_stats=momentum_stats,
        regressors=regressors,
        regressor_stats=regressor_stats,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _bn_fwd(params, stats, prefix, x, training):
    return layers.batchnorm_forward(
        x,
        params[prefix + ".gamma"],
        params[prefix + ".beta"],
        stats[prefix + ".mean"],
        stats[prefix + ".var"],
        training,
    )


def encoder_forward(params, stats, cfg: EncoderConfig, x, training):
    """x: (N, C, H, W) in the parameter dtype. Returns (pooled, cache)."""
    if x.shape[1] != cfg.input_channels:
        raise ConfigError(f"expected {cfg.input_channels} input channels, got {x.shape[1]}")
    caches = []
    out, c_conv = layers.conv2d_forward(x, params["enc.stem.conv.w"], stride=1, pad=1)
    out, c_bn = _bn_fwd(params, stats, "enc.stem.bn", out, training)
    out, c_relu = layers.relu_forward(out)
    caches.append(("stem", c_conv, c_bn, c_relu))
    for prefix, _, _, stride, has_proj in _block_plan(cfg):
        identity = out
        main, c1 = layers.conv2d_forward(out, params[prefix + ".conv1.w"], stride=stride, pad=1)
        main, cb1 = _bn_fwd(params, stats, prefix + ".bn1", main, training)
        main, cr1 = layers.relu_forward(main)
        main, c2 = layers.conv2d_forward(main, params[prefix + ".conv2.w"], stride=1, pad=1)
        main, cb2 = _bn_fwd(params, stats, prefix + ".bn2", main, training)
        if has_proj:
            short, cp = layers.conv2d_forward(identity, params[prefix + ".proj.w"], stride=stride, pad=0)
            short, cpb = _bn_fwd(params, stats, prefix + ".projbn", short, training)
        else:
            short, cp, cpb = identity, None, None
        out, cr2 = layers.relu_forward(main + short)
        caches.append((prefix, c1, cb1, cr1, c2, cb2, cp, cpb, cr2, has_proj))
    pooled, c_pool = layers.global_avg_pool_forward(out)
    caches.append(("pool", c_pool))
    return pooled, caches


def encoder_backward(dpooled, caches):
    grads = {}
    _, c_pool = caches[-1]
    dy = layers.global_avg_pool_backward(dpooled, c_pool)
    for cache in reversed(caches[1:-1]):
        prefix, c1, cb1, cr1, c2, cb2, cp, cpb, cr2, has_proj = cache
        dpre = layers.relu_backward(dy, cr2)
        dmain, dg2, db2 = layers.batchnorm_backward(dpre, cb2)
        grads[prefix + ".bn2.gamma"] = dg2
        grads[prefix + ".bn2.beta"] = db2
        dmain, dw2 = layers.conv2d_backward(dmain, c2)
        grads[prefix + ".conv2.w"] = dw2
        dmain = layers.relu_backward(dmain, cr1)
        dmain, dg1, db1 = layers.batchnorm_backward(dmain, cb1)
        grads[prefix + ".bn1.gamma"] = dg1
        grads[prefix + ".bn1.beta"] = db1
        dx_main, dw1 = layers.conv2d_backward(dmain, c1)
        grads[prefix + ".conv1.w"] = dw1
        if has_proj:
            dshort, dgp, dbp = layers.batchnorm_backward(dpre, cpb)
            grads[prefix + ".projbn.gamma"] = dgp
            grads[prefix + ".projbn.beta"] = dbp
            dx_short, dwp = layers.conv2d_backward(dshort, cp)
            grads[prefix + ".proj.w"] = dwp
        else:
            dx_short = dpre
        dy = dx_main + dx_short
    _, c_conv, c_bn, c_relu = caches[0]
    dy = layers.relu_backward(dy, c_relu)
    dy, dg, db = layers.batchnorm_backward(dy, c_bn)
    grads["enc.stem.bn.gamma"] = dg
    grads["enc.stem.bn.beta"] = db
    _, dw = layers.conv2d_backward(dy, c_conv)
    grads["enc.stem.conv.w"] = dw
    return grads


def mlp_head_forward(params, stats, z_in, training, final_norm):
    """Two-layer MLP; returns (hidden, out, cache). ``hidden`` is the
    post-norm, post-relu activation of the first layer."""
    h, c_fc1 = layers.linear_forward(z_in, params["fc1.w"])
    h, c_bn1 = _bn_fwd(params, stats, "bn1", h, training)
    hidden, c_relu = layers.relu_forward(h)
    out, c_fc2 = layers.linear_forward(hidden, params["fc2.w"], params.get("fc2.b"))
    c_bn2 = None
    if final_norm:
        out, c_bn2 = _bn_fwd(params, stats, "bn2", out, training)
    return hidden, out, (c_fc1, c_bn1, c_relu, c_fc2, c_bn2, final_norm)


def mlp_head_backward(dout, cache):
    c_fc1, c_bn1, c_relu, c_fc2, c_bn2, final_norm = cache
    grads = {}
    if final_norm:
        dout, dg2, db2 = layers.batchnorm_backward(dout, c_bn2)
        grads["bn2.gamma"] = dg2
        grads["bn2.beta"] = db2
    dhidden, dw2, dbias2 = layers.linear_backward(dout, c_fc2)
    grads["fc2.w"] = dw2
    if dbias2 is not None:
        grads["fc2.b"] = dbias2
    dh = layers.relu_backward(dhidden, c_relu)
    dh, dg1, db1 = layers.batchnorm_backward(dh, c_bn1)
    grads["bn1.gamma"] = dg1
    grads["bn1.beta"] = db1
    dz, dw1, _ = layers.linear_backward(dh, c_fc1)
    grads["fc1.w"] = dw1
    return grads, dz


def _sub(d: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in d.items() if k.startswith(prefix)}


def network_forward(params, stats, enc_cfg, head_cfg, x, training):
    """Full encoder + projection forward. Returns (z, hidden, pooled, cache)."""
    pooled, enc_cache = encoder_forward(params, stats, enc_cfg, x, training)
    hidden, z, head_cache = mlp_head_forward(
        _sub(params, "head."), _sub(stats, "head."), pooled, training, head_cfg.final_norm
    )
    return z, hidden, pooled, (enc_cache, head_cache)


def network_backward(dz, cache):
    enc_cache, head_cache = cache
    head_grads, dpooled = mlp_head_backward(dz, head_cache)
    grads = encoder_backward(dpooled, enc_cache)
    for k, v in head_grads.items():
        grads["head." + k] = v
    return grads


# ---------------------------------------------------------------------------
# User-facing ops
# ---------------------------------------------------------------------------


def _select_network(state: ModelState, network: str):
    if network == "online":
        return state.online, state.online_stats
    if network == "momentum":
        if state.momentum is None:
            raise ConfigError("model has no momentum copy")
        return state.momentum, state.momentum_stats
    raise ConfigError(f"unknown network {network!r}")


def images_to_batch(images, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Stack (H, W, C) images into an NCHW batch of the model dtype."""
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigError(f"expected images of rank 3 or 4, got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2)).astype(dtype)


def encode(state: ModelState, images, network: str = "online", batch_size: int = 256) -> np.ndarray:
    """Pooled encoder features in eval mode, batched to bound memory."""
    params, stats = _select_network(state, network)
    outs = []
    batch = images_to_batch(images, dtype=params["enc.stem.conv.w"].dtype)
    for i in range(0, len(batch), batch_size):
        pooled, _ = encoder_forward(params, stats, state.encoder_cfg, batch[i : i + batch_size], False)
        outs.append(pooled)
    return np.concatenate(outs, axis=0)


def project(state: ModelState, images, network: str = "online", batch_size: int = 256):
    """Eval-mode forward through encoder and head. Returns (hidden, z)."""
    params, stats = _select_network(state, network)
    hiddens, zs = [], []
    batch = images_to_batch(images, dtype=params["enc.stem.conv.w"].dtype)
    for i in range(0, len(batch), batch_size):
        z, hidden, _, _ = network_forward(
            params, stats, state.encoder_cfg, state.head_cfg, batch[i : i + batch_size], False
        )
        hiddens.append(hidden)
        zs.append(z)
    return np.concatenate(hiddens, axis=0), np.concatenate(zs, axis=0)


def regress(state: ModelState, head, z, training: bool = False) -> np.ndarray:
    """Apply regression head ``head`` ("base" or expert index 1..K) to ``z``."""
    idx = 0 if head == "base" else int(head)
    if state.regressors is None:
        raise ConfigError("model has no regression heads")
    if not 0 <= idx < len(state.regressors):
        raise ConfigError(f"regressor index {idx} outside [0, {len(state.regressors)})")
    _, out, _ = mlp_head_forward(
        state.regressors[idx], state.regressor_stats[idx], z, training, False
    )
    return out


def tau_schedule(step: int, total_steps: int, tau_base: float = 0.996) -> float:
    """Momentum coefficient ramp: tau_base at step 0, 1.0 at the final step."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= tau_base <= 1.0:
        raise ConfigError(f"tau_base must be in [0, 1], got {tau_base}")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def ema_update(state: ModelState, tau: float) -> ModelState:
    """Momentum parameters <- tau * momentum + (1 - tau) * online, in place.

    Running statistics are not averaged; the momentum copy refreshes its own
    during its training-mode forwards.
    """
    if state.momentum is None:
        raise ConfigError("ema_update requires a momentum copy")
    if not 0.0 <= tau <= 1.0:
        raise NumericError(f"tau must be in [0, 1], got {tau}")
    for k, target in state.momentum.items():
        target *= tau
        target += (1.0 - tau) * state.online[k]
    return state


def copy_params(src: dict) -> dict:
    return {k: v.copy() for k, v in src.items()}


# ---------------------------------------------------------------------------
# Serialization and cost accounting
# ---------------------------------------------------------------------------


def state_to_arrays(state: ModelState) -> dict:
    arrays = {"step": np.asarray(state.step, dtype=np.int64)}
    for k, v in state.online.items():
        arrays["online/" + k] = v
    for k, v in state.online_stats.items():
        arrays["online_stats/" + k] = v
    if state.momentum is not None:
        for k, v in state.momentum.items():
            arrays["momentum/" + k] = v
        for k, v in state.momentum_stats.items():
            arrays["momentum_stats/" + k] = v
    if state.regressors is not None:
        for i, (rp, rs) in enumerate(zip(state.regressors, state.regressor_stats)):
            for k, v in rp.items():
                arrays[f"regressor/{i}/{k}"] = v
            for k, v in rs.items():
                arrays[f"regressor_stats/{i}/{k}"] = v
    return arrays


def state_from_arrays(arrays: dict, encoder_cfg: EncoderConfig, head_cfg: HeadConfig) -> ModelState:
    online = _sub(arrays, "online/")
    online_stats = _sub(arrays, "online_stats/")
    momentum = _sub(arrays, "momentum/") or None
    momentum_stats = _sub(arrays, "momentum_stats/") or None
    reg_entries = _sub(arrays, "regressor/")
    regressors = regressor_stats = None
    if reg_entries:
        count = 1 + max(int(k.split("/", 1)[0]) for k in reg_entries)
        regressors = [_sub(reg_entries, f"{i}/") for i in range(count)]
        stat_entries = _sub(arrays, "regressor_stats/")
        regressor_stats = [_sub(stat_entries, f"{i}/") for i in range(count)]
    return ModelState(
        encoder_cfg=encoder_cfg,
        head_cfg=head_cfg,
        online=online,
        online_stats=online_stats,
        momentum=momentum,
        momentum_stats=momentum_stats,
        regressors=regressors,
        regressor_stats=regressor_stats,
        step=int(arrays["step"]),
    )


def forward_flops(
    encoder_cfg: EncoderConfig,
    head_cfg: HeadConfig,
    image_hw,
    flops_per_mac: float = 2.0,
    include_head: bool = True,
) -> float:
    """Per-image forward cost of the encoder (and optionally the head).

    Counts multiply-accumulates in conv and dense layers scaled by
    ``flops_per_mac``; normalization and elementwise ops are ignored. The
    convention knobs are explicit because published totals differ in them.
    """
    h, w = image_hw
    total = encoder_cfg.input_channels * 9 * encoder_cfg.stem_channels * h * w
    for _, c_in, c_out, stride, has_proj in _block_plan(encoder_cfg):
        h_out, w_out = (h + stride - 1) // stride, (w + stride - 1) // stride
        total += c_in * 9 * c_out * h_out * w_out
        total += c_out * 9 * c_out * h_out * w_out
        if has_proj:
            total += c_in * c_out * h_out * w_out
        h, w = h_out, w_out
    if include_head:
        total += encoder_cfg.pooled_dim * head_cfg.hidden
        total += head_cfg.hidden * head_cfg.output
    return float(total) * flops_per_mac
