"""MotionScaleNet: token/channel-mixing MLP producing positive noise diagonals.

Each scalar input (ego speed and object sizes) becomes its own token through a
per-token affine embedding into ``C`` channels.  ``L`` residual blocks follow,
alternating token mixing (odd blocks) and channel mixing (even blocks), each
with a pre-LayerNorm.  The flattened tokens feed three regression heads whose
softplus outputs are the diagonals of Q, R and the posterior P.

Forward and backward are written out by hand over batched numpy arrays.
"""
from collections import OrderedDict
from dataclasses import dataclass
import math
import struct

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeMismatchError

HEAD_NAMES = ("q", "r", "p")
LN_EPS = 1e-5
SOFTPLUS_EPS = 1e-6
_GELU_K = math.sqrt(2.0 / math.pi)
_MAGIC = b"MSN1"


@dataclass(frozen=True)
class MSNetConfig:
    n_tokens: int = 3
    channels: int = 64
    layers: int = 6
    token_hidden: int = 8
    channel_hidden: int = 128
    head_hidden: int = 48
    q_dim: int = 8
    r_dim: int = 4
    p_dim: int = 8
    shared_backbone: bool = True

    def __post_init__(self):
        if self.n_tokens not in (3, 4):
            raise ConfigurationError("n_tokens must be 3 (2D) or 4 (3D)")
        if self.layers <= 0 or self.layers % 2:
            raise ConfigurationError("layers must be a positive even number")
        for name in ("channels", "token_hidden", "channel_hidden", "head_hidden", "q_dim", "r_dim", "p_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def for_state_dim(cls, dim, **kw):
        if dim == 8:
            return cls(n_tokens=3, q_dim=8, r_dim=4, p_dim=8, **kw)
        if dim == 12:
            return cls(n_tokens=4, q_dim=12, r_dim=6, p_dim=12, **kw)
        raise ConfigurationError(f"unsupported state dim {dim}")

    @property
    def state_dim(self):
        return self.q_dim

    @property
    def head_dims(self):
        return {"q": self.q_dim, "r": self.r_dim, "p": self.p_dim}

    @property
    def n_backbones(self):
        return 1 if self.shared_backbone else 3


def default_scales(n_tokens):
    """Normalization constants: ``(v_scale, size_scale, out_scale)``.

    Speed is divided by 100 km/h.  Sizes are divided by 100 px (2D) or 10 m
    (3D).  Head outputs are multiplied by ``out_scale`` (px^2 or m^2) so a
    unit softplus output is a 10 px / 1 m standard deviation.
    """
    if n_tokens == 3:
        return 100.0, 100.0, 100.0
    return 100.0, 10.0, 1.0


def head_backbone(config, head):
    return 0 if config.shared_backbone else HEAD_NAMES.index(head)


def param_shapes(config):
    """Ordered ``name -> shape``; this order is the checkpoint traversal order."""
    T, C = config.n_tokens, config.channels
    shapes = OrderedDict()
    for b in range(config.n_backbones):
        shapes[f"bb{b}.embed.weight"] = (T, C)
        shapes[f"bb{b}.embed.bias"] = (T, C)
        for layer in range(1, config.layers + 1):
            pre = f"bb{b}.layer{layer}"
            shapes[pre + ".ln.scale"] = (C,)
            shapes[pre + ".ln.shift"] = (C,)
            if layer % 2:
                width, hidden = T, config.token_hidden
            else:
                width, hidden = C, config.channel_hidden
            shapes[pre + ".fc1.weight"] = (width, hidden)
            shapes[pre + ".fc1.bias"] = (hidden,)
            shapes[pre + ".fc2.weight"] = (hidden, width)
            shapes[pre + ".fc2.bias"] = (width,)
    for head in HEAD_NAMES:
        out = config.head_dims[head]
        shapes[f"head.{head}.fc1.weight"] = (T * C, config.head_hidden)
        shapes[f"head.{head}.fc1.bias"] = (config.head_hidden,)
        shapes[f"head.{head}.fc2.weight"] = (config.head_hidden, out)
        shapes[f"head.{head}.fc2.bias"] = (out,)
    return shapes


def param_count(config):
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def is_decay_exempt(name):
    """LayerNorm parameters and biases get no weight decay."""
    return ".ln." in name or name.endswith(".bias")


class MSNetParams:
    """Weights plus the normalization constants they were trained with."""

    def __init__(self, config, arrays, scales=None):
        self.config = config
        self.arrays = arrays
        self.scales = tuple(float(s) for s in (default_scales(config.n_tokens) if scales is None else scales))

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        arrays = OrderedDict()
        i = 0
        for name, a in self.arrays.items():
            n = a.size
            arrays[name] = vec[i : i + n].reshape(a.shape).copy()
            i += n
        if i != vec.size:
            raise ShapeMismatchError(f"flat vector has {vec.size} entries, expected {i}")
        return MSNetParams(self.config, arrays, self.scales)

    def copy(self):
        return MSNetParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()), self.scales)

    def count(self):
        return int(sum(a.size for a in self.arrays.values()))


def init_params(config, seed=0):
    """Fan-in scaled uniform init; LayerNorm starts as identity."""
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".ln.scale"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".ln.shift"):
            arrays[name] = np.zeros(shape)
        elif ".embed." in name:
            arrays[name] = rng.uniform(-1.0, 1.0, size=shape)
        else:
            fan_in = shape[0] if name.endswith(".weight") else _fan_in_of_bias(config, name)
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return MSNetParams(config, arrays)


def _fan_in_of_bias(config, name):
    return param_shapes(config)[name.replace(".bias", ".weight")][0]


# -- elementwise helpers ------------------------------------------------------

def _gelu(x):
    t = np.tanh(_GELU_K * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ForwardTape:
    """Activations recorded by :func:`forward` for :func:`backward`."""

    def __init__(self, params, inputs, heads):
        self.params = params
        self.inputs = inputs
        self.heads = heads
        self.backbones = {}
        self.head_cache = {}
        self.outputs = None

    def replay(self):
        return forward(self.params, self.inputs, heads=self.heads)


def _layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * scale + shift, (xhat, rstd)


def _layer_norm_back(g, cache, scale):
    xhat, rstd = cache
    g_scale = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    g_shift = g.reshape(-1, xhat.shape[-1]).sum(axis=0)
    gx_hat = g * scale
    n = xhat.shape[-1]
    gx = rstd / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return gx, g_scale, g_shift


def _backbone_forward(params, b, u, cache):
    cfg = params.config
    pre = f"bb{b}"
    x = u[:, :, None] * params[pre + ".embed.weight"] + params[pre + ".embed.bias"]
    for layer in range(1, cfg.layers + 1):
        lp = f"{pre}.layer{layer}"
        y, ln_cache = _layer_norm(x, params[lp + ".ln.scale"], params[lp + ".ln.shift"])
        token = layer % 2 == 1
        if token:
            y = y.swapaxes(1, 2)  # (B, C, T)
        h = y @ params[lp + ".fc1.weight"] + params[lp + ".fc1.bias"]
        a, t = _gelu(h)
        o = a @ params[lp + ".fc2.weight"] + params[lp + ".fc2.bias"]
        if token:
            o = o.swapaxes(1, 2)
        if cache is not None:
            cache.append((ln_cache, y, h, t, a))
        x = x + o
    return x


def _backbone_backward(params, b, u, cache, gx, grads):
    cfg = params.config
    pre = f"bb{b}"
    for layer in range(cfg.layers, 0, -1):
        lp = f"{pre}.layer{layer}"
        ln_cache, y, h, t, a = cache[layer - 1]
        token = layer % 2 == 1
        go = gx.swapaxes(1, 2) if token else gx
        W2 = params[lp + ".fc2.weight"]
        _acc(grads, lp + ".fc2.weight", _outer_sum(a, go))
        _acc(grads, lp + ".fc2.bias", go.reshape(-1, go.shape[-1]).sum(axis=0))
        ga = go @ W2.T
        gh = ga * _gelu_grad(h, t)
        W1 = params[lp + ".fc1.weight"]
        _acc(grads, lp + ".fc1.weight", _outer_sum(y, gh))
        _acc(grads, lp + ".fc1.bias", gh.reshape(-1, gh.shape[-1]).sum(axis=0))
        gy = gh @ W1.T
        if token:
            gy = gy.swapaxes(1, 2)
        gxl, gs, gsh = _layer_norm_back(gy, ln_cache, params[lp + ".ln.scale"])
        _acc(grads, lp + ".ln.scale", gs)
        _acc(grads, lp + ".ln.shift", gsh)
        gx = gx + gxl
    _acc(grads, pre + ".embed.weight", (gx * u[:, :, None]).sum(axis=0))
    _acc(grads, pre + ".embed.bias", gx.sum(axis=0))
    gu = (gx * params[pre + ".embed.weight"]).sum(axis=-1)
    return gu


def _outer_sum(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def forward(params, inputs, tape=None, heads=HEAD_NAMES):
    """Evaluate the network on a batch.

    Args:
        params: :class:`MSNetParams`.
        inputs: (B, n_tokens) or (n_tokens,) raw ``[v_kmh, w, h(, l)]``.
        tape: optional :class:`ForwardTape` to record activations into; use
            :func:`record` to create one.
        heads: subset of ``("q", "r", "p")`` to evaluate.

    Returns:
        dict ``head -> (B, dim)`` positive array (1-D if ``inputs`` was 1-D).
    """
    cfg = params.config
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != cfg.n_tokens:
        raise ShapeMismatchError(f"expected {cfg.n_tokens} inputs per row, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite MSNet input")
    v_scale, size_scale, out_scale = params.scales
    norm = np.array([v_scale] + [size_scale] * (cfg.n_tokens - 1))
    u = x / norm
    needed = sorted({head_backbone(cfg, h) for h in heads})
    feats = {}
    for b in needed:
        cache = [] if tape is not None else None
        feats[b] = _backbone_forward(params, b, u, cache)
        if tape is not None:
            tape.backbones[b] = cache
    out = {}
    for head in heads:
        hp = f"head.{head}"
        flat = feats[head_backbone(cfg, head)].reshape(len(u), -1)
        h = flat @ params[hp + ".fc1.weight"] + params[hp + ".fc1.bias"]
        a, t = _gelu(h)
        o = a @ params[hp + ".fc2.weight"] + params[hp + ".fc2.bias"]
        y = out_scale * (np.logaddexp(0.0, o) + SOFTPLUS_EPS)
        if tape is not None:
            tape.head_cache[head] = (flat, h, t, a, o)
        out[head] = y[0] if single else y
    if tape is not None:
        tape.u = u
        tape.norm = norm
        tape.single = single
        tape.outputs = out
    return out


def record(params, inputs, heads=HEAD_NAMES):
    """Run :func:`forward` with a fresh tape; returns ``(outputs, tape)``."""
    tape = ForwardTape(params, inputs, tuple(heads))
    return forward(params, inputs, tape=tape, heads=heads), tape


def backward(tape, grad_outputs):
    """Reverse pass through a recorded forward.

    Args:
        tape: the :class:`ForwardTape` filled by :func:`forward`.
        grad_outputs: dict ``head -> dL/d(output)`` with the output's shape;
            missing heads are treated as zero.

    Returns:
        ``(grad_params, grad_inputs)`` where ``grad_params`` is an ordered dict
        matching ``params.arrays`` and ``grad_inputs`` has the input's shape.
    """
    params = tape.params
    cfg = params.config
    out_scale = params.scales[2]
    grads = {}
    g_feats = {}
    B = tape.u.shape[0]
    for head, g in grad_outputs.items():
        if head not in tape.head_cache:
            raise ShapeMismatchError(f"head {head!r} was not recorded")
        g = np.asarray(g, dtype=np.float64)
        if tape.single:
            g = g[None, :]
        flat, h, t, a, o = tape.head_cache[head]
        if g.shape != o.shape:
            raise ShapeMismatchError(f"grad for head {head!r} has shape {g.shape}, expected {o.shape}")
        hp = f"head.{head}"
        go = g * out_scale * _sigmoid(o)
        _acc(grads, hp + ".fc2.weight", a.T @ go)
        _acc(grads, hp + ".fc2.bias", go.sum(axis=0))
        gh = (go @ params[hp + ".fc2.weight"].T) * _gelu_grad(h, t)
        _acc(grads, hp + ".fc1.weight", flat.T @ gh)
        _acc(grads, hp + ".fc1.bias", gh.sum(axis=0))
        gflat = gh @ params[hp + ".fc1.weight"].T
        b = head_backbone(cfg, head)
        g_feats[b] = g_feats.get(b, 0.0) + gflat.reshape(B, cfg.n_tokens, cfg.channels)
    gu = np.zeros_like(tape.u)
    for b, gx in g_feats.items():
        gu += _backbone_backward(params, b, tape.u, tape.backbones[b], gx, grads)
    grad_params = OrderedDict((name, grads.get(name, np.zeros_like(arr))) for name, arr in params.arrays.items())
    grad_inputs = gu / tape.norm
    if tape.single:
        grad_inputs = grad_inputs[0]
    return grad_params, grad_inputs


def flatten_grads(grad_params):
    return np.concatenate([g.ravel() for g in grad_params.values()])


# -- checkpoint IO -------------------------------------------------------------

_CONFIG_FIELDS = ("n_tokens", "channels", "layers", "token_hidden", "channel_hidden",
                  "head_hidden", "q_dim", "r_dim", "p_dim", "shared_backbone")


def save(params, path):
    """Write the ``MSN1`` checkpoint.

    Layout (little endian): magic ``b"MSN1"``; ten u32 config fields in the
    order of ``_CONFIG_FIELDS``; the f64 parameter array in
    :func:`param_shapes` order; three f64 normalization constants
    ``(v_scale, size_scale, out_scale)``.
    """
    cfg = params.config
    header = _MAGIC + struct.pack("<10I", *(int(getattr(cfg, f)) for f in _CONFIG_FIELDS))
    body = params.flat().astype("<f8").tobytes()
    tail = np.asarray(params.scales, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body + tail)


def load(path, expected_config=None):
    """Read a checkpoint written by :func:`save`.

    Raises:
        ShapeMismatchError: bad magic, truncated/oversized file, or a config
            different from ``expected_config``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 44 or data[:4] != _MAGIC:
        raise ShapeMismatchError(f"{path}: not an MSN1 checkpoint")
    fields = struct.unpack("<10I", data[4:44])
    kw = dict(zip(_CONFIG_FIELDS, fields))
    kw["shared_backbone"] = bool(kw["shared_backbone"])
    try:
        cfg = MSNetConfig(**kw)
    except ConfigurationError as exc:
        raise ShapeMismatchError(f"{path}: invalid config in header ({exc})") from None
    if expected_config is not None and cfg != expected_config:
        raise ShapeMismatchError(f"{path}: checkpoint config {cfg} does not match expected {expected_config}")
    n = param_count(cfg)
    expected_len = 44 + 8 * n + 24
    if len(data) != expected_len:
        raise ShapeMismatchError(f"{path}: expected {expected_len} bytes for this config, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=44).astype(np.float64)
    scales = np.frombuffer(data, dtype="<f8", count=3, offset=44 + 8 * n)
    template = MSNetParams(cfg, OrderedDict((k, np.zeros(s)) for k, s in param_shapes(cfg).items()), scales)
    return template.with_flat(flat)
