"""Hierarchical MIL network with hand-written reverse-mode gradients.

Forward graph for one bag ``X`` (N_p x D)::

    h_k   = relu(W x_k + b)                      patch embedding, R^H
    a     = softmax_k( w . (tanh(V h_k + b_V) * sigmoid(U h_k + b_U)) )
    s     = sum_k a_k h_k                        (max / mean variants)
    v_c, v_f = s[:S], s[S:]
    v_c' = [v_c, sg(v_f)],  v_f' = [v_f, sg(v_c)]   (per integration mode)
    f_l  = reshape(P_l v_l' + p_l, N_l x P)
    o_l[i] = c_l[i] . f_l[i] + d_l[i]

``sg`` is identity forward and blocks the gradient backward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

INTEGRATION_MODES = ("none", "fine_to_coarse", "coarse_to_fine", "bidirectional")
AGGREGATORS = ("attention", "max", "mean")

CKPT_MAGIC = b"HCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    n_coarse: int
    n_fine: int
    hidden: int = 512
    split: int = 256
    proj: int = 256
    attn: int = 256
    integration: str = "bidirectional"
    aggregator: str = "attention"

    def __post_init__(self):
        for name in ("dim", "n_coarse", "n_fine", "hidden", "split", "proj", "attn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden != 2 * self.split:
            raise ValueError(f"hidden ({self.hidden}) must equal 2 * split ({self.split})")
        if self.integration not in INTEGRATION_MODES:
            raise ValueError(f"integration must be one of {INTEGRATION_MODES}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")

    @property
    def coarse_augmented(self) -> bool:
        return self.integration in ("bidirectional", "fine_to_coarse")

    @property
    def fine_augmented(self) -> bool:
        return self.integration in ("bidirectional", "coarse_to_fine")

    @property
    def coarse_in(self) -> int:
        return 2 * self.split if self.coarse_augmented else self.split

    @property
    def fine_in(self) -> int:
        return 2 * self.split if self.fine_augmented else self.split

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in checkpoint order."""
    c = config
    shapes = {
        "patch_W": (c.hidden, c.dim),
        "patch_b": (c.hidden,),
    }
    if c.aggregator == "attention":
        shapes.update(
            attn_V=(c.attn, c.hidden),
            attn_bV=(c.attn,),
            attn_U=(c.attn, c.hidden),
            attn_bU=(c.attn,),
            attn_w=(c.attn,),
        )
    shapes.update(
        proj_c_W=(c.n_coarse * c.proj, c.coarse_in),
        proj_c_b=(c.n_coarse * c.proj,),
        proj_f_W=(c.n_fine * c.proj, c.fine_in),
        proj_f_b=(c.n_fine * c.proj,),
        cls_c_W=(c.n_coarse, c.proj),
        cls_c_b=(c.n_coarse,),
        cls_f_W=(c.n_fine, c.proj),
        cls_f_b=(c.n_fine,),
    )
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2 or name == "attn_w":
            fan_in = shape[-1]
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        raise ValueError(f"parameter names {sorted(params)} do not match config {sorted(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite values")


def flatten_params(params: dict[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    return np.concatenate([params[name].ravel() for name in param_shapes(config)])


def unflatten_params(flat: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape in param_shapes(config).items():
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, config needs {offset}")
    return out


@dataclass
class ForwardTrace:
    x: np.ndarray
    z: np.ndarray  # pre-relu patch embedding
    h: np.ndarray
    gate_tanh: np.ndarray | None
    gate_sigm: np.ndarray | None
    attn_logits: np.ndarray | None
    attn_weights: np.ndarray | None
    max_index: np.ndarray | None
    slide: np.ndarray
    v_c: np.ndarray
    v_f: np.ndarray
    v_c_aug: np.ndarray
    v_f_aug: np.ndarray
    f_c: np.ndarray
    f_f: np.ndarray
    o_c: np.ndarray
    o_f: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attention_pool(features, params, config: ModelConfig):
    """Pool a bag into one slide vector; returns ``(slide, weights)``.

    ``weights`` are the attention weights for the attention aggregator, or
    the effective per-patch weights of the mean aggregator. For max pooling
    they are ``None``.
    """
    slide, weights, _ = _pool(features, params, config)
    return slide, weights


def _pool(features, params, config: ModelConfig):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.dim:
        raise ValueError(f"bag features have shape {x.shape}, expected (N_p, {config.dim})")
    if x.shape[0] < 1:
        raise ValueError("bag has no patches")
    z = x @ params["patch_W"].T + params["patch_b"]
    h = np.maximum(z, 0.0)
    cache = {"x": x, "z": z, "h": h, "gate_tanh": None, "gate_sigm": None,
             "attn_logits": None, "attn_weights": None, "max_index": None}
    if config.aggregator == "attention":
        t = np.tanh(h @ params["attn_V"].T + params["attn_bV"])
        g = _sigmoid(h @ params["attn_U"].T + params["attn_bU"])
        logits = (t * g) @ params["attn_w"]
        e = np.exp(logits - logits.max())
        a = e / e.sum()
        slide = a @ h
        cache.update(gate_tanh=t, gate_sigm=g, attn_logits=logits, attn_weights=a)
        return slide, a, cache
    if config.aggregator == "mean":
        a = np.full(x.shape[0], 1.0 / x.shape[0])
        slide = h.mean(axis=0)
        cache.update(attn_weights=a)
        return slide, a, cache
    idx = np.argmax(h, axis=0)
    slide = h[idx, np.arange(h.shape[1])]
    cache.update(max_index=idx)
    return slide, None, cache


def integrate(v_c, v_f, mode: str):
    """Concatenate each branch with the other (values only; gating is a backward concern)."""
    v_c = np.asarray(v_c, dtype=np.float64)
    v_f = np.asarray(v_f, dtype=np.float64)
    if v_c.shape != v_f.shape or v_c.ndim != 1:
        raise ValueError(f"branch shapes differ: {v_c.shape} vs {v_f.shape}")
    if mode not in INTEGRATION_MODES:
        raise ValueError(f"unknown integration mode {mode!r}")
    v_c_aug = np.concatenate([v_c, v_f]) if mode in ("bidirectional", "fine_to_coarse") else v_c.copy()
    v_f_aug = np.concatenate([v_f, v_c]) if mode in ("bidirectional", "coarse_to_fine") else v_f.copy()
    return v_c_aug, v_f_aug


def project_and_classify(v_c_aug, v_f_aug, params, config: ModelConfig):
    if v_c_aug.shape != (config.coarse_in,) or v_f_aug.shape != (config.fine_in,):
        raise ValueError(
            f"head inputs {v_c_aug.shape}/{v_f_aug.shape}, expected "
            f"({config.coarse_in},)/({config.fine_in},)"
        )
    f_c = (params["proj_c_W"] @ v_c_aug + params["proj_c_b"]).reshape(config.n_coarse, config.proj)
    f_f = (params["proj_f_W"] @ v_f_aug + params["proj_f_b"]).reshape(config.n_fine, config.proj)
    o_c = np.einsum("ij,ij->i", f_c, params["cls_c_W"]) + params["cls_c_b"]
    o_f = np.einsum("ij,ij->i", f_f, params["cls_f_W"]) + params["cls_f_b"]
    return f_c, f_f, o_c, o_f


def forward(features, params, config: ModelConfig, frozen_cross=None) -> ForwardTrace:
    """Run the full graph on one bag.

    ``frozen_cross=(v_c0, v_f0)`` substitutes constants for the copies that
    cross the gate, which turns the gate into a true constant. Differencing
    that function gives exactly what the gated backward pass computes.
    """
    slide, _, cache = _pool(features, params, config)
    s = config.split
    v_c, v_f = slide[:s], slide[s:]
    v_c_aug, v_f_aug = integrate(v_c, v_f, config.integration)
    if frozen_cross is not None:
        v_c0, v_f0 = frozen_cross
        if config.coarse_augmented:
            v_c_aug[s:] = v_f0
        if config.fine_augmented:
            v_f_aug[s:] = v_c0
    f_c, f_f, o_c, o_f = project_and_classify(v_c_aug, v_f_aug, params, config)
    return ForwardTrace(
        slide=slide, v_c=v_c, v_f=v_f, v_c_aug=v_c_aug, v_f_aug=v_f_aug,
        f_c=f_c, f_f=f_f, o_c=o_c, o_f=o_f, **cache,
    )


def _seed(value, shape, name):
    if value is None:
        return np.zeros(shape)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != shape:
        raise ValueError(f"seed gradient {name} has shape {value.shape}, expected {shape}")
    if not np.all(np.isfinite(value)):
        raise ValueError(f"seed gradient {name} is not finite")
    return value


def backward(
    trace: ForwardTrace,
    params: dict[str, np.ndarray],
    config: ModelConfig,
    d_o_c=None,
    d_o_f=None,
    d_f_c=None,
    d_f_f=None,
    *,
    stop_gradient: bool = True,
    return_nodes: bool = False,
):
    """Exact reverse pass from seed gradients on logits and per-class features.

    With ``stop_gradient=False`` the cross-branch copies pass gradient like a
    plain concatenation; that variant exists for checking the gate against
    finite differences of the full value function.

    Returns the parameter-gradient dict, or ``(grads, nodes)`` when
    ``return_nodes`` is set; ``nodes`` holds gradients w.r.t. the slide vector
    and both branch vectors.
    """
    c = config
    d_o_c = _seed(d_o_c, trace.o_c.shape, "d_o_c")
    d_o_f = _seed(d_o_f, trace.o_f.shape, "d_o_f")
    d_f_c = _seed(d_f_c, trace.f_c.shape, "d_f_c")
    d_f_f = _seed(d_f_f, trace.f_f.shape, "d_f_f")
    grads: dict[str, np.ndarray] = {}

    grads["cls_c_W"] = d_o_c[:, None] * trace.f_c
    grads["cls_c_b"] = d_o_c.copy()
    grads["cls_f_W"] = d_o_f[:, None] * trace.f_f
    grads["cls_f_b"] = d_o_f.copy()
    g_fc = (d_f_c + d_o_c[:, None] * params["cls_c_W"]).ravel()
    g_ff = (d_f_f + d_o_f[:, None] * params["cls_f_W"]).ravel()

    grads["proj_c_W"] = np.outer(g_fc, trace.v_c_aug)
    grads["proj_c_b"] = g_fc
    grads["proj_f_W"] = np.outer(g_ff, trace.v_f_aug)
    grads["proj_f_b"] = g_ff
    g_vc_aug = params["proj_c_W"].T @ g_fc
    g_vf_aug = params["proj_f_W"].T @ g_ff

    s = c.split
    g_vc = g_vc_aug[:s].copy()
    g_vf = g_vf_aug[:s].copy()
    if not stop_gradient:
        if c.coarse_augmented:
            g_vf += g_vc_aug[s:]
        if c.fine_augmented:
            g_vc += g_vf_aug[s:]
    g_slide = np.concatenate([g_vc, g_vf])

    if c.aggregator == "attention":
        a, h = trace.attn_weights, trace.h
        g_h = a[:, None] * g_slide[None, :]
        g_a = h @ g_slide
        g_logits = a * (g_a - a @ g_a)
        t, g = trace.gate_tanh, trace.gate_sigm
        grads["attn_w"] = (t * g).T @ g_logits
        g_gate = g_logits[:, None] * params["attn_w"][None, :]
        g_pre_t = g_gate * g * (1.0 - t * t)
        g_pre_g = g_gate * t * g * (1.0 - g)
        grads["attn_V"] = g_pre_t.T @ h
        grads["attn_bV"] = g_pre_t.sum(axis=0)
        grads["attn_U"] = g_pre_g.T @ h
        grads["attn_bU"] = g_pre_g.sum(axis=0)
        g_h += g_pre_t @ params["attn_V"] + g_pre_g @ params["attn_U"]
    elif c.aggregator == "mean":
        n = trace.h.shape[0]
        g_h = np.broadcast_to(g_slide / n, trace.h.shape).copy()
    else:
        g_h = np.zeros_like(trace.h)
        g_h[trace.max_index, np.arange(trace.h.shape[1])] = g_slide

    g_z = g_h * (trace.z > 0)
    grads["patch_W"] = g_z.T @ trace.x
    grads["patch_b"] = g_z.sum(axis=0)

    ordered = {name: grads[name] for name in param_shapes(c)}
    if return_nodes:
        return ordered, {"slide": g_slide, "v_c": g_vc, "v_f": g_vf,
                         "v_c_aug": g_vc_aug, "v_f_aug": g_vf_aug}
    return ordered


# Checkpoint layout (little-endian): magic b"HCKP", version u32, config
# length u32, UTF-8 JSON of ModelConfig, then every tensor of param_shapes()
# in order as float64.

def encode_checkpoint(params: dict[str, np.ndarray], config: ModelConfig) -> bytes:
    check_params(params, config)
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    body = flatten_params(params, config).astype("<f8").tobytes()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg + body


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], ModelConfig]:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_end = 12 + cfg_len
    if len(data) < cfg_end:
        raise CheckpointError("truncated checkpoint config")
    try:
        config = ModelConfig.from_dict(json.loads(data[12:cfg_end].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc
    n = sum(int(np.prod(s)) for s in param_shapes(config).values())
    if len(data) - cfg_end != 8 * n:
        raise CheckpointError(
            f"checkpoint payload has {len(data) - cfg_end} bytes, expected {8 * n}"
        )
    flat = np.frombuffer(data, dtype="<f8", offset=cfg_end).astype(np.float64)
    params = unflatten_params(flat, config)
    check_params(params, config)
    return params, config


def save_checkpoint(path, params, config: ModelConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    return decode_checkpoint(Path(path).read_bytes())
