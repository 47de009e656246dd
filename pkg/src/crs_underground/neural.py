"""Dense networks with hand-written reverse mode, in float64.

Each hidden layer computes Linear -> LayerNorm -> GELU. Output layers are
plain linear maps. Parameters live in :class:`Layer` objects whose arrays
are updated in place by :func:`adamw_step`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-12
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or inf."""


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x))


def gelu(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t)


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray
    ln_gain: np.ndarray | None = None
    ln_offset: np.ndarray | None = None
    activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.ln_gain is not None:
            out["ln_gain"] = self.ln_gain
            out["ln_offset"] = self.ln_offset
        return out


@dataclass(eq=False)
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer {i} outputs {a.out_dim} but layer {i + 1} takes {b.in_dim}")
        for i, layer in enumerate(self.layers):
            if layer.ln_gain is not None and layer.ln_gain.shape != (layer.out_dim,):
                raise ValueError(f"layer {i} layernorm width mismatch")

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.arrays().items():
                out[f"{prefix}{i}.{name}"] = arr
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(),
                                None if l.ln_gain is None else l.ln_gain.copy(),
                                None if l.ln_offset is None else l.ln_offset.copy(),
                                l.activation) for l in self.layers])


def orthogonal(rng: np.random.Generator, in_dim: int, out_dim: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(in_dim, out_dim), min(in_dim, out_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if in_dim < out_dim:
        q = q.T
    return gain * q[:in_dim, :out_dim]


def init_mlp(rng: np.random.Generator, sizes: list[int], *, layernorm: bool = True,
             hidden_gain: float = math.sqrt(2.0), output_gain: float | None = 1.0) -> MlpParams:
    """Hidden layers get LN + GELU; a final linear layer is added when
    ``output_gain`` is not None (``sizes[-1]`` is then its width)."""
    layers = []
    n_hidden = len(sizes) - 1 - (output_gain is not None)
    for i in range(len(sizes) - 1):
        d_in, d_out = sizes[i], sizes[i + 1]
        if i < n_hidden:
            layers.append(Layer(
                orthogonal(rng, d_in, d_out, hidden_gain), np.zeros(d_out),
                np.ones(d_out) if layernorm else None,
                np.zeros(d_out) if layernorm else None, "gelu"))
        else:
            layers.append(Layer(orthogonal(rng, d_in, d_out, output_gain), np.zeros(d_out)))
    return MlpParams(layers)


def forward(params: MlpParams, x: np.ndarray, keep_cache: bool = True):
    """Returns (output, cache). ``x`` is (batch, in_dim); cache is None when
    ``keep_cache`` is false."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.layers[0].in_dim:
        raise ValueError(f"input shape {x.shape} does not match in-dim {params.layers[0].in_dim}")
    cache = []
    h = x
    for i, layer in enumerate(params.layers):
        entry = {"input": h}
        z = h @ layer.weight + layer.bias
        if layer.ln_gain is not None:
            mu = z.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
            z_hat = (z - mu) * inv_std
            entry["z_hat"], entry["inv_std"] = z_hat, inv_std
            z = z_hat * layer.ln_gain + layer.ln_offset
        if layer.activation == "gelu":
            t = _gelu_tanh(z)
            entry["pre_act"], entry["tanh"] = z, t
            z = gelu(z, t)
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite activations at layer {i}")
        if keep_cache:
            cache.append(entry)
        h = z
    return h, (cache if keep_cache else None)


def backward(params: MlpParams, cache: list[dict], output_grad: np.ndarray):
    """Gradients of a scalar loss given dL/d(output). Returns (grads per layer, dL/dx)."""
    if len(cache) != len(params.layers):
        raise ValueError("cache does not belong to these parameters")
    grads: list[dict[str, np.ndarray]] = [None] * len(params.layers)
    g = np.asarray(output_grad, dtype=float)
    for i in range(len(params.layers) - 1, -1, -1):
        layer, entry = params.layers[i], cache[i]
        if g.shape != (entry["input"].shape[0], layer.out_dim):
            raise ValueError(f"gradient shape {g.shape} does not match layer {i}")
        layer_grads = {}
        if layer.activation == "gelu":
            g = g * gelu_grad(entry["pre_act"], entry["tanh"])
        if layer.ln_gain is not None:
            z_hat = entry["z_hat"]
            layer_grads["ln_gain"] = (g * z_hat).sum(axis=0)
            layer_grads["ln_offset"] = g.sum(axis=0)
            d_hat = g * layer.ln_gain
            g = entry["inv_std"] * (d_hat - d_hat.mean(axis=1, keepdims=True)
                                    - z_hat * (d_hat * z_hat).mean(axis=1, keepdims=True))
        layer_grads["weight"] = entry["input"].T @ g
        layer_grads["bias"] = g.sum(axis=0)
        grads[i] = layer_grads
        g = g @ layer.weight.T
    return grads, g


def named_grads(grads: list[dict], prefix: str = "") -> dict[str, np.ndarray]:
    return {f"{prefix}{i}.{k}": v for i, d in enumerate(grads) for k, v in d.items()}


@dataclass
class AdamWState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, maximize: bool = False) -> None:
    """Decoupled-weight-decay Adam; updates ``params`` arrays in place."""
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if maximize:
            g = -g
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class DiagGaussian:
    """Diagonal Gaussian with state-independent learned log-std."""

    LOG_2PI = math.log(2.0 * math.pi)

    def __init__(self, mean: np.ndarray, log_std: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.raw_log_std = np.asarray(log_std, dtype=float)
        self.log_std = np.clip(self.raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        self.std = np.exp(self.log_std)

    @property
    def clamp_mask(self) -> np.ndarray:
        """1 where log_std is inside its clamp range (gradient passes)."""
        return ((self.raw_log_std >= LOG_STD_MIN) & (self.raw_log_std <= LOG_STD_MAX)).astype(float)

    def sample(self, noise: np.ndarray) -> np.ndarray:
        return self.mean + self.std * noise

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x) - self.mean) / self.std
        return np.sum(-0.5 * z * z - self.log_std - 0.5 * self.LOG_2PI, axis=-1)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * (1.0 + self.LOG_2PI)))

    def log_prob_grads(self, x: np.ndarray):
        """d log_prob / d mean per row and d log_prob / d raw log_std per row."""
        z = (np.asarray(x) - self.mean) / self.std
        d_mean = z / self.std
        d_log_std = (z * z - 1.0) * self.clamp_mask
        return d_mean, d_log_std


def gaussian_head(mean: np.ndarray, log_std: np.ndarray) -> DiagGaussian:
    return DiagGaussian(mean, log_std)


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Checkpoint as an uncompressed npz; float64 round-trips exactly."""
    payload = {f"param/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps({"version": CHECKPOINT_VERSION, **(meta or {})},
                                              sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return arrays, meta
