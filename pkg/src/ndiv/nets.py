"""MLP building blocks and the model bundle: state auto-encoder, action
generator, spectrally normalized conditional discriminator and forward
kinematics model. All networks are small MLPs over ``diffcore``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, Tensor

CHECKPOINT_FORMAT_VERSION = 1

_HIDDEN = {"relu": dc.relu, "tanh": dc.tanh}
_OUTPUT = {"identity": None, "tanh": dc.tanh, "sigmoid": dc.sigmoid}


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"MlpSpec needs >= 2 positive widths, got {self.layer_widths}")
        if self.hidden_activation not in _HIDDEN:
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in _OUTPUT:
            raise ContractError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }


@dataclass
class SpectralNormState:
    """Persistent power-iteration vector for one weight matrix.

    Weights are stored as (in, out) so that layers compute ``x @ W``; ``u``
    lives in the output space.
    """

    u: np.ndarray
    power_iterations: int = 1
    sigma: float = float("nan")

    @classmethod
    def init(cls, out_dim, rng, power_iterations=1):
        u = rng.standard_normal(out_dim)
        return cls(u / np.linalg.norm(u), power_iterations)


def _unit(v, fallback):
    n = np.linalg.norm(v)
    return v / n if n > 0.0 else fallback


def spectral_normalize(weight, state, iterations=None):
    """Divide ``weight`` by its largest singular value.

    Runs ``iterations`` power-iteration steps (default
    ``state.power_iterations``; 0 reuses the current ``u``), updating
    ``state.u`` in place. The singular vectors are constants for
    backpropagation while sigma = v^T W u stays differentiable in W, so
    gradients cannot inflate the weight scale. A zero matrix yields sigma
    clamped to 1e-12.
    """
    weight = dc.as_tensor(weight)
    w = weight.data
    if w.ndim != 2:
        raise DimensionError(f"spectral_normalize: weight must be 2D, got {w.shape}")
    if state.u.shape != (w.shape[1],):
        raise DimensionError(
            f"spectral_normalize: u has shape {state.u.shape}, weight has {w.shape}"
        )
    n_iter = state.power_iterations if iterations is None else iterations
    u = state.u
    for _ in range(n_iter):
        v = _unit(w @ u, None)
        if v is None:
            break
        u = _unit(w.T @ v, u)
    state.u = u
    wu = w @ u
    norm = float(np.linalg.norm(wu))
    if norm <= 1e-12:
        state.sigma = 1e-12
        return weight * 1e12
    v = wu / norm
    state.sigma = norm
    sigma = dc.sum(weight * np.outer(v, u))
    return weight / sigma


class Mlp:
    """Fully connected network; optionally spectrally normalized per layer."""

    def __init__(self, spec, rng, name="mlp", spectral_norm=False, power_iterations=1):
        self.spec = spec
        self.name = name
        self.spectral_norm = spectral_norm
        self.power_iterations = power_iterations
        self.weights = []
        self.biases = []
        self.sn_states = []
        widths = spec.layer_widths
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(
                Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{name}.{k}.weight")
            )
            self.biases.append(Tensor(rng.uniform(-bound, bound, fan_out), True, f"{name}.{k}.bias"))
            if spectral_norm:
                self.sn_states.append(SpectralNormState.init(fan_out, rng, power_iterations))

    @property
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters}

    def effective_weights(self, update_sn=True):
        if not self.spectral_norm:
            return list(self.weights)
        iterations = None if update_sn else 0
        return [
            spectral_normalize(w, s, iterations) for w, s in zip(self.weights, self.sn_states)
        ]

    def __call__(self, x, update_sn=True):
        x = dc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise DimensionError(
                f"{self.name}: expected input (N, {self.spec.in_dim}), got {x.shape}"
            )
        hidden = _HIDDEN[self.spec.hidden_activation]
        weights = self.effective_weights(update_sn)
        last = len(weights) - 1
        for k, (w, b) in enumerate(zip(weights, self.biases)):
            x = x @ w + b
            if k < last:
                x = hidden(x)
        out_act = _OUTPUT[self.spec.output_activation]
        return out_act(x) if out_act is not None else x


@dataclass(frozen=True)
class Architecture:
    state_dim: int = 2
    action_dim: int = 2
    embedding_dim: int = 8
    latent_dim: int = 2
    encoder_hidden: tuple = (32,)
    generator_hidden: tuple = (64, 64)
    discriminator_hidden: tuple = (64, 64)
    forward_hidden: tuple = (64, 64)
    vae_hidden: tuple = (64, 64)
    power_iterations: int = 1

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelBundle:
    """All networks of one trained model.

    ``kind`` is ``"ours"``/``"gan"`` (adversarial generator conditioned on a
    state embedding) or ``"vae"`` (``vae_encoder`` plus ``action_decoder``
    mapping Gaussian latents to actions). The forward model is shared.
    """

    kind: str
    arch: Architecture
    forward_model: Mlp
    action_decoder: Mlp
    state_encoder: Mlp = None
    state_decoder: Mlp = None
    discriminator: Mlp = None
    vae_encoder: Mlp = None
    meta: dict = field(default_factory=dict)

    def modules(self):
        names = ["state_encoder", "state_decoder", "action_decoder", "discriminator",
                 "vae_encoder", "forward_model"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def named_parameters(self):
        out = {}
        for m in self.modules().values():
            out.update(m.named_parameters())
        return out

    def generator_parameters(self):
        mods = [self.state_encoder, self.state_decoder, self.action_decoder]
        return [p for m in mods if m is not None for p in m.parameters]


def build_model_bundle(kind, rng, arch=None):
    """Freshly initialized bundle. Initialization order is fixed per kind so
    that ``ours`` and ``gan`` draw identical initial weights from one seed."""
    arch = arch or Architecture()
    if kind not in ("ours", "gan", "vae"):
        raise ContractError(f"unknown model kind {kind!r}")
    e, dz, da, ds = arch.embedding_dim, arch.latent_dim, arch.action_dim, arch.state_dim
    if kind == "vae":
        vae_encoder = Mlp(MlpSpec((da, *arch.vae_hidden, 2 * dz)), rng, "vae_encoder")
        decoder = Mlp(MlpSpec((dz, *arch.vae_hidden, da)), rng, "action_decoder")
        fwd = Mlp(MlpSpec((ds + da, *arch.forward_hidden, ds)), rng, "forward_model")
        return ModelBundle(kind, arch, fwd, decoder, vae_encoder=vae_encoder)
    enc = Mlp(MlpSpec((ds, *arch.encoder_hidden, e)), rng, "state_encoder")
    dec = Mlp(MlpSpec((e, *arch.encoder_hidden[::-1], ds)), rng, "state_decoder")
    gen = Mlp(MlpSpec((e + dz, *arch.generator_hidden, da)), rng, "action_decoder")
    disc = Mlp(
        MlpSpec((da + e, *arch.discriminator_hidden, 1)),
        rng,
        "discriminator",
        spectral_norm=True,
        power_iterations=arch.power_iterations,
    )
    fwd = Mlp(MlpSpec((ds + da, *arch.forward_hidden, ds)), rng, "forward_model")
    return ModelBundle(kind, arch, fwd, gen, enc, dec, disc)


def _rows(x, dim, what):
    x = dc.as_tensor(x)
    if x.ndim == 1:
        x = dc.reshape(x, (1, -1))
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what}: expected width {dim}, got shape {x.shape}")
    return x


def encode_state(m, s_t):
    return m.state_encoder(_rows(s_t, m.arch.state_dim, "encode_state"))


def decode_state(m, e):
    return m.state_decoder(_rows(e, m.arch.embedding_dim, "decode_state"))


def generate_action(m, e, z):
    """Actions for latents ``z`` in [0, 1]^d_z under state embedding ``e``.

    A single embedding row is shared by every latent row.
    """
    z = _rows(z, m.arch.latent_dim, "generate_action")
    if np.any(z.data < 0.0) or np.any(z.data > 1.0):
        raise ContractError("generate_action: latent samples must lie in [0, 1]")
    e = _rows(e, m.arch.embedding_dim, "generate_action")
    if e.shape[0] == 1 and z.shape[0] != 1:
        e = dc.broadcast_to(e, (z.shape[0], e.shape[1]))
    elif e.shape[0] != z.shape[0]:
        raise DimensionError(f"generate_action: {e.shape[0]} embeddings for {z.shape[0]} latents")
    return m.action_decoder(dc.concat([e, z], axis=1))


def discriminate(m, a, e, update_sn=True):
    """Raw (unbounded) scores for actions ``a`` conditioned on embeddings ``e``."""
    a = _rows(a, m.arch.action_dim, "discriminate")
    e = _rows(e, m.arch.embedding_dim, "discriminate")
    if e.shape[0] == 1 and a.shape[0] != 1:
        e = dc.broadcast_to(e, (a.shape[0], e.shape[1]))
    elif e.shape[0] != a.shape[0]:
        raise DimensionError(f"discriminate: {e.shape[0]} embeddings for {a.shape[0]} actions")
    return m.discriminator(dc.concat([a, e], axis=1), update_sn=update_sn)


def predict_next_state(m, s_t, a):
    a = _rows(a, m.arch.action_dim, "predict_next_state")
    s_t = _rows(s_t, m.arch.state_dim, "predict_next_state")
    if s_t.shape[0] == 1 and a.shape[0] != 1:
        s_t = dc.broadcast_to(s_t, (a.shape[0], s_t.shape[1]))
    elif s_t.shape[0] != a.shape[0]:
        raise DimensionError(f"predict_next_state: {s_t.shape[0]} states for {a.shape[0]} actions")
    return m.forward_model(dc.concat([s_t, a], axis=1))


# --------------------------------------------------------------------------
# checkpoints


def _array_entry(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def _array_from(entry):
    return np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])


def checkpoint_dict(m):
    mlps = {}
    for name, mlp in m.modules().items():
        mlps[name] = {
            "spec": mlp.spec.to_dict(),
            "spectral_norm": mlp.spectral_norm,
            "power_iterations": mlp.power_iterations,
        }
    spectral = {}
    if m.discriminator is not None:
        for k, s in enumerate(m.discriminator.sn_states):
            spectral[f"discriminator.{k}.u"] = _array_entry(s.u)
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": m.kind,
        "arch": m.arch.to_dict(),
        "mlps": mlps,
        "params": {n: _array_entry(p.data) for n, p in m.named_parameters().items()},
        "spectral_state": spectral,
        "meta": m.meta,
    }


def save_checkpoint(m, path):
    """Write ``m`` as JSON: parameter name -> shape + row-major values."""
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(m), indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    arch = Architecture.from_dict(doc["arch"])
    m = build_model_bundle(doc["kind"], np.random.default_rng(0), arch)
    params = m.named_parameters()
    missing = set(params) ^ set(doc["params"])
    if missing:
        raise ValueError(f"{path}: parameter names differ from architecture: {sorted(missing)}")
    for name, p in params.items():
        value = _array_from(doc["params"][name])
        if value.shape != p.data.shape:
            raise ValueError(f"{path}: {name} has shape {value.shape}, expected {p.data.shape}")
        p.data = value
    if m.discriminator is not None:
        for k, s in enumerate(m.discriminator.sn_states):
            s.u = _array_from(doc["spectral_state"][f"discriminator.{k}.u"])
    m.meta = doc.get("meta", {})
    return m
