"""Fully connected networks, their initialization, and the Adam optimizer.

The model bundle holds six small maps: a sphere-valued encoder and its
decoder, the sphere-to-rotation map, the stage-two encoder b with decoder,
and the scalar prediction head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .liegroup import ConfigError, Rotation, algebra_dim

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "swish": ad.swish}
HEADS = ("linear", "l2_normalize", "skew_to_rotation")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus the hidden activation and output head."""

    widths: tuple
    activation: str = "relu"
    head: str = "linear"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError(f"need at least input and output widths, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")


class Mlp:
    """A plain MLP over rank-2 batches, built from autodiff Parameters."""

    def __init__(self, spec: MlpSpec, rng_seed: int, name: str = "mlp"):
        self.spec = spec
        self.name = name
        rng = np.random.default_rng(rng_seed)
        self.weights = []
        self.biases = []
        for k, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(ad.Parameter(w, f"{name}.w{k}"))
            self.biases.append(ad.Parameter(np.zeros(fan_out), f"{name}.b{k}"))

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: ad.Node) -> ad.Node:
        """Forward a (B, d_in) batch; the head shapes the final layer output."""
        act = ACTIVATIONS[self.spec.activation]
        h = x if isinstance(x, ad.Node) else ad.constant(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.bias_add(ad.matmul(h, w), b)
            if k < last:
                h = act(h)
        if self.spec.head == "l2_normalize":
            return ad.l2_normalize(h)
        if self.spec.head == "skew_to_rotation":
            return ad.skew_cayley(h)
        return h

    def __call__(self, x) -> ad.Node:
        return self.forward(x)


def build(spec: MlpSpec, rng_seed: int, name: str = "mlp") -> Mlp:
    return Mlp(spec, rng_seed, name)


def tau_forward(tau_net: Mlp, latent: np.ndarray) -> Rotation:
    """Map one sphere point through the rotation-valued network."""
    out = tau_net.forward(ad.constant(latent.reshape(1, -1)))
    n = int(round(np.sqrt(out.value.shape[1])))
    return Rotation(out.value.reshape(n, n))


class Adam:
    """Standard Adam with bias correction; moments keyed per Parameter."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ad.NumericError(
                    f"non-finite gradient for {getattr(p, 'name', 'param')} at step {t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / (1.0 - self.beta1 ** t)
            vhat = self.v[i] / (1.0 - self.beta2 ** t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


@dataclass
class ModelBundle:
    """The six learnable maps for the full two-stage model."""

    encoder: Mlp        # features -> S^{n-1}
    decoder: Mlp        # S^{n-1} -> features
    tau_net: Mlp        # S^{n-1} -> SO(n), via the Cayley head
    b_net: Mlp          # S^{n-1} -> R^n
    psi: Mlp            # R^n -> S^{n-1}
    head: Mlp           # R^n -> logit
    n: int = 8

    @classmethod
    def create(cls, feature_dim: int, n: int, hidden: int = 64, seed: int = 0,
               activation: str = "relu") -> "ModelBundle":
        m = algebra_dim(n)
        mk = MlpSpec
        return cls(
            encoder=Mlp(mk((feature_dim, hidden, n), activation, "l2_normalize"),
                        seed, "encoder"),
            decoder=Mlp(mk((n, hidden, feature_dim), activation, "linear"),
                        seed + 1, "decoder"),
            tau_net=Mlp(mk((n, hidden, m), activation, "skew_to_rotation"),
                        seed + 2, "tau"),
            b_net=Mlp(mk((n, hidden, n), activation, "linear"), seed + 3, "b"),
            psi=Mlp(mk((n, hidden, n), activation, "l2_normalize"), seed + 4, "psi"),
            head=Mlp(mk((n, hidden, 1), activation, "linear"), seed + 5, "head"),
            n=n,
        )

    def networks(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder, "tau": self.tau_net,
                "b": self.b_net, "psi": self.psi, "head": self.head}

    def all_params(self) -> list:
        out = []
        for net in self.networks().values():
            out.extend(net.params)
        return out


CHECKPOINT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write all named tensors plus specs as a versioned JSON blob."""
    payload = {"version": CHECKPOINT_VERSION, "n": bundle.n, "networks": {}}
    for key, net in bundle.networks().items():
        payload["networks"][key] = {
            "widths": list(net.spec.widths),
            "activation": net.spec.activation,
            "head": net.spec.head,
            "tensors": {p.name: p.value.tolist() for p in net.params},
        }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> ModelBundle:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    nets = {}
    for key, blob in payload["networks"].items():
        spec = MlpSpec(tuple(blob["widths"]), blob["activation"], blob["head"])
        net = Mlp(spec, rng_seed=0, name=key if key != "tau" else "tau")
        for p in net.params:
            p.value = np.array(blob["tensors"][p.name], dtype=np.float64)
        nets[key] = net
    return ModelBundle(encoder=nets["encoder"], decoder=nets["decoder"],
                       tau_net=nets["tau"], b_net=nets["b"], psi=nets["psi"],
                       head=nets["head"], n=int(payload["n"]))
