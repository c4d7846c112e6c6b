"""Small tanh MLP with hand-written backprop, and the variational critics built on it.

The critic ``h'`` is trained by full-batch gradient ascent on one of three
variational objectives:

* ``KLSample``: ``mean_q[h] - log mean_pi[exp(h)]`` (identity output);
* ``KLEnergy``: ``mean_q[log(h' p / pi)] - log mean_p[h']`` with ``h' > 0``
  (ReLU + eps output), recovering ``h = log h' + log p - log pi``;
* ``JS``: ``mean_q[log(1 - h')] + mean_pi[log h']`` with ``h'`` in (0, 1)
  (sigmoid output), recovering ``h = 0.5 * log((1 - h') / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .core import InvalidArgumentError, TrainingDivergedError, as_finite_array
from .objectives import GaussianMixture, mixture_log_density, standard_normal

RELU_EPS = 1e-6
OUTPUT_ACTIVATIONS = ("identity", "relu_eps", "sigmoid")


@dataclass(eq=False)
class MlpParams:
    weights: list
    biases: list
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("need one bias per weight matrix and at least one layer")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidArgumentError(f"unknown output activation {self.output_activation!r}")
        ws = [as_finite_array(w, "weight", ndim=2) for w in self.weights]
        bs = [as_finite_array(b, "bias", ndim=1) for b in self.biases]
        for i, (w, b) in enumerate(zip(ws, bs)):
            if b.shape[0] != w.shape[0]:
                raise InvalidArgumentError(f"layer {i}: bias length {b.shape[0]} != rows {w.shape[0]}")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i}: input width {w.shape[1]} != {ws[i - 1].shape[0]}")
        if ws[-1].shape[0] != 1:
            raise InvalidArgumentError("the network must have a scalar output")
        self.weights, self.biases = ws, bs

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.output_activation)

    def arrays(self) -> list:
        """Parameter arrays in layer order, ``[W1, b1, W2, b2, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class MlpGrads:
    weights: list
    biases: list

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(d: int, hidden: Sequence[int], output_activation: str,
             rng: np.random.Generator) -> MlpParams:
    """Uniform(-s, s) init with ``s = sqrt(1 / fan_in)`` for every layer."""
    widths = [d, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-s, s, size=fan_out))
    if output_activation == "relu_eps":
        # start in the active region: a dead ReLU output has no gradient to recover from
        biases[-1] = np.ones(1)
    return MlpParams(weights, biases, output_activation)


def _batch(p: MlpParams, x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != p.input_dim:
        raise InvalidArgumentError(f"expected inputs of dimension {p.input_dim}, got shape {np.shape(x)}")
    return arr, single


def _forward(p: MlpParams, x: np.ndarray):
    """Returns (pre-activation output z, hidden activations per layer incl. input)."""
    acts = [x]
    a = x
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    z = (a @ p.weights[-1].T + p.biases[-1])[:, 0]
    return z, acts


def _activate(p: MlpParams, z: np.ndarray) -> np.ndarray:
    if p.output_activation == "relu_eps":
        return np.maximum(z, 0.0) + RELU_EPS
    if p.output_activation == "sigmoid":
        return expit(z)
    return z


def _activation_slope(p: MlpParams, z: np.ndarray) -> np.ndarray:
    if p.output_activation == "relu_eps":
        return (z > 0).astype(np.float64)
    if p.output_activation == "sigmoid":
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _backward(p: MlpParams, acts: list, dz: np.ndarray):
    """Backprop pre-activation output grads ``dz`` (n,). Returns (MlpGrads, input grads)."""
    n_layers = len(p.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = dz[:, None]
    for i in range(n_layers - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        upstream = delta @ p.weights[i]
        if i > 0:
            delta = upstream * (1.0 - acts[i] ** 2)
    return MlpGrads(gw, gb), upstream


def mlp_forward(p: MlpParams, x):
    pts, single = _batch(p, x)
    out = _activate(p, _forward(p, pts)[0])
    return float(out[0]) if single else out


def mlp_param_grads(p: MlpParams, loss_grads_at_outputs, batch) -> MlpGrads:
    """Gradients of ``sum_n loss_n`` given ``d loss_n / d output_n`` for every row."""
    pts, _ = _batch(p, batch)
    dout = as_finite_array(loss_grads_at_outputs, "loss gradients", ndim=1)
    if dout.shape[0] != pts.shape[0]:
        raise InvalidArgumentError(f"{dout.shape[0]} loss gradients for {pts.shape[0]} samples")
    z, acts = _forward(p, pts)
    grads, _ = _backward(p, acts, dout * _activation_slope(p, z))
    return grads


def mlp_input_grad(p: MlpParams, x):
    """``grad_x`` of the network output (after the output activation)."""
    pts, single = _batch(p, x)
    z, acts = _forward(p, pts)
    _, dx = _backward(p, acts, _activation_slope(p, z))
    return dx[0] if single else dx


# ---------------------------------------------------------------------------
# variational critics


@dataclass(frozen=True)
class KLSample:
    output_activation: str = field(default="identity", init=False)
    name: str = field(default="kl-sample", init=False)


@dataclass(frozen=True)
class KLEnergy:
    """Change-of-variable KL critic for a target with known (unnormalized) log density."""

    target: GaussianMixture
    base: Optional[GaussianMixture] = None
    output_activation: str = field(default="relu_eps", init=False)
    name: str = field(default="kl-energy", init=False)

    def __post_init__(self):
        if self.base is None:
            object.__setattr__(self, "base", standard_normal(self.target.dim))

    def log_ratio(self, x: np.ndarray) -> np.ndarray:
        """``log p(x) - log pi(x)``."""
        return mixture_log_density(self.base, x) - mixture_log_density(self.target, x)


@dataclass(frozen=True)
class JS:
    output_activation: str = field(default="sigmoid", init=False)
    name: str = field(default="js", init=False)


def _objective_terms(spec, p: MlpParams, q: np.ndarray, ref: np.ndarray):
    """Objective value and its gradients w.r.t. the pre-activation outputs."""
    zq, acts_q = _forward(p, q)
    zr, acts_r = _forward(p, ref)
    m, n = zq.shape[0], zr.shape[0]
    if isinstance(spec, KLSample):
        lse = logsumexp(zr)
        value = zq.mean() - (lse - np.log(n))
        dzq = np.full(m, 1.0 / m)
        dzr = -np.exp(zr - lse)
    elif isinstance(spec, KLEnergy):
        oq, orf = _activate(p, zq), _activate(p, zr)
        value = np.mean(np.log(oq) + spec.log_ratio(q)) - np.log(orf.mean())
        dzq = _activation_slope(p, zq) / (m * oq)
        dzr = -_activation_slope(p, zr) / orf.sum()
    elif isinstance(spec, JS):
        # log(1 - sigmoid(z)) = log_expit(-z), log sigmoid(z) = log_expit(z)
        value = log_expit(-zq).mean() + log_expit(zr).mean()
        dzq = -expit(zq) / m
        dzr = expit(-zr) / n
    else:
        raise InvalidArgumentError(f"unknown variational spec {spec!r}")
    return float(value), (acts_q, dzq), (acts_r, dzr)


def _check_spec(spec, p: MlpParams):
    if p.output_activation != spec.output_activation:
        raise InvalidArgumentError(
            f"{spec.name} needs a {spec.output_activation} output, network has {p.output_activation}"
        )


def variational_value(spec, p: MlpParams, q_samples, reference_samples) -> float:
    """Empirical variational objective (a lower-bound estimate of the divergence)."""
    _check_spec(spec, p)
    q = as_finite_array(q_samples, "q samples", ndim=2)
    ref = as_finite_array(reference_samples, "reference samples", ndim=2)
    return _objective_terms(spec, p, q, ref)[0]


def train_variational(spec, q_samples, reference_samples, steps: int, step_size: float,
                      rng: Optional[np.random.Generator] = None, init: Optional[MlpParams] = None,
                      hidden: Sequence[int] = (50, 50)) -> MlpParams:
    """Full-batch gradient ascent on the variational objective.

    ``init`` warm-starts from existing parameters (copied, never mutated);
    otherwise a fresh network is drawn from ``rng``. ``reference_samples``
    are target samples for ``KLSample``/``JS`` and base-distribution samples
    for ``KLEnergy``.
    """
    q = as_finite_array(q_samples, "q samples", ndim=2)
    ref = as_finite_array(reference_samples, "reference samples", ndim=2)
    if q.shape[1] != ref.shape[1]:
        raise InvalidArgumentError(f"sample dimensions differ: {q.shape[1]} vs {ref.shape[1]}")
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    if init is None:
        if rng is None:
            raise InvalidArgumentError("need either an rng or initial parameters")
        params = init_mlp(q.shape[1], hidden, spec.output_activation, rng)
    else:
        params = init.copy()
    _check_spec(spec, params)

    # overflow is detected explicitly through the objective value below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            value, (acts_q, dzq), (acts_r, dzr) = _objective_terms(spec, params, q, ref)
            if not np.isfinite(value):
                raise TrainingDivergedError(step)
            gq, _ = _backward(params, acts_q, dzq)
            gr, _ = _backward(params, acts_r, dzr)
            for arr, a, b in zip(params.arrays(), gq.arrays(), gr.arrays()):
                arr += step_size * (a + b)
        final = _objective_terms(spec, params, q, ref)[0]
    if not np.isfinite(final) or not all(np.all(np.isfinite(a)) for a in params.arrays()):
        raise TrainingDivergedError(steps)
    return params
