"""Expression-conditioned deformation on top of the rigged field.

The proxy mesh carries the coarse motion; this network adds the fine
correction it cannot express. Each Gaussian is identified by the
sinusoidal encoding of its frozen creation-time position, concatenated
with the per-frame condition vector (expression coefficients plus head
pose angles), and a small Tanh MLP maps that to ten residuals: three
for position, three for log scale, four for the quaternion. The output
layer starts at zero, so an untrained network is exactly a no-op and
training starts from the pure rig.

Everything is plain numpy with hand-written backward passes; gradient
code mirrors the forward caches.
"""

from dataclasses import dataclass

import numpy as np

from . import mathcore

NUM_FREQS = 10
RESIDUAL_DIM = 10  # 3 position + 3 log-scale + 4 quaternion
HIDDEN_WIDTH = 256
HIDDEN_DEPTH = 4


def encoding_dim(num_freqs=NUM_FREQS):
    return 3 + 6 * num_freqs


@dataclass
class MlpParams:
    """Dense Tanh network; weights[i] is (fan_out, fan_in)."""

    weights: list
    biases: list
    num_freqs: int = NUM_FREQS

    @property
    def cond_dim(self):
        return self.weights[0].shape[1] - encoding_dim(self.num_freqs)

    def param_arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def init_deformer(rng, cond_dim, num_freqs=NUM_FREQS, hidden=HIDDEN_WIDTH,
                  depth=HIDDEN_DEPTH, out_dim=RESIDUAL_DIM):
    """Xavier-uniform hidden layers, zero final layer."""
    dims = [encoding_dim(num_freqs)] + [hidden] * depth + [out_dim]
    weights, biases = [], []
    dims[0] += cond_dim
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return MlpParams(weights=weights, biases=biases, num_freqs=num_freqs)


def deform_inputs(canonical, condition, num_freqs=NUM_FREQS):
    """Encoded per-Gaussian identity plus the shared frame condition."""
    condition = np.asarray(condition, dtype=np.float64)
    enc = mathcore.positional_encoding(canonical, num_freqs)
    cond = np.broadcast_to(condition, (enc.shape[0], condition.shape[0]))
    return np.concatenate([enc, cond], axis=1)


def mlp_forward(params, x):
    """Returns (residuals (N, out), cache for mlp_backward)."""
    acts = [np.asarray(x, dtype=np.float64)]
    h = acts[0]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return acts[-1], acts


def mlp_backward(params, cache, d_out):
    """Gradients for every weight/bias plus the input.

    Returns (grads, d_x) with grads keyed like params.param_arrays().
    """
    grads = {}
    d_h = np.asarray(d_out, dtype=np.float64)
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            d_h = d_h * (1.0 - cache[i + 1] ** 2)  # through tanh
        grads[f"w{i}"] = d_h.T @ cache[i]
        grads[f"b{i}"] = d_h.sum(axis=0)
        d_h = d_h @ params.weights[i]
    return grads, d_h


def run_deformer(params, canonical, condition):
    """Residuals for one frame: (delta (N, 10), cache)."""
    x = deform_inputs(canonical, condition, params.num_freqs)
    return mlp_forward(params, x)


def apply_residuals(mu, s_raw, q, delta):
    """Additive correction of the posed attributes.

    Positions and log scales shift directly; quaternion components
    shift and are renormalized by whoever consumes the rotation, so the
    additive backward is exact.
    """
    return (
        mu + delta[:, 0:3],
        s_raw + delta[:, 3:6],
        q + delta[:, 6:10],
    )


def residual_upstream(d_mu, d_s_raw, d_q):
    """Pack attribute gradients into the residual layout."""
    return np.concatenate([d_mu, d_s_raw, d_q], axis=1)
