"""Neural building blocks: fully-connected layers, an LSTM cell, Xavier
initialization, dropout, and Adam/SGD steps with an optional maximize mode
for the adversarial player."""

from __future__ import annotations

import numpy as np

from spanlab.tensor import ShapeMismatch, Tensor, concat

__all__ = [
    "LSTMCell",
    "LinearLayer",
    "OptimizerState",
    "adam_step",
    "clip_global_norm",
    "dropout",
    "lstm_forward",
    "optimizer_step",
    "seed_chain",
    "sgd_step",
    "xavier_init",
]

_ACTIVATIONS = ("none", "relu", "tanh")


def seed_chain(seed, *tags):
    """Flatten a seed (int or int sequence) plus tags into one entropy list."""
    parts = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return parts + [int(t) for t in tags]


def xavier_init(shape, seed):
    """Trainable rank-2 tensor with entries uniform on +-sqrt(6/(fan_in+fan_out))."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise ShapeMismatch("xavier_init", shape)
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), trainable=True)


class LinearLayer:
    """Affine map plus optional activation, batch-first: (B,in) -> (B,out)."""

    def __init__(self, in_dim, out_dim, activation="none", seed=0, bias_init=0.0):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"LinearLayer: unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = xavier_init((in_dim, out_dim), seed)
        self.bias = Tensor(np.full(out_dim, bias_init), trainable=True)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch("linear_forward", x.shape, (None, self.in_dim))
        batch = x.shape[0]
        out = x @ self.weight + self.bias.reshape((1, self.out_dim)).tile((batch, 1))
        if self.activation == "relu":
            out = out.relu()
        elif self.activation == "tanh":
            out = out.tanh()
        return out

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LSTMCell:
    """Single LSTM cell; gate weights are (in+hidden, hidden) blocks.

    The step input is concat([x_t, h_{t-1}]).  The forget-gate bias starts at
    1.0 so memories survive the first updates; configurable.
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, input_dim, hidden_dim, seed=0, forget_bias=1.0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.weights = {}
        self.biases = {}
        for k, gate in enumerate(self.GATES):
            self.weights[gate] = xavier_init(
                (input_dim + hidden_dim, hidden_dim), seed_chain(seed, k)
            )
            init = forget_bias if gate == "f" else 0.0
            self.biases[gate] = Tensor(np.full(hidden_dim, init), trainable=True)

    def step(self, x, h, c):
        """One recurrence step on a batch: x (B,in), h/c (B,hidden)."""
        batch = x.shape[0]
        z = concat([x, h], axis=1)

        def gate(name):
            b = self.biases[name].reshape((1, self.hidden_dim)).tile((batch, 1))
            return z @ self.weights[name] + b

        i = gate("i").sigmoid()
        f = gate("f").sigmoid()
        o = gate("o").sigmoid()
        g = gate("g").tanh()
        c_next = f * c + i * g
        h_next = o * c_next.tanh()
        return h_next, c_next

    def run(self, sequence):
        """Full recurrence over a batch of sequences (B,n,in) -> h_n (B,hidden)."""
        if sequence.ndim != 3 or sequence.shape[2] != self.input_dim:
            raise ShapeMismatch("lstm_run", sequence.shape,
                                (None, None, self.input_dim))
        batch, steps, _ = sequence.shape
        h = Tensor(np.zeros((batch, self.hidden_dim)))
        c = Tensor(np.zeros((batch, self.hidden_dim)))
        for t in range(steps):
            x_t = sequence.slice(1, t, t + 1).reshape((batch, self.input_dim))
            h, c = self.step(x_t, h, c)
        return h

    def parameters(self):
        params = {}
        for gate in self.GATES:
            params[f"w_{gate}"] = self.weights[gate]
            params[f"b_{gate}"] = self.biases[gate]
        return params


def lstm_forward(cell, sequence):
    """Final hidden state for one sequence: (n,d) -> (hidden,)."""
    if sequence.ndim != 2:
        raise ShapeMismatch("lstm_forward", sequence.shape)
    n, d = sequence.shape
    h = cell.run(sequence.reshape((1, n, d)))
    return h.reshape((cell.hidden_dim,))


def dropout(x, rate, rng, training):
    """Inverted dropout: scales survivors by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


class OptimizerState:
    """Adam or SGD over a named parameter group.

    Adam keeps per-parameter moments (beta1=0.9, beta2=0.999, eps=1e-8).
    Weight decay enters as an L2 gradient term before the moment update.
    """

    def __init__(self, kind="adam", lr=1e-4, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"OptimizerState: unknown kind {kind!r}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def state_arrays(self):
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays, step_count):
        self.step_count = int(step_count)
        self.m = {k[2:]: np.asarray(v) for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.asarray(v) for k, v in arrays.items() if k.startswith("v.")}


def _prepare_grads(state, params, grads, sign):
    if sign not in ("minimize", "maximize"):
        raise ValueError(f"optimizer: unknown sign {sign!r}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch("optimizer_step", g.shape, p.data.shape)
        if sign == "maximize":
            g = -g  # ascend on f == descend on -f, bit-for-bit
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        out[name] = g
    return out


def adam_step(state, params, grads, sign="minimize"):
    """Bias-corrected Adam update; parameters are replaced, not mutated."""
    gs = _prepare_grads(state, params, grads, sign)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - step


def sgd_step(state, params, grads, sign="minimize"):
    gs = _prepare_grads(state, params, grads, sign)
    state.step_count += 1
    for name, p in params.items():
        p.data = p.data - state.lr * gs[name]


def optimizer_step(state, params, grads, sign="minimize"):
    if state.kind == "adam":
        adam_step(state, params, grads, sign)
    else:
        sgd_step(state, params, grads, sign)


def clip_global_norm(grads, max_norm):
    """Scale a named gradient dict so its global L2 norm is at most max_norm."""
    arrays = {
        k: (g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64))
        for k, g in grads.items()
    }
    total = np.sqrt(sum(float(np.sum(a * a)) for a in arrays.values()))
    if max_norm <= 0 or total <= max_norm:
        return arrays, total
    scale = max_norm / total
    return {k: a * scale for k, a in arrays.items()}, total
