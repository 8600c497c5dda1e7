"""Set-function learners.

The adversarially-permuted LSTM pairs a permutation network (the max player)
with an LSTM-plus-readout (the min player): prediction = readout(lstm(P^T X))
where P is the per-input soft permutation.  Ablation variants drop the
permutation network or swap the LSTM for a flat FC stack.  Baselines:
sum-pooled DeepSets, k-ary tuple pooling, and an LSTM trained on randomly
sampled permutations.

DeepSets and the tuple model reorder elements into canonical (lexicographic)
value order before any arithmetic, which makes their permutation invariance
exact at the bit level instead of merely up to float addition order.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from spanlab.nn import LSTMCell, LinearLayer, dropout, seed_chain
from spanlab.perm import PermutationNetwork, apply_soft
from spanlab.tensor import (
    ShapeMismatch,
    Tensor,
    concat,
    read_tensor_blob,
    write_tensor_blob,
)

__all__ = [
    "CheckpointError",
    "DeepSetsModel",
    "JanossyModel",
    "PiSgdModel",
    "SpanFcModel",
    "SpanModel",
    "SpanNoApnModel",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "tuple_index_array",
]


def _as_batch(x):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 2:
        n, d = x.shape
        return x.reshape((1, n, d))
    if x.ndim == 3:
        return x
    raise ShapeMismatch("model_forward", x.shape)


def _canonical_row_order(data):
    """Per-instance lexicographic row order for a (B,n,d) array."""
    return np.stack([np.lexsort(inst.T[::-1]) for inst in data])


class _ModelBase:
    """Shared prediction plumbing; subclasses define forward/parameters."""

    out_dim = 1

    def predict(self, x):
        """Value-only prediction for a single (n,d) set."""
        out = self.forward(_as_batch(np.asarray(x, dtype=np.float64)))
        return out.data.reshape(self.out_dim)

    def predict_batch(self, x):
        return self.forward(_as_batch(np.asarray(x, dtype=np.float64))).data

    def adversary_parameters(self):
        return {}

    def learner_parameters(self):
        adversary = set(self.adversary_parameters())
        return {k: v for k, v in self.parameters().items() if k not in adversary}


class SpanModel(_ModelBase):
    """Permutation network + LSTM + linear readout (the min-max learner)."""

    kind = "span"

    def __init__(self, n, d, L, hidden=128, tau=0.1, sinkhorn_iters=100,
                 input_scale=1.0, seed=0, forget_bias=1.0):
        self.n = n
        self.d = d
        self.out_dim = L
        self.hidden = hidden
        self.tau = tau
        self.sinkhorn_iters = sinkhorn_iters
        self.input_scale = input_scale
        self.seed = seed
        self.forget_bias = forget_bias
        self.pn = PermutationNetwork(d, n, tau, sinkhorn_iters,
                                     seed=seed_chain(seed, 0))
        self.lstm = LSTMCell(d, hidden, seed=seed_chain(seed, 1),
                             forget_bias=forget_bias)
        self.readout = LinearLayer(hidden, L, "none", seed=seed_chain(seed, 2))

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if self.input_scale != 1.0:
            x = x * self.input_scale
        p = self.pn.forward(x)
        permuted = apply_soft(p, x)
        h = self.lstm.run(permuted)
        return self.readout.forward(h)

    def parameters(self):
        params = {f"pn.{k}": v for k, v in self.pn.parameters().items()}
        params.update({f"lstm.{k}": v for k, v in self.lstm.parameters().items()})
        params.update({f"readout.{k}": v for k, v in self.readout.parameters().items()})
        return params

    def adversary_parameters(self):
        return {f"pn.{k}": v for k, v in self.pn.parameters().items()}

    def spec(self):
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "L": self.out_dim,
            "hidden": self.hidden, "tau": self.tau,
            "sinkhorn_iters": self.sinkhorn_iters,
            "input_scale": self.input_scale, "seed": self.seed,
            "forget_bias": self.forget_bias,
        }


class SpanNoApnModel(_ModelBase):
    """Ablation: the LSTM reads elements in the order given (no permutation
    network), so it is free to latch onto positional bias."""

    kind = "span-no-apn"

    def __init__(self, n, d, L, hidden=128, input_scale=1.0, seed=0,
                 forget_bias=1.0):
        self.n = n
        self.d = d
        self.out_dim = L
        self.hidden = hidden
        self.input_scale = input_scale
        self.seed = seed
        self.forget_bias = forget_bias
        self.lstm = LSTMCell(d, hidden, seed=seed_chain(seed, 1),
                             forget_bias=forget_bias)
        self.readout = LinearLayer(hidden, L, "none", seed=seed_chain(seed, 2))

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if self.input_scale != 1.0:
            x = x * self.input_scale
        return self.readout.forward(self.lstm.run(x))

    def parameters(self):
        params = {f"lstm.{k}": v for k, v in self.lstm.parameters().items()}
        params.update({f"readout.{k}": v for k, v in self.readout.parameters().items()})
        return params

    def spec(self):
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "L": self.out_dim,
            "hidden": self.hidden, "input_scale": self.input_scale,
            "seed": self.seed, "forget_bias": self.forget_bias,
        }


class SpanFcModel(_ModelBase):
    """Ablation: permutation network kept, learner swapped for an FC stack
    over the flattened permuted set."""

    kind = "span-fc"

    def __init__(self, n, d, L, width=128, tau=0.1, sinkhorn_iters=100,
                 input_scale=1.0, seed=0):
        self.n = n
        self.d = d
        self.out_dim = L
        self.width = width
        self.tau = tau
        self.sinkhorn_iters = sinkhorn_iters
        self.input_scale = input_scale
        self.seed = seed
        self.pn = PermutationNetwork(d, n, tau, sinkhorn_iters,
                                     seed=seed_chain(seed, 0))
        self.hidden_layer = LinearLayer(n * d, width, "relu",
                                        seed=seed_chain(seed, 1))
        self.readout = LinearLayer(width, L, "none", seed=seed_chain(seed, 2))

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if self.input_scale != 1.0:
            x = x * self.input_scale
        p = self.pn.forward(x)
        permuted = apply_soft(p, x)
        batch = permuted.shape[0]
        flat = permuted.reshape((batch, self.n * self.d))
        return self.readout.forward(self.hidden_layer.forward(flat))

    def parameters(self):
        params = {f"pn.{k}": v for k, v in self.pn.parameters().items()}
        params.update(
            {f"hidden.{k}": v for k, v in self.hidden_layer.parameters().items()}
        )
        params.update({f"readout.{k}": v for k, v in self.readout.parameters().items()})
        return params

    def adversary_parameters(self):
        return {f"pn.{k}": v for k, v in self.pn.parameters().items()}

    def spec(self):
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "L": self.out_dim,
            "width": self.width, "tau": self.tau,
            "sinkhorn_iters": self.sinkhorn_iters,
            "input_scale": self.input_scale, "seed": self.seed,
        }


class DeepSetsModel(_ModelBase):
    """Embed rows, pool (sum or max), map through an FC stack.

    Invariant by construction; elements are canonically ordered before the
    pooled sum, so shuffling inputs cannot even change the rounding.
    """

    kind = "deepsets"

    def __init__(self, d, L, width=128, pooling="sum", dropout_rate=0.0, seed=0):
        if pooling not in ("sum", "max"):
            raise ValueError(f"DeepSetsModel: unknown pooling {pooling!r}")
        self.d = d
        self.out_dim = L
        self.width = width
        self.pooling = pooling
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.embed = LinearLayer(d, width, "relu", seed=seed_chain(seed, 0))
        self.post = LinearLayer(width, width, "relu", seed=seed_chain(seed, 1))
        self.readout = LinearLayer(width, L, "none", seed=seed_chain(seed, 2))

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        x = x.permute_rows(_canonical_row_order(x.data))
        batch, n, d = x.shape
        phi = self.embed.forward(x.reshape((batch * n, d)))
        phi = dropout(phi, self.dropout_rate, rng, training)
        phi = phi.reshape((batch, n, self.width))
        if self.pooling == "sum":
            pooled = phi.sum(axis=1)
        else:
            pooled = phi.max(axis=1)
        h = dropout(self.post.forward(pooled), self.dropout_rate, rng, training)
        return self.readout.forward(h)

    def parameters(self):
        params = {f"embed.{k}": v for k, v in self.embed.parameters().items()}
        params.update({f"post.{k}": v for k, v in self.post.parameters().items()})
        params.update({f"readout.{k}": v for k, v in self.readout.parameters().items()})
        return params

    def spec(self):
        return {
            "kind": self.kind, "d": self.d, "L": self.out_dim,
            "width": self.width, "pooling": self.pooling,
            "dropout_rate": self.dropout_rate, "seed": self.seed,
        }


def tuple_index_array(n, k):
    """Indices of all unordered k-subsets of range(n), lexicographic order."""
    if n < k:
        raise ShapeMismatch("tuple_index_array", (n, k))
    return np.array(list(itertools.combinations(range(n), k)), dtype=np.int64)


class JanossyModel(_ModelBase):
    """k-ary pooling: an inner DeepSets over the C(n,k) tuple matrix.

    Input rows are canonically ordered first, so each unordered tuple is
    materialized exactly once with a value-determined internal order.
    """

    kind = "janossy"

    def __init__(self, d, L, k, width=128, pooling="sum", dropout_rate=0.0, seed=0):
        self.d = d
        self.out_dim = L
        self.k = k
        self.inner = DeepSetsModel(d * k, L, width=width, pooling=pooling,
                                   dropout_rate=dropout_rate, seed=seed)
        self.width = width
        self.pooling = pooling
        self.dropout_rate = dropout_rate
        self.seed = seed

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        batch, n, d = x.shape
        if n < self.k:
            raise ShapeMismatch("janossy_forward", x.shape, (None, self.k, d))
        x = x.permute_rows(_canonical_row_order(x.data))
        combos = tuple_index_array(n, self.k)
        outs = []
        for b in range(batch):
            inst = x.slice(0, b, b + 1).reshape((n, d))
            parts = [inst.gather_rows(combos[:, j]) for j in range(self.k)]
            tuples = parts[0] if self.k == 1 else concat(parts, axis=1)
            outs.append(self.inner.forward(
                tuples.reshape((1, combos.shape[0], d * self.k)),
                training=training, rng=rng,
            ))
        return outs[0] if batch == 1 else concat(outs, axis=0)

    def parameters(self):
        return {f"inner.{k}": v for k, v in self.inner.parameters().items()}

    def spec(self):
        return {
            "kind": self.kind, "d": self.d, "L": self.out_dim, "k": self.k,
            "width": self.width, "pooling": self.pooling,
            "dropout_rate": self.dropout_rate, "seed": self.seed,
        }


class PiSgdModel(_ModelBase):
    """LSTM + readout trained on sampled permutations; inference averages
    predictions over fresh random permutations."""

    kind = "pisgd"

    def __init__(self, n, d, L, hidden=128, permutations=20, input_scale=1.0,
                 seed=0, forget_bias=1.0):
        self.n = n
        self.d = d
        self.out_dim = L
        self.hidden = hidden
        self.permutations = permutations
        self.input_scale = input_scale
        self.seed = seed
        self.forget_bias = forget_bias
        self.lstm = LSTMCell(d, hidden, seed=seed_chain(seed, 1),
                             forget_bias=forget_bias)
        self.readout = LinearLayer(hidden, L, "none", seed=seed_chain(seed, 2))

    def forward(self, x, training=False, rng=None):
        """Plain ordered forward; training code permutes the batch itself."""
        x = _as_batch(x)
        if self.input_scale != 1.0:
            x = x * self.input_scale
        return self.readout.forward(self.lstm.run(x))

    def forward_train(self, x, perms):
        """One sampled permutation per instance, then the ordered forward."""
        x = _as_batch(x)
        return self.forward(x.permute_rows(np.asarray(perms, dtype=np.int64)))

    def predict_samples(self, x, rng):
        """Predictions for ``permutations`` fresh uniform row orders."""
        x = np.asarray(x, dtype=np.float64)
        preds = []
        for _ in range(self.permutations):
            preds.append(self.predict(x[rng.permutation(x.shape[0])]))
        return np.stack(preds)

    def predict_average(self, x, rng):
        return self.predict_samples(x, rng).mean(axis=0)

    def parameters(self):
        params = {f"lstm.{k}": v for k, v in self.lstm.parameters().items()}
        params.update({f"readout.{k}": v for k, v in self.readout.parameters().items()})
        return params

    def spec(self):
        return {
            "kind": self.kind, "n": self.n, "d": self.d, "L": self.out_dim,
            "hidden": self.hidden, "permutations": self.permutations,
            "input_scale": self.input_scale, "seed": self.seed,
            "forget_bias": self.forget_bias,
        }


# ---------------------------------------------------------------------------
# construction and checkpointing

_MODEL_KINDS = {}
for _cls in (SpanModel, SpanNoApnModel, SpanFcModel, DeepSetsModel,
             JanossyModel, PiSgdModel):
    _MODEL_KINDS[_cls.kind] = _cls


def build_model(spec):
    """Instantiate a model from its spec dict (as stored in checkpoints)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    cls = _MODEL_KINDS.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown model kind {kind!r}")
    return cls(**spec)


class CheckpointError(ValueError):
    """Unusable checkpoint directory."""


def save_checkpoint(directory, model, extra=None):
    """Write manifest.json plus one tensor blob per named parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format": 1,
        "model": model.spec(),
        "tensors": sorted(params.keys()),
        "extra": extra if extra is not None else {},
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    for name, tensor in params.items():
        write_tensor_blob(directory / f"{name}.sptn", tensor.data)


def load_checkpoint(directory):
    """Rebuild the model and overwrite its parameters from the blobs."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    model = build_model(manifest["model"])
    params = model.parameters()
    if sorted(params.keys()) != manifest["tensors"]:
        raise CheckpointError(f"{directory}: tensor list mismatch")
    for name, tensor in params.items():
        arr = read_tensor_blob(directory / f"{name}.sptn")
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{directory}: blob {name} has shape {arr.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = arr
    return model, manifest["extra"]
