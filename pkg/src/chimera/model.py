"""Encoder / projector / classifier MLP and SGD with momentum."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Parameters of M = {encoder, projector, classifier}.

    Each layer is a ``(weight, bias)`` pair with weight shaped
    ``(d_in, d_out)``. Hidden layers use relu; the last layer of the
    encoder and the projector is linear.
    """

    encoder: list
    projector: list
    classifier: tuple

    def __post_init__(self):
        self.validate()

    def validate(self):
        for group in (self.encoder, self.projector):
            for (w0, _), (w1, _) in zip(group, group[1:]):
                if w0.shape[1] != w1.shape[0]:
                    raise ShapeError("layer chain", w0.shape, w1.shape)
        z_dim = self.encoder[-1][0].shape[1]
        if self.projector and self.projector[0][0].shape[0] != z_dim:
            raise ShapeError("projector input", self.encoder[-1][0].shape, self.projector[0][0].shape)
        if self.classifier[0].shape[0] != z_dim:
            raise ShapeError("classifier input", self.encoder[-1][0].shape, self.classifier[0].shape)
        for w, b in self.layers():
            if b.shape != (w.shape[1],):
                raise ShapeError("bias", w.shape, b.shape)

    @property
    def in_dim(self):
        return self.encoder[0][0].shape[0]

    @property
    def num_classes(self):
        return self.classifier[0].shape[1]

    def layers(self):
        return list(self.encoder) + list(self.projector) + [tuple(self.classifier)]

    def named_parameters(self):
        out = []
        for gname, group in (("encoder", self.encoder), ("projector", self.projector)):
            for i, (w, b) in enumerate(group):
                out.append((f"{gname}.{i}.weight", w))
                out.append((f"{gname}.{i}.bias", b))
        out.append(("classifier.weight", self.classifier[0]))
        out.append(("classifier.bias", self.classifier[1]))
        return out

    def parameters(self, groups=("encoder", "projector", "classifier")):
        return [p for name, p in self.named_parameters() if name.split(".")[0] in groups]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def shapes(self):
        return {name: p.shape for name, p in self.named_parameters()}

    def clone(self):
        def cp(layer):
            return tuple(Tensor(t.data.copy(), requires_grad=True) for t in layer)
        return ModelParams([cp(l) for l in self.encoder], [cp(l) for l in self.projector], cp(self.classifier))


def _init_layer(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    b = rng.uniform(-bound, bound, size=d_out)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def init_model(in_dim, num_classes, rng, hidden=(64, 64), proj_hidden=64, proj_dim=16):
    """Random model with uniform(-1/sqrt(d_in), 1/sqrt(d_in)) layers."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dims = [in_dim, *hidden]
    encoder = [_init_layer(rng, a, b) for a, b in zip(dims, dims[1:])]
    z = dims[-1]
    pdims = [z, proj_hidden, proj_dim] if proj_hidden else [z, proj_dim]
    projector = [_init_layer(rng, a, b) for a, b in zip(pdims, pdims[1:])]
    classifier = _init_layer(rng, z, num_classes)
    return ModelParams(encoder, projector, classifier)


def init_like(params, rng):
    """Same architecture as ``params`` with freshly drawn weights."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    def fresh(group):
        return [_init_layer(rng, *w.shape) for w, _ in group]
    return ModelParams(fresh(params.encoder), fresh(params.projector), _init_layer(rng, *params.classifier[0].shape))


def _mlp(layers, x):
    h = x
    for i, (w, b) in enumerate(layers):
        h = T.add(T.matmul(h, w), b)
        if i < len(layers) - 1:
            h = T.relu(h)
    return h


def _batch(x):
    x = T.as_tensor(x)
    if x.data.ndim == 1:
        x = Tensor(x.data[None, :])
    return x


def encode(params, x):
    x = _batch(x)
    if x.shape[1] != params.in_dim:
        raise ShapeError("encode", x.shape, params.encoder[0][0].shape)
    return _mlp(params.encoder, x)


def project(params, z):
    """Map embeddings onto the unit sphere."""
    return T.l2_normalize(_mlp(params.projector, z))


def features(params, x):
    return project(params, encode(params, x))


def logits_from_z(params, z):
    w, b = params.classifier
    return T.add(T.matmul(z, w), b)


def logits(params, x):
    return logits_from_z(params, encode(params, x))


def classify(params, x):
    """Class probability rows."""
    return T.softmax(logits(params, x))


def predict_proba(params, X, batch_size=4096):
    """Detached probabilities as a numpy array."""
    X = np.asarray(X, dtype=np.float64)
    out = [classify(params, Tensor(X[i:i + batch_size])).data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.num_classes))


def embed(params, X, projected=False):
    z = encode(params, Tensor(np.asarray(X, dtype=np.float64)))
    return (project(params, z) if projected else z).data


@dataclass
class OptimizerState:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        state.velocity = {name: np.zeros(p.shape) for name, p in params.named_parameters()}
        return state


def sgd_step(params, state, groups=("encoder", "projector", "classifier")):
    """In-place momentum SGD over the named groups.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    named = [(n, p) for n, p in params.named_parameters() if n.split(".")[0] in groups]
    missing = [n for n, p in named if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for: {', '.join(missing)}")
    for name, p in named:
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            if v is not None:
                raise ShapeError("velocity", v.shape, p.shape)
            v = np.zeros(p.shape)
        v = state.momentum * v + p.grad + state.weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
    return params, state


# -- checkpoints ---------------------------------------------------------

def params_to_arrays(params, prefix=""):
    return {prefix + n: p.data for n, p in params.named_parameters()}


def arrays_to_params(arrays, prefix=""):
    def layers(group):
        out, i = [], 0
        while f"{prefix}{group}.{i}.weight" in arrays:
            out.append((Tensor(arrays[f"{prefix}{group}.{i}.weight"], requires_grad=True),
                        Tensor(arrays[f"{prefix}{group}.{i}.bias"], requires_grad=True)))
            i += 1
        return out
    cls = (Tensor(arrays[f"{prefix}classifier.weight"], requires_grad=True),
           Tensor(arrays[f"{prefix}classifier.bias"], requires_grad=True))
    return ModelParams(layers("encoder"), layers("projector"), cls)


def save_params(path, models, meta=None):
    """Write one or more parameter sets to a versioned ``.npz`` file."""
    if isinstance(models, ModelParams):
        models = [models]
    arrays = {}
    for k, m in enumerate(models):
        arrays.update(params_to_arrays(m, prefix=f"net{k}/"))
    header = {"version": CHECKPOINT_VERSION, "num_nets": len(models), "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path, expected_shapes=None):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(bytes(arrays.pop("__header__")).decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    models = [arrays_to_params(arrays, prefix=f"net{k}/") for k in range(header["num_nets"])]
    if expected_shapes is not None:
        for m in models:
            got = m.shapes()
            if got != expected_shapes:
                diff = {k: (expected_shapes.get(k), got.get(k)) for k in set(got) | set(expected_shapes)
                        if expected_shapes.get(k) != got.get(k)}
                raise ShapeError("checkpoint architecture", *[v for pair in diff.values() for v in pair if v])
    return models, header.get("meta", {})


def params_bytes(params):
    buf = io.BytesIO()
    for _, p in params.named_parameters():
        buf.write(p.data.tobytes())
    return buf.getvalue()
