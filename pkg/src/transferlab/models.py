"""Small differentiable embedding classifiers.

A model maps a flat image x to a representation R(x) through fully connected
tanh layers (the final embedding layer is linear), then to logits
Z(x) = W_c @ R(x) + b_c and class probabilities F(x) = softmax(Z(x)).
Forward passes, minibatch softmax training and exact input/parameter
gradients are implemented directly in numpy; everything runs in float64,
checkpoints store float32.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .binio import Reader, write_f32_array, write_magic, write_u32, write_u64

CHECKPOINT_MAGIC = b"EXMD"
CHECKPOINT_VERSION = 1

# Below this representation norm, cosine geometry is meaningless.
ZERO_EMBED_TOL = 1e-12


class DimensionMismatchError(ValueError):
    pass


class DegenerateEmbeddingError(RuntimeError):
    """Representation (or raw vector) too close to zero for cosine math."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 32
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


@dataclass
class TrainConfig:
    lr: float = 0.5
    epochs: int = 30
    batch: int = 32
    seed: int = 0


@dataclass
class ParamGrads:
    """Gradient container with the same tree shape as the model parameters."""

    feature: list[tuple[np.ndarray, np.ndarray]]
    w_c: np.ndarray
    b_c: np.ndarray

    @staticmethod
    def zeros_like(model: "EmbeddingModel") -> "ParamGrads":
        return ParamGrads(
            feature=[(np.zeros_like(W), np.zeros_like(b)) for W, b in model.feature],
            w_c=np.zeros_like(model.w_c),
            b_c=np.zeros_like(model.b_c),
        )

    def add(self, other: "ParamGrads", scale: float = 1.0) -> None:
        for (dW, db), (oW, ob) in zip(self.feature, other.feature):
            dW += scale * oW
            db += scale * ob
        self.w_c += scale * other.w_c
        self.b_c += scale * other.b_c


class EmbeddingModel:
    """tanh MLP feature extractor with a linear softmax head on top."""

    def __init__(self, config: ModelConfig,
                 feature: list[tuple[np.ndarray, np.ndarray]],
                 w_c: np.ndarray, b_c: np.ndarray,
                 m_train: int = 0, epochs: int = 0, seed: int | None = None):
        self.config = config
        self.feature = feature
        self.w_c = w_c
        self.b_c = b_c
        self.m_train = m_train
        self.epochs = epochs
        self.seed = config.seed if seed is None else seed
        self.loss_history: list[float] = []
        if w_c.shape != (config.num_classes, config.embed_dim):
            raise DimensionMismatchError(
                f"classifier weights {w_c.shape} do not match "
                f"({config.num_classes}, {config.embed_dim})"
            )

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig) -> "EmbeddingModel":
        """Seeded random init: N(0, 1/fan_in) weights, zero biases."""
        rng = np.random.default_rng(config.seed)
        dims = (config.input_dim, *config.hidden_dims, config.embed_dim)
        feature = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            feature.append((W, np.zeros(fan_out)))
        w_c = rng.normal(0.0, 1.0 / np.sqrt(config.embed_dim),
                         size=(config.num_classes, config.embed_dim))
        b_c = np.zeros(config.num_classes)
        return cls(config, feature, w_c, b_c)

    def copy(self) -> "EmbeddingModel":
        clone = EmbeddingModel(
            self.config,
            [(W.copy(), b.copy()) for W, b in self.feature],
            self.w_c.copy(), self.b_c.copy(),
            m_train=self.m_train, epochs=self.epochs, seed=self.seed,
        )
        clone.loss_history = list(self.loss_history)
        return clone

    # -- forward ----------------------------------------------------------

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.config.input_dim:
            raise DimensionMismatchError(
                f"input dim {X.shape[-1]} != model input dim {self.config.input_dim}"
            )
        return X

    def feature_forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batched forward through the feature stack.

        Returns (R, activations) where activations[i] is the input to layer i
        and activations[-1] is R itself.
        """
        X = self._check_input(np.atleast_2d(X))
        acts = [X]
        last = len(self.feature) - 1
        for i, (W, b) in enumerate(self.feature):
            Z = acts[-1] @ W.T + b
            acts.append(Z if i == last else np.tanh(Z))
        return acts[-1], acts

    def feature_backward(self, acts: list[np.ndarray], d_repr: np.ndarray,
                         want_params: bool = False):
        """Pull a cotangent on R back to the input (and optionally the params).

        Returns d_input, or (d_input, feature_param_grads) when want_params.
        Gradients are summed over the batch.
        """
        grad_out = np.atleast_2d(d_repr)
        last = len(self.feature) - 1
        param_grads = [None] * len(self.feature) if want_params else None
        for i in range(last, -1, -1):
            W, _ = self.feature[i]
            dZ = grad_out if i == last else grad_out * (1.0 - acts[i + 1] ** 2)
            if want_params:
                param_grads[i] = (dZ.T @ acts[i], dZ.sum(axis=0))
            grad_out = dZ @ W
        if want_params:
            return grad_out, param_grads
        return grad_out

    def representations(self, X: np.ndarray) -> np.ndarray:
        R, _ = self.feature_forward(X)
        return R

    def representation(self, x: np.ndarray) -> np.ndarray:
        return self.representations(x)[0]

    def logits_batch(self, X: np.ndarray) -> np.ndarray:
        return self.representations(X) @ self.w_c.T + self.b_c

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_batch(x)[0]

    def probs_batch(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits_batch(X))

    def probs(self, x: np.ndarray) -> np.ndarray:
        return self.probs_batch(x)[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_batch(X), axis=1)

    def checked_representation(self, x: np.ndarray) -> np.ndarray:
        r = self.representation(x)
        if np.linalg.norm(r) < ZERO_EMBED_TOL:
            raise DegenerateEmbeddingError("representation norm below 1e-12")
        return r

    # -- flat parameter view (used by finite-difference checks) ------------

    def param_vector(self) -> np.ndarray:
        parts = []
        for W, b in self.feature:
            parts.extend([W.ravel(), b.ravel()])
        parts.extend([self.w_c.ravel(), self.b_c.ravel()])
        return np.concatenate(parts)

    def set_param_vector(self, theta: np.ndarray) -> None:
        pos = 0

        def take(arr):
            nonlocal pos
            n = arr.size
            arr[...] = theta[pos : pos + n].reshape(arr.shape)
            pos += n

        for W, b in self.feature:
            take(W)
            take(b)
        take(self.w_c)
        take(self.b_c)
        if pos != theta.size:
            raise DimensionMismatchError("parameter vector has wrong length")

    def apply_grads(self, grads: ParamGrads, lr: float,
                    freeze_classifier: bool = False) -> None:
        for (W, b), (dW, db) in zip(self.feature, grads.feature):
            W -= lr * dW
            b -= lr * db
        if not freeze_classifier:
            self.w_c -= lr * grads.w_c
            self.b_c -= lr * grads.b_c


def softmax(Z: np.ndarray) -> np.ndarray:
    Zs = Z - Z.max(axis=-1, keepdims=True)
    e = np.exp(Zs)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(Z: np.ndarray) -> np.ndarray:
    Zs = Z - Z.max(axis=-1, keepdims=True)
    return Zs - np.log(np.exp(Zs).sum(axis=-1, keepdims=True))


def cross_entropy_and_grads(model: EmbeddingModel, X: np.ndarray,
                            y: np.ndarray) -> tuple[float, ParamGrads]:
    """Mean cross-entropy over the batch and gradients for every parameter."""
    R, acts = model.feature_forward(X)
    Z = R @ model.w_c.T + model.b_c
    logp = log_softmax(Z)
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dZ = softmax(Z)
    dZ[np.arange(n), y] -= 1.0
    dZ /= n
    d_repr = dZ @ model.w_c
    _, feat_grads = model.feature_backward(acts, d_repr, want_params=True)
    grads = ParamGrads(feature=feat_grads, w_c=dZ.T @ R, b_c=dZ.sum(axis=0))
    return float(loss), grads


def cross_entropy_input_gradient(model: EmbeddingModel, x: np.ndarray,
                                 label: int) -> np.ndarray:
    """Gradient of the single-sample cross-entropy w.r.t. the input pixels."""
    R, acts = model.feature_forward(x)
    Z = R @ model.w_c.T + model.b_c
    dZ = softmax(Z)
    dZ[0, label] -= 1.0
    d_repr = dZ @ model.w_c
    return model.feature_backward(acts, d_repr)[0]


def train_softmax(model: EmbeddingModel, dataset, hyper: TrainConfig) -> EmbeddingModel:
    """Minibatch gradient descent on softmax cross-entropy.

    Returns a newly trained copy; the input model is untouched. Epoch-mean
    losses are recorded in loss_history and m_train in the metadata.
    Deterministic for a fixed (model seed, hyper seed).
    """
    X, y = _unpack_dataset(dataset)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.max() >= model.config.num_classes:
        raise ValueError(
            f"label {int(y.max())} out of range for {model.config.num_classes} classes"
        )
    trained = model.copy()
    trained.m_train = X.shape[0]
    trained.epochs = hyper.epochs
    rng = np.random.default_rng(hyper.seed)
    n = X.shape[0]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch):
            idx = order[start : start + hyper.batch]
            loss, grads = cross_entropy_and_grads(trained, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (lr={hyper.lr}, batch={hyper.batch})"
                )
            trained.apply_grads(grads, hyper.lr)
            epoch_loss += loss * len(idx)
        trained.loss_history.append(epoch_loss / n)
    return trained


def accuracy(model: EmbeddingModel, dataset) -> float:
    X, y = _unpack_dataset(dataset)
    return float(np.mean(model.predict(X) == y))


def _unpack_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images, dtype=float), np.asarray(dataset.labels)
    X, y = dataset
    return np.asarray(X, dtype=float), np.asarray(y)


# -- cosine geometry -------------------------------------------------------

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity, guarded against near-zero vectors."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_EMBED_TOL or nv < ZERO_EMBED_TOL:
        raise DegenerateEmbeddingError("cosine of a near-zero vector")
    return float(u @ v / (nu * nv))


def cosine_input_gradient(x: np.ndarray, x_ref: np.ndarray) -> np.ndarray:
    """Closed-form gradient of cos(x, x_ref) with respect to x.

    grad = (1/|x|) * (x_ref/|x_ref| - x * cos(x, x_ref) / |x|); exactly
    orthogonal to x.
    """
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    nx = np.linalg.norm(x)
    nr = np.linalg.norm(x_ref)
    if nx < ZERO_EMBED_TOL or nr < ZERO_EMBED_TOL:
        raise DegenerateEmbeddingError("cosine gradient of a near-zero vector")
    c = float(x @ x_ref / (nx * nr))
    return (x_ref / nr - x * (c / nx)) / nx


# -- checkpoint format ------------------------------------------------------
#
# magic "EXMD", version u32, input_dim u32, n_hidden u32, hidden dims u32 each,
# embed_dim u32, num_classes u32, m_train u64, seed u64, then parameters as
# f32 little-endian: per feature layer W row-major then b, finally the
# classifier W then b.

def save_model(model: EmbeddingModel, path) -> None:
    buf = io.BytesIO()
    write_magic(buf, CHECKPOINT_MAGIC)
    write_u32(buf, CHECKPOINT_VERSION)
    cfg = model.config
    write_u32(buf, cfg.input_dim)
    write_u32(buf, len(cfg.hidden_dims))
    for d in cfg.hidden_dims:
        write_u32(buf, d)
    write_u32(buf, cfg.embed_dim)
    write_u32(buf, cfg.num_classes)
    write_u64(buf, model.m_train)
    write_u64(buf, model.seed)
    for W, b in model.feature:
        write_f32_array(buf, W)
        write_f32_array(buf, b)
    write_f32_array(buf, model.w_c)
    write_f32_array(buf, model.b_c)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(CHECKPOINT_MAGIC)
    r.expect_version(CHECKPOINT_VERSION)
    input_dim = r.u32()
    hidden = tuple(r.u32() for _ in range(r.u32()))
    embed_dim = r.u32()
    num_classes = r.u32()
    m_train = r.u64()
    seed = r.u64()
    cfg = ModelConfig(input_dim, hidden, embed_dim, num_classes, seed=seed)
    dims = (input_dim, *hidden, embed_dim)
    feature = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = r.f32_array(fan_out * fan_in).astype(float).reshape(fan_out, fan_in)
        b = r.f32_array(fan_out).astype(float)
        feature.append((W, b))
    w_c = r.f32_array(num_classes * embed_dim).astype(float).reshape(num_classes, embed_dim)
    b_c = r.f32_array(num_classes).astype(float)
    return EmbeddingModel(cfg, feature, w_c, b_c, m_train=m_train, seed=seed)
