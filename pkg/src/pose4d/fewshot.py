"""Few-shot camera-motion classifier.

A handcrafted image descriptor feeds a dropout-regularised linear softmax head
with one output per :class:`~pose4d.trajectory.MotionType`. The head is trained
episodically (support + query sets sampled per episode) with Adam and a step
learning-rate decay.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DivergedLoss, InsufficientExamples, TooSmallImage
from .trajectory import MotionType

N_CLASSES = len(MotionType)
GRID = 8
N_BINS = 8
FEATURE_DIM = GRID * GRID + 2 * N_BINS
EXTRACTOR_ID = "gray8x8-gradhist8x2-v1"
LUMA = np.array([0.299, 0.587, 0.114])


# ------------------------------------------------------------------- features


def _as_image(image):
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img / 255.0
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def _grad_hist(g):
    # zero gradients carry no orientation information and are not counted
    nz = g[np.abs(g) > 1e-12]
    h, _ = np.histogram(np.clip(nz, -1.0, 1.0), bins=N_BINS, range=(-1.0, 1.0))
    return h / g.size


def extract_features(image):
    """80-d descriptor: 8x8 block-mean grayscale + gradient histograms.

    The last 16 entries are 8-bin histograms (over [-1, 1]) of horizontal then
    vertical finite differences, normalised by the number of differences.
    """
    img = _as_image(image)
    H, W = img.shape[:2]
    if H < GRID or W < GRID:
        raise TooSmallImage(f"image must be at least {GRID}x{GRID}, got {H}x{W}")
    gray = img @ LUMA
    rows = np.linspace(0, H, GRID + 1).astype(int)
    cols = np.linspace(0, W, GRID + 1).astype(int)
    sums = np.add.reduceat(np.add.reduceat(gray, rows[:-1], axis=0), cols[:-1], axis=1)
    counts = np.outer(np.diff(rows), np.diff(cols))
    blocks = (sums / counts).ravel()
    gx = gray[:, 1:] - gray[:, :-1]
    gy = gray[1:, :] - gray[:-1, :]
    return np.concatenate([blocks, _grad_hist(gx), _grad_hist(gy)])


class HandcraftedFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a stack of images to descriptors."""

    extractor_id = EXTRACTOR_ID

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([extract_features(img) for img in X])


# ----------------------------------------------------------------------- head


@dataclass(frozen=True, eq=False)
class LinearHead:
    weights: np.ndarray
    bias: np.ndarray
    dropout: float = 0.5

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != N_CLASSES or b.shape != (N_CLASSES,):
            raise ValueError(f"head must have {N_CLASSES} output classes")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, d, dropout=0.5):
        return cls(np.zeros((N_CLASSES, d)), np.zeros(N_CLASSES), dropout)

    @property
    def dim(self):
        return self.weights.shape[1]


def dropout_mask(shape, p, rng):
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if p <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def forward_head(head, f, training=False, rng=None):
    """Logits ``W @ dropout(f) + b``; dropout is the identity at inference."""
    f = np.asarray(f, dtype=np.float64)
    if training and head.dropout > 0:
        if rng is None:
            raise ValueError("training mode needs an rng")
        f = f * dropout_mask(f.shape, head.dropout, rng)
    return f @ head.weights.T + head.bias


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def classify_motion(head, image, extractor=extract_features):
    """Return ``(MotionType, confidence)``; ties go to the lowest class index."""
    logits = forward_head(head, extractor(image))
    k = int(np.argmax(logits))
    return MotionType(k), float(softmax(logits)[k])


# -------------------------------------------------------------------- episodes


@dataclass(frozen=True, eq=False)
class Episode:
    classes: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_X: np.ndarray
    support_y: np.ndarray
    query_X: np.ndarray
    query_y: np.ndarray


def sample_episode(X, y, classes_per_episode=N_CLASSES, shots=5, queries_per_class=4, rng=None):
    """Draw ``shots`` support and ``queries_per_class`` query examples per class.

    Classes are sampled without replacement; support and query indices are
    disjoint.
    """
    rng = np.random.default_rng(rng)
    y = np.asarray(y)
    labels = np.unique(y)
    if classes_per_episode > len(labels):
        raise InsufficientExamples(
            f"{classes_per_episode} classes requested, dataset has {len(labels)}"
        )
    chosen = rng.choice(labels, size=classes_per_episode, replace=False)
    sup, qry = [], []
    for c in chosen:
        idx = np.flatnonzero(y == c)
        if len(idx) < shots + queries_per_class:
            raise InsufficientExamples(
                f"class {c} has {len(idx)} examples, need {shots + queries_per_class}"
            )
        pick = rng.permutation(idx)[: shots + queries_per_class]
        sup.append(pick[:shots])
        qry.append(pick[shots:])
    s, q = np.concatenate(sup), np.concatenate(qry)
    X = np.asarray(X)
    return Episode(chosen, s, q, X[s], y[s], X[q], y[q])


# ------------------------------------------------------------------- training


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=None):
    """In-place Adam update of the arrays in ``params``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**state.step)
        vhat = v / (1 - b2**state.step)
        params[k] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    episodes_per_epoch: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 5
    shots: int = 5
    queries_per_class: int = 4
    classes_per_episode: int = N_CLASSES
    dropout: float = 0.5
    seed: int = 0


def learning_rate_at(config, epoch):
    """Step schedule: multiply by ``lr_decay`` every ``decay_every`` epochs."""
    return config.learning_rate * config.lr_decay ** (epoch // config.decay_every)


def _head_grads(W, b, F, y, rng, p):
    mask = dropout_mask(F.shape, p, rng)
    Fd = F * mask
    logits = Fd @ W.T + b
    loss = cross_entropy(logits, y)
    P = softmax(logits)
    P[np.arange(len(y)), y] -= 1.0
    P /= len(y)
    return loss, {"weights": P.T @ Fd, "bias": P.sum(axis=0)}


def train_episodic(X, y, config=TrainConfig(), head=None):
    """Train a linear head episodically; returns ``(head, history)``.

    Each episode's loss is the cross-entropy over support and query examples
    together, with dropout on the features. ``history`` has one dict per epoch
    with the learning rate, mean training loss, query accuracy (inference
    mode, measured before each update) and the inference-mode loss over the
    whole dataset at the end of the epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < config.classes_per_episode:
        raise InsufficientExamples("dataset does not cover the requested classes")
    rng = np.random.default_rng(config.seed)
    head = head or LinearHead.zeros(X.shape[1], config.dropout)
    params = {"weights": head.weights.copy(), "bias": head.bias.copy()}
    state = AdamState(lr=config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        losses, correct, total = [], 0, 0
        for _ in range(config.episodes_per_epoch):
            ep = sample_episode(
                X, y, config.classes_per_episode, config.shots, config.queries_per_class, rng
            )
            q_logits = ep.query_X @ params["weights"].T + params["bias"]
            correct += int(np.sum(np.argmax(q_logits, axis=1) == ep.query_y))
            total += len(ep.query_y)
            F = np.concatenate([ep.support_X, ep.query_X])
            yy = np.concatenate([ep.support_y, ep.query_y])
            loss, grads = _head_grads(params["weights"], params["bias"], F, yy, rng, config.dropout)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} in epoch {epoch}")
            adam_step(params, grads, state, lr)
            losses.append(loss)
        eval_loss = cross_entropy(X @ params["weights"].T + params["bias"], y)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "query_accuracy": correct / total,
                "eval_loss": eval_loss,
            }
        )
    return LinearHead(params["weights"], params["bias"], config.dropout), history


# ---------------------------------------------------------------- persistence


def save_checkpoint(path, head, seed=0, extractor_id=EXTRACTOR_ID):
    C, d = head.weights.shape
    Path(path).write_text(
        json.dumps(
            {
                "d": d,
                "C": C,
                "weights": head.weights.ravel().tolist(),
                "bias": head.bias.tolist(),
                "dropout": head.dropout,
                "extractor_id": extractor_id,
                "seed": seed,
            },
            sort_keys=True,
        )
    )


def load_checkpoint(path):
    ck = json.loads(Path(path).read_text())
    W = np.reshape(ck["weights"], (ck["C"], ck["d"]))
    return LinearHead(W, ck["bias"], ck.get("dropout", 0.5)), ck


def load_manifest(path):
    """Read a ``[{image_path, motion_label}, ...]`` manifest; paths are relative to it."""
    from .io import read_png

    path = Path(path)
    items = json.loads(path.read_text())
    images = [read_png(path.parent / it["image_path"]) for it in items]
    labels = [int(MotionType.parse(it["motion_label"])) for it in items]
    return images, np.array(labels, dtype=np.int64)


# ----------------------------------------------------------------- estimator


class MotionClassifier(ClassifierMixin, BaseEstimator):
    """Episodically trained linear motion classifier over feature vectors.

    Compose with :class:`HandcraftedFeatures` in a ``Pipeline`` to classify
    raw images. Labels may be :class:`MotionType` members, names or indices;
    ``predict`` returns class indices.
    """

    def __init__(
        self,
        epochs=15,
        episodes_per_epoch=20,
        learning_rate=1e-3,
        lr_decay=0.5,
        decay_every=5,
        shots=5,
        queries_per_class=4,
        classes_per_episode=N_CLASSES,
        dropout=0.5,
        random_state=0,
    ):
        self.epochs = epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.shots = shots
        self.queries_per_class = queries_per_class
        self.classes_per_episode = classes_per_episode
        self.dropout = dropout
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            epochs=self.epochs,
            episodes_per_epoch=self.episodes_per_epoch,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            decay_every=self.decay_every,
            shots=self.shots,
            queries_per_class=self.queries_per_class,
            classes_per_episode=self.classes_per_episode,
            dropout=self.dropout,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_array(X)
        y = np.array([int(MotionType.parse(v)) for v in np.asarray(y, dtype=object)])
        self.head_, self.history_ = train_episodic(X, y, self._config())
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return forward_head(self.head_, check_array(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)
