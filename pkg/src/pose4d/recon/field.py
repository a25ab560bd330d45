"""Pose-conditioned spatiotemporal feature field.

A query token built from the positional encoding of ``x`` and a temporal
embedding of ``t`` cross-attends over a key/value set made of one token
projected from the camera extrinsics ``P_t`` plus a few learned scene tokens.
A residual connection and a one-hidden-layer MLP map the attended token to
``(r, g, b, sigma)``. Forward and backward passes are written out in numpy.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..exceptions import DivergedLoss, NonFinite
from ..fewshot import AdamState, adam_step

PARAM_NAMES = (
    "W_in", "b_in", "W_pose", "b_pose", "scene",
    "Wq", "Wk", "Wv", "Wo", "bo",
    "W1", "b1", "W2", "b2",
)


def positional_encode(x, octaves=6):
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for ``k < octaves``, per coordinate.

    Accepts a 3-vector or an (N, 3) array; the output has ``3 + 6 * octaves``
    columns, ordered ``x`` then ``(sin_k, cos_k)`` for each octave.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    parts = [x]
    for k in range(octaves):
        w = (2.0**k) * np.pi * x
        parts += [np.sin(w), np.cos(w)]
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def temporal_embed(t, T, dim=16):
    """Sinusoidal embedding of the normalised time ``t / T``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    tau = t / max(T, 1)
    freqs = (2.0 ** np.arange(dim // 2)) * np.pi
    w = tau[:, None] * freqs[None, :]
    out = np.empty((len(t), dim))
    out[:, 0::2] = np.sin(w)
    out[:, 1::2] = np.cos(w)
    return out


def pose_vector(pose):
    return np.concatenate([pose.rotation.ravel(), pose.translation])


@dataclass(frozen=True)
class FieldConfig:
    octaves: int = 6
    time_dim: int = 16
    width: int = 32
    heads: int = 2
    hidden: int = 64
    scene_tokens: int = 4

    @property
    def in_dim(self):
        return 3 + 6 * self.octaves + self.time_dim

    def shapes(self):
        D, Hd = self.width, self.hidden
        return {
            "W_in": (self.in_dim, D), "b_in": (D,),
            "W_pose": (12, D), "b_pose": (D,),
            "scene": (self.scene_tokens, D),
            "Wq": (D, D), "Wk": (D, D), "Wv": (D, D),
            "Wo": (D, D), "bo": (D,),
            "W1": (D, Hd), "b1": (Hd,),
            "W2": (Hd, 4), "b2": (4,),
        }

    def n_params(self):
        return int(sum(np.prod(s) for s in self.shapes().values()))


def init_params(cfg, rng, scale=1.0):
    """Fan-in scaled Gaussian weights, zero biases."""
    params = {}
    for name, shape in cfg.shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        elif name == "scene":
            params[name] = scale * rng.standard_normal(shape)
        else:
            params[name] = scale * rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def zero_params(cfg):
    return {name: np.zeros(shape) for name, shape in cfg.shapes().items()}


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attention(Q, K, V):
    """Scaled dot-product attention over the key axis.

    Shapes: ``Q (N, h, d)``, ``K, V (N, M, h, d)``. Returns the output
    ``(N, h, d)`` and the weights ``(N, h, M)``.
    """
    d = Q.shape[-1]
    s = np.einsum("nhd,nmhd->nhm", Q, K) / np.sqrt(d)
    s = s - s.max(axis=-1, keepdims=True)
    A = np.exp(s)
    A /= A.sum(axis=-1, keepdims=True)
    return np.einsum("nhm,nmhd->nhd", A, V), A


def forward(params, cfg, E, pose_vecs, cache=False):
    """Batch forward pass. ``E`` is (N, in_dim), ``pose_vecs`` (N, 12).

    Returns predictions (N, 4) as ``(r, g, b, sigma)``; with ``cache`` also
    the intermediates needed by :func:`backward`.
    """
    N, D, h = len(E), cfg.width, cfg.heads
    dh = D // h
    q0 = E @ params["W_in"] + params["b_in"]
    pt = pose_vecs @ params["W_pose"] + params["b_pose"]
    T = np.concatenate([pt[:, None, :], np.broadcast_to(params["scene"], (N,) + params["scene"].shape)], axis=1)
    M = T.shape[1]
    Q = (q0 @ params["Wq"]).reshape(N, h, dh)
    K = (T @ params["Wk"]).reshape(N, M, h, dh)
    V = (T @ params["Wv"]).reshape(N, M, h, dh)
    O, A = attention(Q, K, V)
    O = O.reshape(N, D)
    z = q0 + O @ params["Wo"] + params["bo"]
    hid = np.tanh(z @ params["W1"] + params["b1"])
    out = hid @ params["W2"] + params["b2"]
    pred = np.concatenate([_sigmoid(out[:, :3]), _softplus(out[:, 3:])], axis=1)
    if not cache:
        return pred
    return pred, dict(E=E, P=pose_vecs, q0=q0, T=T, Q=Q, K=K, V=V, A=A, O=O, z=z, hid=hid, out=out, pred=pred)


def loss_and_grads(params, cfg, E, pose_vecs, targets, weights=None, scale=1.0):
    """Weighted squared error ``scale * mean_n sum_c w (pred - target)^2`` and its gradients."""
    pred, c = forward(params, cfg, E, pose_vecs, cache=True)
    w = np.ones_like(targets) if weights is None else weights
    diff = pred - targets
    N = len(E)
    loss = scale * float(np.sum(w * diff**2)) / N
    g = {}
    dpred = scale * 2.0 * w * diff / N
    out = c["out"]
    dout = np.empty_like(out)
    rgb = pred[:, :3]
    dout[:, :3] = dpred[:, :3] * rgb * (1.0 - rgb)
    dout[:, 3:] = dpred[:, 3:] * _sigmoid(out[:, 3:])
    g["W2"] = c["hid"].T @ dout
    g["b2"] = dout.sum(0)
    du = (dout @ params["W2"].T) * (1.0 - c["hid"] ** 2)
    g["W1"] = c["z"].T @ du
    g["b1"] = du.sum(0)
    dz = du @ params["W1"].T
    g["Wo"] = c["O"].T @ dz
    g["bo"] = dz.sum(0)
    D, h = cfg.width, cfg.heads
    dh = D // h
    dO = (dz @ params["Wo"].T).reshape(N, h, dh)
    A, Q, K, V = c["A"], c["Q"], c["K"], c["V"]
    dA = np.einsum("nhd,nmhd->nhm", dO, V)
    dV = np.einsum("nhm,nhd->nmhd", A, dO)
    ds = A * (dA - np.sum(A * dA, axis=-1, keepdims=True)) / np.sqrt(dh)
    dQ = np.einsum("nhm,nmhd->nhd", ds, K).reshape(N, D)
    dK = np.einsum("nhm,nhd->nmhd", ds, Q)
    M = K.shape[1]
    dK = dK.reshape(N, M, D)
    dV = dV.reshape(N, M, D)
    T = c["T"]
    g["Wq"] = c["q0"].T @ dQ
    g["Wk"] = np.einsum("nmd,nme->de", T, dK)
    g["Wv"] = np.einsum("nmd,nme->de", T, dV)
    dT = dK @ params["Wk"].T + dV @ params["Wv"].T
    dq0 = dz + dQ @ params["Wq"].T
    g["W_in"] = c["E"].T @ dq0
    g["b_in"] = dq0.sum(0)
    dpt = dT[:, 0, :]
    g["W_pose"] = c["P"].T @ dpt
    g["b_pose"] = dpt.sum(0)
    g["scene"] = dT[:, 1:, :].sum(0)
    return loss, g


def encode_inputs(cfg, X, n_frames):
    """Stack positional and temporal encodings for rows ``[x, y, z, t]``."""
    return np.concatenate(
        [positional_encode(X[:, :3], cfg.octaves), temporal_embed(X[:, 3], n_frames, cfg.time_dim)], axis=1
    )


def field_learning_rate(step, steps_per_epoch, total_steps, lr, final_ratio=0.1, warmup_epochs=0.5):
    """Linear warm-up, constant plateau, then exponential decay to ``lr * final_ratio``.

    Warm-up lasts ``warmup_epochs``; the decay occupies the second half of
    training and ends exactly at ``lr * final_ratio``.
    """
    warm = max(1, int(round(warmup_epochs * steps_per_epoch)))
    if step < warm:
        return lr * (step + 1) / warm
    start = max(warm, total_steps // 2)
    if step < start or total_steps - 1 <= start:
        return lr
    frac = (step - start) / (total_steps - 1 - start)
    return lr * final_ratio**frac


class FeatureField(RegressorMixin, BaseEstimator):
    """Regressor from ``[x, y, z, t]`` rows (plus per-frame poses) to ``(r, g, b, sigma)``.

    ``fit(X, y, poses=..., sample_weight=...)`` trains with Adam; the per-row
    weights (N, 4) allow colour to be ignored on free-space samples. The
    per-epoch full-batch loss is kept in ``loss_history_``.
    """

    def __init__(
        self,
        octaves=6,
        time_dim=16,
        width=32,
        heads=2,
        hidden=64,
        scene_tokens=4,
        init_scale=1.0,
        epochs=20,
        batch_size=256,
        learning_rate=1e-3,
        final_lr_ratio=0.1,
        warmup_epochs=0.5,
        random_state=0,
    ):
        self.octaves = octaves
        self.time_dim = time_dim
        self.width = width
        self.heads = heads
        self.hidden = hidden
        self.scene_tokens = scene_tokens
        self.init_scale = init_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.final_lr_ratio = final_lr_ratio
        self.warmup_epochs = warmup_epochs
        self.random_state = random_state

    @property
    def config(self):
        return FieldConfig(self.octaves, self.time_dim, self.width, self.heads, self.hidden, self.scene_tokens)

    def initialize(self, poses, zero=False):
        """Set fresh parameters without training."""
        cfg = self.config
        rng = np.random.default_rng(self.random_state)
        self.params_ = zero_params(cfg) if zero else init_params(cfg, rng, self.init_scale)
        self.pose_vecs_ = np.stack([pose_vector(p) for p in poses])
        self.n_frames_ = len(poses)
        self.n_features_in_ = 4
        self.loss_history_ = []
        return self

    def _inputs(self, X):
        X = check_array(X)
        t = X[:, 3].astype(np.int64)
        return encode_inputs(self.config, X, self.n_frames_), self.pose_vecs_[t]

    def loss(self, X, y, sample_weight=None):
        E, P = self._inputs(X)
        pred = forward(self.params_, self.config, E, P)
        w = np.ones_like(y) if sample_weight is None else sample_weight
        return float(np.sum(w * (pred - y) ** 2)) / len(E)

    def fit(self, X, y, poses=None, sample_weight=None, warm_start=False):
        if not (warm_start and hasattr(self, "params_")):
            self.initialize(poses)
        cfg = self.config
        E, P = self._inputs(X)
        y = np.asarray(y, dtype=np.float64)
        W = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        n = len(E)
        spe = max(1, int(np.ceil(n / self.batch_size)))
        total = spe * self.epochs
        state = AdamState(lr=self.learning_rate)
        self.lr_history_ = []
        step = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for b in range(spe):
                idx = order[b * self.batch_size : (b + 1) * self.batch_size]
                loss, g = loss_and_grads(self.params_, cfg, E[idx], P[idx], y[idx], W[idx])
                if not np.isfinite(loss):
                    raise DivergedLoss(f"feature-field loss became {loss}")
                lr = field_learning_rate(step, spe, total, self.learning_rate, self.final_lr_ratio, self.warmup_epochs)
                adam_step(self.params_, g, state, lr)
                self.lr_history_.append(lr)
                step += 1
            full = float(np.sum(W * (forward(self.params_, cfg, E, P) - y) ** 2)) / n
            if not np.isfinite(full):
                raise DivergedLoss(f"feature-field loss became {full}")
            self.loss_history_.append(full)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        E, P = self._inputs(X)
        for v in self.params_.values():
            if not np.all(np.isfinite(v)):
                raise NonFinite("feature-field parameters are not finite")
        return forward(self.params_, self.config, E, P)

    def to_json(self):
        check_is_fitted(self, "params_")
        return json.dumps(
            {
                "config": asdict(self.config),
                "n_frames": self.n_frames_,
                "pose_vectors": self.pose_vecs_.tolist(),
                "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params_.items()},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        f = cls(**d["config"])
        f.params_ = {k: np.reshape(v["data"], v["shape"]) for k, v in d["params"].items()}
        f.pose_vecs_ = np.asarray(d["pose_vectors"], dtype=np.float64)
        f.n_frames_ = d["n_frames"]
        f.n_features_in_ = 4
        f.loss_history_ = []
        return f


def field_forward(field, x, t, pose_t):
    """Evaluate one query; returns ``(r, g, b, sigma)``."""
    check_is_fitted(field, "params_")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("query position is not finite")
    for v in field.params_.values():
        if not np.all(np.isfinite(v)):
            raise NonFinite("feature-field parameters are not finite")
    cfg = field.config
    E = encode_inputs(cfg, np.array([[x[0], x[1], x[2], t]]), field.n_frames_)
    return forward(field.params_, cfg, E, pose_vector(pose_t)[None])[0]


def build_training_set(fused, poses, free_samples=8, max_points=None, rng=None, free_extent=0.9):
    """Surface and free-space samples from a fused scene.

    Every surface point becomes a row ``[x, t]`` with target ``(colour, 1)``.
    Along the ray from the camera of frame ``t`` to the point, ``free_samples``
    stratified points over ``[0, free_extent)`` of the way get target
    ``sigma = 0`` with colour weight zero.

    Returns ``(X, y, weights)``.
    """
    rng = np.random.default_rng(rng)
    from ..geometry import PointCloud

    cloud = PointCloud.concatenate([fused.static, fused.dynamic])
    if len(cloud) == 0:
        raise ValueError("fused scene is empty")
    if max_points is not None and len(cloud) > max_points:
        cloud = cloud.subset(np.sort(rng.choice(len(cloud), max_points, replace=False)))
    n = len(cloud)
    t = cloud.source_frame.astype(np.float64)
    X_surf = np.column_stack([cloud.points, t])
    y_surf = np.column_stack([cloud.colors, np.ones(n)])
    w_surf = np.ones((n, 4))
    centers = np.stack([poses[int(k)].center for k in cloud.source_frame])
    frac = (np.arange(free_samples)[None, :] + rng.random((n, free_samples))) / free_samples * free_extent
    pts = centers[:, None, :] + frac[..., None] * (cloud.points - centers)[:, None, :]
    X_free = np.column_stack([pts.reshape(-1, 3), np.repeat(t, free_samples)])
    y_free = np.zeros((n * free_samples, 4))
    w_free = np.zeros((n * free_samples, 4))
    w_free[:, 3] = 1.0
    return (
        np.concatenate([X_surf, X_free]),
        np.concatenate([y_surf, y_free]),
        np.concatenate([w_surf, w_free]),
    )


def field_train(field, fused, poses, epochs=None, learning_rate=None, max_points=2000):
    """Fit ``field`` to a fused scene; returns ``(field, loss_history)``."""
    if epochs is not None:
        field.set_params(epochs=epochs)
    if learning_rate is not None:
        field.set_params(learning_rate=learning_rate)
    X, y, w = build_training_set(fused, poses, max_points=max_points, rng=field.random_state)
    field.fit(X, y, poses=poses, sample_weight=w)
    return field, list(field.loss_history_)


def grad_check(field, X, y, weights=None, eps=1e-5, scale=1.0):
    """Max over parameters of ``|g_analytic - g_fd| / max(1, |g_fd|)``.

    Central differences of the batch loss on ``(X, y)`` are compared against
    :func:`loss_and_grads`.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    check_is_fitted(field, "params_")
    cfg = field.config
    E, P = field._inputs(X)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if weights is None else weights
    params = {k: v.copy() for k, v in field.params_.items()}
    _, g = loss_and_grads(params, cfg, E, P, y, w, scale)

    def L():
        return scale * float(np.sum(w * (forward(params, cfg, E, P) - y) ** 2)) / len(E)

    worst = 0.0
    for name in PARAM_NAMES:
        p = params[name]
        flat = p.reshape(-1)
        ga = g[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = L()
            flat[i] = old - eps
            lm = L()
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(fd)))
    return worst
