"""Non-linear branch: embedding tables, fusion layer and ReLU tower.

Each user owns two K-dim embedding rows (one shaped by rating behaviour,
one by reliability), and likewise each product. The fusion layer adds a
user's two rows, applies a KxK fully-connected map and ReLU, and the same
for the product; the two fused vectors are concatenated into a 2K input
that a tower of shrinking ReLU layers maps down to the p-dim pair
embedding. A pxp output projection plus linear regression produce the
rating. Forward and reverse passes are hand-written numpy; ReLU's
subgradient at exactly 0 is 0, and embedding gradients only touch the
rows a batch looked up.
"""

import copy
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .ingest import MAX_RATING, InteractionStore
from .linalg import AdamState, TrainingDivergedError, adam_step, relu

__all__ = [
    "MlpParams",
    "MlpHyperparams",
    "init_mlp",
    "fusion_layer",
    "mlp_embedding",
    "mlp_backward",
    "mlp_predict",
    "train_mlp",
    "save_mlp",
    "load_mlp",
]


@dataclass
class MlpParams:
    """All parameters of the non-linear branch (embedding rows are rows)."""

    user_rating_emb: np.ndarray  # n x K
    user_rel_emb: np.ndarray  # n x K
    prod_rating_emb: np.ndarray  # m x K
    prod_rel_emb: np.ndarray  # m x K
    fusion_w_user: np.ndarray  # K x K
    fusion_b_user: np.ndarray  # K
    fusion_w_prod: np.ndarray  # K x K
    fusion_b_prod: np.ndarray  # K
    tower_w: list  # layer l: T_{l-1} x T_l
    tower_b: list  # layer l: T_l
    head: np.ndarray  # p x p output projection
    reg_w: np.ndarray  # p regression weights
    reg_b: float

    @property
    def latent_dim(self) -> int:
        return self.user_rating_emb.shape[1]

    @property
    def tower_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.tower_w)

    @property
    def predictive_dim(self) -> int:
        return self.tower_w[-1].shape[1]

    @property
    def n_users(self) -> int:
        return self.user_rating_emb.shape[0]

    @property
    def n_products(self) -> int:
        return self.prod_rating_emb.shape[0]

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)


@dataclass
class MlpHyperparams:
    latent_dim: int
    tower: tuple = (16, 8)
    batch_size: int = 512
    epochs: int = 12
    lr: float = 0.001
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    seed: int = 0
    patience: int = 3
    init_scale: float = 0.01
    init_from_factors: bool = False


def init_mlp(
    n_users: int,
    n_products: int,
    latent_dim: int,
    tower_widths,
    seed: int,
    scale: float = 0.01,
) -> MlpParams:
    """Gaussian(0, scale) weights, zero biases, deterministic under seed.

    Tower widths must be positive and non-increasing starting from the
    2K concatenation width; the last width is the predictive dimension.
    """
    widths = [int(w) for w in tower_widths]
    if not widths:
        raise ValueError("tower must have at least one layer")
    if any(w < 1 for w in widths):
        raise ValueError(f"tower widths must be >= 1, got {widths}")
    dims = [2 * latent_dim] + widths
    if any(dims[l + 1] > dims[l] for l in range(len(widths))):
        raise ValueError(f"tower widths must be non-increasing from {2 * latent_dim}, got {widths}")

    rng = np.random.default_rng(seed)
    k = latent_dim
    p = widths[-1]
    return MlpParams(
        user_rating_emb=rng.normal(0.0, scale, (n_users, k)),
        user_rel_emb=rng.normal(0.0, scale, (n_users, k)),
        prod_rating_emb=rng.normal(0.0, scale, (n_products, k)),
        prod_rel_emb=rng.normal(0.0, scale, (n_products, k)),
        fusion_w_user=rng.normal(0.0, scale, (k, k)),
        fusion_b_user=np.zeros(k),
        fusion_w_prod=rng.normal(0.0, scale, (k, k)),
        fusion_b_prod=np.zeros(k),
        tower_w=[rng.normal(0.0, scale, (dims[l], dims[l + 1])) for l in range(len(widths))],
        tower_b=[np.zeros(w) for w in widths],
        head=rng.normal(0.0, scale, (p, p)),
        reg_w=rng.normal(0.0, scale, p),
        reg_b=0.0,
    )


def _forward_batch(params: MlpParams, idx_u, idx_p):
    """Forward pass for index arrays; returns (theta, cache)."""
    user_sum = params.user_rating_emb[idx_u] + params.user_rel_emb[idx_u]
    prod_sum = params.prod_rating_emb[idx_p] + params.prod_rel_emb[idx_p]
    a_pre = user_sum @ params.fusion_w_user.T + params.fusion_b_user
    b_pre = prod_sum @ params.fusion_w_prod.T + params.fusion_b_prod
    a = relu(a_pre)
    b = relu(b_pre)
    hidden = [np.concatenate([a, b], axis=1)]
    pres = []
    for w, bias in zip(params.tower_w, params.tower_b):
        pre = hidden[-1] @ w + bias
        pres.append(pre)
        hidden.append(relu(pre))
    cache = {
        "idx_u": idx_u,
        "idx_p": idx_p,
        "user_sum": user_sum,
        "prod_sum": prod_sum,
        "a_pre": a_pre,
        "b_pre": b_pre,
        "hidden": hidden,
        "pres": pres,
    }
    return hidden[-1], cache


def _zero_grads(params: MlpParams) -> dict:
    grads = {
        "user_rating_emb": np.zeros_like(params.user_rating_emb),
        "user_rel_emb": np.zeros_like(params.user_rel_emb),
        "prod_rating_emb": np.zeros_like(params.prod_rating_emb),
        "prod_rel_emb": np.zeros_like(params.prod_rel_emb),
        "fusion_w_user": np.zeros_like(params.fusion_w_user),
        "fusion_b_user": np.zeros_like(params.fusion_b_user),
        "fusion_w_prod": np.zeros_like(params.fusion_w_prod),
        "fusion_b_prod": np.zeros_like(params.fusion_b_prod),
        "head": np.zeros_like(params.head),
        "reg_w": np.zeros_like(params.reg_w),
        "reg_b": np.zeros(1),
    }
    for l, (w, b) in enumerate(zip(params.tower_w, params.tower_b)):
        grads[f"tower_w_{l}"] = np.zeros_like(w)
        grads[f"tower_b_{l}"] = np.zeros_like(b)
    return grads


def _backward_from_theta(params: MlpParams, cache: dict, d_theta, grads: dict) -> None:
    """Accumulate gradients below the pair embedding into `grads`."""
    hidden, pres = cache["hidden"], cache["pres"]
    d_h = d_theta
    for l in range(len(params.tower_w) - 1, -1, -1):
        d_pre = d_h * (pres[l] > 0)
        grads[f"tower_w_{l}"] += hidden[l].T @ d_pre
        grads[f"tower_b_{l}"] += d_pre.sum(axis=0)
        d_h = d_pre @ params.tower_w[l].T
    k = params.latent_dim
    d_a = d_h[:, :k] * (cache["a_pre"] > 0)
    d_b = d_h[:, k:] * (cache["b_pre"] > 0)
    grads["fusion_w_user"] += d_a.T @ cache["user_sum"]
    grads["fusion_b_user"] += d_a.sum(axis=0)
    grads["fusion_w_prod"] += d_b.T @ cache["prod_sum"]
    grads["fusion_b_prod"] += d_b.sum(axis=0)
    d_user = d_a @ params.fusion_w_user
    d_prod = d_b @ params.fusion_w_prod
    np.add.at(grads["user_rating_emb"], cache["idx_u"], d_user)
    np.add.at(grads["user_rel_emb"], cache["idx_u"], d_user)
    np.add.at(grads["prod_rating_emb"], cache["idx_p"], d_prod)
    np.add.at(grads["prod_rel_emb"], cache["idx_p"], d_prod)


def _head_forward(params: MlpParams, theta):
    hidden = theta @ params.head
    return hidden, MAX_RATING * (hidden @ params.reg_w + params.reg_b)


def _backward_batch(params: MlpParams, cache: dict, d_raw) -> dict:
    """Gradients of sum(d_raw * raw_prediction) for every parameter."""
    theta = cache["hidden"][-1]
    head_hidden = theta @ params.head
    d_hidden = (MAX_RATING * d_raw)[:, None] * params.reg_w[None, :]
    grads = _zero_grads(params)
    grads["head"] += theta.T @ d_hidden
    grads["reg_w"] += head_hidden.T @ (MAX_RATING * d_raw)
    grads["reg_b"] += np.sum(MAX_RATING * d_raw)
    d_theta = d_hidden @ params.head.T
    _backward_from_theta(params, cache, d_theta, grads)
    return grads


def fusion_layer(params: MlpParams, i: int, j: int):
    """Fused user and product vectors (a_i, b_j) for one pair."""
    if not (0 <= i < params.n_users and 0 <= j < params.n_products):
        raise IndexError(f"pair ({i}, {j}) out of range")
    _, cache = _forward_batch(params, np.array([i]), np.array([j]))
    k = params.latent_dim
    v = cache["hidden"][0][0]
    return v[:k], v[k:]


def mlp_embedding(params: MlpParams, i: int, j: int) -> np.ndarray:
    """p-dim pair embedding out of the ReLU tower."""
    if not (0 <= i < params.n_users and 0 <= j < params.n_products):
        raise IndexError(f"pair ({i}, {j}) out of range")
    theta, _ = _forward_batch(params, np.array([i]), np.array([j]))
    return theta[0]


def mlp_predict(params: MlpParams, i: int, j: int) -> float:
    """Raw-scale rating prediction from the branch's own head."""
    theta = mlp_embedding(params, i, j)
    _, pred = _head_forward(params, theta[None, :])
    return float(pred[0])


def mlp_backward(params: MlpParams, i: int, j: int, loss_grad: float) -> dict:
    """Gradients of ``loss_grad * raw_prediction(i, j)`` for all fields.

    ``loss_grad`` is the upstream derivative with respect to the raw
    prediction. Embedding gradients come back as full tables with only
    the looked-up rows non-zero.
    """
    _, cache = _forward_batch(params, np.array([i]), np.array([j]))
    return _backward_batch(params, cache, np.array([float(loss_grad)]))


def _param_dict(params: MlpParams) -> dict:
    out = {
        "user_rating_emb": params.user_rating_emb,
        "user_rel_emb": params.user_rel_emb,
        "prod_rating_emb": params.prod_rating_emb,
        "prod_rel_emb": params.prod_rel_emb,
        "fusion_w_user": params.fusion_w_user,
        "fusion_b_user": params.fusion_b_user,
        "fusion_w_prod": params.fusion_w_prod,
        "fusion_b_prod": params.fusion_b_prod,
        "head": params.head,
        "reg_w": params.reg_w,
    }
    for l, (w, b) in enumerate(zip(params.tower_w, params.tower_b)):
        out[f"tower_w_{l}"] = w
        out[f"tower_b_{l}"] = b
    return out


def train_mlp(
    store: InteractionStore,
    hyper: MlpHyperparams,
    val_store: InteractionStore | None = None,
    on_epoch=None,
) -> MlpParams:
    """Train the whole branch with mini-batch Adam on raw-scale MAE.

    Per-example gradients are summed, not averaged, within a batch.
    Optional early stopping on validation MAE with ``hyper.patience``.
    """
    if not store.omega:
        raise ValueError("store has no ratings to train on")
    params = init_mlp(
        store.n_users, store.n_products, hyper.latent_dim, hyper.tower,
        hyper.seed, hyper.init_scale,
    )
    if hyper.init_from_factors:
        from .mf_model import svd_init

        (w, z), (e, f) = svd_init(store, hyper.latent_dim)
        params.user_rating_emb = w.T.copy()
        params.prod_rating_emb = z.T.copy()
        params.user_rel_emb = e.T.copy()
        params.prod_rel_emb = f.T.copy()

    pairs = sorted(store.omega)
    idx_u = np.array([p[0] for p in pairs], dtype=np.intp)
    idx_p = np.array([p[1] for p in pairs], dtype=np.intp)
    raw = np.array([store.raw_ratings[p] for p in pairs], dtype=np.float64)

    val_points = None
    if val_store and val_store.omega:
        vpairs = sorted(val_store.omega)
        val_points = (
            np.array([p[0] for p in vpairs], dtype=np.intp),
            np.array([p[1] for p in vpairs], dtype=np.intp),
            np.array([val_store.raw_ratings[p] for p in vpairs], dtype=np.float64),
        )

    weights = _param_dict(params)
    reg_b_arr = np.array([params.reg_b])
    weights["reg_b"] = reg_b_arr
    state = AdamState(lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    n = idx_u.size
    best_val = np.inf
    stall = 0
    for epoch in range(hyper.epochs):
        started = time.perf_counter()
        state.lr = hyper.lr * hyper.lr_decay**epoch
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            bu, bp, target = idx_u[batch], idx_p[batch], raw[batch]
            _, cache = _forward_batch(params, bu, bp)
            _, preds = _head_forward(params, cache["hidden"][-1])
            grads = _backward_batch(params, cache, np.sign(preds - target))
            adam_step(weights, grads, state)
            params.reg_b = float(reg_b_arr[0])
        _, cache = _forward_batch(params, idx_u, idx_p)
        _, preds = _head_forward(params, cache["hidden"][-1])
        loss = float(np.mean(np.abs(preds - raw)))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"mlp training diverged at epoch {epoch}: loss={loss}")
        if on_epoch is not None:
            on_epoch("mlp", epoch, loss, time.perf_counter() - started)
        if val_points is not None and hyper.patience:
            vu, vp, vraw = val_points
            _, vcache = _forward_batch(params, vu, vp)
            _, vpreds = _head_forward(params, vcache["hidden"][-1])
            val = float(np.mean(np.abs(vpreds - vraw)))
            if val < best_val - 1e-12:
                best_val = val
                stall = 0
            else:
                stall += 1
                if stall >= hyper.patience:
                    break
    return params


_FIXED_SECTIONS = [
    "user_rating_emb", "user_rel_emb", "prod_rating_emb", "prod_rel_emb",
    "fusion_w_user", "fusion_b_user", "fusion_w_prod", "fusion_b_prod",
]


def mlp_sections(params: MlpParams, prefix: str = ""):
    """(name, array) list in a fixed order, tower layers numbered."""
    out = [(prefix + name, getattr(params, name)) for name in _FIXED_SECTIONS]
    for l, (w, b) in enumerate(zip(params.tower_w, params.tower_b)):
        out.append((f"{prefix}tower_w_{l}", w))
        out.append((f"{prefix}tower_b_{l}", b))
    out.append((prefix + "head", params.head))
    out.append((prefix + "reg_w", params.reg_w))
    out.append((prefix + "reg_b", np.array([params.reg_b])))
    return out


def params_from_sections(arrays: dict, n_layers: int, prefix: str = "") -> MlpParams:
    fields = {name: arrays[prefix + name] for name in _FIXED_SECTIONS}
    return MlpParams(
        tower_w=[arrays[f"{prefix}tower_w_{l}"] for l in range(n_layers)],
        tower_b=[arrays[f"{prefix}tower_b_{l}"] for l in range(n_layers)],
        head=arrays[prefix + "head"],
        reg_w=arrays[prefix + "reg_w"],
        reg_b=float(arrays[prefix + "reg_b"][0]),
        **fields,
    )


def save_mlp(params: MlpParams, path) -> None:
    meta = {
        "n_users": params.n_users,
        "n_products": params.n_products,
        "latent_dim": params.latent_dim,
        "tower": list(params.tower_widths),
        "predictive_dim": params.predictive_dim,
    }
    checkpoint.save_sections(path, "mlp", meta, mlp_sections(params))


def load_mlp(path) -> MlpParams:
    kind, meta, arrays = checkpoint.load_sections(path)
    if kind != "mlp":
        raise ValueError(f"{path}: expected an mlp checkpoint, found {kind!r}")
    return params_from_sections(arrays, len(meta["tower"]))
