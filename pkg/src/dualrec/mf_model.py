"""Linear-kernel branch: factor training and its prediction head.

Two factor models are trained on the sparse store. The rating objective
fits sigmoid(w_i . z_j) to the normalized ratings; the joint objective
shares one user matrix between the ratings and the reliability scores,
fitting sigmoid(e_i . z_j) to ratings and sigmoid(e_i . f_j) to
reliability simultaneously. Both use squared error over the observed
entries plus count-weighted L2 regularization, minimized with mini-batch
Adam from an SVD warm start.

On top of the trained factors sits a small head: two KxK projections mix
the elementwise products of the rating-branch and joint-branch factors
into one K-dim pair embedding, which a Kxp output projection and a linear
regression turn into a rating. The head is trained with MAE against the
raw ratings, factors frozen.
"""

import copy
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .ingest import MAX_RATING, InteractionStore
from .linalg import AdamState, TrainingDivergedError, adam_step, sigmoid, truncated_svd

__all__ = [
    "MfParams",
    "MfHyperparams",
    "svd_init",
    "rating_loss",
    "rating_loss_grads",
    "reliability_loss",
    "reliability_loss_grads",
    "joint_loss",
    "joint_loss_grads",
    "train_mf",
    "mf_embedding",
    "mf_predict",
    "factor_predict",
    "save_mf",
    "load_mf",
]


@dataclass
class MfParams:
    """All parameters of the linear branch.

    Factor matrices store one column per user/product (shape K x n or
    K x m). ``user_rating``/``prod_rating`` come from the rating
    objective; ``user_joint``/``prod_joint``/``prod_rel`` from the joint
    objective, where ``user_joint`` is the shared user matrix and
    ``prod_rel`` only ever meets the reliability data.
    """

    user_rating: np.ndarray
    prod_rating: np.ndarray
    user_joint: np.ndarray
    prod_joint: np.ndarray
    prod_rel: np.ndarray
    proj_rating: np.ndarray  # K x K mixer for the rating-branch product
    proj_joint: np.ndarray  # K x K mixer for the joint-branch product
    head: np.ndarray  # K x p output projection
    reg_w: np.ndarray  # p regression weights
    reg_b: float

    @property
    def latent_dim(self) -> int:
        return self.user_rating.shape[0]

    @property
    def predictive_dim(self) -> int:
        return self.head.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_rating.shape[1]

    @property
    def n_products(self) -> int:
        return self.prod_rating.shape[1]

    def copy(self) -> "MfParams":
        return copy.deepcopy(self)


@dataclass
class MfHyperparams:
    latent_dim: int
    predictive_dim: int = 8
    reg_lambda: float = 0.1
    batch_size: int = 512
    epochs: int = 12
    lr: float = 0.001
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    seed: int = 0
    patience: int = 3
    init_scale: float = 0.01

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")


def _dense(store: InteractionStore, values: dict) -> np.ndarray:
    """Zero-filled dense matrix of the given sparse values."""
    out = np.zeros((store.n_users, store.n_products))
    for (i, j), v in values.items():
        out[i, j] = v
    return out


def svd_init(store: InteractionStore, latent_dim: int):
    """SVD warm starts for both factor models.

    Missing entries are treated as zero for the decomposition only.
    Returns ((W, Z), (E, F)): W = (U sqrt(S))^T and Z = sqrt(S) V^T from
    the rating matrix, and the same recipe on the reliability matrix.
    """

    def decompose(dense):
        u, s, vt = truncated_svd(dense, latent_dim)
        root = np.sqrt(s)
        return (u * root).T, root[:, None] * vt

    w, z = decompose(_dense(store, store.ratings))
    e, f = decompose(_dense(store, store.reliability))
    return (w, z), (e, f)


def _pair_arrays(keys, values: dict):
    pairs = sorted(keys)
    idx_u = np.array([p[0] for p in pairs], dtype=np.intp)
    idx_p = np.array([p[1] for p in pairs], dtype=np.intp)
    vals = np.array([values[p] for p in pairs])
    return idx_u, idx_p, vals


def _counts(keys, n_users: int, n_products: int):
    by_user = np.zeros(n_users)
    by_prod = np.zeros(n_products)
    for i, j in keys:
        by_user[i] += 1
        by_prod[j] += 1
    return by_user, by_prod


def _sq_data_term(u_mat, v_mat, idx_u, idx_p, targets):
    """Squared-error data term and the per-pair residual coefficient.

    The coefficient is d(term)/d(u_i . v_j), i.e. 2 (pred - target)
    pred (1 - pred) with pred = sigmoid(u_i . v_j).
    """
    if idx_u.size == 0:
        return 0.0, np.zeros(0)
    dots = np.einsum("kb,kb->b", u_mat[:, idx_u], v_mat[:, idx_p])
    preds = sigmoid(dots)
    resid = preds - targets
    coef = 2.0 * resid * preds * (1.0 - preds)
    return float(np.sum(resid**2)), coef


def _scatter_cols(n_cols: int, latent_dim: int, idx, contrib):
    """Accumulate per-pair K-vectors into the indexed columns."""
    out = np.zeros((n_cols, latent_dim))
    np.add.at(out, idx, contrib)
    return out.T


def rating_loss(params: MfParams, store: InteractionStore, reg_lambda: float) -> float:
    """Rating objective over the observed ratings."""
    idx_u, idx_p, vals = _pair_arrays(store.omega, store.ratings)
    term, _ = _sq_data_term(params.user_rating, params.prod_rating, idx_u, idx_p, vals)
    n_u, n_p = _counts(store.omega, params.n_users, params.n_products)
    reg = np.sum(n_u * np.sum(params.user_rating**2, axis=0)) + np.sum(
        n_p * np.sum(params.prod_rating**2, axis=0)
    )
    return term + reg_lambda * float(reg)


def rating_loss_grads(params: MfParams, store: InteractionStore, reg_lambda: float):
    """Rating objective value plus gradients for its two factor blocks."""
    idx_u, idx_p, vals = _pair_arrays(store.omega, store.ratings)
    loss, grads = _pair_loss_grads(
        params.user_rating, params.prod_rating, idx_u, idx_p, vals, reg_lambda
    )
    return loss, {"user_rating": grads[0], "prod_rating": grads[1]}


def _pair_loss_grads(u_mat, v_mat, idx_u, idx_p, targets, reg_lambda):
    """Loss and gradients of one squared data term with per-pair L2.

    The count-weighted regularizer equals a per-observed-pair penalty
    lambda (|u_i|^2 + |v_j|^2), which is the form used here so that
    mini-batches of pairs sum exactly to the full objective.
    """
    k = u_mat.shape[0]
    term, coef = _sq_data_term(u_mat, v_mat, idx_u, idx_p, targets)
    u_cols = u_mat[:, idx_u].T
    v_cols = v_mat[:, idx_p].T
    reg = reg_lambda * float(np.sum(u_cols**2) + np.sum(v_cols**2))
    du = _scatter_cols(u_mat.shape[1], k, idx_u, coef[:, None] * v_cols + 2.0 * reg_lambda * u_cols)
    dv = _scatter_cols(v_mat.shape[1], k, idx_p, coef[:, None] * u_cols + 2.0 * reg_lambda * v_cols)
    return term + reg, (du, dv)


def _pair_loss_value(u_mat, v_mat, idx_u, idx_p, targets, reg_lambda, chunk=4096):
    """Loss of one squared data term with per-pair L2, no gradients.

    Evaluated in fixed-size chunks so the gathered column blocks stay
    cache-resident regardless of how many pairs are observed.
    """
    total = 0.0
    for start in range(0, idx_u.size, chunk):
        sl = slice(start, start + chunk)
        term, _ = _sq_data_term(u_mat, v_mat, idx_u[sl], idx_p[sl], targets[sl])
        total += term + reg_lambda * float(
            np.sum(u_mat[:, idx_u[sl]] ** 2) + np.sum(v_mat[:, idx_p[sl]] ** 2)
        )
    return total


def reliability_loss(params: MfParams, store: InteractionStore, reg_lambda: float) -> float:
    """Reliability-only objective over the scored pairs."""
    idx_u, idx_p, vals = _pair_arrays(store.psi, store.reliability)
    term, _ = _sq_data_term(params.user_joint, params.prod_rel, idx_u, idx_p, vals)
    n_u, n_p = _counts(store.psi, params.n_users, params.n_products)
    reg = np.sum(n_u * np.sum(params.user_joint**2, axis=0)) + np.sum(
        n_p * np.sum(params.prod_rel**2, axis=0)
    )
    return term + reg_lambda * float(reg)


def reliability_loss_grads(params: MfParams, store: InteractionStore, reg_lambda: float):
    idx_u, idx_p, vals = _pair_arrays(store.psi, store.reliability)
    loss, grads = _pair_loss_grads(
        params.user_joint, params.prod_rel, idx_u, idx_p, vals, reg_lambda
    )
    return loss, {"user_joint": grads[0], "prod_rel": grads[1]}


def joint_loss(params: MfParams, store: InteractionStore, reg_lambda: float) -> float:
    """Joint objective: shared user factors fit ratings and reliability.

    Each factor's regularization weight is the number of residual terms
    it appears in, so the shared user factors are weighted by their
    rating count plus their reliability count.
    """
    return _joint_loss_grads(params, store, reg_lambda, want_grads=False)[0]


def joint_loss_grads(params: MfParams, store: InteractionStore, reg_lambda: float):
    loss, grads = _joint_loss_grads(params, store, reg_lambda, want_grads=True)
    return loss, grads


def _joint_loss_grads(params, store, reg_lambda, want_grads):
    r_u, r_p, r_vals = _pair_arrays(store.omega, store.ratings)
    s_u, s_p, s_vals = _pair_arrays(store.psi, store.reliability)
    if not want_grads:
        return (
            _pair_loss_value(params.user_joint, params.prod_joint, r_u, r_p, r_vals, reg_lambda)
            + _pair_loss_value(params.user_joint, params.prod_rel, s_u, s_p, s_vals, reg_lambda)
        ), None
    loss_r, (de_r, dz) = _pair_loss_grads(
        params.user_joint, params.prod_joint, r_u, r_p, r_vals, reg_lambda
    )
    loss_s, (de_s, df) = _pair_loss_grads(
        params.user_joint, params.prod_rel, s_u, s_p, s_vals, reg_lambda
    )
    return loss_r + loss_s, {"user_joint": de_r + de_s, "prod_joint": dz, "prod_rel": df}


def _epoch_batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(loss: float, phase: str, epoch: int):
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"{phase} training diverged at epoch {epoch}: loss={loss}"
        )


def _train_pair_factors(u_mat, v_mat, names, idx_u, idx_p, targets, hyper, rng,
                        evaluate_val=None, on_epoch=None, phase=""):
    """Mini-batch Adam over one squared pair objective, in place."""
    params = {names[0]: u_mat, names[1]: v_mat}
    state = AdamState(lr=hyper.lr)
    n = idx_u.size
    best_val = np.inf
    stall = 0
    for epoch in range(hyper.epochs):
        started = time.perf_counter()
        state.lr = hyper.lr * hyper.lr_decay**epoch
        if n:
            for batch in _epoch_batches(n, hyper.batch_size, rng):
                _, (du, dv) = _pair_loss_grads(
                    u_mat, v_mat, idx_u[batch], idx_p[batch], targets[batch],
                    hyper.reg_lambda,
                )
                adam_step(params, {names[0]: du, names[1]: dv}, state)
        loss = _pair_loss_value(u_mat, v_mat, idx_u, idx_p, targets, hyper.reg_lambda)
        _check_finite(loss, phase, epoch)
        if on_epoch is not None:
            on_epoch(phase, epoch, loss, time.perf_counter() - started)
        if evaluate_val is not None and hyper.patience:
            val = evaluate_val()
            if val < best_val - 1e-12:
                best_val = val
                stall = 0
            else:
                stall += 1
                if stall >= hyper.patience:
                    break


def _train_joint_factors(params, store, hyper, rng, evaluate_val=None, on_epoch=None):
    """Mini-batch Adam over the joint objective, in place."""
    r_u, r_p, r_vals = _pair_arrays(store.omega, store.ratings)
    s_u, s_p, s_vals = _pair_arrays(store.psi, store.reliability)
    kinds = np.concatenate([np.zeros(r_u.size, dtype=bool), np.ones(s_u.size, dtype=bool)])
    all_u = np.concatenate([r_u, s_u])
    all_p = np.concatenate([r_p, s_p])
    all_vals = np.concatenate([r_vals, s_vals])
    mats = {
        "user_joint": params.user_joint,
        "prod_joint": params.prod_joint,
        "prod_rel": params.prod_rel,
    }
    state = AdamState(lr=hyper.lr)
    n = all_u.size
    best_val = np.inf
    stall = 0
    for epoch in range(hyper.epochs):
        started = time.perf_counter()
        state.lr = hyper.lr * hyper.lr_decay**epoch
        if n:
            for batch in _epoch_batches(n, hyper.batch_size, rng):
                rel_rows = kinds[batch]
                grads = {
                    "user_joint": np.zeros_like(params.user_joint),
                    "prod_joint": np.zeros_like(params.prod_joint),
                    "prod_rel": np.zeros_like(params.prod_rel),
                }
                rate = batch[~rel_rows]
                if rate.size:
                    _, (de, dz) = _pair_loss_grads(
                        params.user_joint, params.prod_joint,
                        all_u[rate], all_p[rate], all_vals[rate], hyper.reg_lambda,
                    )
                    grads["user_joint"] += de
                    grads["prod_joint"] += dz
                rel = batch[rel_rows]
                if rel.size:
                    _, (de, df) = _pair_loss_grads(
                        params.user_joint, params.prod_rel,
                        all_u[rel], all_p[rel], all_vals[rel], hyper.reg_lambda,
                    )
                    grads["user_joint"] += de
                    grads["prod_rel"] += df
                adam_step(mats, grads, state)
        loss = _pair_loss_value(
            params.user_joint, params.prod_joint, r_u, r_p, r_vals, hyper.reg_lambda
        ) + _pair_loss_value(
            params.user_joint, params.prod_rel, s_u, s_p, s_vals, hyper.reg_lambda
        )
        _check_finite(loss, "mf-joint", epoch)
        if on_epoch is not None:
            on_epoch("mf-joint", epoch, loss, time.perf_counter() - started)
        if evaluate_val is not None and hyper.patience:
            val = evaluate_val()
            if val < best_val - 1e-12:
                best_val = val
                stall = 0
            else:
                stall += 1
                if stall >= hyper.patience:
                    break


def _embedding_batch(params: MfParams, idx_u, idx_p):
    """Pair embeddings for index arrays; shape (batch, K)."""
    rating = (params.user_rating[:, idx_u] * params.prod_rating[:, idx_p]).T
    joint = (params.user_joint[:, idx_u] * params.prod_joint[:, idx_p]).T
    return rating @ params.proj_rating.T + joint @ params.proj_joint.T, rating, joint


def _head_forward(params: MfParams, theta):
    hidden = theta @ params.head  # (batch, p)
    return hidden, MAX_RATING * (hidden @ params.reg_w + params.reg_b)


def _train_head(params: MfParams, store, hyper, rng, evaluate_val=None, on_epoch=None):
    """MAE head training with frozen factors."""
    idx_u, idx_p, _ = _pair_arrays(store.omega, store.ratings)
    raw = np.array([store.raw_ratings[p] for p in sorted(store.omega)], dtype=np.float64)
    weights = {
        "proj_rating": params.proj_rating,
        "proj_joint": params.proj_joint,
        "head": params.head,
        "reg_w": params.reg_w,
        "reg_b": np.array([params.reg_b]),
    }
    state = AdamState(lr=hyper.lr)
    n = idx_u.size
    best_val = np.inf
    stall = 0
    for epoch in range(hyper.epochs):
        started = time.perf_counter()
        state.lr = hyper.lr * hyper.lr_decay**epoch
        for batch in _epoch_batches(n, hyper.batch_size, rng):
            bu, bp, target = idx_u[batch], idx_p[batch], raw[batch]
            theta, rating, joint = _embedding_batch(params, bu, bp)
            hidden, preds = _head_forward(params, theta)
            sign = np.sign(preds - target) * MAX_RATING
            d_hidden = sign[:, None] * params.reg_w[None, :]
            d_theta = d_hidden @ params.head.T
            grads = {
                "proj_rating": d_theta.T @ rating,
                "proj_joint": d_theta.T @ joint,
                "head": theta.T @ d_hidden,
                "reg_w": hidden.T @ sign,
                "reg_b": np.array([np.sum(sign)]),
            }
            adam_step(weights, grads, state)
            params.reg_b = float(weights["reg_b"][0])
        theta, _, _ = _embedding_batch(params, idx_u, idx_p)
        _, preds = _head_forward(params, theta)
        loss = float(np.mean(np.abs(preds - raw)))
        _check_finite(loss, "mf-head", epoch)
        if on_epoch is not None:
            on_epoch("mf-head", epoch, loss, time.perf_counter() - started)
        if evaluate_val is not None and hyper.patience:
            val = evaluate_val()
            if val < best_val - 1e-12:
                best_val = val
                stall = 0
            else:
                stall += 1
                if stall >= hyper.patience:
                    break


def _val_mae_factors(u_mat, v_mat, store: InteractionStore):
    if not store.omega:
        return None
    idx_u, idx_p, _ = _pair_arrays(store.omega, store.ratings)
    raw = np.array([store.raw_ratings[p] for p in sorted(store.omega)], dtype=np.float64)

    def evaluate():
        dots = np.einsum("kb,kb->b", u_mat[:, idx_u], v_mat[:, idx_p])
        return float(np.mean(np.abs(MAX_RATING * sigmoid(dots) - raw)))

    return evaluate


def train_mf(
    store: InteractionStore,
    hyper: MfHyperparams,
    val_store: InteractionStore | None = None,
    on_epoch=None,
) -> MfParams:
    """Train the full linear branch.

    Runs the rating objective, then the joint objective, then the MAE
    head, each with mini-batch Adam. With a ``val_store``, any phase
    stops early once its validation MAE has not improved for
    ``hyper.patience`` consecutive epochs. Deterministic for a fixed
    seed. Raises :class:`TrainingDivergedError` on NaN/inf losses.
    """
    if not store.omega:
        raise ValueError("store has no ratings to train on")
    rng = np.random.default_rng(hyper.seed)
    (w, z), (e, f) = svd_init(store, hyper.latent_dim)
    k, p = hyper.latent_dim, hyper.predictive_dim
    params = MfParams(
        user_rating=w.copy(),
        prod_rating=z.copy(),
        user_joint=e.copy(),
        prod_joint=z.copy(),
        prod_rel=f.copy(),
        proj_rating=rng.normal(0.0, hyper.init_scale, (k, k)),
        proj_joint=rng.normal(0.0, hyper.init_scale, (k, k)),
        head=rng.normal(0.0, hyper.init_scale, (k, p)),
        reg_w=rng.normal(0.0, hyper.init_scale, p),
        reg_b=0.0,
    )

    idx_u, idx_p, vals = _pair_arrays(store.omega, store.ratings)
    val = _val_mae_factors(params.user_rating, params.prod_rating, val_store) if val_store else None
    _train_pair_factors(
        params.user_rating, params.prod_rating, ("user_rating", "prod_rating"),
        idx_u, idx_p, vals, hyper, rng, evaluate_val=val, on_epoch=on_epoch,
        phase="mf-rating",
    )

    val = _val_mae_factors(params.user_joint, params.prod_joint, val_store) if val_store else None
    _train_joint_factors(params, store, hyper, rng, evaluate_val=val, on_epoch=on_epoch)

    val_head = None
    if val_store and val_store.omega:
        vu, vp, _ = _pair_arrays(val_store.omega, val_store.ratings)
        vraw = np.array(
            [val_store.raw_ratings[pair] for pair in sorted(val_store.omega)],
            dtype=np.float64,
        )

        def val_head():
            theta, _, _ = _embedding_batch(params, vu, vp)
            _, preds = _head_forward(params, theta)
            return float(np.mean(np.abs(preds - vraw)))

    _train_head(params, store, hyper, rng, evaluate_val=val_head, on_epoch=on_epoch)
    return params


def mf_embedding(params: MfParams, i: int, j: int) -> np.ndarray:
    """K-dim pair embedding mixing both factor models' interactions."""
    if not (0 <= i < params.n_users and 0 <= j < params.n_products):
        raise IndexError(f"pair ({i}, {j}) out of range")
    theta, _, _ = _embedding_batch(params, np.array([i]), np.array([j]))
    return theta[0]


def mf_predict(params: MfParams, i: int, j: int) -> float:
    """Raw-scale rating prediction from the linear branch's own head."""
    theta = mf_embedding(params, i, j)
    _, pred = _head_forward(params, theta[None, :])
    return float(pred[0])


def factor_predict(params: MfParams, idx_u, idx_p, branch: str = "joint") -> np.ndarray:
    """Raw-scale predictions straight from one factor model.

    ``branch="joint"`` uses sigmoid(e_i . z_j), ``branch="rating"`` uses
    sigmoid(w_i . z_j); both are rescaled and clamped to the 1..5 range.
    """
    if branch == "joint":
        u_mat, v_mat = params.user_joint, params.prod_joint
    elif branch == "rating":
        u_mat, v_mat = params.user_rating, params.prod_rating
    else:
        raise ValueError(f"unknown branch {branch!r}")
    idx_u = np.asarray(idx_u, dtype=np.intp)
    idx_p = np.asarray(idx_p, dtype=np.intp)
    dots = np.einsum("kb,kb->b", u_mat[:, idx_u], v_mat[:, idx_p])
    return np.clip(MAX_RATING * sigmoid(dots), 1.0, float(MAX_RATING))


_SECTION_ORDER = [
    "user_rating", "prod_rating", "user_joint", "prod_joint", "prod_rel",
    "proj_rating", "proj_joint", "head", "reg_w",
]


def mf_sections(params: MfParams, prefix: str = ""):
    """(name, array) list in the documented checkpoint order."""
    out = [(prefix + name, getattr(params, name)) for name in _SECTION_ORDER]
    out.append((prefix + "reg_b", np.array([params.reg_b])))
    return out


def params_from_sections(arrays: dict, prefix: str = "") -> MfParams:
    fields = {name: arrays[prefix + name] for name in _SECTION_ORDER}
    return MfParams(reg_b=float(arrays[prefix + "reg_b"][0]), **fields)


def save_mf(params: MfParams, path) -> None:
    meta = {
        "n_users": params.n_users,
        "n_products": params.n_products,
        "latent_dim": params.latent_dim,
        "predictive_dim": params.predictive_dim,
    }
    checkpoint.save_sections(path, "mf", meta, mf_sections(params))


def load_mf(path) -> MfParams:
    kind, _, arrays = checkpoint.load_sections(path)
    if kind != "mf":
        raise ValueError(f"{path}: expected an mf checkpoint, found {kind!r}")
    return params_from_sections(arrays)
