"""Blended head over the linear and non-linear branches.

The fused model concatenates the two branch pair embeddings, applies a
p x (K + p) weight matrix and a final linear regression. At
initialization the weight matrix is assembled blockwise from the two
pre-trained branch heads, scaled by ``gamma`` and ``1 - gamma``, so the
blend constant decides how much each branch contributes before
fine-tuning; the regression head starts from the average of the two
branch regression heads. Fine-tuning backpropagates raw-scale MAE
through everything (both branches included) unless the branches are
frozen.
"""

import copy
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint, mf_model, mlp_model
from .ingest import MAX_RATING, InteractionStore
from .linalg import AdamState, TrainingDivergedError, adam_step
from .mf_model import MfParams
from .mlp_model import MlpParams

__all__ = [
    "FusionModel",
    "FusionHyperparams",
    "init_fusion",
    "init_fusion_random",
    "fused_predict",
    "train_fusion",
    "predict_batch",
    "save_fusion",
    "load_fusion",
]

MIN_RATING = 1.0


@dataclass
class FusionModel:
    mf: MfParams
    mlp: MlpParams
    concat_w: np.ndarray  # p x (K + p), left block reads the MF embedding
    reg_w: np.ndarray  # p
    reg_b: float
    gamma: float
    global_mean: float = 3.0  # raw-scale fallback for unknown indices

    @property
    def latent_dim(self) -> int:
        return self.mf.latent_dim

    @property
    def predictive_dim(self) -> int:
        return self.mlp.predictive_dim

    def copy(self) -> "FusionModel":
        return copy.deepcopy(self)


@dataclass
class FusionHyperparams:
    batch_size: int = 512
    epochs: int = 12
    lr: float = 0.001
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    seed: int = 0
    patience: int = 3


def init_fusion(mf: MfParams, mlp: MlpParams, gamma: float = 0.5) -> FusionModel:
    """Assemble the fused model from two pre-trained branches.

    ``concat_w`` gets the MF head (transposed) times gamma on the left
    and the MLP head times (1 - gamma) on the right; the regression head
    is the average of the branch regression heads. Branch parameters are
    deep-copied so later fine-tuning cannot disturb the inputs.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if mf.predictive_dim != mlp.predictive_dim:
        raise ValueError(
            f"branch head widths differ: mf={mf.predictive_dim}, mlp={mlp.predictive_dim}"
        )
    concat_w = np.hstack([gamma * mf.head.T, (1.0 - gamma) * mlp.head.T])
    return FusionModel(
        mf=mf.copy(),
        mlp=mlp.copy(),
        concat_w=concat_w,
        reg_w=(mf.reg_w + mlp.reg_w) / 2.0,
        reg_b=(mf.reg_b + mlp.reg_b) / 2.0,
        gamma=gamma,
    )


def init_fusion_random(
    n_users: int,
    n_products: int,
    latent_dim: int,
    tower_widths,
    seed: int,
    gamma: float = 0.5,
    scale: float = 0.01,
) -> FusionModel:
    """Fused model with every parameter freshly Gaussian-initialized.

    The no-pre-training baseline: factor matrices, both branch stacks and
    the fused head all start from Gaussian(0, scale) noise.
    """
    rng = np.random.default_rng(seed)
    k = latent_dim
    p = int(tower_widths[-1])
    mf = MfParams(
        user_rating=rng.normal(0.0, scale, (k, n_users)),
        prod_rating=rng.normal(0.0, scale, (k, n_products)),
        user_joint=rng.normal(0.0, scale, (k, n_users)),
        prod_joint=rng.normal(0.0, scale, (k, n_products)),
        prod_rel=rng.normal(0.0, scale, (k, n_products)),
        proj_rating=rng.normal(0.0, scale, (k, k)),
        proj_joint=rng.normal(0.0, scale, (k, k)),
        head=rng.normal(0.0, scale, (k, p)),
        reg_w=rng.normal(0.0, scale, p),
        reg_b=0.0,
    )
    mlp = mlp_model.init_mlp(n_users, n_products, k, tower_widths, seed + 1, scale)
    return FusionModel(
        mf=mf,
        mlp=mlp,
        concat_w=rng.normal(0.0, scale, (p, k + p)),
        reg_w=rng.normal(0.0, scale, p),
        reg_b=0.0,
        gamma=gamma,
    )


def _forward_batch(model: FusionModel, idx_u, idx_p):
    theta_mf, rating, joint = mf_model._embedding_batch(model.mf, idx_u, idx_p)
    theta_mlp, mlp_cache = mlp_model._forward_batch(model.mlp, idx_u, idx_p)
    concat = np.concatenate([theta_mf, theta_mlp], axis=1)
    hidden = concat @ model.concat_w.T  # (batch, p)
    raw = MAX_RATING * (hidden @ model.reg_w + model.reg_b)
    cache = {
        "rating": rating,
        "joint": joint,
        "mlp_cache": mlp_cache,
        "concat": concat,
        "hidden": hidden,
        "idx_u": idx_u,
        "idx_p": idx_p,
    }
    return raw, cache


def fused_predict(model: FusionModel, i: int, j: int) -> float:
    """Unclamped raw-scale prediction for one known index pair."""
    if not (0 <= i < model.mf.n_users and 0 <= j < model.mf.n_products):
        raise IndexError(f"pair ({i}, {j}) out of range")
    raw, _ = _forward_batch(model, np.array([i]), np.array([j]))
    return float(raw[0])


def predict_batch(model: FusionModel, pairs) -> list[float]:
    """Raw predictions clamped to [1, 5], in input order.

    Pairs with an out-of-range user or product index fall back to the
    model's global training mean.
    """
    pairs = list(pairs)
    out = [model.global_mean] * len(pairs)
    known = [
        k for k, (i, j) in enumerate(pairs)
        if 0 <= i < model.mf.n_users and 0 <= j < model.mf.n_products
    ]
    if known:
        idx_u = np.array([pairs[k][0] for k in known], dtype=np.intp)
        idx_p = np.array([pairs[k][1] for k in known], dtype=np.intp)
        raw, _ = _forward_batch(model, idx_u, idx_p)
        for k, value in zip(known, raw):
            out[k] = float(value)
    return [min(max(v, MIN_RATING), float(MAX_RATING)) for v in out]


def _param_dict(model: FusionModel, freeze_branches: bool) -> dict:
    out = {
        "concat_w": model.concat_w,
        "reg_w": model.reg_w,
    }
    if freeze_branches:
        return out
    out.update(
        {
            "mf/user_rating": model.mf.user_rating,
            "mf/prod_rating": model.mf.prod_rating,
            "mf/user_joint": model.mf.user_joint,
            "mf/prod_joint": model.mf.prod_joint,
            "mf/proj_rating": model.mf.proj_rating,
            "mf/proj_joint": model.mf.proj_joint,
        }
    )
    for name, arr in mlp_model._param_dict(model.mlp).items():
        out[f"mlp/{name}"] = arr
    return out


def _grads_batch(model: FusionModel, cache: dict, d_raw, freeze_branches: bool) -> dict:
    """Gradients of sum(d_raw * raw) for the trainable parameter dict."""
    d_norm = MAX_RATING * d_raw
    d_hidden = d_norm[:, None] * model.reg_w[None, :]
    grads = {
        "concat_w": d_hidden.T @ cache["concat"],
        "reg_w": cache["hidden"].T @ d_norm,
        "reg_b": np.array([np.sum(d_norm)]),
    }
    if freeze_branches:
        return grads
    d_concat = d_hidden @ model.concat_w
    k = model.latent_dim
    d_theta_mf = d_concat[:, :k]
    d_theta_mlp = d_concat[:, k:]

    mf = model.mf
    rating, joint = cache["rating"], cache["joint"]
    grads["mf/proj_rating"] = d_theta_mf.T @ rating
    grads["mf/proj_joint"] = d_theta_mf.T @ joint
    d_rating = d_theta_mf @ mf.proj_rating
    d_joint = d_theta_mf @ mf.proj_joint
    idx_u, idx_p = cache["idx_u"], cache["idx_p"]
    for name, mat, other, d_prod in (
        ("mf/user_rating", mf.user_rating, mf.prod_rating, d_rating),
        ("mf/user_joint", mf.user_joint, mf.prod_joint, d_joint),
    ):
        g = np.zeros((mat.shape[1], mat.shape[0]))
        np.add.at(g, idx_u, d_prod * other[:, idx_p].T)
        grads[name] = g.T
    for name, mat, other, d_prod in (
        ("mf/prod_rating", mf.prod_rating, mf.user_rating, d_rating),
        ("mf/prod_joint", mf.prod_joint, mf.user_joint, d_joint),
    ):
        g = np.zeros((mat.shape[1], mat.shape[0]))
        np.add.at(g, idx_p, d_prod * other[:, idx_u].T)
        grads[name] = g.T

    mlp_grads = mlp_model._zero_grads(model.mlp)
    mlp_model._backward_from_theta(model.mlp, cache["mlp_cache"], d_theta_mlp, mlp_grads)
    for name, arr in mlp_grads.items():
        if name in ("head", "reg_w", "reg_b"):
            continue  # the branch's own head is bypassed by the fused head
        grads[f"mlp/{name}"] = arr
    return grads


def train_fusion(
    model: FusionModel,
    store: InteractionStore,
    hyper: FusionHyperparams,
    val_store: InteractionStore | None = None,
    freeze_branches: bool = False,
    on_epoch=None,
) -> FusionModel:
    """Fine-tune a copy of the model end to end with raw-scale MAE.

    The input model is left untouched. With ``freeze_branches`` only the
    fused head (concat weights plus regression) trains. Early stopping
    mirrors the branch trainers: validation MAE with ``hyper.patience``.
    """
    if not store.omega:
        raise ValueError("store has no ratings to train on")
    model = model.copy()
    model.global_mean = store.global_mean_raw()

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

    weights = _param_dict(model, freeze_branches)
    reg_b_arr = np.array([model.reg_b])
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
            preds, cache = _forward_batch(model, idx_u[batch], idx_p[batch])
            grads = _grads_batch(model, cache, np.sign(preds - raw[batch]), freeze_branches)
            adam_step(weights, grads, state)
            model.reg_b = float(reg_b_arr[0])
        preds, _ = _forward_batch(model, idx_u, idx_p)
        loss = float(np.mean(np.abs(preds - raw)))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"fusion training diverged at epoch {epoch}: loss={loss}")
        if on_epoch is not None:
            on_epoch("fusion", epoch, loss, time.perf_counter() - started)
        if val_points is not None and hyper.patience:
            vu, vp, vraw = val_points
            vpreds, _ = _forward_batch(model, vu, vp)
            val = float(np.mean(np.abs(vpreds - vraw)))
            if val < best_val - 1e-12:
                best_val = val
                stall = 0
            else:
                stall += 1
                if stall >= hyper.patience:
                    break
    return model


def save_fusion(model: FusionModel, path) -> None:
    sections = mf_model.mf_sections(model.mf, prefix="mf/")
    sections += mlp_model.mlp_sections(model.mlp, prefix="mlp/")
    sections += [
        ("concat_w", model.concat_w),
        ("reg_w", model.reg_w),
        ("reg_b", np.array([model.reg_b])),
    ]
    meta = {
        "n_users": model.mf.n_users,
        "n_products": model.mf.n_products,
        "latent_dim": model.latent_dim,
        "predictive_dim": model.predictive_dim,
        "tower": list(model.mlp.tower_widths),
        "gamma": model.gamma,
        "global_mean": model.global_mean,
    }
    checkpoint.save_sections(path, "fusion", meta, sections)


def load_fusion(path) -> FusionModel:
    kind, meta, arrays = checkpoint.load_sections(path)
    if kind != "fusion":
        raise ValueError(f"{path}: expected a fusion checkpoint, found {kind!r}")
    return FusionModel(
        mf=mf_model.params_from_sections(arrays, prefix="mf/"),
        mlp=mlp_model.params_from_sections(arrays, len(meta["tower"]), prefix="mlp/"),
        concat_w=arrays["concat_w"],
        reg_w=arrays["reg_w"],
        reg_b=float(arrays["reg_b"][0]),
        gamma=float(meta["gamma"]),
        global_mean=float(meta["global_mean"]),
    )
