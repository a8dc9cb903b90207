"""Hybrid forecaster: a frozen cyclostationary LIM ensemble corrected per
member by a month-conditioned two-layer LSTM, trained under a lead-weighted
ensemble CRPS; plus the encoder-decoder PC-space baseline that forecasts
without any dynamical prior.

The correction net reads each LIM member trajectory step by step
(``in_proj -> LSTM -> FiLM -> LSTM -> FiLM -> out_proj``), conditioned on
the calendar month being forecast. Its output projection starts at zero, so
an untrained hybrid reproduces the bare LIM ensemble bit for bit; training
updates only the net (the LIM is never touched).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from .io import find_section, read_sections, write_sections
from .lim import EnsembleForecast, LimOperator, integrate_ensemble, operator_from_bytes, operator_to_bytes
from .net import (
    AdamW,
    LstmParams,
    MonthEmbedding,
    Tensor,
    backward,
    concat,
    cosine_lr,
    dense,
    film,
    init_dense,
    init_lstm,
    init_month_embedding,
    lstm_cell,
    params_from_bytes,
    params_to_bytes,
)

__all__ = [
    "TrainConfig",
    "HybridModel",
    "PcLstmModel",
    "hybrid_forecast",
    "hybrid_forecast_batch",
    "pc_lstm_forecast",
    "train_hybrid",
    "train_pc_lstm",
    "lim_ensemble_batch",
    "lead_weights",
    "weighted_crps_loss",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    """Optimization settings for both the hybrid and the baseline."""

    epochs: int = 40
    batch: int = 32
    lr_max: float = 2e-3
    lr_min: float = 2e-5
    weight_decay: float = 1e-4
    gamma: float = 0.65
    T: int = 24
    M: int = 16
    t_hist: int = 12
    seed: int = 0
    loss_space: str = "grid"
    hidden: int = 64
    patience: int = 10
    batches_per_epoch: int | None = None
    val_max_samples: int = 512
    delta: float = 1.0 / 16.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.loss_space not in ("grid", "pc"):
            raise ConfigError(f"loss_space must be 'grid' or 'pc', got {self.loss_space!r}")
        if self.M < 1 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("M, batch must be >= 1 and epochs >= 0")


def lead_weights(gamma, T):
    """Power-law lead weights gamma^tau for tau = 1..T."""
    return gamma ** np.arange(1, T + 1)


def forecast_months(init_months, T):
    """Calendar month of lead tau=1..T for each initial month."""
    init_months = np.atleast_1d(np.asarray(init_months, dtype=np.int64))
    taus = np.arange(1, T + 1)
    return (init_months[:, None] - 1 + taus[None, :]) % 12 + 1


# ====================================================================
# models
# ====================================================================


class HybridModel:
    """Frozen LIM plus per-member residual LSTM."""

    def __init__(self, lim, pc_scale, hidden=64, M=16, T=24, seed=0):
        if lim.kind != "cyclostationary":
            raise DataError("the hybrid wraps a cyclostationary operator")
        self.lim = lim
        self.pc_scale = np.where(np.asarray(pc_scale) > 0, np.asarray(pc_scale, float), 1.0)
        self.hidden = int(hidden)
        self.M = int(M)
        self.T = int(T)
        self.seed = int(seed)
        d = lim.d
        rng = np.random.default_rng(seed)
        self.in_W, self.in_b = init_dense(rng, d, hidden)
        self.lstm1 = init_lstm(rng, hidden, hidden)
        self.lstm2 = init_lstm(rng, hidden, hidden)
        self.film1 = init_month_embedding(hidden)
        self.film2 = init_month_embedding(hidden)
        self.out_W, self.out_b = init_dense(rng, hidden, d, zero=True)

    @property
    def d(self):
        return self.lim.d

    def params(self):
        out = {"in_proj.W": self.in_W, "in_proj.b": self.in_b,
               "out_proj.W": self.out_W, "out_proj.b": self.out_b}
        out.update(self.lstm1.tensors("lstm1"))
        out.update(self.lstm2.tensors("lstm2"))
        out.update(self.film1.tensors("film1"))
        out.update(self.film2.tensors("film2"))
        return out

    def residual(self, lim_members, months_by_lead):
        """Correction sequence for flattened member trajectories.

        Parameters
        ----------
        lim_members : ndarray, shape (N, T, d)
        months_by_lead : ndarray of int, shape (N, T)

        Returns
        -------
        Tensor, shape (N, T, d)
        """
        N, T, d = lim_members.shape
        x_all = Tensor(lim_members / self.pc_scale)
        h = self.hidden
        h1 = c1 = h2 = c2 = Tensor(np.zeros((N, h)))
        steps = []
        for tau in range(T):
            u = dense(x_all[:, tau, :], self.in_W, self.in_b)
            h1, c1 = lstm_cell(u, h1, c1, self.lstm1)
            h1 = film(h1, months_by_lead[:, tau], self.film1)
            h2, c2 = lstm_cell(h1, h2, c2, self.lstm2)
            h2 = film(h2, months_by_lead[:, tau], self.film2)
            res = dense(h2, self.out_W, self.out_b)
            steps.append(res.reshape(N, 1, d))
        return concat(steps, axis=1) * Tensor(self.pc_scale)


class PcLstmModel:
    """Encoder-decoder LSTM operating on the reduced state, with one output
    head per ensemble member (heads start at zero)."""

    def __init__(self, d, pc_scale, hidden=64, M=16, T=24, t_hist=12, seed=0):
        self.d = int(d)
        self.pc_scale = np.where(np.asarray(pc_scale) > 0, np.asarray(pc_scale, float), 1.0)
        self.hidden = int(hidden)
        self.M = int(M)
        self.T = int(T)
        self.t_hist = int(t_hist)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        h = hidden
        self.enc_in = init_dense(rng, d, h)
        self.enc_lstm1 = init_lstm(rng, h, h)
        self.enc_lstm2 = init_lstm(rng, h, h)
        self.enc_film1 = init_month_embedding(h)
        self.enc_film2 = init_month_embedding(h)
        self.dec_lstm1 = init_lstm(rng, h, h)
        self.dec_lstm2 = init_lstm(rng, h, h)
        self.dec_film1 = init_month_embedding(h)
        self.dec_film2 = init_month_embedding(h)
        self.heads = [init_dense(rng, h, d, zero=True) for _ in range(M)]

    def params(self):
        out = {"enc_in.W": self.enc_in[0], "enc_in.b": self.enc_in[1]}
        out.update(self.enc_lstm1.tensors("enc_lstm1"))
        out.update(self.enc_lstm2.tensors("enc_lstm2"))
        out.update(self.enc_film1.tensors("enc_film1"))
        out.update(self.enc_film2.tensors("enc_film2"))
        out.update(self.dec_lstm1.tensors("dec_lstm1"))
        out.update(self.dec_lstm2.tensors("dec_lstm2"))
        out.update(self.dec_film1.tensors("dec_film1"))
        out.update(self.dec_film2.tensors("dec_film2"))
        for i, (W, b) in enumerate(self.heads):
            out[f"head{i}.W"] = W
            out[f"head{i}.b"] = b
        return out

    def members(self, history, history_months, init_months):
        """Forecast members for a batch of histories.

        Parameters
        ----------
        history : ndarray, shape (B, t_hist, d)
            States in time order, newest last.
        history_months : ndarray, shape (B, t_hist)
        init_months : ndarray, shape (B,)
            Month of the newest history state.

        Returns
        -------
        Tensor, shape (B, M, T, d)
        """
        B, t_hist, d = history.shape
        if t_hist != self.t_hist:
            raise DataError(f"history length {t_hist} != configured t_hist {self.t_hist}")
        h = self.hidden
        x_all = Tensor(history / self.pc_scale)
        h1 = c1 = h2 = c2 = Tensor(np.zeros((B, h)))
        for k in range(t_hist):
            u = dense(x_all[:, k, :], *self.enc_in)
            h1, c1 = lstm_cell(u, h1, c1, self.enc_lstm1)
            h1 = film(h1, history_months[:, k], self.enc_film1)
            h2, c2 = lstm_cell(h1, h2, c2, self.enc_lstm2)
            h2 = film(h2, history_months[:, k], self.enc_film2)
        months = forecast_months(init_months, self.T)
        scale = Tensor(self.pc_scale)
        x = h2
        leads = []
        for tau in range(self.T):
            h1, c1 = lstm_cell(x, h1, c1, self.dec_lstm1)
            h1 = film(h1, months[:, tau], self.dec_film1)
            h2, c2 = lstm_cell(h1, h2, c2, self.dec_lstm2)
            h2 = film(h2, months[:, tau], self.dec_film2)
            x = h2  # the hidden state itself rolls the decoder forward
            per_member = [(dense(h2, W, b) * scale).reshape(B, 1, 1, d) for W, b in self.heads]
            leads.append(concat(per_member, axis=1))
        return concat(leads, axis=2)


# ====================================================================
# forecasting
# ====================================================================


def hybrid_forecast(model, z0, init_month, seed=0):
    """Ensemble forecast: LIM members plus learned per-member corrections."""
    lim_ens = integrate_ensemble(model.lim, z0, init_month, model.T, M=model.M, seed=seed)
    months = forecast_months(np.full(model.M, init_month), model.T)
    res = model.residual(lim_ens.members, months)
    return EnsembleForecast(lim_ens.members + res.data, init_time=-1, init_month=init_month)


def lim_ensemble_batch(op, z0s, init_months, T, M=16, delta=1.0 / 16.0, seed=0):
    """Vectorized LIM ensembles for many initial states.

    Sample ``i`` draws its noise from the spawned substream ``(seed, i)``,
    so results are identical however the batch is chunked.
    """
    z0s = np.asarray(z0s, dtype=np.float64)
    init_months = np.asarray(init_months, dtype=np.int64)
    N, d = z0s.shape
    n_sub = round(1.0 / delta)
    if abs(n_sub * delta - 1.0) > 1e-9:
        raise DataError(f"delta={delta} must divide one month evenly")
    steps = T * n_sub
    sq = np.sqrt(delta)
    out = np.empty((N, M, T, d))
    chunk = max(1, int(2_000_000 // max(1, M * steps * d)))
    for a in range(0, N, chunk):
        b = min(N, a + chunk)
        nb = b - a
        noise = np.empty((nb, M, steps, d))
        for i in range(nb):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(a + i,)))
            noise[i] = rng.standard_normal((M, steps, d))
        state = np.repeat(z0s[a:b, None, :], M, axis=1)
        for s in range(steps):
            mi = (init_months[a:b] - 1 + s // n_sub) % 12
            if op.kind == "stationary":
                drift = state @ op.L[0].T
                kick = noise[:, :, s] @ op.noise_chol[0].T
            else:
                Lm = op.L[mi]
                Cm = op.noise_chol[mi]
                drift = np.einsum("bij,bmj->bmi", Lm, state)
                kick = np.einsum("bij,bmj->bmi", Cm, noise[:, :, s])
            state = state + drift * delta + kick * sq
            if (s + 1) % n_sub == 0:
                out[a:b, :, (s + 1) // n_sub - 1] = state
    if not np.isfinite(out).all():
        raise DivergenceError("LIM ensemble integration produced non-finite values")
    return out


def hybrid_forecast_batch(model, z0s, init_months, seed=0):
    """Hybrid forecasts for many initial states; returns [N, M, T, d]."""
    z0s = np.asarray(z0s, dtype=np.float64)
    init_months = np.asarray(init_months, dtype=np.int64)
    N = z0s.shape[0]
    lim_members = lim_ensemble_batch(model.lim, z0s, init_months, model.T, model.M, seed=seed)
    months = forecast_months(init_months, model.T)  # [N, T]
    months_flat = np.repeat(months[:, None, :], model.M, axis=1).reshape(N * model.M, model.T)
    res = model.residual(lim_members.reshape(N * model.M, model.T, model.d), months_flat)
    return lim_members + res.data.reshape(N, model.M, model.T, model.d)


def pc_lstm_forecast(model, history, history_months, seed=0):
    """Forecast from a history window (deterministic; members differ by
    output head). ``seed`` is accepted for interface symmetry."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] != model.t_hist:
        raise DataError(f"history must be [t_hist={model.t_hist}, d], got {history.shape}")
    history_months = np.asarray(history_months, dtype=np.int64)
    members = model.members(history[None], history_months[None], history_months[-1:])
    return EnsembleForecast(members.data[0], init_time=-1, init_month=int(history_months[-1]))


def pc_lstm_forecast_batch(model, pcs, init_indices):
    """Forecast members for init indices of a PcSeries; returns [N, M, T, d]."""
    idx = np.asarray(init_indices)
    hist = np.stack([pcs.z[i - model.t_hist + 1 : i + 1] for i in idx])
    hist_months = np.stack([pcs.month[i - model.t_hist + 1 : i + 1] for i in idx])
    members = model.members(hist, hist_months, pcs.month[idx])
    return members.data


# ====================================================================
# loss
# ====================================================================


def weighted_crps_loss(members, targets, gamma):
    """Lead-weighted ensemble CRPS summed over locations, averaged over the
    batch.

    Parameters
    ----------
    members : Tensor, shape (B, M, T, K)
    targets : ndarray, shape (B, T, K)
    gamma : float
        Per-lead decay weight.
    """
    B, M, T, K = members.shape
    t = Tensor(targets).reshape(B, 1, T, K)
    term1 = (members - t).abs().mean(axis=1)  # [B, T, K]
    a = members.reshape(B, M, 1, T, K)
    b = members.reshape(B, 1, M, T, K)
    term2 = (a - b).abs().mean(axis=(1, 2))  # plain 1/M^2 pair estimator
    crps = term1 - term2 * 0.5
    w = Tensor(lead_weights(gamma, T).reshape(1, T, 1))
    return (crps * w).sum(axis=(1, 2)).mean()


# ====================================================================
# training
# ====================================================================


def _epoch_rng(seed, epoch, tag):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag, epoch)))


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data[:] = snap[k]


class _GridMap:
    """Fixed reduced-state -> loss-space map (identity for pc space)."""

    def __init__(self, basis, loss_space):
        if loss_space == "grid":
            if basis is None:
                raise ConfigError("grid-space loss requires an EOF basis")
            self.P = basis.kept_patterns().T  # [d, K] -> map right-multiplies
        else:
            self.P = None

    def arr(self, x):
        return x if self.P is None else x @ self.P

    def tensor(self, members):
        if self.P is None:
            return members
        B, M, T, d = members.shape
        flat = members.reshape(B * M * T, d) @ Tensor(self.P)
        return flat.reshape(B, M, T, self.P.shape[1])


def _validation_loss(batch_loss_fn, val_indices, cfg):
    losses = []
    for a in range(0, val_indices.size, cfg.batch):
        idx = val_indices[a : a + cfg.batch]
        losses.append((batch_loss_fn(idx).data.item(), idx.size))
    total = sum(l * n for l, n in losses)
    return total / max(1, sum(n for _, n in losses))


def _train_loop(params, cfg, train_indices, val_indices, train_batch_loss, val_batch_loss,
                climatology_val_loss):
    """Shared epoch loop: shuffling, cosine schedule, early stopping on the
    best validation loss (the untrained model counts as a candidate)."""
    opt = AdamW(params, lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    per_epoch = int(np.ceil(train_indices.size / cfg.batch))
    if cfg.batches_per_epoch is not None:
        per_epoch = min(per_epoch, cfg.batches_per_epoch)
    total_steps = max(1, cfg.epochs * per_epoch)
    history = {"records": [], "best_epoch": 0, "stopped_early": False,
               "never_beat_climatology": False, "val_climatology": climatology_val_loss}
    best_val = _validation_loss(val_batch_loss, val_indices, cfg)
    best_params = _snapshot(params)
    history["records"].append({"epoch": 0, "train_loss": None, "val_loss": best_val,
                               "lr": None, "seconds": 0.0})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = _epoch_rng(cfg.seed, epoch, 0).permutation(train_indices)
        epoch_losses = []
        for bi in range(per_epoch):
            idx = order[bi * cfg.batch : (bi + 1) * cfg.batch]
            if idx.size == 0:
                break
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
            opt.zero_grad()
            loss = train_batch_loss(idx, epoch)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"training loss diverged at epoch {epoch}", step=step)
            backward(loss)
            opt.step(lr=lr)
            epoch_losses.append(loss.data.item())
            step += 1
        val = _validation_loss(val_batch_loss, val_indices, cfg)
        history["records"].append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                                   "val_loss": val, "lr": lr, "seconds": time.time() - t0})
        if val < best_val:
            best_val = val
            best_params = _snapshot(params)
            history["best_epoch"] = epoch
        elif epoch - history["best_epoch"] > cfg.patience:
            history["stopped_early"] = True
            break
    _restore(params, best_params)
    history["best_val"] = best_val
    if climatology_val_loss is not None and all(
            r["val_loss"] > climatology_val_loss for r in history["records"]):
        history["never_beat_climatology"] = True
        warnings.warn("validation loss never beat the climatology reference")
    return history


def _climatology_loss(targets_loss_space, months_by_lead, pool_by_month, gamma, M,
                      seed=113, chunk=32):
    """Weighted-CRPS validation loss of the monthly-climatology ensemble."""
    rng = np.random.default_rng(seed)
    B, T, K = targets_loss_space.shape
    total = 0.0
    for a in range(0, B, chunk):
        b = min(B, a + chunk)
        members = np.empty((b - a, M, T, K))
        sub_months = months_by_lead[a:b]
        for m in range(1, 13):
            sel = sub_months == m
            if not sel.any():
                continue
            pool = pool_by_month[m]
            draw = pool[rng.integers(0, pool.shape[0], size=(int(sel.sum()), M))]
            members[sel.nonzero()[0], :, sel.nonzero()[1]] = draw
        loss = weighted_crps_loss(Tensor(members), targets_loss_space[a:b], gamma)
        total += float(loss.data) * (b - a)
    return total / B


def train_hybrid(model, train_pcs, val_pcs, cfg, basis=None):
    """Fit the residual net on LIM member trajectories.

    The LIM inside the model is frozen; members are re-integrated with
    fresh (seeded) noise each epoch, validation members stay fixed. Returns
    ``(model, history)`` with the best-validation parameters restored.
    """
    if train_pcs.n_time <= cfg.T + 1:
        raise DataError("training series must be longer than T + 1 months")
    gm = _GridMap(basis, cfg.loss_space)
    T, M, d = cfg.T, cfg.M, model.d
    model.T, model.M = T, M

    def make_batch(pcs, idx, seed):
        z0s = pcs.z[idx]
        init_months = pcs.month[idx]
        lim_members = lim_ensemble_batch(model.lim, z0s, init_months, T, M,
                                         delta=cfg.delta, seed=seed)
        months = forecast_months(init_months, T)
        targets = np.stack([pcs.z[i + 1 : i + 1 + T] for i in idx])
        return lim_members, months, gm.arr(targets)

    def batch_loss(pcs, idx, seed):
        lim_members, months, targets = make_batch(pcs, idx, seed)
        B = idx.size
        months_flat = np.repeat(months[:, None, :], M, axis=1).reshape(B * M, T)
        res = model.residual(lim_members.reshape(B * M, T, d), months_flat)
        members = Tensor(lim_members) + res.reshape(B, M, T, d)
        return weighted_crps_loss(gm.tensor(members), targets, cfg.gamma)

    train_indices = np.arange(train_pcs.n_time - T)
    val_all = np.arange(val_pcs.n_time - T)
    val_indices = val_all if val_all.size <= cfg.val_max_samples else \
        np.sort(_epoch_rng(cfg.seed, 0, 2).choice(val_all, cfg.val_max_samples, replace=False))

    def train_batch_loss(idx, epoch):
        return batch_loss(train_pcs, idx, seed=(cfg.seed, 1, epoch))

    def val_batch_loss(idx):
        return batch_loss(val_pcs, idx, seed=(cfg.seed, 2))

    clim = _climatology_reference(train_pcs, val_pcs, val_indices, cfg, gm)
    return model, _train_loop(model.params(), cfg, train_indices, val_indices,
                              train_batch_loss, val_batch_loss, clim)


def _climatology_reference(train_pcs, val_pcs, val_indices, cfg, gm):
    pool_by_month = {m: gm.arr(train_pcs.z[train_pcs.month == m]) for m in range(1, 13)}
    targets = gm.arr(np.stack([val_pcs.z[i + 1 : i + 1 + cfg.T] for i in val_indices]))
    months = forecast_months(val_pcs.month[val_indices], cfg.T)
    return _climatology_loss(targets, months, pool_by_month, cfg.gamma, cfg.M)


def train_pc_lstm(model, train_pcs, val_pcs, cfg, basis=None):
    """Fit the encoder-decoder baseline under the same CRPS objective."""
    if train_pcs.n_time <= cfg.T + cfg.t_hist + 1:
        raise DataError("training series must be longer than T + t_hist + 1 months")
    gm = _GridMap(basis, cfg.loss_space)
    T = cfg.T
    model.T = T

    def batch_loss(pcs, idx):
        hist = np.stack([pcs.z[i - cfg.t_hist + 1 : i + 1] for i in idx])
        hist_months = np.stack([pcs.month[i - cfg.t_hist + 1 : i + 1] for i in idx])
        targets = gm.arr(np.stack([pcs.z[i + 1 : i + 1 + T] for i in idx]))
        members = model.members(hist, hist_months, pcs.month[idx])
        return weighted_crps_loss(gm.tensor(members), targets, cfg.gamma)

    train_indices = np.arange(cfg.t_hist - 1, train_pcs.n_time - T)
    val_all = np.arange(cfg.t_hist - 1, val_pcs.n_time - T)
    val_indices = val_all if val_all.size <= cfg.val_max_samples else \
        np.sort(_epoch_rng(cfg.seed, 0, 2).choice(val_all, cfg.val_max_samples, replace=False))

    clim = _climatology_reference_plain(train_pcs, val_pcs, val_indices, cfg, gm)
    return model, _train_loop(model.params(), cfg, train_indices, val_indices,
                              lambda idx, epoch: batch_loss(train_pcs, idx),
                              lambda idx: batch_loss(val_pcs, idx), clim)


def _climatology_reference_plain(train_pcs, val_pcs, val_indices, cfg, gm):
    pool_by_month = {m: gm.arr(train_pcs.z[train_pcs.month == m]) for m in range(1, 13)}
    targets = gm.arr(np.stack([val_pcs.z[i + 1 : i + 1 + cfg.T] for i in val_indices]))
    months = forecast_months(val_pcs.month[val_indices], cfg.T)
    return _climatology_loss(targets, months, pool_by_month, cfg.gamma, cfg.M)


# ====================================================================
# checkpoints
# ====================================================================

_HYBC_VERSION = 1


def save_checkpoint(path, model, cfg, history=None):
    """NETP parameter table + embedded operator (hybrid) + config echo."""
    meta = {
        "kind": "hybrid" if isinstance(model, HybridModel) else "pc_lstm",
        "hidden": model.hidden, "M": model.M, "T": model.T, "d": model.d,
        "pc_scale": model.pc_scale.tolist(),
        "config": asdict(cfg),
    }
    if isinstance(model, PcLstmModel):
        meta["t_hist"] = model.t_hist
    if history is not None:
        meta["history"] = {k: v for k, v in history.items() if k != "records"}
    sections = [("NETP", _HYBC_VERSION, params_to_bytes(model.params(), seed=model.seed))]
    if isinstance(model, HybridModel):
        sections.append(("LIMO", _HYBC_VERSION, operator_to_bytes(model.lim)))
    sections.append(("CFGJ", _HYBC_VERSION, json.dumps(meta, indent=1).encode("utf-8")))
    write_sections(path, sections)


def load_checkpoint(path):
    """Rebuild a HybridModel or PcLstmModel from a checkpoint file."""
    sections = read_sections(path)
    _, cfg_raw = find_section(sections, "CFGJ")
    meta = json.loads(cfg_raw.decode("utf-8"))
    _, net_raw = find_section(sections, "NETP")
    arrays, seed, _, _ = params_from_bytes(net_raw)
    cfg = TrainConfig(**meta["config"])
    if meta["kind"] == "hybrid":
        _, lim_raw = find_section(sections, "LIMO")
        lim = operator_from_bytes(lim_raw)
        model = HybridModel(lim, np.array(meta["pc_scale"]), hidden=meta["hidden"],
                            M=meta["M"], T=meta["T"], seed=seed)
    else:
        model = PcLstmModel(meta["d"], np.array(meta["pc_scale"]), hidden=meta["hidden"],
                            M=meta["M"], T=meta["T"], t_hist=meta["t_hist"], seed=seed)
    params = model.params()
    if set(params) != set(arrays):
        raise DataError("checkpoint parameter table does not match the model layout")
    for k, p in params.items():
        if p.data.shape != arrays[k].shape:
            raise DataError(f"checkpoint shape mismatch for {k}")
        p.data[:] = arrays[k]
    return model, cfg, meta
