"""Alternating proximal-Adam trainer shared by the R2 and BR2 models.

A *problem* stacks every source's rows into one long vector. Each *block*
pairs one dictionary with the sources allowed to use it: R2 has a single
block covering all sources, BR2 one block per modality restricted to the
sources observing it. Block ``m`` owns a coefficient matrix with one row per
member source, so unobserved (source, modality) pairs have no coefficients
at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from r2learn.errors import ConfigError, NumericError
from r2learn.numerics import AdamState, adam_direction, soft_threshold
from r2learn.penalties import (
    SipParams,
    complexity_stat,
    integrativeness_exact,
    sip_exact,
    sip_smoothed,
    sip_smoothed_gradient,
)

log = logging.getLogger(__name__)

LOSSES = ("squared", "cross_entropy")


def loss_and_slope(kind, f, y):
    if kind == "squared":
        r = f - y
        return r * r, 2.0 * r
    if kind == "cross_entropy":
        return np.logaddexp(0.0, f) - y * f, expit(f) - y
    raise ConfigError(f"unknown loss {kind!r}; expected one of {LOSSES}")


class Problem:
    """Stacked rows of a dataset, split into per-block design inputs.

    ``blocks`` is a list of ``(columns, sources)``: ``columns`` is ``None``
    for all covariates or a modality index (read through
    ``MultiSourceDataset.block``, which refuses unobserved blocks), and
    ``sources`` the sorted ids of sources whose rows feed that block.
    """

    def __init__(self, data, blocks, rows=None):
        self.S = data.S
        ns = np.array([src.n for src in data.sources])
        if np.any(ns == 0):
            raise ConfigError(f"sources {np.flatnonzero(ns == 0).tolist()} have no samples")
        self.blocks = blocks
        if rows is None:
            rows = [np.arange(n) for n in ns]
        self.rows = rows
        counts = np.array([len(r) for r in rows])
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.N = int(counts.sum())
        self.y = np.concatenate([data.sources[s].y[rows[s]] for s in range(self.S)])
        self.src = np.repeat(np.arange(self.S), counts)
        self.w = np.repeat(1.0 / (self.S * counts), counts)
        self.X, self.gidx, self.local, self.seg = [], [], [], []
        for cols, members in blocks:
            parts = []
            for s in members:
                Xs = data.sources[s].X if cols is None else data.block(s, cols)
                parts.append(Xs[rows[s]])
            self.X.append(np.ascontiguousarray(np.vstack(parts)))
            self.gidx.append(np.concatenate([self.starts[s] + np.arange(counts[s]) for s in members]))
            self.local.append(np.repeat(np.arange(len(members)), counts[members]))
            self.seg.append(np.concatenate([[0], np.cumsum(counts[members])[:-1]]))

    def features(self, dicts, cache=False):
        out = [d.forward_batch(X, cache=cache) for d, X in zip(dicts, self.X)]
        return out

    def predict(self, Phis, Bs):
        f = np.zeros(self.N)
        for Phi, B, gidx, local in zip(Phis, Bs, self.gidx, self.local):
            f[gidx] += np.einsum("nd,nd->n", Phi, B[local])
        return f

    def fit_value(self, f, loss):
        value, _ = loss_and_slope(loss, f, self.y)
        return float(np.dot(self.w, value))

    def fit_and_slope(self, f, loss):
        value, slope = loss_and_slope(loss, f, self.y)
        return float(np.dot(self.w, value)), self.w * slope

    def beta_grads(self, Phis, g):
        return [np.add.reduceat(g[gidx][:, None] * Phi, seg, axis=0)
                for Phi, gidx, seg in zip(Phis, self.gidx, self.seg)]

    def per_source_rmse(self, f):
        err = (f - self.y) ** 2
        sums = np.add.reduceat(err, self.starts)
        counts = np.diff(np.append(self.starts, self.N))
        return np.sqrt(sums / counts)

    def subset_rows(self, rows):
        """Same problem restricted to the given per-source row ids (mini-batches)."""
        sub = object.__new__(Problem)
        sub.S = self.S
        sub.blocks = self.blocks
        sub.rows = rows
        counts = np.array([len(r) for r in rows])
        sub.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        sub.N = int(counts.sum())
        # map original row ids of each source to their position in the full problem
        pos = np.concatenate([self.starts[s] + np.searchsorted(self.rows[s], rows[s])
                              for s in range(self.S)])
        sub.y = self.y[pos]
        sub.src = np.repeat(np.arange(self.S), counts)
        sub.w = np.repeat(1.0 / (self.S * counts), counts)
        sub.X, sub.gidx, sub.local, sub.seg = [], [], [], []
        keep = np.full(self.N, -1)
        keep[pos] = np.arange(sub.N)
        for m, (_, members) in enumerate(self.blocks):
            mask = keep[self.gidx[m]] >= 0
            sub.X.append(self.X[m][mask])
            sub.gidx.append(keep[self.gidx[m]][mask])
            sub.local.append(self.local[m][mask])
            sub.seg.append(np.concatenate([[0], np.cumsum(counts[members])[:-1]]))
        return sub


@dataclass
class Penalty:
    """l1 weights per block row, SIP weight per block, shared tau."""

    lam1: list
    lam2: list
    tau: float

    def value(self, Bs):
        total = 0.0
        for B, l1, l2 in zip(Bs, self.lam1, self.lam2):
            total += float(np.dot(l1, np.abs(B).sum(axis=1)))
            if l2 > 0:
                total += l2 * sip_smoothed(B, SipParams(self.tau, l2))
        return total

    def sip_grads(self, Bs):
        return [l2 * sip_smoothed_gradient(B, SipParams(self.tau, l2)) if l2 > 0 else 0.0
                for B, l2 in zip(Bs, self.lam2)]


def block_lambda2(lam2, sizes, names=None):
    """Drop SIP for blocks with fewer than two member sources."""
    out = []
    for m, (l2, k) in enumerate(zip(lam2, sizes)):
        if l2 > 0 and k < 2:
            label = names[m] if names else m
            log.warning("block %s is used by %d source(s); SIP disabled there", label, k)
            l2 = 0.0
        out.append(float(l2))
    return out


def diagnostics(Bs, zero_tol=1e-8):
    sips, cstat = [], 0.0
    for B in Bs:
        gamma = integrativeness_exact(B, zero_tol)
        cstat += complexity_stat(gamma)
        sips.append(sip_exact(gamma, B.shape[0]) if B.shape[0] >= 2 else float(B.shape[1]))
    return sips, cstat


@dataclass
class TrainResult:
    dicts: list
    Bs: list
    trace: list
    best_round: int
    stopped_early: bool


def beta_update(prob, Phis, Bs, ab, penalty, loss, rnd=None):
    """One proximal-Adam step on every block's coefficients (dictionaries frozen).

    Adam moves along the gradient of the data fit plus the smoothed SIP; the
    l1 part is then applied as a soft threshold scaled by Adam's
    per-coordinate step size, which lands coefficients on exact zeros.
    """
    f = prob.predict(Phis, Bs)
    _, g = prob.fit_and_slope(f, loss)
    grads = prob.beta_grads(Phis, g)
    sipg = penalty.sip_grads(Bs)
    Bs, ab = list(Bs), list(ab)
    for m in range(len(Bs)):
        G = grads[m] + sipg[m]
        if not np.all(np.isfinite(G)):
            raise NumericError("non-finite coefficient gradient",
                               {"round": rnd, "block": m, "max_abs_coef": float(np.abs(Bs[m]).max())})
        ab[m], delta, step = adam_direction(ab[m], G)
        Bs[m] = soft_threshold(Bs[m] - delta, step * penalty.lam1[m][:, None])
    return Bs, ab


def theta_gradients(prob, dicts, Bs, loss):
    """Data-fit gradient w.r.t. each dictionary's trainable parameters."""
    outs = prob.features(dicts, cache=True)
    Phis = [o[0] for o in outs]
    f = prob.predict(Phis, Bs)
    _, g = prob.fit_and_slope(f, loss)
    grads = []
    for m, d in enumerate(dicts):
        if d.trainable_index.size == 0:
            grads.append(np.zeros(0))
            continue
        U = g[prob.gidx[m]][:, None] * Bs[m][prob.local[m]]
        grads.append(d.backward_flat(prob.X[m], U, outs[m][1])[d.trainable_index])
    return grads


def theta_update(prob, dicts, Bs, at, loss, rnd=None):
    """One Adam step on the trainable dictionary parameters (coefficients frozen)."""
    grads = theta_gradients(prob, dicts, Bs, loss)
    new, at = [], list(at)
    for m, (d, grad) in enumerate(zip(dicts, grads)):
        if grad.size == 0:
            new.append(d)
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite dictionary gradient", {"round": rnd, "block": m})
        at[m], delta, _ = adam_direction(at[m], grad)
        new.append(d.with_trainable(d.params[d.trainable_index] - delta))
    return new, at


DIVERGENCE = 1e10


def train(problem, val_problem, dicts, penalty, config, callback=None, rng=None):
    """Alternate beta and theta phases; return the best (or last) parameters.

    Each round runs ``beta_steps_per_round`` proximal-Adam steps on the
    coefficients with the dictionaries frozen, then ``theta_steps_per_round``
    Adam steps on the trainable dictionary parameters.
    """
    loss = config.loss
    Bs = [np.zeros((len(members), d.size)) for (_, members), d in zip(problem.blocks, dicts)]
    ab = [AdamState.zeros(B.shape, config.lr_beta, config.adam_beta1, config.adam_beta2,
                          config.adam_eps) for B in Bs]
    at = [AdamState.zeros(d.trainable_index.size, config.lr_theta, config.adam_beta1,
                          config.adam_beta2, config.adam_eps) for d in dicts]
    minibatch = config.batch_size is not None
    gen = rng.generator() if (minibatch and rng is not None) else None
    if minibatch and gen is None:
        raise ConfigError("mini-batch training needs a random stream")

    trace = []
    best = (np.inf, dicts, [B.copy() for B in Bs], 0)
    since_best = 0
    stopped = False

    def step_problem():
        if not minibatch:
            return problem
        rows = []
        for s in range(problem.S):
            n = len(problem.rows[s])
            k = min(config.batch_size, n)
            rows.append(np.sort(problem.rows[s][gen.choice(n, size=k, replace=False)]))
        return problem.subset_rows(rows)

    for rnd in range(1, config.rounds + 1):
        # beta phase
        Phis_full = problem.features(dicts) if not minibatch else None
        for _ in range(config.beta_steps_per_round):
            if minibatch:
                prob = step_problem()
                Phis = prob.features(dicts)
            else:
                prob, Phis = problem, Phis_full
            Bs, ab = beta_update(prob, Phis, Bs, ab, penalty, loss, rnd)
        # theta phase
        for _ in range(config.theta_steps_per_round):
            if not any(d.trainable_index.size for d in dicts):
                break
            dicts, at = theta_update(step_problem(), dicts, Bs, at, loss, rnd)
        if config.lr_decay != 1.0:
            ab = [_decayed(a, config.lr_decay) for a in ab]
            at = [_decayed(a, config.lr_decay) for a in at]

        f = problem.predict(problem.features(dicts), Bs)
        train_risk = problem.fit_value(f, loss) + penalty.value(Bs)
        if not np.isfinite(train_risk) or train_risk > DIVERGENCE:
            raise NumericError(f"training diverged at round {rnd} (risk {train_risk:.3g})",
                               {"round": rnd, "trace": trace})
        val_risk = np.nan
        if val_problem is not None and (rnd % config.eval_every == 0 or rnd == config.rounds):
            fv = val_problem.predict(val_problem.features(dicts), Bs)
            val_risk = val_problem.fit_value(fv, loss)
        sips, cstat = diagnostics(Bs)
        row = {"round": rnd, "train_risk": train_risk, "val_risk": val_risk,
               "sip_exact": float(sum(sips)), "complexity_stat": cstat}
        if len(sips) > 1:
            row["sip_by_block"] = sips
        trace.append(row)
        if callback is not None:
            callback(rnd, dicts, [B.copy() for B in Bs], row)
        if val_problem is not None and not np.isnan(val_risk):
            if val_risk < best[0]:
                best = (val_risk, dicts, [B.copy() for B in Bs], rnd)
                since_best = 0
            else:
                since_best += config.eval_every
                if config.early_stop_patience and since_best >= config.early_stop_patience:
                    stopped = True
                    break

    if val_problem is None:
        return TrainResult(dicts, Bs, trace, len(trace), False)
    return TrainResult(best[1], best[2], trace, best[3], stopped)


def _decayed(state, factor):
    state.learning_rate *= factor
    return state
