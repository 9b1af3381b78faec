"""Composite contrastive training: state InfoNCE + action disambiguation.

Losses and gradients accumulate in float64; parameters are quantized back to
float32 values after every optimizer step. The action term's gradients are
accumulated separately from the state term's, so the total gradient is
exactly grad_state + lambda * grad_action by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .embed import action_key
from .errors import EmptySplit, NoApplicableActions


@dataclass
class TrainConfig:
    lambda_: float = 2.0
    tau: float = 0.07
    batch_size: int = 128
    lr: float = 4e-5
    weight_decay: float = 1e-2
    max_epochs: int = 400
    warmup_epochs: int = 10
    patience: int = 100
    k_actions: int = 50
    seed: int = 42

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.k_actions < 2:
            raise ValueError("k_actions must be >= 2")

    @classmethod
    def from_json_obj(cls, obj):
        kwargs = dict(obj)
        if "lambda" in kwargs:
            kwargs["lambda_"] = kwargs.pop("lambda")
        return cls(**kwargs)

    def to_json_obj(self):
        obj = asdict(self)
        obj["lambda"] = obj.pop("lambda_")
        return obj


@dataclass
class LossBreakdown:
    l_state: float
    l_action: float
    l_total: float
    grad_norm: float = 0.0

    def __post_init__(self):
        for name in ("l_state", "l_action", "l_total", "grad_norm"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite {name} in loss breakdown")

    @classmethod
    def of(cls, l_state, l_action, lam, grads=None):
        grad_norm = 0.0
        if grads is not None:
            grad_norm = float(np.sqrt(sum(float((g * g).sum())
                                          for g in grads.values())))
        return cls(l_state=l_state, l_action=l_action,
                   l_total=l_state + lam * l_action, grad_norm=grad_norm)


# --- similarity helpers --------------------------------------------------------

def _normalize_rows(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms, norms


def _normalize_backward(du, u, norms):
    return (du - u * (du * u).sum(axis=-1, keepdims=True)) / norms


def infonce_state_loss(h_hat, h_next, tau):
    """In-batch InfoNCE over cosine similarities.

    Returns (loss, d_h_hat, d_h_next); the other B-1 next states in the batch
    are the negatives for each row.
    """
    h_hat = np.atleast_2d(h_hat)
    h_next = np.atleast_2d(h_next)
    b = h_hat.shape[0]
    u, nu = _normalize_rows(h_hat)
    v, nv = _normalize_rows(h_next)
    logits = (u @ v.T) / tau
    row_max = logits.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))
    p = np.exp(logits - lse[:, None])
    dlogits = (p - np.eye(b)) / b
    ds = dlogits / tau
    du = ds @ v
    dv = ds.T @ u
    return loss, _normalize_backward(du, u, nu), _normalize_backward(dv, v, nv)


def _cosine_pairs(a, b):
    """Row-wise cosine of a[m] with b[m]; returns (sims, backward)."""
    ua, na = _normalize_rows(a)
    ub, nb = _normalize_rows(b)
    sims = (ua * ub).sum(axis=-1)

    def backward(dsims):
        d = dsims[:, None]
        da = _normalize_backward(d * ub, ua, na)
        db = _normalize_backward(d * ua, ub, nb)
        return da, db

    return sims, backward


# --- composite loss over one batch ----------------------------------------------

def composite_loss_and_grads(model, z_s, z_a, z_next, cand_groups, tau, lam):
    """Forward + backward for one batch.

    cand_groups: per batch row, either None (action term skipped) or
    (cand_z_a matrix of K_i raw action embeddings, true_index). Returns
    (l_state, l_action, grads_state, grads_action, n_skipped).
    """
    grads_state = model.zero_grads()
    h_s, h_a, h_hat, tape = model.forward_tape(z_s, z_a)
    h_next, tape_next = model.project_states_tape(z_next)

    l_state, d_hhat, d_hnext = infonce_state_loss(h_hat, h_next, tau)
    model.backward(tape, d_hhat, grads_state)
    model.backward_states(tape_next, d_hnext, grads_state)

    b = h_s.shape[0]
    grads_action = model.zero_grads()
    l_action = 0.0
    n_skipped = 0
    if cand_groups is not None:
        live = [(i, g) for i, g in enumerate(cand_groups) if g is not None]
        n_skipped = len(cand_groups) - len(live)
        if live and lam != 0.0:
            row_of = []
            blocks = []
            true_pos = []
            bounds = [0]
            for i, (z_cands, true_idx) in live:
                row_of.extend([i] * z_cands.shape[0])
                blocks.append(np.asarray(z_cands, dtype=np.float64))
                true_pos.append(bounds[-1] + true_idx)
                bounds.append(bounds[-1] + z_cands.shape[0])
            z_cand = np.concatenate(blocks, axis=0)
            row_of = np.asarray(row_of)

            h_a_cand, tape_ca = model.pi_a.forward(z_cand)
            h_s_rep = h_s[row_of]
            h_pred, tape_net = model.net.forward(h_s_rep, h_a_cand)
            targets = h_next[row_of]
            sims, cos_back = _cosine_pairs(h_pred, targets)
            logits = sims / tau

            dlogits = np.zeros_like(logits)
            for g, (i, _) in enumerate(live):
                seg = slice(bounds[g], bounds[g + 1])
                z = logits[seg]
                m = z.max()
                p = np.exp(z - m)
                p /= p.sum()
                l_action += -float(np.log(p[true_pos[g] - bounds[g]]))
                d = p.copy()
                d[true_pos[g] - bounds[g]] -= 1.0
                dlogits[seg] = d / b
            l_action /= b

            dsims = dlogits / tau
            d_pred, d_targets = cos_back(dsims)
            d_hs_rep, d_ha_cand = model.net.backward(tape_net, d_pred,
                                                     grads_action, "net")
            model.pi_a.backward(tape_ca, d_ha_cand, grads_action, "pi_a")
            live_rows = [i for i, _ in live]
            d_hs_total = np.zeros_like(h_s)
            d_hs_total[live_rows] = np.add.reduceat(d_hs_rep, bounds[:-1], axis=0)
            d_hnext_total = np.zeros_like(h_next)
            d_hnext_total[live_rows] = np.add.reduceat(d_targets, bounds[:-1], axis=0)
            cs, _, _ = tape
            model.pi_s.backward(cs, d_hs_total, grads_action, "pi_s")
            model.backward_states(tape_next, d_hnext_total, grads_action)
        elif live:
            # lambda == 0 disables the action term exactly: no forward, no grads
            pass

    return l_state, l_action, grads_state, grads_action, n_skipped


def action_disambiguation_loss(z_s, true_action_id, z_next, model,
                               applicable_ids, table, k, tau, rng):
    """Single-query action-contrast loss (loss, grads, candidate ids).

    Distractors are sampled uniformly without replacement from the state's
    applicable ground actions; if fewer than k are applicable all are used.
    States with fewer than two applicable actions raise NoApplicableActions.
    """
    if true_action_id not in applicable_ids:
        raise ValueError("true action must be applicable in its state")
    if len(applicable_ids) < 2:
        raise NoApplicableActions(
            f"state has {len(applicable_ids)} applicable action(s)")
    cand_ids = sample_action_candidates(true_action_id, applicable_ids, k, rng)
    true_idx = cand_ids.index(true_action_id)
    z_cands = np.stack([table.vector(action_key(a)) for a in cand_ids]).astype(np.float64)
    _, l_action, _, grads_action, _ = composite_loss_and_grads(
        model, np.atleast_2d(z_s), np.atleast_2d(table.vector(action_key(true_action_id))),
        np.atleast_2d(z_next), [(z_cands, true_idx)], tau, lam=1.0)
    return l_action, grads_action, cand_ids


def sample_action_candidates(true_action_id, applicable_ids, k, rng):
    """True action plus up to k-1 distinct applicable distractors, seeded."""
    others = [a for a in applicable_ids if a != true_action_id]
    n_extra = min(k - 1, len(others))
    if n_extra < len(others):
        idx = rng.choice(len(others), size=n_extra, replace=False)
        picked = [others[i] for i in sorted(idx)]
    else:
        picked = others
    cands = picked + [true_action_id]
    order = rng.permutation(len(cands))
    return [cands[i] for i in order]


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(param_items, grads, state, lr_t, wd,
               betas=(0.9, 0.999), eps=1e-8):
    """Decoupled weight decay AdamW update, in place."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in param_items:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= lr_t * update
        p -= lr_t * wd * p


def lr_at_epoch(epoch, config):
    """Linear warmup to lr over warmup_epochs, then constant. epoch is 1-based."""
    if config.warmup_epochs > 0 and epoch <= config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    return config.lr


# --- fit loop ----------------------------------------------------------------------

def _epoch_rng(seed, epoch):
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), epoch]))


def fit(bundle, split, model, config, history_path=None):
    """Train on split.train_ids with early stopping on validation Hit@5.

    The validation slice is a seeded 10% of the train ids, evaluated with the
    split's pool policy. Training never touches test-split ids; the accessed
    set is audited against them at the end.
    """
    from . import evaluate as ev

    train_ids = sorted(split.train_ids)
    if not train_ids:
        raise EmptySplit("train split is empty")
    overlap = set(train_ids) & set(split.test_ids)
    if overlap:
        raise AssertionError(f"split leaks {len(overlap)} ids between train and test")

    rng0 = _epoch_rng(config.seed, 0)
    order = list(rng0.permutation(len(train_ids)))
    shuffled = [train_ids[i] for i in order]
    if len(shuffled) >= 2:
        n_val = max(1, round(0.1 * len(shuffled)))
        n_val = min(n_val, len(shuffled) - 1)
        val_ids = shuffled[:n_val]
        grad_ids = shuffled[n_val:]
    else:
        val_ids = list(shuffled)
        grad_ids = list(shuffled)

    table = bundle.table
    accessed = set()

    def z_of(tid):
        t = bundle.transitions[tid]
        return (table.vector(str(t.s)).astype(np.float64),
                table.vector(action_key(t.a)).astype(np.float64),
                table.vector(str(t.s_next)).astype(np.float64))

    val_pools = [ev.build_pool(bundle.transitions[tid], split.pool_policy, bundle,
                               ev.query_rng(config.seed, tid, "pool"))
                 for tid in val_ids]
    val_cand_ids = sorted({c for pool in val_pools for c in pool.candidates})
    val_cand_z = np.stack([table.vector(c) for c in val_cand_ids]).astype(np.float64)
    val_cand_index = {c: i for i, c in enumerate(val_cand_ids)}
    val_z_s = np.stack([table.vector(str(bundle.transitions[t].s))
                        for t in val_ids]).astype(np.float64)
    val_z_a = np.stack([table.vector(action_key(bundle.transitions[t].a))
                        for t in val_ids]).astype(np.float64)
    accessed.update(val_ids)

    opt = AdamWState()
    history = []
    best_val = -1.0
    best_flat = model.param_vector().flatten().copy()
    bad = 0
    param_items = model.param_items()
    cand_cache = {}

    for epoch in range(1, config.max_epochs + 1):
        lr_t = lr_at_epoch(epoch, config)
        rng = _epoch_rng(config.seed, epoch)
        perm = rng.permutation(len(grad_ids))
        epoch_ids = [grad_ids[i] for i in perm]

        sum_state = sum_action = 0.0
        n_rows = 0
        for start in range(0, len(epoch_ids), config.batch_size):
            batch = epoch_ids[start:start + config.batch_size]
            accessed.update(batch)
            zs, za, zn = zip(*(z_of(tid) for tid in batch))
            z_s = np.stack(zs)
            z_a = np.stack(za)
            z_next = np.stack(zn)

            groups = None
            if config.lambda_ != 0.0:
                groups = []
                for tid in batch:
                    t = bundle.transitions[tid]
                    app = bundle.applicable_actions(t.domain, t.problem, t.s)
                    if len(app) < 2:
                        groups.append(None)
                    elif len(app) <= config.k_actions:
                        # all applicable actions fit: candidate set is fixed
                        key = (t.domain, t.problem, t.s)
                        cached = cand_cache.get(key)
                        if cached is None:
                            z = np.stack([table.vector(action_key(a))
                                          for a in app]).astype(np.float64)
                            cached = cand_cache[key] = (z, app)
                        groups.append((cached[0], cached[1].index(t.a)))
                    else:
                        cand_ids = sample_action_candidates(
                            t.a, app, config.k_actions, rng)
                        z_cands = np.stack([table.vector(action_key(a))
                                            for a in cand_ids]).astype(np.float64)
                        groups.append((z_cands, cand_ids.index(t.a)))

            l_state, l_action, g_state, g_action, _ = composite_loss_and_grads(
                model, z_s, z_a, z_next, groups, config.tau, config.lambda_)

            grads = {name: g_state[name] + config.lambda_ * g_action[name]
                     for name, _ in param_items}
            LossBreakdown.of(l_state, l_action, config.lambda_, grads)
            adamw_step(param_items, grads, opt, lr_t, config.weight_decay)
            model.quantize()
            model.step += 1

            sum_state += l_state * len(batch)
            sum_action += l_action * len(batch)
            n_rows += len(batch)

        val_hit5 = _validation_hit5(model, val_ids, val_pools, val_cand_z,
                                    val_cand_index, val_z_s, val_z_a,
                                    config.seed)
        history.append({"epoch": epoch,
                        "l_state": sum_state / n_rows,
                        "l_action": sum_action / n_rows,
                        "val_hit5": val_hit5,
                        "lr": lr_t})

        if val_hit5 > best_val:
            best_val = val_hit5
            best_flat = model.param_vector().flatten().copy()
            bad = 0
        else:
            bad += 1
        if bad >= config.patience:
            break

    model.param_vector().unflatten(best_flat)

    leaked = accessed & set(split.test_ids)
    if leaked:
        raise AssertionError(f"training accessed {len(leaked)} test ids")

    if history_path:
        with open(history_path, "w", encoding="utf-8") as fh:
            for row in history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return model, history


def _validation_hit5(model, val_ids, val_pools, cand_z, cand_index,
                     z_s, z_a, seed, k=5):
    from . import evaluate as ev
    from .model import project

    if not val_ids:
        return 0.0
    h_cand = project(model.pi_s, cand_z)
    h_cand = h_cand / np.linalg.norm(h_cand, axis=1, keepdims=True)
    _, _, h_hat, _ = model.forward_tape(z_s, z_a)
    h_hat = h_hat / np.linalg.norm(h_hat, axis=1, keepdims=True)
    hits = 0
    for i, (tid, pool) in enumerate(zip(val_ids, val_pools)):
        rows = [cand_index[c] for c in pool.candidates]
        scores = h_cand[rows] @ h_hat[i]
        rank = ev._rank_of(scores, pool.candidates.index(pool.gt),
                           ev.query_rng(seed, tid, "tie"))
        if rank <= k:
            hits += 1
    return hits / len(val_ids)
