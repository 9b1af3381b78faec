"""Trainable networks: projection heads and the two transition architectures.

Forward math runs in float64; parameters are quantized to float32 values at
initialization, after every optimizer step, and in checkpoints. Backward
passes are hand-written reverse mode with the exact erf-based GELU
derivative, so gradients can be validated against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import BudgetExceeded, NonFiniteActivation

LATENT_DIM = 128
PARAM_BUDGET = 500_000
LN_EPS = 1e-5

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _quantize(arr):
    return arr.astype(np.float32).astype(np.float64)


# --- primitive layers ---------------------------------------------------------

class Linear:
    def __init__(self, in_dim, out_dim, rng, bias=True):
        bound = np.sqrt(6.0 / in_dim)
        self.W = _quantize(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        self.b = np.zeros(out_dim) if bias else None

    def forward(self, x):
        y = x @ self.W.T
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, cache, dy, grads, prefix):
        x = cache
        grads[prefix + ".W"] += dy.T @ x
        if self.b is not None:
            grads[prefix + ".b"] += dy.sum(axis=0)
        return dy @ self.W

    def param_items(self):
        items = [("W", self.W)]
        if self.b is not None:
            items.append(("b", self.b))
        return items


class LayerNorm:
    def __init__(self, dim):
        self.g = np.ones(dim)
        self.b = np.zeros(dim)

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xn = xc * inv
        return self.g * xn + self.b, (xn, inv)

    def backward(self, cache, dy, grads, prefix):
        xn, inv = cache
        grads[prefix + ".b"] += dy.sum(axis=0)
        grads[prefix + ".g"] += (dy * xn).sum(axis=0)
        dxn = dy * self.g
        n = xn.shape[-1]
        return (inv / n) * (n * dxn
                            - dxn.sum(axis=-1, keepdims=True)
                            - xn * (dxn * xn).sum(axis=-1, keepdims=True))

    def param_items(self):
        return [("g", self.g), ("b", self.b)]


# --- projection head ----------------------------------------------------------

class ProjectionHead:
    """4 linear layers; LayerNorm + GELU after each of the first three."""

    DEPTH = 4

    def __init__(self, in_dim, rng, out_dim=LATENT_DIM):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.lins = []
        self.lns = []
        d = in_dim
        for _ in range(self.DEPTH - 1):
            self.lins.append(Linear(d, out_dim, rng))
            self.lns.append(LayerNorm(out_dim))
            d = out_dim
        self.lins.append(Linear(d, out_dim, rng))

    def forward(self, z):
        caches = []
        x = z
        for lin, ln in zip(self.lins[:-1], self.lns):
            u, c_lin = lin.forward(x)
            n, c_ln = ln.forward(u)
            caches.append((c_lin, c_ln, n))
            x = gelu(n)
        h, c_last = self.lins[-1].forward(x)
        caches.append(c_last)
        return h, caches

    def backward(self, caches, dh, grads, prefix):
        dx = self.lins[-1].backward(caches[-1], dh, grads,
                                    f"{prefix}.lin{self.DEPTH - 1}")
        for i in range(self.DEPTH - 2, -1, -1):
            c_lin, c_ln, n = caches[i]
            dn = dx * gelu_grad(n)
            du = self.lns[i].backward(c_ln, dn, grads, f"{prefix}.ln{i}")
            dx = self.lins[i].backward(c_lin, du, grads, f"{prefix}.lin{i}")
        return dx

    def param_items(self):
        items = []
        for i, lin in enumerate(self.lins):
            items.extend((f"lin{i}.{n}", a) for n, a in lin.param_items())
            if i < len(self.lns):
                items.extend((f"ln{i}.{n}", a) for n, a in self.lns[i].param_items())
        return items


# --- transition networks --------------------------------------------------------

class ResidualMLPTransition:
    """h_hat = LN( f([h_s; h_a]) + W_res h_s ), f = three linears with GELU."""

    arch = "mlp"

    def __init__(self, rng, dim=LATENT_DIM):
        self.dim = dim
        self.lin1 = Linear(2 * dim, dim, rng)
        self.lin2 = Linear(dim, dim, rng)
        self.lin3 = Linear(dim, dim, rng)
        bound = np.sqrt(6.0 / dim)
        self.W_res = _quantize(rng.uniform(-bound, bound, size=(dim, dim)))
        self.ln = LayerNorm(dim)

    def forward(self, h_s, h_a):
        x = np.concatenate([h_s, h_a], axis=-1)
        u1, c1 = self.lin1.forward(x)
        a1 = gelu(u1)
        u2, c2 = self.lin2.forward(a1)
        a2 = gelu(u2)
        u3, c3 = self.lin3.forward(a2)
        r = h_s @ self.W_res.T
        y, c_ln = self.ln.forward(u3 + r)
        return y, (c1, u1, c2, u2, c3, h_s, c_ln)

    def backward(self, cache, dy, grads, prefix):
        c1, u1, c2, u2, c3, h_s, c_ln = cache
        dz = self.ln.backward(c_ln, dy, grads, f"{prefix}.ln")
        grads[prefix + ".W_res"] += dz.T @ h_s
        d_hs = dz @ self.W_res
        da2 = self.lin3.backward(c3, dz, grads, f"{prefix}.lin3")
        du2 = da2 * gelu_grad(u2)
        da1 = self.lin2.backward(c2, du2, grads, f"{prefix}.lin2")
        du1 = da1 * gelu_grad(u1)
        dx = self.lin1.backward(c1, du1, grads, f"{prefix}.lin1")
        d_hs = d_hs + dx[:, :self.dim]
        d_ha = dx[:, self.dim:]
        return d_hs, d_ha

    def param_items(self):
        items = []
        for name, mod in (("lin1", self.lin1), ("lin2", self.lin2),
                          ("lin3", self.lin3)):
            items.extend((f"{name}.{n}", a) for n, a in mod.param_items())
        items.append(("W_res", self.W_res))
        items.extend((f"ln.{n}", a) for n, a in self.ln.param_items())
        return items


class HyperNetTransition:
    """Action embedding generates per-layer FiLM scale/shift for a state trunk."""

    arch = "hyper"

    def __init__(self, rng, dim=LATENT_DIM, n_film_layers=2, gen_hidden=LATENT_DIM):
        self.dim = dim
        self.L = n_film_layers
        self.gen1 = Linear(dim, gen_hidden, rng)
        self.gen2 = Linear(gen_hidden, 2 * self.L * dim, rng)
        self.trunk = [Linear(dim, dim, rng) for _ in range(self.L)]
        self.out = Linear(dim, dim, rng)
        self.ln = LayerNorm(dim)

    def forward(self, h_s, h_a):
        g1, cg1 = self.gen1.forward(h_a)
        ag = gelu(g1)
        film, cg2 = self.gen2.forward(ag)
        x = h_s
        layer_caches = []
        for i, lin in enumerate(self.trunk):
            scale = film[:, 2 * i * self.dim:(2 * i + 1) * self.dim]
            shift = film[:, (2 * i + 1) * self.dim:(2 * i + 2) * self.dim]
            u, cu = lin.forward(x)
            v = (1.0 + scale) * u + shift
            layer_caches.append((cu, u, scale, v))
            x = gelu(v)
        o, co = self.out.forward(x)
        y, c_ln = self.ln.forward(o)
        return y, (cg1, g1, cg2, layer_caches, co, c_ln)

    def backward(self, cache, dy, grads, prefix):
        cg1, g1, cg2, layer_caches, co, c_ln = cache
        do = self.ln.backward(c_ln, dy, grads, f"{prefix}.ln")
        dx = self.out.backward(co, do, grads, f"{prefix}.out")
        d_film = np.zeros((dy.shape[0], 2 * self.L * self.dim))
        for i in range(self.L - 1, -1, -1):
            cu, u, scale, v = layer_caches[i]
            dv = dx * gelu_grad(v)
            d_film[:, 2 * i * self.dim:(2 * i + 1) * self.dim] = dv * u
            d_film[:, (2 * i + 1) * self.dim:(2 * i + 2) * self.dim] = dv
            du = dv * (1.0 + scale)
            dx = self.trunk[i].backward(cu, du, grads, f"{prefix}.trunk{i}")
        d_hs = dx
        dag = self.gen2.backward(cg2, d_film, grads, f"{prefix}.gen2")
        dg1 = dag * gelu_grad(g1)
        d_ha = self.gen1.backward(cg1, dg1, grads, f"{prefix}.gen1")
        return d_hs, d_ha

    def param_items(self):
        items = []
        items.extend((f"gen1.{n}", a) for n, a in self.gen1.param_items())
        items.extend((f"gen2.{n}", a) for n, a in self.gen2.param_items())
        for i, lin in enumerate(self.trunk):
            items.extend((f"trunk{i}.{n}", a) for n, a in lin.param_items())
        items.extend((f"out.{n}", a) for n, a in self.out.param_items())
        items.extend((f"ln.{n}", a) for n, a in self.ln.param_items())
        return items


# --- parameter vector -----------------------------------------------------------

class ParamVector:
    """Flat float view over a named, ordered set of parameter arrays."""

    def __init__(self, named_arrays):
        self.names = [n for n, _ in named_arrays]
        self.arrays = [a for _, a in named_arrays]
        self.shapes = [a.shape for a in self.arrays]
        self.sizes = [a.size for a in self.arrays]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.total = int(self.offsets[-1])

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays])

    def unflatten(self, vec):
        if vec.shape != (self.total,):
            raise ValueError(f"expected vector of length {self.total}")
        for a, off, size in zip(self.arrays, self.offsets, self.sizes):
            a[...] = vec[off:off + size].reshape(a.shape)

    def segment(self, name):
        i = self.names.index(name)
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.sizes[i]))


# --- full model -----------------------------------------------------------------

@dataclass
class TransitionModel:
    arch: str
    d_in_state: int
    d_in_action: int
    seed: int
    pi_s: ProjectionHead
    pi_a: ProjectionHead
    net: object
    step: int = 0
    _pv: ParamVector = field(default=None, repr=False)

    def param_items(self):
        items = []
        items.extend((f"pi_s.{n}", a) for n, a in self.pi_s.param_items())
        items.extend((f"pi_a.{n}", a) for n, a in self.pi_a.param_items())
        items.extend((f"net.{n}", a) for n, a in self.net.param_items())
        return items

    def param_vector(self):
        if self._pv is None:
            self._pv = ParamVector(self.param_items())
        return self._pv

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.param_items()}

    def net_param_count(self):
        return sum(a.size for _, a in self.net.param_items())

    def quantize(self):
        for _, arr in self.param_items():
            arr[...] = _quantize(arr)

    def forward_tape(self, z_s, z_a):
        z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
        z_a = np.atleast_2d(np.asarray(z_a, dtype=np.float64))
        h_s, cs = self.pi_s.forward(z_s)
        h_a, ca = self.pi_a.forward(z_a)
        h_hat, cn = self.net.forward(h_s, h_a)
        if not (np.isfinite(h_hat).all() and np.isfinite(h_s).all()
                and np.isfinite(h_a).all()):
            raise NonFiniteActivation("non-finite activation in forward pass")
        return h_s, h_a, h_hat, (cs, ca, cn)

    def backward(self, tape, d_hhat, grads, d_hs=None, d_ha=None):
        cs, ca, cn = tape
        g_hs, g_ha = self.net.backward(cn, d_hhat, grads, "net")
        if d_hs is not None:
            g_hs = g_hs + d_hs
        if d_ha is not None:
            g_ha = g_ha + d_ha
        d_zs = self.pi_s.backward(cs, g_hs, grads, "pi_s")
        d_za = self.pi_a.backward(ca, g_ha, grads, "pi_a")
        return d_zs, d_za

    def project_states_tape(self, z):
        """π_s on a batch of raw embeddings (used for targets/candidates)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self.pi_s.forward(z)

    def backward_states(self, cache, dh, grads):
        return self.pi_s.backward(cache, dh, grads, "pi_s")


def init_model(arch, d_in_state, d_in_action, seed):
    """Seeded Kaiming-uniform init; zero biases; LayerNorm gain 1 / bias 0."""
    if d_in_state < 1 or d_in_action < 1:
        raise ValueError("input dims must be >= 1")
    if arch not in ("mlp", "hyper"):
        raise ValueError(f"unknown architecture '{arch}'")
    rng = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))
    pi_s = ProjectionHead(d_in_state, rng)
    pi_a = ProjectionHead(d_in_action, rng)
    net = ResidualMLPTransition(rng) if arch == "mlp" else HyperNetTransition(rng)
    model = TransitionModel(arch=arch, d_in_state=d_in_state,
                            d_in_action=d_in_action, seed=seed,
                            pi_s=pi_s, pi_a=pi_a, net=net)
    n = model.net_param_count()
    if n >= PARAM_BUDGET:
        raise BudgetExceeded(
            f"transition network has {n} parameters, budget is {PARAM_BUDGET}")
    return model


def forward(model, z_s, z_a):
    """(h_s, h_a, h_hat) for one (state, action) embedding pair or a batch."""
    h_s, h_a, h_hat, _ = model.forward_tape(z_s, z_a)
    return h_s, h_a, h_hat


def project(head, z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h, _ = head.forward(z)
    if not np.isfinite(h).all():
        raise NonFiniteActivation("non-finite activation in projection head")
    return h


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(model, path, extra=None):
    header = {"format": "embedplan-checkpoint", "version": 1,
              "arch": model.arch, "d_in_state": model.d_in_state,
              "d_in_action": model.d_in_action, "seed": model.seed,
              "step": model.step}
    if extra:
        header["extra"] = extra
    flat = model.param_vector().flatten().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(flat.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "embedplan-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    model = init_model(header["arch"], header["d_in_state"],
                       header["d_in_action"], header["seed"])
    pv = model.param_vector()
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    pv.unflatten(flat)
    model.step = header["step"]
    return model, header
