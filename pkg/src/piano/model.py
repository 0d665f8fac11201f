"""Autoregressive physics-informed model: embedding, transition backbone, probe.

For every spatial node ``x_i`` the model walks forward in time. At step ``j``
it embeds ``(x_i, t_j, u_{j-1})``, advances a hidden state with the chosen
backbone and decodes the next value with a two-layer probe. Row-vector
convention throughout: a weight stored as ``(fan_in, fan_out)`` acts as
``x @ W``, so the stored transition matrices are the transposes of the
column-vector ``A h + B m`` form.

Backbones
---------
``ssm``    h = silu(LN(A h_prev + B m)),  o = C h + D m + m
``gru``    gated recurrent unit, o = h
``mlp``    h = silu(W [h_prev, m] + b),   o = h
``nonar``  no recurrence, no previous-value input; a pointwise network of (x, t)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .kernels import fused_rollout
from .numerics import Tensor

BACKBONES = ("ssm", "gru", "mlp", "nonar")
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, message, step=None, iteration=None, last_loss=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration
        self.last_loss = last_loss


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


@dataclass
class RolloutResult:
    field: Tensor          # u[x_index, t_index]; column 0 is the initial condition
    hidden: Optional[Tensor] = None

    @property
    def values(self):
        return self.field.data


@dataclass
class PianoModel:
    backbone: str = "ssm"
    k: int = 256
    d: int = 2
    l: int = 1
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)   # free-form run metadata kept in checkpoints

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.l != 1:
            raise ValueError("only scalar solutions (l=1) are supported")

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, backbone="ssm", k=256, seed=0, d=2, l=1):
        model = cls(backbone, int(k), d, l)
        model.init_params(np.random.default_rng(seed))
        return model

    def parameter_shapes(self):
        k, d, l = self.k, self.d, self.l
        width_in = d if self.backbone == "nonar" else d + l
        shapes = {"embed.W": (width_in, k), "embed.b": (k,)}
        if self.backbone == "ssm":
            shapes.update({"ssm.A": (k, k), "ssm.B": (k, k), "ssm.C": (k, k),
                           "ssm.D": (k, k), "ssm.ln_gain": (k,), "ssm.ln_bias": (k,)})
        elif self.backbone == "gru":
            # input and recurrent weights for [update, reset, candidate] gates
            shapes.update({"gru.W": (k, 3 * k), "gru.U_zr": (k, 2 * k),
                           "gru.U_n": (k, k), "gru.b": (3 * k,)})
        elif self.backbone == "mlp":
            shapes.update({"mlp.W": (2 * k, k), "mlp.b": (k,)})
        shapes.update({"probe.W1": (k, k), "probe.b1": (k,),
                       "probe.W2": (k, l), "probe.b2": (l,)})
        return shapes

    def init_params(self, rng):
        """Xavier-uniform weights (per gate block for the GRU), zero biases, unit LN gain."""
        k = self.k
        params = {}
        for name, shape in self.parameter_shapes().items():
            if name == "ssm.ln_gain":
                value = np.ones(shape)
            elif len(shape) == 1:
                value = np.zeros(shape)
            elif name.startswith("gru."):
                blocks = shape[1] // k
                value = np.concatenate(
                    [xavier_uniform(rng, shape[0], k) for _ in range(blocks)], axis=1)
            else:
                value = xavier_uniform(rng, *shape)
            params[name] = Tensor(value, requires_grad=True, name=name)
        self.params = params

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def parameters(self):
        return list(self.params.values())

    def get_state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def set_state(self, state):
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=float)
            if value.shape != p.shape:
                raise nx.ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def copy(self):
        other = PianoModel(self.backbone, self.k, self.d, self.l, meta=dict(self.meta))
        other.params = {n: Tensor(p.data.copy(), requires_grad=True, name=n)
                        for n, p in self.params.items()}
        return other

    # -- components ---------------------------------------------------------

    def embed(self, s):
        p = self.params
        s = nx.as_tensor(s)
        if s.data.ndim != 2 or s.shape[1] != p["embed.W"].shape[0]:
            raise nx.ShapeError(
                f"embedding expects width {p['embed.W'].shape[0]}, got shape {s.shape}")
        return nx.linear(s, p["embed.W"], p["embed.b"])

    def probe(self, o):
        p = self.params
        hidden = nx.silu(nx.linear(o, p["probe.W1"], p["probe.b1"]))
        return nx.linear(hidden, p["probe.W2"], p["probe.b2"])

    def step_ssm(self, h_prev, m):
        p = self.params
        pre = nx.linear(h_prev, p["ssm.A"]) + nx.linear(m, p["ssm.B"])
        h = nx.silu(nx.layer_norm(pre, p["ssm.ln_gain"], p["ssm.ln_bias"]))
        o = nx.linear(h, p["ssm.C"]) + nx.linear(m, p["ssm.D"]) + m
        return h, o

    def step_gru(self, h_prev, m):
        p = self.params
        k = self.k
        gx = nx.linear(m, p["gru.W"], p["gru.b"])
        gh = nx.linear(h_prev, p["gru.U_zr"])
        zr = nx.sigmoid(gx[:, :2 * k] + gh)
        z, r = zr[:, :k], zr[:, k:]
        n = nx.tanh(gx[:, 2 * k:] + nx.linear(r * h_prev, p["gru.U_n"]))
        # h = z * h_prev + (1 - z) * n
        h = n + z * (h_prev - n)
        return h, h

    def step_mlp(self, h_prev, m):
        p = self.params
        h = nx.silu(nx.linear(nx.concat([h_prev, m], axis=1), p["mlp.W"], p["mlp.b"]))
        return h, h

    def step(self, h_prev, m):
        if self.backbone == "ssm":
            return self.step_ssm(h_prev, m)
        if self.backbone == "gru":
            return self.step_gru(h_prev, m)
        if self.backbone == "mlp":
            return self.step_mlp(h_prev, m)
        raise ValueError("the non-autoregressive backbone has no recurrent step")

    def _stepper(self):
        """Step function for one rollout built on the fused cell primitives.

        Numerically identical to :meth:`step`; the SSM variant forms
        ``[B | D]`` once per rollout.
        """
        p = self.params
        k = self.k
        if self.backbone == "ssm":
            A, C = p["ssm.A"], p["ssm.C"]
            gain, bias = p["ssm.ln_gain"], p["ssm.ln_bias"]
            BD = nx.concat([p["ssm.B"], p["ssm.D"]], axis=1)

            def step(h_prev, m):
                ho = nx.ssm_cell(h_prev, m, A, BD, C, gain, bias)
                return ho[:, :k], ho[:, k:]

            return step
        if self.backbone == "gru":
            def step(h_prev, m):
                h = nx.gru_cell(h_prev, m, p["gru.W"], p["gru.U_zr"], p["gru.U_n"], p["gru.b"])
                return h, h

            return step
        if self.backbone == "mlp":
            def step(h_prev, m):
                h = nx.dense_silu(nx.concat([h_prev, m], axis=1), p["mlp.W"], p["mlp.b"])
                return h, h

            return step
        raise ValueError("the non-autoregressive backbone has no recurrent step")

    def _probe_fast(self, o):
        p = self.params
        return nx.linear(nx.dense_silu(o, p["probe.W1"], p["probe.b1"]), p["probe.W2"], p["probe.b2"])

    # -- rollout ------------------------------------------------------------

    def rollout(self, grid, ic, x=None, teacher_field=None, perturb=None, reference=False):
        """Generate ``u[x, t_0..t_M]`` from the initial values ``ic``.

        ``x`` defaults to the grid nodes (pass a subset together with the
        matching ``ic`` entries for spatial mini-batches). ``teacher_field``
        feeds known values instead of the model's own previous prediction.
        ``perturb`` maps a time index to an additive offset applied to that
        column after it is produced, so later steps see the perturbed value.
        ``reference=True`` forces the step-by-step path instead of the fused
        whole-rollout kernel (same values and gradients, slower).
        """
        x = grid.x if x is None else np.asarray(x, dtype=float)
        ic = np.asarray(ic, dtype=float).reshape(-1)
        if ic.shape[0] != x.shape[0]:
            raise nx.ShapeError(f"initial condition has {ic.shape[0]} entries, expected {x.shape[0]}")
        perturb = perturb or {}
        n = x.shape[0]
        times = grid.t
        if self.backbone == "nonar":
            return RolloutResult(self._rollout_pointwise(x, times, ic, perturb))
        if teacher_field is None and not reference:
            offsets = np.zeros((n, grid.m + 1))
            for j, value in perturb.items():
                offsets[:, j] += np.reshape(value, -1)
            field, failed = fused_rollout(self, x, times, ic, offsets)
            if failed is not None:
                raise DivergenceError(f"non-finite prediction at time step {failed}", step=failed)
            return RolloutResult(field)
        xcol = x[:, None]
        first = ic[:, None] + np.reshape(perturb.get(0, 0.0), (-1, 1))
        columns = [Tensor(first)]
        prev = columns[0]
        h = Tensor(np.zeros((n, self.k)))
        step = self._stepper()
        for j in range(1, grid.m + 1):
            tcol = np.full((n, 1), times[j])
            if teacher_field is not None:
                prev = Tensor(np.asarray(teacher_field, dtype=float)[:, j - 1:j])
            s = nx.concat([Tensor(xcol), Tensor(tcol), prev], axis=1)
            h, o = step(h, self.embed(s))
            u = self._probe_fast(o)
            if j in perturb:
                u = u + np.reshape(perturb[j], (-1, 1))
            if not np.all(np.isfinite(u.data)):
                raise DivergenceError(f"non-finite prediction at time step {j}", step=j)
            columns.append(u)
            prev = u
        return RolloutResult(nx.concat(columns, axis=1), h)

    def _rollout_pointwise(self, x, times, ic, perturb):
        # every (x, t_j), j >= 1, evaluated in one batch; column 0 stays the IC
        n, m = x.shape[0], times.shape[0] - 1
        s = np.column_stack([np.repeat(x, m), np.tile(times[1:], n)])
        u = nx.reshape(self._probe_fast(self.embed(s)), (n, m))
        offsets = np.zeros((n, m + 1))
        for j, value in perturb.items():
            offsets[:, j] += np.reshape(value, -1)
        if np.any(offsets[:, 1:]):
            u = u + offsets[:, 1:]
        if not np.all(np.isfinite(u.data)):
            bad = int(np.argmax(~np.all(np.isfinite(u.data), axis=0))) + 1
            raise DivergenceError(f"non-finite prediction at time step {bad}", step=bad)
        return nx.concat([Tensor(ic[:, None] + offsets[:, :1]), u], axis=1)

    def predict(self, grid, ic, x=None):
        """Rollout values as a plain array, without recording a tape."""
        tape = nx.active_tape()
        if tape is not None:
            raise RuntimeError("predict() must not run under an active tape")
        return self.rollout(grid, ic, x=x).field.data.copy()

    # -- persistence --------------------------------------------------------

    def to_manifest(self):
        return {
            "version": CHECKPOINT_VERSION,
            "backbone": self.backbone,
            "k": self.k,
            "d": self.d,
            "l": self.l,
            "meta": dict(self.meta),
            "params": {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                       for name, p in self.params.items()},
        }

    @classmethod
    def from_manifest(cls, manifest):
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        model = cls(manifest["backbone"], int(manifest["k"]), int(manifest["d"]),
                    int(manifest["l"]))
        expected = model.parameter_shapes()
        params = {}
        for name, shape in expected.items():
            entry = manifest["params"].get(name)
            if entry is None:
                raise ValueError(f"checkpoint is missing parameter {name}")
            if tuple(entry["shape"]) != tuple(shape):
                raise nx.ShapeError(f"{name}: checkpoint shape {entry['shape']} != {list(shape)}")
            data = np.asarray(entry["data"], dtype=float).reshape(shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        model.params = params
        model.meta = dict(manifest.get("meta") or {})
        return model

    def save(self, path):
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_manifest()))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_manifest(json.load(fh))
