"""Coefficient-form natural gradient with epoch-one sharing.

The damped natural-gradient step for one layer is
(lambda I + (1/M) U U^T)^{-1} g, with U holding that layer's per-sample
loss gradients columnwise and g their mean.  Rewriting through the
matrix inversion identity turns the step into U c for a length-M
coefficient vector

    c = (1/M) (1 - (lambda I + (1/M) G)^{-1} gbar),   G = U^T U,
    gbar = (1/M) G 1,

up to a 1/lambda factor that is folded into the learning rate.  U c
itself is never formed through U: for a dense layer it equals
Z diag(c) X^T, so preconditioning costs one weighted GEMM.

Training runs in two phases.  During epoch one each batch solves for
its own c and damping lambda while a table accumulates them; after the
epoch the table averages into (v_tilde, lambda_bar) per layer, and all
later epochs reuse those shared values with no Gram, no solve, no
inverse.  Coefficients are tied to batch slots, not sample identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg, nn, persample

__all__ = [
    "DampingRule",
    "TableStateError",
    "CoefficientTable",
    "damping_lambda",
    "coefficients",
    "precondition_dense",
    "precondition_conv",
    "precondition",
    "precondition_explicit_u",
    "PostModifiers",
    "preconditioned_step",
    "epoch_one_step",
    "shared_step",
]


class TableStateError(RuntimeError):
    """Coefficient table used in the wrong phase (or with the wrong shape)."""


@dataclass(frozen=True)
class DampingRule:
    """lambda = alpha * ||G||_F, floored for vanishing-gradient batches.

    A fixed value (set via ``fixed``) bypasses the Frobenius rule
    entirely; that exists for ablation, not regular use.
    """

    alpha: float = 0.005
    floor: float = 1e-12
    fixed: float | None = None

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.floor <= 0.0:
            raise ValueError(f"floor must be positive, got {self.floor}")
        if self.fixed is not None and self.fixed <= 0.0:
            raise ValueError(f"fixed damping must be positive, got {self.fixed}")


def damping_lambda(stats: persample.GramStats, rule: DampingRule) -> float:
    """Damping strength for one batch from its Gram matrix."""
    if rule.fixed is not None:
        return rule.fixed
    fro = linalg.frobenius_norm(stats.gram)
    if fro < 1e-30:
        return rule.floor
    return rule.alpha * fro


def coefficients(stats: persample.GramStats, lam: float) -> np.ndarray:
    """Length-M weights c such that the preconditioned gradient is (1/lam) U c."""
    if lam <= 0.0:
        raise ValueError(f"damping must be positive, got {lam}")
    m = stats.batch
    a = stats.gram / m + lam * np.eye(m)
    shifted = linalg.solve_spd(a, stats.mean_col)
    return (np.full(m, 1.0) - shifted) / m


def precondition_dense(capture: nn.LayerCapture, c: np.ndarray) -> np.ndarray:
    """Weighted-input form of U c for a dense layer: Z diag(c) X^T."""
    z, x = capture.z, capture.x
    if z is None:
        raise ValueError(f"layer {capture.layer} capture has no Z; run backward first")
    if c.shape != (z.shape[1],):
        raise ValueError(f"coefficient shape {c.shape} does not match batch {z.shape[1]}")
    return (z * c) @ x.T


def precondition_conv(capture: nn.LayerCapture, c: np.ndarray) -> np.ndarray:
    """Weighted-input form of U c for a conv layer: sum_s Z_s diag(c) X_s^T."""
    z, x = capture.z, capture.x
    if z is None:
        raise ValueError(f"layer {capture.layer} capture has no Z; run backward first")
    o, s, m = z.shape
    if c.shape != (m,):
        raise ValueError(f"coefficient shape {c.shape} does not match batch {m}")
    return (z * c).reshape(o, s * m) @ x.reshape(-1, s * m).T


def precondition(capture: nn.LayerCapture, c: np.ndarray) -> np.ndarray:
    if capture.kind == "dense":
        return precondition_dense(capture, c)
    if capture.kind == "conv":
        return precondition_conv(capture, c)
    raise ValueError(f"layer kind {capture.kind!r} is not preconditioned")


def precondition_explicit_u(capture: nn.LayerCapture, c: np.ndarray,
                            max_bytes: int = persample.DEFAULT_U_BUDGET_BYTES) -> np.ndarray:
    """Reference route that materializes per-sample gradients and sums them.

    Produces the same matrix as the weighted-input routes but pays for
    building U; kept as an oracle and for the no-acceleration ablation.
    Samples are processed in chunks so the allocation stays under
    max_bytes.
    """
    if capture.kind not in ("dense", "conv"):
        raise ValueError(f"layer kind {capture.kind!r} is not preconditioned")
    z, x = capture.z, capture.x
    if z is None:
        raise ValueError(f"layer {capture.layer} capture has no Z; run backward first")
    if capture.kind == "dense":
        o, i = z.shape[0], x.shape[0]
        m = z.shape[1]
    else:
        o, _, m = z.shape
        i = x.shape[0]
    if c.shape != (m,):
        raise ValueError(f"coefficient shape {c.shape} does not match batch {m}")
    chunk = max(1, max_bytes // (o * i * 8))
    total = np.zeros(o * i)
    for start in range(0, m, chunk):
        sl = slice(start, min(start + chunk, m))
        if capture.kind == "dense":
            u = linalg.khatri_rao(z[:, sl], x[:, sl])
        else:
            u = np.einsum("osm,ism->oim", z[:, :, sl], x[:, :, sl]).reshape(o * i, -1)
        total += u @ c[sl]
    return total.reshape(o, i)


_TABLE_HEADER = "fngd-coefficients,1"


class CoefficientTable:
    """Per-layer running sums of epoch-one coefficients and dampings.

    accumulate() feeds one batch; finalize() turns the sums into the
    shared pair (v_tilde, lambda_bar) by exact division with the batch
    count.  A finalized table rejects further accumulation, and the
    shared accessors reject an unfinalized table.
    """

    def __init__(self):
        self._v_sums: dict[int, np.ndarray] = {}
        self._lam_sums: dict[int, float] = {}
        self._counts: dict[int, int] = {}
        self.shared: dict[int, tuple[np.ndarray, float]] = {}
        self.finalized = False

    @property
    def batch_count(self) -> int:
        return max(self._counts.values(), default=0)

    def accumulate(self, layer: int, v: np.ndarray, lam: float) -> None:
        if self.finalized:
            raise TableStateError("coefficient table is already finalized")
        v = linalg.as_vector(v)
        if lam <= 0.0:
            raise ValueError(f"damping must be positive, got {lam}")
        if layer in self._v_sums:
            if v.shape != self._v_sums[layer].shape:
                raise TableStateError(
                    f"layer {layer}: coefficient length changed from "
                    f"{self._v_sums[layer].shape[0]} to {v.shape[0]}"
                )
            self._v_sums[layer] = self._v_sums[layer] + v
            self._lam_sums[layer] += lam
            self._counts[layer] += 1
        else:
            self._v_sums[layer] = v.copy()
            self._lam_sums[layer] = lam
            self._counts[layer] = 1

    def finalize(self) -> None:
        if self.finalized:
            raise TableStateError("coefficient table is already finalized")
        if not self._counts:
            raise TableStateError("no batches accumulated; nothing to finalize")
        counts = set(self._counts.values())
        if len(counts) != 1:
            raise TableStateError(f"uneven batch counts across layers: {self._counts}")
        b = counts.pop()
        for layer, s in self._v_sums.items():
            self.shared[layer] = (s / b, self._lam_sums[layer] / b)
        self.finalized = True

    def shared_for(self, layer: int) -> tuple[np.ndarray, float]:
        if not self.finalized:
            raise TableStateError("coefficient table is not finalized")
        if layer not in self.shared:
            raise TableStateError(f"no shared coefficients for layer {layer}")
        return self.shared[layer]

    def save(self, path) -> None:
        """Versioned text format; floats are written with round-trip repr."""
        if not self.finalized:
            raise TableStateError("finalize the table before saving it")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [_TABLE_HEADER]
        for layer in sorted(self.shared):
            v, lam_bar = self.shared[layer]
            fields = [str(layer), str(v.shape[0]), repr(float(lam_bar))]
            fields.extend(repr(float(x)) for x in v)
            lines.append(",".join(fields))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CoefficientTable":
        text = Path(path).read_text()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != _TABLE_HEADER:
            raise ValueError(
                f"{path}: not a coefficient table (expected header {_TABLE_HEADER!r})"
            )
        table = cls()
        for ln in lines[1:]:
            fields = ln.split(",")
            if len(fields) < 4:
                raise ValueError(f"{path}: malformed coefficient row {ln!r}")
            layer, m = int(fields[0]), int(fields[1])
            lam_bar = float(fields[2])
            v = np.array([float(x) for x in fields[3:]])
            if v.shape[0] != m:
                raise ValueError(
                    f"{path}: layer {layer} row promises {m} coefficients, "
                    f"holds {v.shape[0]}"
                )
            if lam_bar <= 0.0:
                raise ValueError(f"{path}: layer {layer} has non-positive damping")
            table.shared[layer] = (v, lam_bar)
        if not table.shared:
            raise ValueError(f"{path}: coefficient table holds no layers")
        table.finalized = True
        return table


@dataclass
class PostModifiers:
    """Optional momentum / weight decay applied to the final update
    direction of every parameter; both default to off."""

    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        self.buffers: dict[str, np.ndarray] = {}


def _apply_update(param: np.ndarray, direction: np.ndarray, lr: float,
                  mods: PostModifiers | None, name: str) -> None:
    if mods is None or (mods.momentum == 0.0 and mods.weight_decay == 0.0):
        param -= lr * direction
        return
    d = direction
    if mods.weight_decay:
        d = d + mods.weight_decay * param
    if mods.momentum:
        buf = mods.buffers.get(name)
        buf = d if buf is None else mods.momentum * buf + d
        mods.buffers[name] = buf
        d = buf
    param -= lr * d


def preconditioned_step(net: nn.Network, x, y, eta: float, rule: DampingRule,
                        table: CoefficientTable | None = None,
                        mods: PostModifiers | None = None,
                        explicit_u: bool = False,
                        u_budget: int = persample.DEFAULT_U_BUDGET_BYTES) -> float:
    """One step that computes fresh coefficients from this batch.

    Every preconditioned layer gets w -= (eta/lambda) U c through the
    weighted-input route; biases take the plain gradient at eta.  When a
    table is given the (c, lambda) pair of every layer is accumulated
    into it, which is the only difference between the coefficient phase
    and a natural-gradient step that never shares.
    """
    fwd = nn.forward(net, x)
    bwd = nn.backward(net, fwd, y)
    params = net.parameters()
    for i in net.preconditioned():
        cap = fwd.captures[i]
        if cap.kind == "dense":
            stats = persample.gram_dense(cap)
        else:
            stats = persample.gram_conv(persample.build_u_conv(cap, u_budget), layer=i)
        lam = damping_lambda(stats, rule)
        try:
            v = coefficients(stats, lam)
        except linalg.NotSPDError as exc:
            raise RuntimeError(
                f"coefficient solve failed at layer {i} (pivot {exc.pivot})"
            ) from exc
        if explicit_u:
            d = precondition_explicit_u(cap, v, u_budget)
        else:
            d = precondition(cap, v)
        _apply_update(params[f"layer{i}.weight"], d / lam, eta, mods, f"layer{i}.weight")
        if table is not None:
            table.accumulate(i, v, lam)
    for name, grad in bwd.bias_grads.items():
        _apply_update(params[name], grad, eta, mods, name)
    return bwd.loss


def epoch_one_step(net: nn.Network, x, y, table: CoefficientTable, eta: float,
                   rule: DampingRule, mods: PostModifiers | None = None,
                   explicit_u: bool = False,
                   u_budget: int = persample.DEFAULT_U_BUDGET_BYTES) -> float:
    """Coefficient-phase step: precondition and feed the shared table."""
    if table.finalized:
        raise TableStateError("coefficient table is already finalized")
    return preconditioned_step(net, x, y, eta, rule, table=table, mods=mods,
                               explicit_u=explicit_u, u_budget=u_budget)


def shared_step(net: nn.Network, x, y, table: CoefficientTable, eta: float,
                mods: PostModifiers | None = None,
                explicit_u: bool = False,
                u_budget: int = persample.DEFAULT_U_BUDGET_BYTES) -> float:
    """Later-epoch step: reuse shared coefficients, no Gram and no solve.

    Weights move by (eta/lambda_bar) Z diag(v_tilde) X^T per layer;
    batch slot i reuses coefficient i regardless of which sample landed
    in that slot.
    """
    if not table.finalized:
        raise TableStateError("coefficient table is not finalized")
    fwd = nn.forward(net, x)
    bwd = nn.backward(net, fwd, y)
    params = net.parameters()
    m = fwd.outputs.shape[1]
    for i in net.preconditioned():
        v, lam_bar = table.shared_for(i)
        if v.shape[0] != m:
            raise TableStateError(
                f"layer {i}: shared coefficients cover batches of {v.shape[0]}, got {m}"
            )
        cap = fwd.captures[i]
        if explicit_u:
            d = precondition_explicit_u(cap, v, u_budget)
        else:
            d = precondition(cap, v)
        _apply_update(params[f"layer{i}.weight"], d / lam_bar, eta, mods, f"layer{i}.weight")
    for name, grad in bwd.bias_grads.items():
        _apply_update(params[name], grad, eta, mods, name)
    return bwd.loss
