"""Factor graph container and a sparse Levenberg-Marquardt solver."""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .factors import Factor, VariableId, group_key


class UnderconstrainedError(RuntimeError):
    """The normal equations are singular; ``variable`` names an unconstrained variable."""

    def __init__(self, variable: VariableId | None, detail: str = ""):
        self.variable = variable
        what = f"variable {variable} is unconstrained" if variable is not None else "normal equations are singular"
        super().__init__(f"{what}{': ' + detail if detail else ''}")


class _Group:
    def __init__(self) -> None:
        self.factors: list[Factor] = []
        self.slots: list[tuple[int, ...]] = []
        self._slot_array: NDArray[np.intp] | None = None
        self._data: dict | None = None

    def append(self, f: Factor, slots: tuple[int, ...]) -> None:
        self.factors.append(f)
        self.slots.append(slots)
        self._slot_array = None
        self._data = None

    @property
    def data(self) -> dict:
        """Stacked factor payloads; factors are immutable once added."""
        if self._data is None:
            self._data = type(self.factors[0]).stack(self.factors)
        return self._data

    @property
    def slot_array(self) -> NDArray[np.intp]:
        if self._slot_array is None:
            self._slot_array = np.array(self.slots, dtype=np.intp)
        return self._slot_array


class FactorGraph:
    """Variables (all 3-vectors) with current estimates, plus the factors over them."""

    def __init__(self) -> None:
        self.keys: list[VariableId] = []
        self.index: dict[VariableId, int] = {}
        self._values = np.zeros((0, 3))
        self.factors: list[Factor] = []
        self._groups: dict[tuple, _Group] = defaultdict(_Group)

    def __contains__(self, key: VariableId) -> bool:
        return key in self.index

    @property
    def num_variables(self) -> int:
        return len(self.keys)

    @property
    def values(self) -> NDArray[np.float64]:
        return self._values

    @values.setter
    def values(self, x: NDArray[np.float64]) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != self._values.shape:
            raise ValueError(f"expected values of shape {self._values.shape}, got {x.shape}")
        self._values = x.copy()

    def add_variable(self, key: VariableId, initial: ArrayLike) -> None:
        if key in self.index:
            raise ValueError(f"variable {key} already exists")
        v = np.asarray(initial, dtype=float).reshape(1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"initial value of {key} must be finite")
        self.index[key] = len(self.keys)
        self.keys.append(key)
        self._values = np.vstack([self._values, v])

    def value(self, key: VariableId) -> NDArray[np.float64]:
        return self._values[self.index[key]].copy()

    def set_value(self, key: VariableId, v: ArrayLike) -> None:
        self._values[self.index[key]] = np.asarray(v, dtype=float)

    def add_factor(self, f: Factor) -> None:
        missing = [k for k in f.keys if k not in self.index]
        if missing:
            raise KeyError(f"{f.variant} factor references unknown variables: {', '.join(map(str, missing))}")
        self.factors.append(f)
        self._groups[group_key(f)].append(f, tuple(self.index[k] for k in f.keys))

    def add_factors(self, fs: Iterable[Factor]) -> None:
        for f in fs:
            self.add_factor(f)

    def count(self, variant: str) -> int:
        return sum(f.variant == variant for f in self.factors)

    # --- evaluation ---------------------------------------------------------

    def _evaluate(self, x: NDArray[np.float64], jacobian: bool):
        res_parts = []
        rows, cols, vals = [], [], []
        offset = 0
        for (cls, _), g in self._groups.items():
            slots = g.slot_array
            r, jacs = cls.linearize(g.factors, [x[slots[:, i]] for i in range(slots.shape[1])], g.data)
            n, m = r.shape
            res_parts.append(r.ravel())
            if jacobian:
                row_idx = offset + np.arange(n * m).reshape(n, m)
                for i, J in enumerate(jacs):
                    col = 3 * slots[:, i][:, None, None] + np.arange(3)[None, None, :]
                    rows.append(np.broadcast_to(row_idx[:, :, None], J.shape).ravel())
                    cols.append(np.broadcast_to(col, J.shape).ravel())
                    vals.append(J.ravel())
            offset += n * m
        r = np.concatenate(res_parts) if res_parts else np.zeros(0)
        if not jacobian:
            return r, None
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(offset, 3 * len(self.keys)),
            )
        else:
            J = sp.csr_matrix((0, 3 * len(self.keys)))
        return r, J

    def residuals(self, x: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
        return self._evaluate(self._values if x is None else x, jacobian=False)[0]

    def linearize(self, x: NDArray[np.float64] | None = None) -> tuple[NDArray[np.float64], sp.csr_matrix]:
        """Stacked whitened residuals and their sparse Jacobian over the flattened values."""
        return self._evaluate(self._values if x is None else x, jacobian=True)

    def cost(self, x: NDArray[np.float64] | None = None) -> float:
        """``0.5 * sum(r^2)``: negative log posterior up to a constant."""
        r = self.residuals(x)
        return 0.5 * float(r @ r)

    def hessian(self, x: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
        _, J = self.linearize(x)
        return (J.T @ J).toarray()

    def dump(self) -> str:
        """One line per factor: variant, connected variable ids, payload."""
        return "\n".join(f.dump() for f in self.factors) + ("\n" if self.factors else "")

    def variable_for_column(self, col: int) -> VariableId:
        return self.keys[col // 3]


@dataclass
class LMResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    # cost after every accepted step, starting with the initial cost
    cost_history: list[float] = field(default_factory=list)


def levenberg_marquardt(
    graph: FactorGraph,
    max_iterations: int = 100,
    rel_tol: float = 1e-6,
    lambda_init: float = 1e-5,
    abs_tol: float = 1e-12,
) -> LMResult:
    """Minimize ``graph.cost`` in place with Marquardt-scaled damping.

    Stops when an accepted step lowers the cost by less than ``rel_tol``
    relative, after ``max_iterations`` linearizations, or when damping
    cannot find a decrease.
    """
    x = graph.values.copy()
    r, J = graph.linearize(x)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite residual at the initial estimate")
    cost = 0.5 * float(r @ r)
    history = [cost]
    if x.size == 0:
        return LMResult(cost, cost, 0, True, history)
    # a variable no factor touches has an all-zero Jacobian column
    touched = np.zeros(J.shape[1], dtype=bool)
    touched[J.indices] = True
    if not touched.all():
        col = int(np.flatnonzero(~touched)[0])
        raise UnderconstrainedError(graph.variable_for_column(col), "no factor constrains it")
    lam = lambda_init
    converged = False
    iterations = 0
    H = g = None
    while iterations < max_iterations:
        if cost <= abs_tol:
            converged = True
            break
        if H is None:
            H = (J.T @ J).tocsc()
            g = J.T @ r
            diag = H.diagonal()
            dead = np.flatnonzero(diag <= 0.0)
            if dead.size:
                raise UnderconstrainedError(graph.variable_for_column(int(dead[0])), "no factor constrains it")
        iterations += 1
        A = H + sp.diags(lam * np.maximum(diag, 1e-12), format="csc")
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                delta = spsolve(A, -g, permc_spec="MMD_AT_PLUS_A")
            except MatrixRankWarning:
                raise UnderconstrainedError(None, "rank-deficient normal equations") from None
        if not np.all(np.isfinite(delta)):
            raise UnderconstrainedError(None, "solver produced non-finite step")
        x_new = x + delta.reshape(-1, 3)
        r_new, J_new = graph.linearize(x_new)
        new_cost = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if new_cost < cost:
            decrease = (cost - new_cost) / cost
            x, r, J, cost = x_new, r_new, J_new, new_cost
            history.append(cost)
            H = None
            lam = max(lam / 10.0, 1e-12)
            if decrease < rel_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                converged = True
                break
    graph.values = x
    return LMResult(history[0], cost, iterations, converged, history)
