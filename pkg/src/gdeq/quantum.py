"""State-vector simulation of the per-node quantum feature map.

The circuit follows an encode / entangle / measure shape: input angles
u = tanh(W_in s) are written onto the qubits with R_y rotations, a
repeated three-block ansatz with data re-uploading is applied (full
XYZ rotations + ZZ couplers, then XY rotations + XX couplers, then YZ
rotations + YY couplers, re-encoding u before each block), and the
per-qubit Pauli-Z expectations are read out and mixed by W_out.

Simulation is vectorized across rows: a batch of N per-node states is
one (N, 2**n_q) complex array and every gate is a few slice updates on
a reshaped view.  Gradients are exact reverse-mode through the state
(states are stashed per gate, cotangents pulled back through conjugate
gates); the parameter-shift rule is provided separately as an
independent route to the same angle gradients.

Convention: qubit ``j`` owns bit ``n_q - 1 - j`` of the basis index,
i.e. qubit 0 is the most significant axis.  All rotation and coupler
gates use exp(-i * theta * P / 2) for Pauli (product) P.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_GUARD = 1e-12


# ---------------------------------------------------------------------------
# gate program


class Gate(NamedTuple):
    kind: str              # rx | ry | rz | zz | xx | yy
    qubits: tuple          # (j,) or (j, j+1)
    source: tuple          # ("enc", qubit) or ("param", rep, col)


def per_rep_param_count(n_qubits: int) -> int:
    return 7 * n_qubits + 3 * max(n_qubits - 1, 0)


class _Layout(NamedTuple):
    block1: slice
    zz: slice
    block2: slice
    xx: slice
    block3: slice
    yy: slice


@lru_cache(maxsize=None)
def _layout(n_qubits: int) -> _Layout:
    n, e = n_qubits, max(n_qubits - 1, 0)
    c = 0
    spans = []
    for width in (3 * n, e, 2 * n, e, 2 * n, e):
        spans.append(slice(c, c + width))
        c += width
    return _Layout(*spans)


@lru_cache(maxsize=None)
def build_program(n_qubits: int, reps: int) -> tuple:
    """Full gate list: initial encoding plus ``reps`` ansatz repetitions."""
    lay = _layout(n_qubits)
    gates: list[Gate] = []

    def encode():
        gates.extend(Gate("ry", (j,), ("enc", j)) for j in range(n_qubits))

    encode()
    for r in range(reps):
        encode()
        for j in range(n_qubits):
            base = lay.block1.start + 3 * j
            gates.append(Gate("rx", (j,), ("param", r, base)))
            gates.append(Gate("ry", (j,), ("param", r, base + 1)))
            gates.append(Gate("rz", (j,), ("param", r, base + 2)))
        for j in range(n_qubits - 1):
            gates.append(Gate("zz", (j, j + 1), ("param", r, lay.zz.start + j)))
        encode()
        for j in range(n_qubits):
            base = lay.block2.start + 2 * j
            gates.append(Gate("rx", (j,), ("param", r, base)))
            gates.append(Gate("ry", (j,), ("param", r, base + 1)))
        for j in range(n_qubits - 1):
            gates.append(Gate("xx", (j, j + 1), ("param", r, lay.xx.start + j)))
        encode()
        for j in range(n_qubits):
            base = lay.block3.start + 2 * j
            gates.append(Gate("ry", (j,), ("param", r, base)))
            gates.append(Gate("rz", (j,), ("param", r, base + 1)))
        for j in range(n_qubits - 1):
            gates.append(Gate("yy", (j, j + 1), ("param", r, lay.yy.start + j)))
    return tuple(gates)


# ---------------------------------------------------------------------------
# vectorized kernels on (N, 2**n_q) complex arrays


def _zero_states(n_rows: int, n_qubits: int) -> np.ndarray:
    states = np.zeros((n_rows, 2 ** n_qubits), dtype=np.complex128)
    states[:, 0] = 1.0
    return states


def _one_view(states: np.ndarray, n_qubits: int, q: int) -> np.ndarray:
    t = states.reshape((states.shape[0],) + (2,) * n_qubits)
    return np.moveaxis(t, 1 + q, -1)


def _two_view(states: np.ndarray, n_qubits: int, q1: int, q2: int) -> np.ndarray:
    t = states.reshape((states.shape[0],) + (2,) * n_qubits)
    return np.moveaxis(t, (1 + q1, 1 + q2), (-2, -1))


def _bcast(theta, view_rank: int):
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return arr.reshape((-1,) + (1,) * (view_rank - 1))


def _apply_gate(states: np.ndarray, n_qubits: int, gate: Gate, theta) -> None:
    """In-place application; ``theta`` is a scalar or per-row vector."""
    kind = gate.kind
    if kind in ("rx", "ry", "rz"):
        v = _one_view(states, n_qubits, gate.qubits[0])
        half = _bcast(theta, v.ndim - 1) / 2.0
        c, s = np.cos(half), np.sin(half)
        a0, a1 = v[..., 0].copy(), v[..., 1].copy()
        if kind == "rx":
            v[..., 0] = c * a0 - 1j * s * a1
            v[..., 1] = -1j * s * a0 + c * a1
        elif kind == "ry":
            v[..., 0] = c * a0 - s * a1
            v[..., 1] = s * a0 + c * a1
        else:
            phase = np.exp(-1j * half)
            v[..., 0] = phase * a0
            v[..., 1] = np.conj(phase) * a1
    else:
        v = _two_view(states, n_qubits, *gate.qubits)
        half = _bcast(theta, v.ndim - 2) / 2.0
        c, s = np.cos(half), np.sin(half)
        if kind == "zz":
            phase = np.exp(-1j * half)
            v[..., 0, 0] *= phase
            v[..., 1, 1] *= phase
            v[..., 0, 1] *= np.conj(phase)
            v[..., 1, 0] *= np.conj(phase)
        elif kind == "xx":
            a00, a01 = v[..., 0, 0].copy(), v[..., 0, 1].copy()
            a10, a11 = v[..., 1, 0].copy(), v[..., 1, 1].copy()
            v[..., 0, 0] = c * a00 - 1j * s * a11
            v[..., 1, 1] = c * a11 - 1j * s * a00
            v[..., 0, 1] = c * a01 - 1j * s * a10
            v[..., 1, 0] = c * a10 - 1j * s * a01
        elif kind == "yy":
            a00, a01 = v[..., 0, 0].copy(), v[..., 0, 1].copy()
            a10, a11 = v[..., 1, 0].copy(), v[..., 1, 1].copy()
            v[..., 0, 0] = c * a00 + 1j * s * a11
            v[..., 1, 1] = c * a11 + 1j * s * a00
            v[..., 0, 1] = c * a01 - 1j * s * a10
            v[..., 1, 0] = c * a10 - 1j * s * a01
        else:
            raise ValueError(f"unknown gate kind {kind!r}")


def _apply_pauli(states: np.ndarray, n_qubits: int, gate: Gate) -> np.ndarray:
    """Return P @ states for the generator Pauli (product) of ``gate``."""
    out = states.copy()
    kind = gate.kind
    if kind in ("rx", "ry", "rz"):
        v = _one_view(out, n_qubits, gate.qubits[0])
        a0, a1 = v[..., 0].copy(), v[..., 1].copy()
        if kind == "rx":
            v[..., 0], v[..., 1] = a1, a0
        elif kind == "ry":
            v[..., 0], v[..., 1] = -1j * a1, 1j * a0
        else:
            v[..., 1] = -a1
    else:
        v = _two_view(out, n_qubits, *gate.qubits)
        a00, a01 = v[..., 0, 0].copy(), v[..., 0, 1].copy()
        a10, a11 = v[..., 1, 0].copy(), v[..., 1, 1].copy()
        if kind == "zz":
            v[..., 0, 1] = -a01
            v[..., 1, 0] = -a10
        elif kind == "xx":
            v[..., 0, 0], v[..., 1, 1] = a11, a00
            v[..., 0, 1], v[..., 1, 0] = a10, a01
        else:
            v[..., 0, 0], v[..., 1, 1] = -a11, -a00
            v[..., 0, 1], v[..., 1, 0] = a10, a01
    return out


@lru_cache(maxsize=None)
def _z_signs(n_qubits: int) -> np.ndarray:
    """(n_q, 2**n_q) matrix of Z eigenvalues per qubit and basis state."""
    dim = 2 ** n_qubits
    signs = np.empty((n_qubits, dim))
    for j in range(n_qubits):
        bit = (np.arange(dim) >> (n_qubits - 1 - j)) & 1
        signs[j] = 1.0 - 2.0 * bit
    return signs


def _resolve_theta(gate: Gate, u_rows: np.ndarray, angles: np.ndarray):
    if gate.source[0] == "enc":
        return u_rows[:, gate.source[1]]
    _, r, c = gate.source
    return float(angles[r, c])


def _run_program(u_rows: np.ndarray, angles: np.ndarray, n_qubits: int,
                 stash: list | None = None) -> np.ndarray:
    states = _zero_states(u_rows.shape[0], n_qubits)
    if stash is not None:
        stash.append(states.copy())
    for gate in build_program(n_qubits, angles.shape[0]):
        _apply_gate(states, n_qubits, gate, _resolve_theta(gate, u_rows, angles))
        if stash is not None:
            stash.append(states.copy())
    return states


def _expectations(states: np.ndarray, n_qubits: int) -> np.ndarray:
    return (states.real ** 2 + states.imag ** 2) @ _z_signs(n_qubits).T


def _backward(u_rows: np.ndarray, angles: np.ndarray, n_qubits: int,
              stash: list, g_m: np.ndarray):
    """Adjoint sweep: cotangent on expectations -> (dU, dAngles).

    For a gate G = exp(-i th P / 2) at step k the contribution is
    Im(lambda_k^dagger P psi_k) with psi_k the post-gate state and
    lambda_k the state cotangent dL/dpsi* at the same point; pulling
    lambda back one step is an application of G(-th).
    """
    gates = build_program(n_qubits, angles.shape[0])
    lam = (g_m @ _z_signs(n_qubits)) * stash[-1]
    d_u = np.zeros_like(u_rows)
    d_ang = np.zeros_like(angles)
    for k in range(len(gates) - 1, -1, -1):
        gate = gates[k]
        psi_k = stash[k + 1]
        w = np.sum(np.conj(lam) * _apply_pauli(psi_k, n_qubits, gate), axis=1).imag
        theta = _resolve_theta(gate, u_rows, angles)
        if gate.source[0] == "enc":
            d_u[:, gate.source[1]] += w
        else:
            _, r, c = gate.source
            d_ang[r, c] += w.sum()
        _apply_gate(lam, n_qubits, gate, np.negative(theta))
    return d_u, d_ang


def circuit_expectations(u: Tensor, angles: Tensor, n_qubits: int) -> Tensor:
    """Per-row Pauli-Z expectations of the ansatz, as a differentiable op.

    ``u``: (N, n_q) encoding angles; ``angles``: (reps, per-rep count)
    trainable circuit angles.  Output is (N, n_q) in [-1, 1].
    """
    if u.cols != n_qubits:
        raise ValueError(f"expected {n_qubits} encoding angles, got {u.cols}")
    if angles.cols != per_rep_param_count(n_qubits):
        raise ValueError("angle row width does not match qubit count")
    u_rows = u.data
    ang = angles.data
    tracked = ad._active_tape() is not None
    stash: list | None = [] if tracked else None
    states = _run_program(u_rows, ang, n_qubits, stash)
    m = _expectations(states, n_qubits)

    cache: dict = {}

    def shared(g):
        if cache.get("seed") is not g:
            cache["seed"] = g
            cache["grads"] = _backward(u_rows, ang, n_qubits, stash, g)
        return cache["grads"]

    return ad.record_op(
        m,
        [(u, lambda g: shared(g)[0]), (angles, lambda g: shared(g)[1])],
    )


# ---------------------------------------------------------------------------
# single-state helpers


@dataclass
class StateVector:
    """Amplitudes of one n-qubit register."""

    amplitudes: np.ndarray
    n_qubits: int

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def check_norm(self, tol: float = 1e-10) -> None:
        drift = abs(self.norm() - 1.0)
        if drift > tol:
            raise FloatingPointError(f"state norm drifted by {drift:.3e}")


def angle_encode(u) -> StateVector:
    """R_y(u_j) on each qubit of |0...0>; u entries must lie in (-1, 1)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if not np.all(np.abs(u) < 1.0):
        raise ValueError("encoding angles must lie in (-1, 1)")
    n_q = u.shape[0]
    states = _zero_states(1, n_q)
    for j in range(n_q):
        _apply_gate(states, n_q, Gate("ry", (j,), ("enc", j)), u[j])
    out = StateVector(states[0], n_q)
    out.check_norm()
    return out


def apply_deep_xyz(state: StateVector, params: "DeepXyzParams", u) -> StateVector:
    """Apply the repeated three-block ansatz with re-encoding of ``u``."""
    if params.n_qubits != state.n_qubits:
        raise ValueError("parameter and state qubit counts differ")
    u_rows = np.asarray(u, dtype=np.float64).reshape(1, -1)
    if u_rows.shape[1] != state.n_qubits:
        raise ValueError("one encoding angle per qubit required")
    states = state.amplitudes.reshape(1, -1).astype(np.complex128).copy()
    ang = params.angles.data
    n_q = state.n_qubits
    full = build_program(n_q, params.reps)
    for gate in full[n_q:]:  # skip the initial encoding: already in `state`
        _apply_gate(states, n_q, gate, _resolve_theta(gate, u_rows, ang))
    out = StateVector(states[0], n_q)
    out.check_norm()
    return out


def pauli_z_expectations(state: StateVector) -> np.ndarray:
    """<Z_j> for every qubit, each in [-1, 1]."""
    return _expectations(state.amplitudes.reshape(1, -1), state.n_qubits)[0]


# ---------------------------------------------------------------------------
# trainable module


@dataclass
class DeepXyzParams:
    """Trainable circuit angles, one row per ansatz repetition."""

    angles: Tensor
    n_qubits: int

    def __post_init__(self):
        if not isinstance(self.angles, Tensor):
            self.angles = Tensor(self.angles)
        want = per_rep_param_count(self.n_qubits)
        if self.angles.cols != want:
            raise ValueError(
                f"expected {want} angles per repetition, got {self.angles.cols}")

    @property
    def reps(self) -> int:
        return self.angles.rows

    @property
    def count(self) -> int:
        return self.angles.rows * self.angles.cols

    @classmethod
    def init(cls, n_qubits: int, reps: int, rng: np.random.Generator,
             scale: float = 0.1) -> "DeepXyzParams":
        shape = (reps, per_rep_param_count(n_qubits))
        return cls(Tensor(rng.uniform(-scale, scale, size=shape)), n_qubits)


def _power_iteration_update(w: np.ndarray, u: np.ndarray):
    """One two-sided power iteration; returns (sigma, u, v) or None on guard."""
    wu = w.T @ u
    nu = np.linalg.norm(wu)
    if nu < NORM_GUARD:
        return None
    v = wu / nu
    wv = w @ v
    nv = np.linalg.norm(wv)
    if nv < NORM_GUARD:
        return None
    u_new = wv / nv
    sigma = float(u_new @ w @ v)
    return sigma, u_new, v


class QuantumModule:
    """W_in / ansatz / W_out stack applied row-wise to node states."""

    def __init__(self, w_in, w_out, params: DeepXyzParams,
                 spectral_normalize: bool = False, rng=None):
        self.w_in = w_in if isinstance(w_in, Tensor) else Tensor(w_in)
        self.w_out = w_out if isinstance(w_out, Tensor) else Tensor(w_out)
        self.params = params
        self.n_qubits = params.n_qubits
        if self.w_in.rows != self.n_qubits or self.w_out.cols != self.n_qubits:
            raise ValueError("map shapes must match the qubit count")
        self.spectral_normalize = bool(spectral_normalize)
        rng = rng or np.random.default_rng(0)
        self._sn = {
            "in": {"u": rng.normal(size=self.w_in.rows), "v": None, "sigma": None},
            "out": {"u": rng.normal(size=self.w_out.rows), "v": None, "sigma": None},
        }
        if self.spectral_normalize:
            self.refresh_normalization()

    @property
    def d_in(self) -> int:
        return self.w_in.cols

    @property
    def d_out(self) -> int:
        return self.w_out.rows

    def refresh_normalization(self, iters: int = 1) -> None:
        """Advance the persistent power-iteration state; no-op when disabled."""
        if not self.spectral_normalize:
            return
        for key, w in (("in", self.w_in.data), ("out", self.w_out.data)):
            state = self._sn[key]
            for _ in range(iters):
                upd = _power_iteration_update(w, state["u"])
                if upd is None:
                    state["sigma"] = None  # zero map: leave unchanged
                    break
                state["sigma"], state["u"], state["v"] = upd

    def _effective(self, key: str, w: Tensor) -> Tensor:
        state = self._sn[key]
        if not self.spectral_normalize or state["sigma"] is None:
            return w
        # sigma = u^T W v with u, v held constant; gradient flows through W.
        u_row = ad.constant(state["u"].reshape(1, -1))
        v_col = ad.constant(state["v"].reshape(-1, 1))
        sigma = ad.matmul(ad.matmul(u_row, w), v_col)
        return ad.mul_scalar(w, ad.reciprocal(sigma))

    def effective_maps(self) -> tuple[Tensor, Tensor]:
        return self._effective("in", self.w_in), self._effective("out", self.w_out)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_in", self.w_in), ("w_out", self.w_out),
                ("angles", self.params.angles)]

    def with_tensors(self, w_in: Tensor, w_out: Tensor,
                     angles: Tensor) -> "QuantumModule":
        """Rebind onto other tensors, sharing the frozen normalization state."""
        clone = object.__new__(QuantumModule)
        clone.w_in = w_in
        clone.w_out = w_out
        clone.params = DeepXyzParams(angles, self.n_qubits)
        clone.n_qubits = self.n_qubits
        clone.spectral_normalize = self.spectral_normalize
        clone._sn = self._sn
        return clone

    def forward_rows(self, s: Tensor) -> Tensor:
        """Apply the module to every row of ``s``; returns (N, d_out)."""
        if s.cols != self.d_in:
            raise ValueError(f"expected {self.d_in} input columns, got {s.cols}")
        w_in_eff, w_out_eff = self.effective_maps()
        u = ad.tanh(ad.matmul(s, ad.transpose(w_in_eff)))
        m = circuit_expectations(u, self.params.angles, self.n_qubits)
        return ad.matmul(m, ad.transpose(w_out_eff))


def qmodule_forward(module: QuantumModule, s) -> np.ndarray:
    """Module output for a single input vector, without recording."""
    row = np.asarray(s, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        return module.forward_rows(Tensor(row)).data[0]


def spectral_normalize_maps(module: QuantumModule, iters: int = 1):
    """Advance normalization and return the effective map arrays."""
    module.refresh_normalization(iters)
    with ad.no_grad():
        w_in_eff, w_out_eff = module.effective_maps()
    return w_in_eff.data, w_out_eff.data


def parameter_shift_grad(module: QuantumModule, s, index: int) -> np.ndarray:
    """d q(s) / d theta_index via the two-point shift rule.

    Exact for every gate here because each generator P / 2 has
    eigenvalues +-1/2: dm/dth = (m(th + pi/2) - m(th - pi/2)) / 2.
    """
    total = module.params.count
    if not 0 <= index < total:
        raise IndexError(f"parameter index {index} out of range [0, {total})")
    row = np.asarray(s, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        w_in_eff, w_out_eff = module.effective_maps()
        u = np.tanh(row @ w_in_eff.data.T)
        out_map = w_out_eff.data
    n_q = module.n_qubits
    r, c = divmod(index, module.params.angles.cols)

    def measure(shift: float) -> np.ndarray:
        ang = module.params.angles.data.copy()
        ang[r, c] += shift
        return _expectations(_run_program(u, ang, n_q), n_q)[0]

    dm = (measure(np.pi / 2) - measure(-np.pi / 2)) / 2.0
    return out_map @ dm


def describe_circuit(module: QuantumModule, s) -> str:
    """Human-readable gate list with resolved angles, for debugging."""
    row = np.asarray(s, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        w_in_eff, _ = module.effective_maps()
        u = np.tanh(row @ w_in_eff.data.T)
    lines = [f"qubits={module.n_qubits} reps={module.params.reps}"]
    for gate in build_program(module.n_qubits, module.params.reps):
        theta = _resolve_theta(gate, u, module.params.angles.data)
        theta = float(np.asarray(theta).reshape(-1)[0])
        where = ",".join(str(q) for q in gate.qubits)
        origin = ("encode u[%d]" % gate.source[1] if gate.source[0] == "enc"
                  else "theta[%d,%d]" % gate.source[1:])
        lines.append(f"{gate.kind.upper():>2s} q{where} angle={theta:+.6f} ({origin})")
    return "\n".join(lines)
