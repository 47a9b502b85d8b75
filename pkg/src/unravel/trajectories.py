"""Stochastic unravelling engine over density matrices.

Diffusive (homodyne / heterodyne / general-dyne), jump (direct detection)
and adaptive-feedback jump (AID) steppers, plus a seeded ensemble runner
whose per-trajectory noise streams are derived from (master seed,
trajectory index) with a counter-based bit generator, so results never
depend on chunking or thread count.

Three execution paths share the same stochastic law:

* a small-dimension path (the two-level atom) that expands the one-step
  Kraus map over precomputed real-packed superoperators, with the
  deterministic part applied through an exact propagator so strong
  driving does not force tiny steps;
* a direct matrix path for large dimensions (the Fock-space oracle);
* a purified path for efficient diffusive ensembles, which unravels a
  mixed initial state as a weighted bundle of pure states driven by a
  common measurement record (the conditional map is a pure Kraus map at
  eta = 1, so the bundle stays rank-one per component).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import InvariantViolationError, StepSizeError
from .hilbert import DensityMatrix, dag

DIFFUSIVE_KINDS = ("homodyne_x", "homodyne_y", "heterodyne", "general_dyne")
JUMP_KINDS = ("direct", "aid")

# fixed memory budget for pre-drawn noise; chunk sizes derive from it so
# results are independent of the actual chunking
_NOISE_BUDGET_BYTES = 2.4e8
_MAX_DM_CHUNK = 512


@dataclass(frozen=True)
class UnravellingSpec:
    """Measurement strategy: named scheme or general-dyne disk point, plus efficiency."""

    kind: str
    eta: float = 1.0
    disk: object = None          # DiskPoint, general_dyne only
    lo_amplitude: complex = None  # AID only; default resolved against the jump rate

    def __post_init__(self):
        if self.kind not in DIFFUSIVE_KINDS + JUMP_KINDS:
            raise ValueError(f"unknown unravelling kind {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.kind == "general_dyne" and self.disk is None:
            raise ValueError("general_dyne requires a disk point")
        if self.kind == "aid" and self.lo_amplitude is not None and self.lo_amplitude == 0:
            raise ValueError("AID requires a nonzero local-oscillator amplitude")

    @property
    def is_diffusive(self):
        return self.kind in DIFFUSIVE_KINDS

    def channel_coefficients(self):
        """Complex weights z_k of the conditioning channels A_k = z_k * L.

        sum |z_k|^2 = 1, so the channels resolve the full emission.  The
        general-dyne point upsilon = r e^{i phi} splits into quadratures
        with weights sqrt((1 +- r)/2) at local-oscillator phase phi/2.
        """
        if self.kind == "homodyne_x":
            return [1.0 + 0.0j]
        if self.kind == "homodyne_y":
            return [1.0j]
        if self.kind == "heterodyne":
            s = 1.0 / math.sqrt(2.0)
            return [s + 0.0j, 1.0j * s]
        if self.kind == "general_dyne":
            r, phi = self.disk.r, self.disk.phi
            lo = np.exp(0.5j * phi)
            out = []
            if (1.0 + r) > 0:
                out.append(math.sqrt((1.0 + r) / 2.0) * lo)
            if (1.0 - r) > 1e-15:
                out.append(1.0j * math.sqrt((1.0 - r) / 2.0) * lo)
            return out
        raise ValueError(f"{self.kind} is not diffusive")


def direct(eta=1.0):
    return UnravellingSpec("direct", eta)


def homodyne_x(eta=1.0):
    return UnravellingSpec("homodyne_x", eta)


def homodyne_y(eta=1.0):
    return UnravellingSpec("homodyne_y", eta)


def heterodyne(eta=1.0):
    return UnravellingSpec("heterodyne", eta)


def aid(eta=1.0, lo_amplitude=None):
    return UnravellingSpec("aid", eta, lo_amplitude=lo_amplitude)


def general_dyne(disk, eta=1.0):
    return UnravellingSpec("general_dyne", eta, disk=disk)


def named_scheme(name, eta=1.0, lo_amplitude=None):
    if name == "aid":
        return aid(eta, lo_amplitude)
    return UnravellingSpec(name, eta)


@dataclass(frozen=True)
class TrajectoryConfig:
    dt: float
    horizon: float
    seed: int = 0
    sample_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be at least 1")

    def grid(self):
        """(n_steps, actual dt, sample step indices)."""
        if self.horizon == 0:
            return 0, self.dt, np.array([0])
        n_steps = int(np.ceil(self.horizon / self.dt - 1e-12))
        dt = self.horizon / n_steps
        idx = np.arange(0, n_steps + 1, self.sample_stride)
        if idx[-1] != n_steps:
            idx = np.append(idx, n_steps)
        return n_steps, dt, idx


@dataclass(frozen=True)
class InnovationRecord:
    """Measurement record of one trajectory."""

    wiener: np.ndarray = None        # (n_steps, n_channels) for diffusive schemes
    jump_times: tuple = ()
    lo_signs: tuple = ()             # LO sign after each detected jump (AID)

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise InvariantViolationError("jump times must be strictly increasing")
        if self.lo_signs and len(self.lo_signs) != len(self.jump_times):
            raise InvariantViolationError("one LO sign per detected jump")


@dataclass(frozen=True)
class EnsembleCurve:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("an ensemble needs at least 2 trajectories")
        if np.any(self.stderr < 0):
            raise InvariantViolationError("standard errors must be non-negative")


@dataclass(frozen=True)
class MeanStateCurve:
    times: np.ndarray
    states: np.ndarray   # (n_times, d, d), ensemble-mean density matrices
    n: int


def trajectory_rng(master_seed, index):
    """Independent counter-derived stream for ensemble member `index`."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))))


def _noise_plan(spec, n_steps, rng):
    """All randomness one trajectory consumes, drawn in a single call."""
    if spec.is_diffusive:
        k = len(spec.channel_coefficients())
        return rng.standard_normal((n_steps, k))
    return rng.random((n_steps, 1))


def _rv(mat):
    return np.asarray(mat).reshape(-1)


def _pack_right(m):
    """Real embedding of right-multiplication by m^T on packed rows.

    For complex rows y stored interleaved as float64, y_packed @ out equals
    the packed form of y @ m.T.  The small complex GEMMs this replaces are
    an order of magnitude slower than dgemm on skinny shapes.
    """
    mt = m.T
    n = mt.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[0::2, 0::2] = mt.real
    out[0::2, 1::2] = mt.imag
    out[1::2, 0::2] = -mt.imag
    out[1::2, 1::2] = mt.real
    return out


def _pack_real_functional(w):
    """Packed real vector p with (y_packed @ p) = Re(y_complex @ w)."""
    n = w.shape[0]
    out = np.zeros(2 * n)
    out[0::2] = w.real
    out[1::2] = -w.imag
    return out


def _resolve_lo(spec, jump_op):
    if spec.lo_amplitude is not None:
        return complex(spec.lo_amplitude)
    # |beta| = sqrt(gamma)/2 by default, with gamma read off the jump operator
    gamma = float(np.linalg.eigvalsh(dag(jump_op) @ jump_op).max())
    return 0.5 * math.sqrt(gamma)


def _measured_op(model):
    if not model.jump_operators:
        raise InvariantViolationError("model has no jump operator to monitor")
    return model.jump_operators[0]


class _KrausDiffusiveKernel:
    """Diffusive stepper for small dimensions via a per-trajectory Kraus map.

    One step applies rho -> M rho M^dag (+ undetected-emission sandwiches)
    with M = e^{K dt} + sum_k u_k A_k, K = -iH - (1/2) sum L^dag L and
    u_k = sqrt(eta) dW_k + eta <A_k + A_k^dag> dt.  Weak order 1, exactly
    positivity-preserving, keeps pure states exactly pure at eta = 1, and
    the exact drift exponential keeps strong driving accurate without tiny
    steps.
    """

    def __init__(self, model, spec, dt):
        d = model.dim
        self.dim = d
        self.dt = dt
        self.eta = spec.eta
        c = _measured_op(model)
        k_drift = -1j * model.hamiltonian
        for op in model.jump_operators:
            k_drift -= 0.5 * dag(op) @ op
        prop = expm(k_drift * dt)
        ops = [z * c for z in spec.channel_coefficients()]
        self.n_ch = len(ops)
        # expand M rho M^dag over row-vectorized states into fixed superops
        # with per-trajectory scalar coefficients (u_k are real):
        #   S0 + sum_k u_k S_k + sum_{k<=l} u_k u_l S_kl
        sandwich = lambda x, y: np.kron(x, y.conj())
        s0 = sandwich(prop, prop)
        leak = (1.0 - self.eta) * dt
        for a in ops:
            s0 = s0 + leak * sandwich(a, a)
        for op in model.jump_operators[1:]:
            s0 = s0 + dt * sandwich(op, op)
        self.s0 = _pack_right(s0)
        self.s_lin = [_pack_right(sandwich(a, prop) + sandwich(prop, a)) for a in ops]
        self.s_quad = {}
        for k in range(self.n_ch):
            for l in range(k, self.n_ch):
                term = sandwich(ops[k], ops[l])
                if l != k:
                    term = term + sandwich(ops[l], ops[k])
                self.s_quad[(k, l)] = _pack_right(term)
        self.weights = [_pack_real_functional(_rv((a + dag(a)).T)) for a in ops]
        self.tr_vec = _pack_real_functional(_rv(np.eye(d)))

    def initial(self, mats):
        flat = np.ascontiguousarray(mats.reshape(mats.shape[0], -1).astype(complex))
        return flat.view(np.float64)

    def step(self, y, dw_row):
        root_eta = math.sqrt(self.eta)
        us = [root_eta * dw_row[:, k] + self.eta * self.dt * (y @ self.weights[k])
              for k in range(self.n_ch)]
        out = y @ self.s0
        for k, u in enumerate(us):
            out += u[:, None] * (y @ self.s_lin[k])
        for (k, l), s in self.s_quad.items():
            out += (us[k] * us[l])[:, None] * (y @ s)
        tr = out @ self.tr_vec
        return out / tr[:, None]

    def to_matrices(self, y):
        d = self.dim
        m = np.ascontiguousarray(y).view(np.complex128).reshape(-1, d, d)
        return 0.5 * (m + np.conj(np.swapaxes(m, 1, 2)))


class _MatrixDiffusiveKernel:
    """Diffusive stepper on raw matrices for large dimension, Kraus form.

    Same one-step completely positive map as the small-dimension kernel
    (M rho M^dag with M = e^{K dt} + sum_k u_k A_k, plus the undetected
    sandwich), built per trajectory since M depends on the record.  The
    earlier plain Euler-Maruyama variant was marginally unstable in the
    high Fock tail over long horizons; this form is unconditionally
    positivity-preserving.  Used for oracle cross-checks at modest batch
    sizes; the purified path is the throughput engine at eta = 1.
    """

    def __init__(self, model, spec, dt):
        d = model.dim
        self.dim = d
        self.dt = dt
        self.eta = spec.eta
        self.c = _measured_op(model)
        self.others = list(model.jump_operators[1:])
        k_drift = -1j * model.hamiltonian
        for op in model.jump_operators:
            k_drift -= 0.5 * dag(op) @ op
        self.prop = expm(k_drift * dt)
        self.zs = np.array(spec.channel_coefficients())
        self.quad_weights = 2.0 * self.zs  # x_k = Re(2 z_k tr(c rho))

    def initial(self, mats):
        return np.array(mats, dtype=complex)

    def step(self, rho, dw_row):
        dt = self.dt
        root_eta = math.sqrt(self.eta)
        tr_c = np.einsum("ij,bji->b", self.c, rho)
        m = np.broadcast_to(self.prop, rho.shape).copy()
        for k, z in enumerate(self.zs):
            x_k = (self.quad_weights[k] * tr_c).real
            u = root_eta * dw_row[:, k] + self.eta * x_k * dt
            m += (u * z)[:, None, None] * self.c
        out = m @ rho @ np.conj(np.swapaxes(m, 1, 2))
        leak = (1.0 - self.eta) * dt
        if leak > 0:
            # sum_k A_k rho A_k^dag = c rho c^dag since sum |z_k|^2 = 1
            u_mat = self.c @ rho
            out += leak * (u_mat @ dag(self.c))
        for op in self.others:
            out += dt * (op @ rho @ dag(op))
        tr = np.einsum("bii->b", out).real
        return out / tr[:, None, None]

    def to_matrices(self, rho):
        return 0.5 * (rho + np.conj(np.swapaxes(rho, 1, 2)))


class _SuperopJumpKernel:
    """Jump stepper (direct detection and AID) with exact no-jump propagator.

    The no-jump propagator is trace-decreasing; the detected-jump
    probability per step is read off the trace decay.  For AID the
    local-oscillator sign is per-trajectory state: both signed variants of
    every operator are precomputed and selected by mask.
    """

    def __init__(self, model, spec, dt):
        d = model.dim
        if d > _SUPEROP_DIM_LIMIT:
            raise ValueError(
                f"jump unravellings are only implemented for dim <= {_SUPEROP_DIM_LIMIT}")
        self.dim = d
        self.dt = dt
        self.eta = spec.eta
        self.adaptive = spec.kind == "aid"
        c = _measured_op(model)
        beta = _resolve_lo(spec, c) if self.adaptive else 0.0
        rate_scale = float(np.linalg.eigvalsh(
            dag(c + beta * np.eye(d)) @ (c + beta * np.eye(d))).max())
        if dt * max(rate_scale, 1e-300) > 0.1:
            raise StepSizeError(
                f"dt * jump rate = {dt * rate_scale:.3f} > 0.1; first-order "
                "jump splitting is invalid, reduce dt")
        ident = np.eye(d)
        self.props = []
        self.jump_supers = []
        signs = (+1.0, -1.0) if self.adaptive else (+1.0,)
        for s in signs:
            j = c + s * beta * ident
            h = model.hamiltonian + 0.5j * (s * beta * dag(c) - np.conj(s * beta) * c)
            jj = dag(j) @ j
            q = -1j * (np.kron(h, ident) - np.kron(ident, h.T))
            q += (1.0 - self.eta) * (np.kron(j, j.conj())
                                     - 0.5 * (np.kron(jj, ident) + np.kron(ident, jj.T)))
            for op in model.jump_operators[1:]:
                oo = dag(op) @ op
                q += np.kron(op, op.conj()) - 0.5 * (np.kron(oo, ident)
                                                     + np.kron(ident, oo.T))
            q -= 0.5 * self.eta * (np.kron(jj, ident) + np.kron(ident, jj.T))
            self.props.append(_pack_right(expm(q * dt)))
            self.jump_supers.append(_pack_right(np.kron(j, j.conj())))
        self.tr_vec = _pack_real_functional(_rv(np.eye(d)))

    def initial(self, mats):
        flat = np.ascontiguousarray(mats.reshape(mats.shape[0], -1).astype(complex))
        return flat.view(np.float64)

    def step(self, y, u_row, signs):
        """One step for the batch; mutates `signs` in place, returns (y, jumped)."""
        y_prop = y @ self.props[0]
        if self.adaptive:
            minus = signs < 0
            if minus.any():
                y_prop[minus] = y[minus] @ self.props[1]
        tr = y_prop @ self.tr_vec
        # click probability = trace decay of the no-click propagator; the
        # floor keeps roundoff from ever clicking a state with no emission
        p_jump = 1.0 - tr
        jumped = (u_row[:, 0] < p_jump) & (p_jump > 1e-12)
        out = y_prop / tr[:, None]
        if jumped.any():
            # the click acts on the no-click-evolved state, so a trajectory
            # sitting exactly in the ground state re-excites within the step
            # before it can emit (and the renormalization stays regular)
            idx = np.nonzero(jumped)[0]
            sub = y_prop[idx]
            zsub = sub @ self.jump_supers[0]
            if self.adaptive:
                m = signs[idx] < 0
                if m.any():
                    zsub[m] = sub[m] @ self.jump_supers[1]
            ztr = zsub @ self.tr_vec
            out[idx] = zsub / ztr[:, None]
            if self.adaptive:
                signs[idx] = -signs[idx]
        return out, jumped

    def to_matrices(self, y):
        d = self.dim
        m = np.ascontiguousarray(y).view(np.complex128).reshape(-1, d, d)
        return 0.5 * (m + np.conj(np.swapaxes(m, 1, 2)))


class _PurifiedKernel:
    """Efficient-measurement diffusive ensembles as pure-state bundles.

    At eta = 1 the conditional map is a pure Kraus map, so a mixed start
    rho0 = sum_m p_m |m><m| evolves as a bundle of pure states driven by
    one common record per trajectory.  The record is generated from the
    physical law using the normalized bundle expectation, which keeps the
    trajectory distribution exact; per-component norms encode the
    conditional weights.  Orders of magnitude faster than the matrix path
    at Fock dimensions.
    """

    def __init__(self, model, spec, rho0, dt, weight_cut=1e-7):
        if spec.eta != 1.0:
            raise ValueError("purified path requires eta = 1")
        d = model.dim
        self.dim = d
        self.dt = dt
        c = _measured_op(model)
        if len(model.jump_operators) != 1:
            raise ValueError("purified path supports a single jump operator")
        vals, vecs = np.linalg.eigh(rho0)
        keep = vals > weight_cut * vals.max()
        self.weights = vals[keep] / vals[keep].sum()
        self.kets = vecs[:, keep].T            # (K, d)
        self.n_comp = len(self.weights)
        self.c = c
        k_drift = -1j * model.hamiltonian - 0.5 * dag(c) @ c
        self.prop = expm(k_drift * dt)
        self.zs = np.array(spec.channel_coefficients())

    def initial(self, n_traj):
        psi = np.broadcast_to(self.kets, (n_traj, self.n_comp, self.dim))
        return np.ascontiguousarray(psi).astype(complex)

    def step(self, psi, dw_row):
        b, k, d = psi.shape
        u = (psi.reshape(b * k, d) @ self.c.T).reshape(b, k, d)     # (c psi)
        c_exp = np.einsum("bki,bki->bk", psi.conj(), u)
        norms = np.einsum("bki,bki->bk", psi.conj(), psi).real
        denom = norms @ self.weights
        new = psi.copy()
        for j, z in enumerate(self.zs):
            x_hat = 2.0 * ((c_exp @ self.weights) * z).real / denom
            dy = x_hat * self.dt + dw_row[:, j]
            new += (z * dy)[:, None, None] * u
        new = (new.reshape(b * k, d) @ self.prop.T).reshape(b, k, d)
        scale = np.sqrt(np.einsum("bki,bki->bk", new.conj(), new).real @ self.weights)
        return new / scale[:, None, None]

    def purity(self, psi):
        gram = np.einsum("bki,bli->bkl", psi.conj(), psi)
        norm = np.einsum("bkk->bk", gram).real @ self.weights
        quad = np.einsum("k,l,bkl->b", self.weights, self.weights,
                         np.abs(gram) ** 2)
        return quad / norm ** 2

    def to_matrices(self, psi):
        scaled = psi * np.sqrt(self.weights)[None, :, None]
        rho = np.einsum("bki,bkj->bij", scaled, scaled.conj())
        tr = np.einsum("bii->b", rho).real
        return rho / tr[:, None, None]


_SUPEROP_DIM_LIMIT = 8


def _diffusive_kernel(model, spec, dt):
    if model.dim <= _SUPEROP_DIM_LIMIT:
        return _KrausDiffusiveKernel(model, spec, dt)
    return _MatrixDiffusiveKernel(model, spec, dt)


# ---------------------------------------------------------------------------
# public single-state steps (the contract surface; ensembles use the same kernels)

def _sample_pos_tol(dt):
    # Euler-Maruyama samples hover within O(dt) of the positive cone;
    # anything beyond this slack is a genuine step-size failure
    return max(1e-6, min(0.05, 100.0 * dt))


def step_diffusive(model, spec, rho, noise, dt):
    """One conditional update of length dt for a diffusive scheme.

    `noise` holds one zero-mean, variance-dt Gaussian increment per
    channel.  The update is trace-renormalized; at eta = 0 it reduces to
    the deterministic master-equation step regardless of the noise.
    """
    if not spec.is_diffusive:
        raise ValueError(f"{spec.kind} is not a diffusive scheme")
    noise = np.atleast_1d(np.asarray(noise, dtype=float))
    k = len(spec.channel_coefficients())
    if noise.shape != (k,):
        raise ValueError(f"expected {k} noise increments, got shape {noise.shape}")
    kernel = _diffusive_kernel(model, spec, dt)
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    y = kernel.initial(m[None, :, :])
    y = kernel.step(y, noise[None, :])
    out = kernel.to_matrices(y)[0]
    try:
        return DensityMatrix(out, pos_tol=_sample_pos_tol(dt))
    except InvariantViolationError as exc:
        raise StepSizeError(f"diffusive step left the state manifold: {exc}") from exc


def step_jump(model, spec, rho, uniform, dt, lo_sign=1.0):
    """One detection-window update for a counting scheme.

    Returns (state, jumped).  A detected click occurs when `uniform`
    falls below the no-click trace decay (eta <J^dag J> dt to first
    order); undetected emission stays in the no-click drift as a
    (1 - eta) dissipator with the LO-displaced operator.
    """
    if spec.is_diffusive:
        raise ValueError(f"{spec.kind} is not a counting scheme")
    kernel = _SuperopJumpKernel(model, spec, dt)
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    y = kernel.initial(m[None, :, :])
    signs = np.array([float(lo_sign)])
    y, jumped = kernel.step(y, np.array([[float(uniform)]]), signs)
    out = kernel.to_matrices(y)[0]
    try:
        return DensityMatrix(out, pos_tol=_sample_pos_tol(dt)), bool(jumped[0])
    except InvariantViolationError as exc:
        raise StepSizeError(f"jump step left the state manifold: {exc}") from exc


def aid_update(lo_sign, jumped):
    """Feedback rule: the local-oscillator amplitude flips at detected jumps only."""
    return -lo_sign if jumped else lo_sign


@dataclass(frozen=True)
class TrajectoryResult:
    times: np.ndarray
    states: tuple                 # sampled DensityMatrix instances
    record: InnovationRecord


def run_trajectory(model, spec, rho0, config, traj_index=0):
    """One conditional trajectory; a pure function of (inputs, seed, index)."""
    n_steps, dt, sample_idx = config.grid()
    rho0_m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0)
    if n_steps == 0:
        return TrajectoryResult(np.array([0.0]), (DensityMatrix(rho0_m),),
                                InnovationRecord())
    rng = trajectory_rng(config.seed, traj_index)
    noise = _noise_plan(spec, n_steps, rng)
    sample_set = set(int(i) for i in sample_idx)

    states = [DensityMatrix(rho0_m)]
    if spec.is_diffusive:
        kernel = _diffusive_kernel(model, spec, dt)
        y = kernel.initial(rho0_m[None, :, :])
        for step in range(1, n_steps + 1):
            y = kernel.step(y, math.sqrt(dt) * noise[step - 1][None, :])
            if step in sample_set:
                states.append(DensityMatrix(kernel.to_matrices(y)[0],
                                            pos_tol=_sample_pos_tol(dt)))
        record = InnovationRecord(wiener=math.sqrt(dt) * noise)
    else:
        kernel = _SuperopJumpKernel(model, spec, dt)
        y = kernel.initial(rho0_m[None, :, :])
        signs = np.array([1.0])
        jump_times, lo_signs = [], []
        for step in range(1, n_steps + 1):
            y, jumped = kernel.step(y, noise[step - 1][None, :], signs)
            if jumped[0]:
                jump_times.append(step * dt)
                lo_signs.append(float(signs[0]))
            if step in sample_set:
                states.append(DensityMatrix(kernel.to_matrices(y)[0],
                                            pos_tol=_sample_pos_tol(dt)))
        record = InnovationRecord(jump_times=tuple(jump_times),
                                  lo_signs=tuple(lo_signs))
    return TrajectoryResult(sample_idx * dt, tuple(states), record)


# ---------------------------------------------------------------------------
# ensemble runner

def _chunk_size(n_steps, n_channels, dim):
    by_noise = int(_NOISE_BUDGET_BYTES / (max(n_steps, 1) * n_channels * 8))
    cap = _MAX_DM_CHUNK if dim > _SUPEROP_DIM_LIMIT else 8192
    return max(16, min(by_noise, cap))


def _iter_chunks(n_traj, chunk):
    start = 0
    while start < n_traj:
        stop = min(start + chunk, n_traj)
        yield start, stop
        start = stop


class _PurityCollector:
    def __init__(self, n_times):
        self.acc = np.zeros(n_times)
        self.acc_sq = np.zeros(n_times)

    def add(self, t_index, values):
        self.acc[t_index] += values.sum()
        self.acc_sq[t_index] += (values ** 2).sum()

    def finish(self, times, n):
        mean = self.acc / n
        var = np.maximum(self.acc_sq / n - mean ** 2, 0.0)
        # sample variance with Bessel correction, guarded for tiny n
        var = var * n / max(n - 1, 1)
        stderr = np.sqrt(var / n)
        return EnsembleCurve(times=times, mean=mean, stderr=stderr, n=n)


def _batch_purity(mats):
    return np.einsum("bij,bji->b", mats, mats).real


def run_ensemble(model, spec, rho0, config, n_traj, statistic="purity",
                 method="auto"):
    """Monte Carlo ensemble of conditional trajectories.

    statistic = "purity" returns an EnsembleCurve of mean conditional
    purity; "mean_state" returns a MeanStateCurve of the ensemble-averaged
    state (whose contract is to match unconditional propagation).  Per-
    trajectory noise streams depend only on (config.seed, trajectory
    index), so the result is independent of chunking and thread count.
    """
    if statistic not in ("purity", "mean_state"):
        raise ValueError(f"unknown statistic {statistic!r}")
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    n_steps, dt, sample_idx = config.grid()
    rho0_m = np.asarray(rho0.matrix if isinstance(rho0, DensityMatrix) else rho0)
    times = sample_idx * dt

    use_purified = (method == "purified"
                    or (method == "auto" and spec.is_diffusive and spec.eta == 1.0
                        and statistic == "purity"
                        and model.dim > _SUPEROP_DIM_LIMIT))
    if method == "dm":
        use_purified = False
    if use_purified and (statistic != "purity" or not spec.is_diffusive
                         or spec.eta != 1.0):
        raise ValueError("the purified path handles eta = 1 diffusive purity only")

    if statistic == "mean_state":
        acc = np.zeros((len(sample_idx), model.dim, model.dim), dtype=complex)
    else:
        collector = _PurityCollector(len(sample_idx))

    n_channels = noise_width(spec)
    chunk = _chunk_size(n_steps, n_channels, model.dim)
    if use_purified:
        chunk = min(chunk, 2048)
    kernel = None
    for start, stop in _iter_chunks(n_traj, chunk):
        b = stop - start
        if n_steps == 0:
            mats = np.broadcast_to(rho0_m, (b, *rho0_m.shape))
            _collect_static(statistic, mats, collector if statistic == "purity" else None,
                            acc if statistic == "mean_state" else None)
            continue
        noise = np.empty((b, n_steps, n_channels))
        for i in range(b):
            noise[i] = _noise_plan(spec, n_steps, trajectory_rng(config.seed, start + i))
        if use_purified:
            if kernel is None:
                kernel = _PurifiedKernel(model, spec, rho0_m, dt)
            _run_purified_chunk(kernel, b, noise, dt, sample_idx, collector)
        elif spec.is_diffusive:
            if kernel is None:
                kernel = _diffusive_kernel(model, spec, dt)
            _run_diffusive_chunk(kernel, rho0_m, noise, dt, sample_idx, statistic,
                                 collector if statistic == "purity" else acc)
        else:
            if kernel is None:
                kernel = _SuperopJumpKernel(model, spec, dt)
            _run_jump_chunk(kernel, rho0_m, noise, sample_idx, statistic,
                            collector if statistic == "purity" else acc)

    if statistic == "mean_state":
        mean_states = acc / n_traj
        mean_states = 0.5 * (mean_states + np.conj(np.swapaxes(mean_states, 1, 2)))
        return MeanStateCurve(times=times, states=mean_states, n=n_traj)
    return collector.finish(times, n_traj)


def noise_width(spec):
    return len(spec.channel_coefficients()) if spec.is_diffusive else 1


def _collect_static(statistic, mats, collector, acc):
    if statistic == "purity":
        collector.add(0, _batch_purity(np.asarray(mats)))
    else:
        acc[0] += np.asarray(mats).sum(axis=0)


def _run_diffusive_chunk(kernel, rho0_m, noise, dt, sample_idx, statistic, sink):
    b, n_steps, _ = noise.shape
    y = kernel.initial(np.broadcast_to(rho0_m, (b, *rho0_m.shape)))
    sample_pos = {int(s): j for j, s in enumerate(sample_idx)}
    root_dt = math.sqrt(dt)
    _emit(kernel, y, 0, sample_pos, statistic, sink)
    for step in range(1, n_steps + 1):
        y = kernel.step(y, root_dt * noise[:, step - 1, :])
        if step in sample_pos:
            _emit(kernel, y, step, sample_pos, statistic, sink)


def _run_jump_chunk(kernel, rho0_m, noise, sample_idx, statistic, sink):
    b, n_steps, _ = noise.shape
    y = kernel.initial(np.broadcast_to(rho0_m, (b, *rho0_m.shape)))
    signs = np.ones(b)
    sample_pos = {int(s): j for j, s in enumerate(sample_idx)}
    _emit(kernel, y, 0, sample_pos, statistic, sink)
    for step in range(1, n_steps + 1):
        y, _ = kernel.step(y, noise[:, step - 1, :], signs)
        if step in sample_pos:
            _emit(kernel, y, step, sample_pos, statistic, sink)


def _run_purified_chunk(kernel, b, noise, dt, sample_idx, collector):
    psi = kernel.initial(b)
    sample_pos = {int(s): j for j, s in enumerate(sample_idx)}
    root_dt = math.sqrt(dt)
    collector.add(0, kernel.purity(psi))
    n_steps = noise.shape[1]
    for step in range(1, n_steps + 1):
        psi = kernel.step(psi, root_dt * noise[:, step - 1, :])
        if step in sample_pos:
            collector.add(sample_pos[step], kernel.purity(psi))


def _emit(kernel, y, step, sample_pos, statistic, sink):
    j = sample_pos[step]
    mats = kernel.to_matrices(y)
    if statistic == "purity":
        sink.add(j, _batch_purity(mats))
    else:
        sink[j] += mats.sum(axis=0)


def run_final_states(model, spec, rho0, config, n_traj):
    """Final conditional states of n_traj trajectories, as an (N, d, d) array.

    This is the sampler behind the mixing- and survival-time estimates:
    condition to (near) stationarity, then hand the frozen states to the
    deterministic propagator.
    """
    n_steps, dt, _ = config.grid()
    rho0_m = np.asarray(rho0.matrix if isinstance(rho0, DensityMatrix) else rho0)
    if n_steps == 0:
        return np.broadcast_to(rho0_m, (n_traj, *rho0_m.shape)).copy()
    out = np.empty((n_traj, model.dim, model.dim), dtype=complex)
    n_channels = noise_width(spec)
    use_purified = (spec.is_diffusive and spec.eta == 1.0
                    and model.dim > _SUPEROP_DIM_LIMIT)
    chunk = _chunk_size(n_steps, n_channels, model.dim)
    if use_purified:
        chunk = min(chunk, 2048)
    kernel = None
    for start, stop in _iter_chunks(n_traj, chunk):
        b = stop - start
        noise = np.empty((b, n_steps, n_channels))
        for i in range(b):
            noise[i] = _noise_plan(spec, n_steps, trajectory_rng(config.seed, start + i))
        if use_purified:
            if kernel is None:
                kernel = _PurifiedKernel(model, spec, rho0_m, dt)
            y = kernel.initial(b)
            root_dt = math.sqrt(dt)
            for step in range(n_steps):
                y = kernel.step(y, root_dt * noise[:, step, :])
        elif spec.is_diffusive:
            if kernel is None:
                kernel = _diffusive_kernel(model, spec, dt)
            y = kernel.initial(np.broadcast_to(rho0_m, (b, *rho0_m.shape)))
            root_dt = math.sqrt(dt)
            for step in range(n_steps):
                y = kernel.step(y, root_dt * noise[:, step, :])
        else:
            if kernel is None:
                kernel = _SuperopJumpKernel(model, spec, dt)
            y = kernel.initial(np.broadcast_to(rho0_m, (b, *rho0_m.shape)))
            signs = np.ones(b)
            for step in range(n_steps):
                y, _ = kernel.step(y, noise[:, step, :], signs)
        out[start:stop] = kernel.to_matrices(y)
    return out
