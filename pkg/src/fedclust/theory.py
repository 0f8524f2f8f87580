"""Gradient-flow probe for deep *linear* cluster-contrastive models.

The probe integrates the per-layer dynamics of an (L1 + L2)-layer linear
network under the closed-form loss gradients

    d loss / d pi  = -phi^T Qbar        d loss / d phi = -Qbar pi^T

where pi is the end-to-end encoder product, phi the predictor product, and
Qbar the per-cluster drive matrix averaged over clusters (built elementwise
from the normalized representations, predictions, and frozen global
predictions). Along the flow it tracks singular-value dynamics and checks the
rate law

    sigma_pi_dot = L1 * sigma_pi^(2 - 2/L1)
                   * sqrt(sigma_pi^(2/L1) + C) * u_phi^T Qbar v_pi

together with its premises: balanced adjacent layers at t=0, the
u_pi/v_phi alignment pattern over time, and the per-tau coupling constant
C = sigma_phi^2 - sigma_pi^(2/L1) staying put.

Note the closed-form gradients differ from exact reverse-mode gradients of
the same loss: they keep only the diagonal of the prediction-normalization
Jacobian (the (1 - p_hat^2) damping). The rate law is a statement about this
flow, so the probe integrates exactly it; the training stack in
`fedclust.model` differentiates the normalization in full.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

DEGENERATE_NORM = 1e-12

# internal instance shaping: spectra are spread to keep singular values well
# separated, and scaled up so the drive matrix (~1/(sigma_pi*sigma_phi)) stays
# small enough that the alignment premise barely drifts over short horizons
PI_SPECTRUM = (1.6, 0.7)
PHI_SPECTRUM = (1.4, 0.6)
SPECTRUM_SCALE = 3.0
DATA_SEPARATION = 2.0
DATA_NOISE = 0.5
DATA_OFFSET = 0.8


class FlowDivergenceError(RuntimeError):
    pass


@dataclass
class TheoryConfig:
    d: int
    d_prime: int
    L1: int
    L2: int
    k: int
    n_c: int
    lam: float
    dt: float
    steps: int
    seed: int
    imbalance: float | None = None  # 0 = well-spread clusters, 1 = all samples identical
    spectrum_scale: float = SPECTRUM_SCALE  # smaller -> faster dynamics, larger -> less premise drift

    def __post_init__(self):
        if self.L1 < 1 or self.L2 < 1:
            raise ValueError("L1 and L2 must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.imbalance is not None and not 0.0 <= self.imbalance <= 1.0:
            raise ValueError("imbalance must lie in [0, 1]")


@dataclass
class FlowState:
    weights: list[np.ndarray]  # application order; first L1 are the encoder
    L1: int
    L2: int
    lam: float
    X_clusters: list[np.ndarray]
    pi: np.ndarray = field(init=False)
    phi: np.ndarray = field(init=False)
    pi_global: np.ndarray = None
    phi_global: np.ndarray = None
    pg_hat: list[np.ndarray] = None  # frozen normalized global predictions

    def __post_init__(self):
        self.refresh_products()
        if self.pi_global is None:
            self.pi_global = self.pi.copy()
            self.phi_global = self.phi.copy()
        if self.pg_hat is None:
            self.pg_hat = []
            for X in self.X_clusters:
                Pg = self.phi_global @ self.pi_global @ X
                norms = np.linalg.norm(Pg, axis=0)
                if np.any(norms < DEGENERATE_NORM):
                    raise ValueError("global prediction column has near-zero norm")
                self.pg_hat.append(Pg / norms)

    def refresh_products(self) -> None:
        pi = self.weights[0]
        for w in self.weights[1 : self.L1]:
            pi = w @ pi
        phi = self.weights[self.L1]
        for w in self.weights[self.L1 + 1 :]:
            phi = w @ phi
        self.pi, self.phi = pi, phi


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Orthonormal columns (rows >= cols), deterministic per rng state."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))[None, :]


def balanced_stack(target: np.ndarray, L: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Factor `target` into L layers satisfying W_i W_i^T = W_{i+1}^T W_{i+1}.

    Built from the target's thin SVD with random orthogonal mixing between
    layers, so balancedness holds exactly and the product reconstructs the
    target.
    """
    if L == 1:
        return [target.copy()]
    u, s, vt = np.linalg.svd(target, full_matrices=False)
    root = np.diag(s ** (1.0 / L))
    r = len(s)
    rs = [vt.T] + [_orthogonal(rng, r, r) for _ in range(L - 1)] + [u]
    return [rs[i + 1] @ root @ rs[i].T for i in range(L)]


def _spectrum(lo_hi: tuple[float, float], r: int, scale: float) -> np.ndarray:
    hi, lo = lo_hi
    return scale * np.linspace(hi, lo, r)


def _probe_data(cfg: TheoryConfig, rng: np.random.Generator) -> list[np.ndarray]:
    clusters = []
    for c in range(cfg.k):
        mu = np.full(cfg.d, DATA_OFFSET / np.sqrt(cfg.d))
        mu[c % cfg.d] += DATA_SEPARATION
        clusters.append(mu[:, None] + DATA_NOISE * rng.standard_normal((cfg.d, cfg.n_c)))
    if cfg.imbalance:
        pooled = np.concatenate(clusters, axis=1)
        xbar = pooled.mean(axis=1, keepdims=True)
        clusters = [xbar + (1.0 - cfg.imbalance) * (X - xbar) for X in clusters]
    return clusters


def balanced_init(cfg: TheoryConfig) -> FlowState:
    """Probe state with exactly balanced layers and the alignment premise
    planted at t=0: the predictor target's right singular vectors are the
    encoder target's left ones, pairing spectra in descending order."""
    rng = np.random.default_rng(cfg.seed)
    r = min(cfg.d, cfg.d_prime)
    u_pi = _orthogonal(rng, cfg.d_prime, r)
    v_pi = _orthogonal(rng, cfg.d, r)
    target_pi = (u_pi * _spectrum(PI_SPECTRUM, r, cfg.spectrum_scale)) @ v_pi.T

    u_phi = _orthogonal(rng, cfg.d_prime, cfg.d_prime)
    s_phi = _spectrum(PHI_SPECTRUM, cfg.d_prime, cfg.spectrum_scale)
    # right singular vectors of the predictor = left ones of the encoder
    v_phi = np.concatenate([u_pi, _null_completion(u_pi, rng)], axis=1)
    target_phi = (u_phi * s_phi) @ v_phi.T

    weights = balanced_stack(target_pi, cfg.L1, rng) + balanced_stack(target_phi, cfg.L2, rng)
    return FlowState(
        weights=weights, L1=cfg.L1, L2=cfg.L2, lam=cfg.lam,
        X_clusters=_probe_data(cfg, rng),
    )


def _null_completion(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal basis of the complement of span(u) columns (possibly empty)."""
    n, r = u.shape
    if r == n:
        return np.zeros((n, 0))
    a = rng.standard_normal((n, n - r))
    a -= u @ (u.T @ a)
    q, _ = np.linalg.qr(a)
    return q


def build_Q(state: FlowState, c: int) -> np.ndarray:
    """Per-cluster drive matrix, elementwise:

        q[r, i] = (1/n_c^2 * sum_j z_hat[r, j] + lam/n_c * pg_hat[r, i])
                  * (1 - p_hat[r, i]^2) / |p_i|
    """
    X = state.X_clusters[c]
    n_c = X.shape[1]
    Z = state.pi @ X
    P = state.phi @ Z
    z_norm = np.linalg.norm(Z, axis=0)
    p_norm = np.linalg.norm(P, axis=0)
    if np.any(z_norm < DEGENERATE_NORM) or np.any(p_norm < DEGENERATE_NORM):
        raise ValueError(f"cluster {c} has a degenerate representation or prediction column")
    z_hat = Z / z_norm
    p_hat = P / p_norm
    coeff = z_hat.sum(axis=1)[:, None] / n_c**2 + state.lam / n_c * state.pg_hat[c]
    return coeff * (1.0 - p_hat**2) / p_norm[None, :]


def build_Qbar(state: FlowState) -> np.ndarray:
    """Cluster-averaged drive matrix (1/k) sum_c Q^c X_c^T."""
    k = len(state.X_clusters)
    out = np.zeros((state.phi.shape[0], state.pi.shape[1]))
    for c, X in enumerate(state.X_clusters):
        out += build_Q(state, c) @ X.T
    return out / k


def product_gradients(state: FlowState) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form loss gradients with respect to the two products."""
    qbar = build_Qbar(state)
    return -state.phi.T @ qbar, -qbar @ state.pi.T


def _layer_gradients(weights: list[np.ndarray], g_product: np.ndarray) -> list[np.ndarray]:
    """Chain-rule split of a product-level gradient across its factors."""
    L = len(weights)
    grads = []
    for i in range(L):
        prefix = None
        for w in weights[:i]:
            prefix = w if prefix is None else w @ prefix
        suffix = None
        for w in weights[i + 1 :]:
            suffix = w @ suffix if suffix is not None else w
        g = g_product
        if suffix is not None:
            g = suffix.T @ g
        if prefix is not None:
            g = g @ prefix.T
        grads.append(g)
    return grads


def flow_step(state: FlowState, dt: float) -> FlowState:
    """Explicit Euler step of every layer, refreshing the cached products.

    All layer gradients are evaluated at the incoming state. dt=0 leaves the
    state unchanged.
    """
    g_pi, g_phi = product_gradients(state)
    enc = state.weights[: state.L1]
    pred = state.weights[state.L1 :]
    grads = _layer_gradients(enc, g_pi) + _layer_gradients(pred, g_phi)
    for w, g in zip(state.weights, grads):
        w -= dt * g
    state.refresh_products()
    if not all(np.all(np.isfinite(w)) for w in state.weights):
        raise FlowDivergenceError("flow step produced non-finite weights")
    return state


# --- singular-triplet tracking -------------------------------------------------


@dataclass
class _Tracked:
    s_pi: np.ndarray
    u_pi: np.ndarray  # columns
    v_pi: np.ndarray  # columns
    s_phi: np.ndarray
    u_phi: np.ndarray
    v_phi: np.ndarray


def _match_columns(ref: np.ndarray, cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy max-|overlap| matching of candidate columns onto reference ones.

    Returns (permutation, signs) such that cand[:, perm] * signs tracks ref.
    """
    overlap = ref.T @ cand
    r = ref.shape[1]
    perm = np.full(r, -1)
    used = np.zeros(cand.shape[1], dtype=bool)
    for i in range(r):
        row = np.abs(overlap[i])
        row = np.where(used, -1.0, row)
        j = int(np.argmax(row))
        perm[i] = j
        used[j] = True
    signs = np.sign(overlap[np.arange(r), perm])
    signs[signs == 0] = 1.0
    return perm, signs


def _track(state: FlowState, prev: _Tracked | None) -> _Tracked:
    u, s, vt = np.linalg.svd(state.pi, full_matrices=False)
    v = vt.T
    if prev is None:
        # canonical signs: largest-|entry| of each left vector positive
        for t in range(u.shape[1]):
            if u[np.argmax(np.abs(u[:, t])), t] < 0:
                u[:, t] *= -1.0
                v[:, t] *= -1.0
    else:
        perm, signs = _match_columns(prev.u_pi, u)
        u, v, s = u[:, perm] * signs, v[:, perm] * signs, s[perm]

    uf, sf, vft = np.linalg.svd(state.phi, full_matrices=False)
    vf = vft.T
    # pair the predictor's triplets to the encoder's by right-vector overlap
    # with u_pi, signed so the overlap is positive (the rate law's pairing)
    perm, signs = _match_columns(u, vf)
    uf, vf, sf = uf[:, perm] * signs, vf[:, perm] * signs, sf[perm]
    r = u.shape[1]
    return _Tracked(s_pi=s[:r], u_pi=u, v_pi=v, s_phi=sf[:r], u_phi=uf[:, :r], v_phi=vf[:, :r])


# --- probe log ------------------------------------------------------------------


@dataclass
class ProbeLog:
    dt: float
    L1: int
    sigma_pi: np.ndarray  # (steps, r)
    sigma_phi: np.ndarray
    coupling: np.ndarray  # u_phi^T Qbar v_pi
    rhs: np.ndarray  # rate-law right-hand side, C frozen at step 0
    c_val: np.ndarray  # (sigma_phi^2 - sigma_pi^(2/L1)) per tau
    alignment_dev: np.ndarray  # max_tau' | |u_pi_tau . v_phi_tau'| - 1{tau=tau'} |
    balance_res: np.ndarray  # (steps,)
    numeric_dot: np.ndarray  # central differences; NaN at the ends

    @property
    def steps(self) -> int:
        return self.sigma_pi.shape[0]

    @property
    def n_tau(self) -> int:
        return self.sigma_pi.shape[1]


def _balance_residual(state: FlowState) -> float:
    worst = 0.0
    for lo, hi in ((0, state.L1), (state.L1, state.L1 + state.L2)):
        for i in range(lo, hi - 1):
            w, w_next = state.weights[i], state.weights[i + 1]
            worst = max(worst, float(np.linalg.norm(w @ w.T - w_next.T @ w_next)))
    return worst


def run_flow(cfg: TheoryConfig) -> tuple[FlowState, ProbeLog]:
    """Integrate the probe for cfg.steps Euler steps, recording the state
    before each step (record count == steps)."""
    state = balanced_init(cfg)
    r = min(cfg.d, cfg.d_prime)
    shape = (cfg.steps, r)
    sigma_pi = np.zeros(shape)
    sigma_phi = np.zeros(shape)
    coupling = np.zeros(shape)
    rhs = np.zeros(shape)
    c_val = np.zeros(shape)
    alignment_dev = np.zeros(shape)
    balance_res = np.zeros(cfg.steps)

    tracked: _Tracked | None = None
    c0: np.ndarray | None = None
    for step in range(cfg.steps):
        tracked = _track(state, tracked)
        qbar = build_Qbar(state)
        s_pi, s_phi = tracked.s_pi, tracked.s_phi
        c_now = s_phi**2 - s_pi ** (2.0 / cfg.L1)
        if c0 is None:
            c0 = c_now.copy()
        coup = np.einsum("dt,dq,qt->t", tracked.u_phi, qbar, tracked.v_pi)
        radicand = np.maximum(s_pi ** (2.0 / cfg.L1) + c0, 0.0)
        overlap = np.abs(tracked.u_pi.T @ tracked.v_phi)
        dev = np.abs(overlap - np.eye(r))

        sigma_pi[step] = s_pi
        sigma_phi[step] = s_phi
        coupling[step] = coup
        rhs[step] = cfg.L1 * s_pi ** (2.0 - 2.0 / cfg.L1) * np.sqrt(radicand) * coup
        c_val[step] = c_now
        alignment_dev[step] = dev.max(axis=1)
        balance_res[step] = _balance_residual(state)
        flow_step(state, cfg.dt)

    numeric = np.full(shape, np.nan)
    if cfg.steps >= 3:
        numeric[1:-1] = (sigma_pi[2:] - sigma_pi[:-2]) / (2.0 * cfg.dt)
    return state, ProbeLog(
        dt=cfg.dt, L1=cfg.L1,
        sigma_pi=sigma_pi, sigma_phi=sigma_phi, coupling=coupling, rhs=rhs,
        c_val=c_val, alignment_dev=alignment_dev, balance_res=balance_res,
        numeric_dot=numeric,
    )


# --- verification ----------------------------------------------------------------


@dataclass
class TauResidual:
    tau: int
    median_rel: float
    max_rel: float


@dataclass
class TheoremReport:
    residuals: list[TauResidual]
    assumption_broken: bool
    alignment_threshold: float

    def median_for(self, tau: int) -> float:
        return self.residuals[tau].median_rel


def verify_theorem_31(log: ProbeLog, tol: float, alignment_threshold: float = 0.1) -> TheoremReport:
    """Compare the measured singular-value rates against the rate law.

    The numeric rate is the central difference of the logged sigma_pi; the
    relative residual uses the larger magnitude of the two sides as scale.
    If the alignment premise drifts past `alignment_threshold` the report is
    flagged rather than failed; `tol` is recorded by callers when asserting.
    """
    interior = slice(1, log.steps - 1)
    residuals = []
    for tau in range(log.n_tau):
        num = log.numeric_dot[interior, tau]
        rhs = log.rhs[interior, tau]
        scale = np.maximum(np.maximum(np.abs(num), np.abs(rhs)), 1e-300)
        rel = np.abs(num - rhs) / scale
        residuals.append(
            TauResidual(tau=tau, median_rel=float(np.median(rel)), max_rel=float(rel.max()))
        )
    broken = bool(np.any(log.alignment_dev > alignment_threshold))
    return TheoremReport(
        residuals=residuals, assumption_broken=broken, alignment_threshold=alignment_threshold
    )


@dataclass
class AssumptionReport:
    balancedness_max_residual: float
    alignment_matrix_deviation: float
    c_drift: float
    c_drift_per_tau: np.ndarray

    def to_json(self) -> dict:
        return {
            "balancedness_max_residual": self.balancedness_max_residual,
            "alignment_matrix_deviation": self.alignment_matrix_deviation,
            "c_drift": self.c_drift,
            "c_drift_per_tau": self.c_drift_per_tau.tolist(),
        }


def check_assumptions(log: ProbeLog) -> AssumptionReport:
    """Worst-case premise deviations over the logged run."""
    if log.steps == 0:
        raise ValueError("empty probe log")
    drift = np.abs(log.c_val - log.c_val[0]).max(axis=0)
    return AssumptionReport(
        balancedness_max_residual=float(log.balance_res.max()),
        alignment_matrix_deviation=float(log.alignment_dev.max()),
        c_drift=float(drift.max()),
        c_drift_per_tau=drift,
    )


# --- heterogeneity sweep ----------------------------------------------------------


@dataclass
class SweepRow:
    level: float
    qbar_rank: int
    grown_count: int


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-8) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def imbalance_sweep(base_cfg: TheoryConfig, levels: list[float]) -> list[SweepRow]:
    """For each similarity level, report the drive matrix's numerical rank at
    t=0 and how many singular values of the encoder product grow by more than
    10% over the horizon."""
    if len(levels) < 2:
        raise ValueError("need at least two sweep levels")
    rows = []
    for level in levels:
        cfg = replace(base_cfg, imbalance=level)
        state = balanced_init(cfg)
        rank = numerical_rank(build_Qbar(state))
        s0 = np.linalg.svd(state.pi, compute_uv=False)
        for _ in range(cfg.steps):
            flow_step(state, cfg.dt)
        s1 = np.linalg.svd(state.pi, compute_uv=False)
        grown = int(np.sum((s1 - s0) / s0 > 0.10))
        rows.append(SweepRow(level=level, qbar_rank=rank, grown_count=grown))
    return rows


# --- artifact emission -------------------------------------------------------------

PROBE_FIELDS = (
    "step", "tau", "sigma_pi", "sigma_phi", "numeric_dot",
    "formula_rhs", "alignment_dev", "balance_res", "C_val",
)


def write_probe_csv(log: ProbeLog | None, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROBE_FIELDS)
        if log is None:
            return
        for step in range(log.steps):
            for tau in range(log.n_tau):
                writer.writerow(
                    [step, tau]
                    + [
                        f"{v:.17g}"
                        for v in (
                            log.sigma_pi[step, tau],
                            log.sigma_phi[step, tau],
                            log.numeric_dot[step, tau],
                            log.rhs[step, tau],
                            log.alignment_dev[step, tau],
                            log.balance_res[step],
                            log.c_val[step, tau],
                        )
                    ]
                )
