"""Gaussian-process learning of port-Hamiltonian vector fields.

The drift (J - R) grad H is given a GP prior through the structured kernel
(see kernels.py); the input term enters as the prior mean G_hat(x) u.  Training
minimizes the negative log marginal likelihood over log-scale kernel
hyperparameters, log noise variances, and the raw structure parameters.

Posterior queries return the drift mean/variance, and the posterior
Hamiltonian is realized by solving Jr_hat(x) g = mu(x) for the gradient and
line-integrating g from a reference state along a straight path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from . import backend
from .core import PhsModel, eval_dynamics
from .errors import ConditioningError, ModelEvaluationError, TrainingError
from .filtering import FilteredDataset
from .kernels import factorize_gram, gram_matrix
from .structure import StructureEstimate, structure_from_jsonable

__all__ = [
    "GpHyperparams",
    "OptimizerConfig",
    "GpPhsModel",
    "PerfectPhsModel",
    "mean_adjust",
    "negative_log_marginal_likelihood",
    "train",
    "posterior_dynamics",
    "posterior_hamiltonian",
    "error_envelope",
    "calibrate_beta",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel and noise hyperparameters plus the structure estimate.

    sigma_f and the lengthscales/noise variances are stored in natural units;
    the optimizer works on [log sigma_f, log l_1..n, log sigma2_1..n, phi].
    """

    sigma_f: float
    lengthscales: np.ndarray
    noise_var: np.ndarray
    structure: StructureEstimate

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "noise_var", np.asarray(self.noise_var, dtype=float))
        n = self.structure.family.dim_state
        if self.lengthscales.shape != (n,) or self.noise_var.shape != (n,):
            raise ValueError("lengthscales and noise_var must have one entry per state dimension")
        if self.sigma_f <= 0 or np.any(self.lengthscales <= 0) or np.any(self.noise_var < 0):
            raise ValueError("sigma_f, lengthscales must be positive; noise_var nonnegative")

    @property
    def dim_state(self):
        return self.lengthscales.shape[0]

    @property
    def n_hyper(self):
        return 1 + 2 * self.dim_state + self.structure.family.n_params

    def to_vector(self):
        return np.concatenate(
            [
                [np.log(self.sigma_f)],
                np.log(self.lengthscales),
                np.log(np.maximum(self.noise_var, 1e-300)),
                self.structure.phi,
            ]
        )

    def from_vector(self, vec):
        n = self.dim_state
        vec = np.asarray(vec, dtype=float)
        return GpHyperparams(
            sigma_f=float(np.exp(vec[0])),
            lengthscales=np.exp(vec[1 : 1 + n]),
            noise_var=np.exp(vec[1 + n : 1 + 2 * n]),
            structure=self.structure.with_phi(vec[1 + 2 * n :]),
        )


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 5
    max_iter: int = 500
    gtol: float = 1e-5
    perturb_scale: float = 0.3
    jitter: float = 1e-10
    max_jitter: float = 1e-6


def mean_adjust(dataset: FilteredDataset, structure: StructureEstimate) -> np.ndarray:
    """Stacked derivative observations minus the prior mean G_hat(x_i) u_i."""
    n, n_pts = dataset.states.shape
    out = np.empty(n * n_pts)
    for i in range(n_pts):
        g = structure.g(dataset.states[:, i])
        out[i * n : (i + 1) * n] = dataset.derivatives[:, i] - g @ dataset.inputs[:, i]
    return out


def _assemble(blocks):
    """(N, M, n, n) block tensor -> (N n, M n) matrix, sample-major."""
    n_a, n_b, n, _ = blocks.shape
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3).reshape(n_a * n, n_b * n))


def _nlml_impl(dataset, hyper, jitter, max_jitter, with_grad):
    x = dataset.states
    n, n_pts = x.shape
    ls = hyper.lengthscales
    sf2 = hyper.sigma_f**2
    struct = hyper.structure
    s_stack = struct.jr_stack(x)

    k_se, d, pi = backend.pi_tensor(x, x, ls)
    sig_blocks = sf2 * np.einsum("aik,abkl,bjl->abij", s_stack, pi, s_stack, optimize=True)
    k_sig = _assemble(sig_blocks)
    gram = k_sig.copy()
    diag = np.arange(n * n_pts)
    gram[diag, diag] += np.tile(hyper.noise_var, n_pts)

    cho, jit_used = factorize_gram(gram, jitter=jitter, max_jitter=max_jitter)
    xdot0 = mean_adjust(dataset, struct)
    alpha = cho_solve(cho, xdot0)
    log_det_half = float(np.sum(np.log(np.diag(cho[0]))))
    value = 0.5 * xdot0 @ alpha + log_det_half + 0.5 * n * n_pts * np.log(2 * np.pi)
    if not with_grad:
        return value, None, (cho, jit_used, alpha, xdot0)

    kinv = cho_solve(cho, np.eye(n * n_pts))
    grad = np.empty(hyper.n_hyper)

    def quad_terms(dk):
        return 0.5 * (np.sum(kinv * dk) - alpha @ dk @ alpha)

    # log sigma_f
    grad[0] = 2.0 * quad_terms(k_sig)

    # log lengthscales; Pi = k * B with B = diag(v) - (v d)(v d)^T
    v = 1.0 / ls**2
    vd = d * v
    for q in range(n):
        w = v[q] * d[:, :, q]
        dpi = (w * d[:, :, q])[:, :, None, None] * pi
        db = np.zeros_like(pi)
        db[:, :, q, :] += 2.0 * w[:, :, None] * vd
        db[:, :, :, q] += 2.0 * w[:, :, None] * vd
        db[:, :, q, q] -= 2.0 * v[q]
        dpi += k_se[:, :, None, None] * db
        dk = _assemble(sf2 * np.einsum("aik,abkl,bjl->abij", s_stack, dpi, s_stack, optimize=True))
        grad[1 + q] = quad_terms(dk)

    # log noise variances (block-diagonal entries)
    for q in range(n):
        pos = diag.reshape(n_pts, n)[:, q]
        grad[1 + n + q] = 0.5 * hyper.noise_var[q] * float(
            np.sum(kinv[pos, pos]) - np.sum(alpha[pos] ** 2)
        )

    # raw structure parameters: kernel term plus the prior-mean term
    n_phi = struct.family.n_params
    if n_phi:
        ds_stack = np.stack([struct.family.jr_param_grad(x[:, i], struct.phi) for i in range(n_pts)])
        dg_stack = np.stack([struct.family.g_param_grad(x[:, i], struct.phi) for i in range(n_pts)])
        for p in range(n_phi):
            left = np.einsum("aik,abkl,bjl->abij", ds_stack[:, p], pi, s_stack, optimize=True)
            right = np.einsum("aik,abkl,bjl->abij", s_stack, pi, ds_stack[:, p], optimize=True)
            dk = _assemble(sf2 * (left + right))
            term = quad_terms(dk)
            # d xdot0 / d phi_p = -dG u, stacked
            dm = np.empty(n * n_pts)
            for i in range(n_pts):
                dm[i * n : (i + 1) * n] = -dg_stack[i, p] @ dataset.inputs[:, i]
            grad[1 + 2 * n + p] = term + alpha @ dm
    return value, grad, (cho, jit_used, alpha, xdot0)


def negative_log_marginal_likelihood(
    dataset: FilteredDataset,
    hyper: GpHyperparams,
    jitter: float = 1e-10,
    max_jitter: float = 1e-6,
    with_grad: bool = True,
):
    """NLML = 1/2 Xdot0^T K^-1 Xdot0 + 1/2 log |K| + (n N / 2) log 2 pi.

    With ``with_grad`` also returns the gradient with respect to the packed
    vector [log sigma_f, log l_i, log sigma2_i, phi] (trace identities; the
    structure parameters additionally feel the prior mean through Xdot0).
    """
    value, grad, _ = _nlml_impl(dataset, hyper, jitter, max_jitter, with_grad)
    if with_grad:
        return value, grad
    return value


@dataclass
class GpPhsModel:
    """A trained model: hyperparameters plus cached Gram factorization.

    Immutable by convention after training except for the error-envelope
    scale ``beta`` (set by calibration).  Posterior queries are pure.
    """

    hyper: GpHyperparams
    states: np.ndarray
    xdot0: np.ndarray
    cho: tuple
    jitter_used: float
    alpha: np.ndarray
    nlml: float
    beta: np.ndarray
    risk_p: float = 0.05
    bound_scale: str = "variance"
    x_ref: np.ndarray = None
    _s_stack: np.ndarray = field(default=None, repr=False)
    _h_w: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.x_ref is None:
            self.x_ref = np.zeros(self.hyper.dim_state)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self._s_stack is None:
            self._s_stack = self.hyper.structure.jr_stack(self.states)
        self._h_w = None

    @property
    def dim_state(self):
        return self.hyper.dim_state

    @property
    def dim_input(self):
        return self.hyper.structure.family.dim_input

    @property
    def structure(self):
        return self.hyper.structure

    def io_matrix(self, x):
        return self.structure.g(np.asarray(x, dtype=float))

    def drift(self, xq):
        """Posterior drift mean and per-dimension variance at query states (n, Q)."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        if xq.shape[0] != self.dim_state:
            xq = xq.T
        n = self.dim_state
        n_q = xq.shape[1]
        sq = self.structure.jr_stack(xq)
        sf2 = self.hyper.sigma_f**2
        cross = backend.phs_cross(xq, self.states, sq, self._s_stack, sf2, self.hyper.lengthscales)
        mean = (cross @ self.alpha).reshape(n_q, n).T
        w = cho_solve(self.cho, cross.T)
        quad = np.einsum("ij,ij->j", cross.T, w)
        v = 1.0 / self.hyper.lengthscales**2
        prior = sf2 * np.einsum("qil,l->qi", sq**2, v)
        var = np.maximum(prior.reshape(n_q * n) - quad, 0.0).reshape(n_q, n).T
        return mean, var

    def drift_mean(self, xq):
        """Posterior drift mean only; skips the variance back-substitution."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        if xq.shape[0] != self.dim_state:
            xq = xq.T
        n = self.dim_state
        n_q = xq.shape[1]
        sq = self.structure.jr_stack(xq)
        cross = backend.phs_cross(
            xq, self.states, sq, self._s_stack, self.hyper.sigma_f**2, self.hyper.lengthscales
        )
        return (cross @ self.alpha).reshape(n_q, n).T

    def dynamics(self, x, u):
        """Posterior state derivative mean mu + G_hat u and its variance."""
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        mean, var = self.drift(x[:, None])
        return mean[:, 0] + self.io_matrix(x) @ u, var[:, 0]

    def hamiltonian_grad(self, xq):
        """grad H_hat obtained from Jr_hat(x) g = mu(x), batched over columns."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        mean = self.drift_mean(xq)
        n_q = xq.shape[1]
        s_stack = self.structure.jr_stack(xq)
        try:
            return np.linalg.solve(s_stack, mean.T[:, :, None])[:, :, 0].T
        except np.linalg.LinAlgError:
            pass
        out = np.empty_like(mean)
        for i in range(n_q):
            s = s_stack[i]
            try:
                out[:, i] = np.linalg.solve(s, mean[:, i])
            except np.linalg.LinAlgError:
                sol, res, rank, _ = np.linalg.lstsq(s, mean[:, i], rcond=None)
                scale = max(np.linalg.norm(mean[:, i]), 1.0)
                if rank < s.shape[0] and res.size and np.sqrt(res[0]) > 1e-6 * scale:
                    raise ModelEvaluationError(
                        "singular structure matrix at query state", state=xq[:, i].copy()
                    )
                out[:, i] = sol
        return out

    @property
    def _h_weights(self):
        # cov(H(x), xdot(x_i)) = sf^2 Jr(x_i) Lambda^-1 (x - x_i) k(x, x_i), so
        # the posterior H mean is sum_i k(x, x_i) (x - x_i)^T w_i with the
        # query-independent part w_i = sf^2 Lambda^-1 Jr(x_i)^T alpha_i cached
        if self._h_w is None:
            n = self.dim_state
            a = self.alpha.reshape(-1, n)
            t = np.einsum("pij,pi->pj", self._s_stack, a)
            v = 1.0 / self.hyper.lengthscales**2
            self._h_w = self.hyper.sigma_f**2 * t * v[None, :]
        return self._h_w

    def _h_mean_raw(self, xq):
        ls = self.hyper.lengthscales
        diff = xq.T[:, None, :] - self.states.T[None, :, :]
        k = np.exp(-0.5 * np.einsum("qpn,n->qp", diff**2, 1.0 / ls**2))
        return np.einsum("qp,qpn,pn->q", k, diff, self._h_weights)

    def hamiltonian(self, xq, chunk: int = 2048):
        """Posterior Hamiltonian mean, pinned to H_hat(x_ref) = 0.

        Conditions the latent energy directly on the drift observations; the
        additive constant is fixed by subtracting the value at x_ref.
        """
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        n_q = xq.shape[1]
        h_ref = self._h_mean_raw(self.x_ref[:, None])[0]
        out = np.empty(n_q)
        for start in range(0, n_q, chunk):
            out[start : start + chunk] = self._h_mean_raw(xq[:, start : start + chunk]) - h_ref
        return out

    def hamiltonian_quadrature(self, xq, chunk: int = 512, tol: float = 1e-9):
        """Same quantity as `hamiltonian` via line integrals of the gradient.

        Independent route (adaptive quadrature from x_ref along straight
        paths); kept for cross-checking the closed form.
        """
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        n_q = xq.shape[1]
        out = np.empty(n_q)
        for start in range(0, n_q, chunk):
            block = xq[:, start : start + chunk]
            delta = block - self.x_ref[:, None]

            def integrand(s):
                pts = self.x_ref[:, None] + s * delta
                g = self.hamiltonian_grad(pts)
                return np.einsum("nq,nq->q", g, delta)

            val, _ = quad_vec(integrand, 0.0, 1.0, epsabs=tol, epsrel=tol)
            out[start : start + chunk] = val
        return out

    def hamiltonian_scalar(self, x):
        """(H_hat(x), grad H_hat(x)) at a single state."""
        x = np.asarray(x, dtype=float)
        h = self.hamiltonian(x[:, None])[0]
        g = self.hamiltonian_grad(x[:, None])[:, 0]
        return float(h), g

    def envelope(self, xq):
        """Per-dimension model-error envelope beta_i * var (or std) at queries."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        _, var = self.drift(xq)
        scale = var if self.bound_scale == "variance" else np.sqrt(var)
        return self.beta[:, None] * scale


def condition(
    dataset: FilteredDataset,
    hyper: GpHyperparams,
    jitter: float = 1e-10,
    max_jitter: float = 1e-6,
    x_ref: Optional[np.ndarray] = None,
    beta: Optional[np.ndarray] = None,
    risk_p: float = 0.05,
    bound_scale: str = "variance",
) -> GpPhsModel:
    """Condition on the dataset at fixed hyperparameters (no optimization)."""
    value, _, (cho, jit_used, alpha, xdot0) = _nlml_impl(
        dataset, hyper, jitter, max_jitter, with_grad=False
    )
    n = hyper.dim_state
    return GpPhsModel(
        hyper=hyper,
        states=dataset.states.copy(),
        xdot0=xdot0,
        cho=cho,
        jitter_used=jit_used,
        alpha=alpha,
        nlml=float(value),
        beta=np.ones(n) if beta is None else np.asarray(beta, dtype=float),
        risk_p=risk_p,
        bound_scale=bound_scale,
        x_ref=x_ref,
    )


def train(
    dataset: FilteredDataset,
    init: GpHyperparams,
    optimizer_config: Optional[OptimizerConfig] = None,
    rng: Optional[np.random.Generator] = None,
    x_ref: Optional[np.ndarray] = None,
    beta: Optional[np.ndarray] = None,
    risk_p: float = 0.05,
    bound_scale: str = "variance",
) -> GpPhsModel:
    """Fit hyperparameters by multi-restart quasi-Newton NLML minimization.

    The first restart starts exactly at ``init``; the rest perturb the packed
    log/raw vector with seeded Gaussian noise.  Restarts whose Gram matrix
    never factorizes are discarded; if all fail, TrainingError is raised.
    """
    cfg = optimizer_config or OptimizerConfig()
    rng = rng or np.random.default_rng(0)
    if bound_scale not in ("variance", "stddev"):
        raise ValueError("bound_scale must be 'variance' or 'stddev'")

    theta0 = init.to_vector()

    def objective(theta):
        # line-search trial points can push a log parameter past float range
        # (exp underflow makes a lengthscale exactly zero); treat those as
        # infeasible instead of letting the validation error escape
        with np.errstate(over="ignore"):
            try:
                hyper = init.from_vector(theta)
                value, grad = negative_log_marginal_likelihood(
                    dataset, hyper, jitter=cfg.jitter, max_jitter=cfg.max_jitter
                )
            except (ConditioningError, ValueError):
                return 1e25, np.zeros_like(theta)
        if not np.isfinite(value):
            return 1e25, np.zeros_like(theta)
        return value, grad

    best = None
    for restart in range(cfg.restarts):
        start = theta0 if restart == 0 else theta0 + cfg.perturb_scale * rng.standard_normal(theta0.shape)
        res = minimize(
            objective,
            start,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": cfg.max_iter, "gtol": cfg.gtol},
        )
        if res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise TrainingError("all optimizer restarts failed to factorize the Gram matrix")

    return condition(
        dataset,
        init.from_vector(best.x),
        jitter=cfg.jitter,
        max_jitter=cfg.max_jitter,
        x_ref=x_ref,
        beta=beta,
        risk_p=risk_p,
        bound_scale=bound_scale,
    )


def posterior_dynamics(model, x, u):
    """Posterior mean mu(xdot | x, D) + G_hat(x) u and per-dimension variance."""
    return model.dynamics(x, u)


def posterior_hamiltonian(model, x):
    """Posterior Hamiltonian value and gradient at a single state."""
    return model.hamiltonian_scalar(x)


def error_envelope(model, x):
    """Per-dimension bound eta_i = beta_i * var(xdot_i | x, D) at a single state."""
    return model.envelope(np.asarray(x, dtype=float)[:, None])[:, 0]


def calibrate_beta(model: GpPhsModel, validation: FilteredDataset, percentile: float = 99.0):
    """Set beta from the per-dimension percentile of |error| / var on held-out data."""
    mean, var = model.drift(validation.states)
    target = mean_adjust(validation, model.structure).reshape(validation.n_points, -1).T
    err = np.abs(mean - target)
    scale = var if model.bound_scale == "variance" else np.sqrt(var)
    scale = np.maximum(scale, 1e-12)
    beta = np.percentile(err / scale, percentile, axis=1)
    model.beta = beta
    return beta


class PerfectPhsModel:
    """Drop-in replacement for GpPhsModel using the exact vector field.

    Posterior mean equals (J - R) grad H, variance and error envelope are
    identically zero, and the Hamiltonian is H(x) - H(x_ref).  Used for the
    eta = 0 baseline.
    """

    def __init__(self, plant: PhsModel, structure: StructureEstimate, x_ref=None):
        self.plant = plant
        self.structure = structure
        self.x_ref = np.zeros(plant.dim_state) if x_ref is None else np.asarray(x_ref, dtype=float)
        self.bound_scale = "variance"
        self.beta = np.zeros(plant.dim_state)

    @property
    def dim_state(self):
        return self.plant.dim_state

    @property
    def dim_input(self):
        return self.plant.dim_input

    def io_matrix(self, x):
        return self.structure.g(np.asarray(x, dtype=float))

    def drift(self, xq):
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        n_q = xq.shape[1]
        mean = np.empty((self.dim_state, n_q))
        for i in range(n_q):
            x = xq[:, i]
            jr = self.plant.interconnection(x) - self.plant.dissipation(x)
            mean[:, i] = jr @ np.asarray(self.plant.hamiltonian_gradient(x), dtype=float)
        return mean, np.zeros_like(mean)

    def drift_mean(self, xq):
        return self.drift(xq)[0]

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return eval_dynamics(self.plant, x, u), np.zeros(self.dim_state)

    def hamiltonian_grad(self, xq):
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        return np.stack(
            [np.asarray(self.plant.hamiltonian_gradient(xq[:, i]), dtype=float) for i in range(xq.shape[1])],
            axis=1,
        )

    def hamiltonian(self, xq, chunk: int = 512, tol: float = 1e-9):
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        h_ref = self.plant.hamiltonian(self.x_ref)
        return np.array([self.plant.hamiltonian(xq[:, i]) - h_ref for i in range(xq.shape[1])])

    def hamiltonian_scalar(self, x):
        x = np.asarray(x, dtype=float)
        return float(self.hamiltonian(x[:, None])[0]), self.hamiltonian_grad(x[:, None])[:, 0]

    def envelope(self, xq):
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        return np.zeros((self.dim_state, xq.shape[1]))


def save_model(model: GpPhsModel, path) -> None:
    """Serialize a trained model to JSON; floats survive round-trip bit-exactly."""
    payload = {
        "format": "phs-lab-gp-model",
        "version": 1,
        "hyper": {
            "sigma_f": model.hyper.sigma_f,
            "lengthscales": model.hyper.lengthscales.tolist(),
            "noise_var": model.hyper.noise_var.tolist(),
            "structure": model.hyper.structure.to_jsonable(),
        },
        "states": model.states.tolist(),
        "xdot0": model.xdot0.tolist(),
        "jitter_used": model.jitter_used,
        "nlml": model.nlml,
        "beta": model.beta.tolist(),
        "risk_p": model.risk_p,
        "bound_scale": model.bound_scale,
        "x_ref": model.x_ref.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_model(path) -> GpPhsModel:
    """Rebuild a model saved by save_model; the factorization is recomputed."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "phs-lab-gp-model":
        raise ValueError(f"not a model file: {path}")
    hyper = GpHyperparams(
        sigma_f=payload["hyper"]["sigma_f"],
        lengthscales=np.asarray(payload["hyper"]["lengthscales"], dtype=float),
        noise_var=np.asarray(payload["hyper"]["noise_var"], dtype=float),
        structure=structure_from_jsonable(payload["hyper"]["structure"]),
    )
    states = np.asarray(payload["states"], dtype=float)
    gram = gram_matrix(states, hyper, jitter=0.0)
    cho, jit_used = factorize_gram(gram, jitter=payload["jitter_used"])
    xdot0 = np.asarray(payload["xdot0"], dtype=float)
    return GpPhsModel(
        hyper=hyper,
        states=states,
        xdot0=xdot0,
        cho=cho,
        jitter_used=jit_used,
        alpha=cho_solve(cho, xdot0),
        nlml=payload["nlml"],
        beta=np.asarray(payload["beta"], dtype=float),
        risk_p=payload["risk_p"],
        bound_scale=payload["bound_scale"],
        x_ref=np.asarray(payload["x_ref"], dtype=float),
    )
