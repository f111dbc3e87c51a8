"""Linear-alignment probes and black-box transfer evaluation.

Fits the surrogate-to-victim alignment map by least squares, measures the
empirical residual-coupling bound, checks the resulting displacement lower
bounds pair by pair (which must all hold: a violation means an
implementation bug), computes CCA correlations and the linear-probe R²,
and scores patch transfer on a victim the attack never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import least_squares_fit, singular_values
from .policy import Policy
from .render import PatchTexture, TransformLimits, paste, sample_transform

__all__ = [
    "BoundCheck",
    "AlignmentReport",
    "ArmResult",
    "TransferMetrics",
    "fit_alignment",
    "epsilon_e",
    "verify_prop1",
    "cca_correlations",
    "linear_probe_r2",
    "pooled_features",
    "analyze_alignment",
    "transfer_eval",
]

_BOUND_TOL = 1e-9  # float slack on inequalities that hold exactly in reals


@dataclass
class BoundCheck:
    """Both displacement lower bounds for one clean/patched pair."""

    index: int
    dz_l2: float
    dg_l2: float
    rhs_l2: float
    ok_l2: bool
    dz_l1: float
    dg_l1: float
    rhs_l1: float
    ok_l1: bool

    @property
    def satisfied(self) -> bool:
        return self.ok_l2 and self.ok_l1


@dataclass
class AlignmentReport:
    a_star: np.ndarray
    epsilon_e: float
    sigma_min: float
    cca: np.ndarray
    r_squared: float
    bound_checks: list[BoundCheck]
    n_pairs: int
    surrogate_dim: int
    victim_dim: int

    @property
    def all_l2_ok(self) -> bool:
        return all(b.ok_l2 for b in self.bound_checks)

    @property
    def all_l1_ok(self) -> bool:
        return all(b.ok_l1 for b in self.bound_checks)

    def to_text(self) -> str:
        lines = [
            f"n_pairs = {self.n_pairs}",
            f"surrogate_dim = {self.surrogate_dim}",
            f"victim_dim = {self.victim_dim}",
            f"sigma_min = {self.sigma_min!r}",
            f"epsilon_e = {self.epsilon_e!r}",
            f"r_squared = {self.r_squared!r}",
            f"cca_count = {len(self.cca)}",
        ]
        lines += [f"cca_{i + 1} = {float(c)!r}" for i, c in enumerate(self.cca)]
        lines += [
            f"l2_bounds_satisfied = {sum(b.ok_l2 for b in self.bound_checks)}",
            f"l1_bounds_satisfied = {sum(b.ok_l1 for b in self.bound_checks)}",
        ]
        return "\n".join(lines) + "\n"

    def bounds_csv(self) -> str:
        rows = ["pair,dz_l2,dg_l2,rhs_l2,ok_l2,dz_l1,dg_l1,rhs_l1,ok_l1"]
        rows += [
            f"{b.index},{b.dz_l2!r},{b.dg_l2!r},{b.rhs_l2!r},{int(b.ok_l2)},"
            f"{b.dz_l1!r},{b.dg_l1!r},{b.rhs_l1!r},{int(b.ok_l1)}"
            for b in self.bound_checks
        ]
        return "\n".join(rows) + "\n"


def fit_alignment(z_s: np.ndarray, z_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares map from surrogate to victim features, plus residuals.

    No intercept and no centering: the alignment model is purely linear.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape[0] <= z_s.shape[1]:
        raise ValueError(
            f"need more samples than surrogate dims, got {z_s.shape[0]} x {z_s.shape[1]}"
        )
    a_star = least_squares_fit(z_s, z_t)
    residuals = z_t - z_s @ a_star
    return a_star, residuals


def epsilon_e(residuals_clean: np.ndarray, residuals_patched: np.ndarray) -> float:
    """Tightest residual-coupling constant on the evaluated pair set."""
    rc = np.asarray(residuals_clean, dtype=np.float64)
    rp = np.asarray(residuals_patched, dtype=np.float64)
    if rc.shape != rp.shape:
        raise ValueError("residual arrays must be paired (same shape)")
    if rc.shape[0] == 0:
        raise ValueError("empty pair set")
    return float(np.max(np.linalg.norm(rp - rc, axis=1)))


def verify_prop1(
    surr_clean: np.ndarray,
    surr_patched: np.ndarray,
    vict_clean: np.ndarray,
    vict_patched: np.ndarray,
    a_star: np.ndarray,
    eps_e: float,
) -> list[BoundCheck]:
    """Check the l2 and l1 displacement lower bounds for every pair.

    With eps_e measured as the set max, both inequalities are theorems of
    the fitted quantities, so any failure flags a bug in the pipeline.
    When the surrogate space is wider than the victim space the row map
    has a kernel and the effective smallest singular value is zero.
    """
    dz = np.asarray(surr_patched, dtype=np.float64) - np.asarray(surr_clean, dtype=np.float64)
    dg = np.asarray(vict_patched, dtype=np.float64) - np.asarray(vict_clean, dtype=np.float64)
    if dz.shape[0] != dg.shape[0]:
        raise ValueError("pair count mismatch between surrogate and victim sides")
    if dz.shape[1] != a_star.shape[0] or dg.shape[1] != a_star.shape[1]:
        raise ValueError("feature dims do not match the alignment map")
    d_s, d_t = a_star.shape
    sigma_min = float(singular_values(a_star)[-1]) if d_s <= d_t else 0.0
    sqrt_d = math.sqrt(d_s)
    checks = []
    for i in range(dz.shape[0]):
        dz_l2 = float(np.linalg.norm(dz[i]))
        dg_l2 = float(np.linalg.norm(dg[i]))
        dz_l1 = float(np.abs(dz[i]).sum())
        dg_l1 = float(np.abs(dg[i]).sum())
        rhs_l2 = sigma_min * dz_l2 - eps_e
        rhs_l1 = sigma_min / sqrt_d * dz_l1 - eps_e
        checks.append(
            BoundCheck(
                index=i,
                dz_l2=dz_l2,
                dg_l2=dg_l2,
                rhs_l2=rhs_l2,
                ok_l2=dg_l2 >= rhs_l2 - _BOUND_TOL * max(1.0, abs(rhs_l2)),
                dz_l1=dz_l1,
                dg_l1=dg_l1,
                rhs_l1=rhs_l1,
                ok_l1=dg_l1 >= rhs_l1 - _BOUND_TOL * max(1.0, abs(rhs_l1)),
            )
        )
    return checks


def _inv_sqrt_psd(c: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(c)
    if np.any(evals <= 0):
        raise ValueError("covariance degenerate beyond regularization")
    return (evecs / np.sqrt(evals)) @ evecs.T


def cca_correlations(z_s: np.ndarray, z_t: np.ndarray, k: int) -> np.ndarray:
    """Top-k canonical correlations via whitened cross-covariance SVD."""
    x = np.asarray(z_s, dtype=np.float64)
    y = np.asarray(z_t, dtype=np.float64)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("feature sets must have the same number of rows")
    if n <= max(x.shape[1], y.shape[1]):
        raise ValueError(f"need n > max(d_s, d_t), got n={n}")
    if k < 1:
        raise ValueError("k must be positive")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    cxx = x.T @ x / (n - 1) + 1e-8 * np.eye(x.shape[1])
    cyy = y.T @ y / (n - 1) + 1e-8 * np.eye(y.shape[1])
    cxy = x.T @ y / (n - 1)
    m = _inv_sqrt_psd(cxx) @ cxy @ _inv_sqrt_psd(cyy)
    corr = np.clip(np.linalg.svd(m, compute_uv=False), 0.0, 1.0)
    return corr[: min(k, corr.size)]


def linear_probe_r2(z_s: np.ndarray, z_t: np.ndarray) -> float:
    """Explained variance of the best single linear map, both sides centered."""
    x = np.asarray(z_s, dtype=np.float64)
    y = np.asarray(z_t, dtype=np.float64)
    if x.shape[0] <= x.shape[1]:
        raise ValueError("need more samples than surrogate dims")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    ss_tot = float(np.sum(yc * yc))
    if ss_tot < 1e-18:
        raise ValueError("target features have zero total variance")
    a = least_squares_fit(xc, yc)
    resid = yc - xc @ a
    return 1.0 - float(np.sum(resid * resid)) / ss_tot


def pooled_features(policy: Policy, images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the pooled projector features of a batch of frames."""
    return np.stack([policy.features(x).pooled.value for x in images])


def analyze_alignment(
    surrogate: Policy,
    victim: Policy,
    images: Sequence[np.ndarray],
    patch: PatchTexture,
    *,
    seed: int = 0,
    limits: TransformLimits = TransformLimits(theta_max=0.5),
    cca_k: int | None = None,
) -> AlignmentReport:
    """Full alignment study on clean/patched pairs of the given frames.

    The alignment map is fitted on the union of clean and patched features
    (no centering); CCA and R² are computed on the same union.
    """
    if not len(images):
        raise ValueError("empty image set")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    frame = (surrogate.spec.height, surrogate.spec.width)
    patched_images = []
    for x in images:
        t = sample_transform(rng, frame, (patch.height, patch.width), limits)
        patched_images.append(paste(x, patch, t)[0].value)
    z_s_clean = pooled_features(surrogate, images)
    z_s_patch = pooled_features(surrogate, patched_images)
    z_t_clean = pooled_features(victim, images)
    z_t_patch = pooled_features(victim, patched_images)
    z_s = np.concatenate([z_s_clean, z_s_patch])
    z_t = np.concatenate([z_t_clean, z_t_patch])
    a_star, residuals = fit_alignment(z_s, z_t)
    n = len(images)
    eps = epsilon_e(residuals[:n], residuals[n:])
    checks = verify_prop1(z_s_clean, z_s_patch, z_t_clean, z_t_patch, a_star, eps)
    d_s, d_t = a_star.shape
    k = cca_k if cca_k is not None else min(d_s, d_t)
    return AlignmentReport(
        a_star=a_star,
        epsilon_e=eps,
        sigma_min=float(singular_values(a_star)[-1]) if d_s <= d_t else 0.0,
        cca=cca_correlations(z_s, z_t, k),
        r_squared=linear_probe_r2(z_s, z_t),
        bound_checks=checks,
        n_pairs=n,
        surrogate_dim=d_s,
        victim_dim=d_t,
    )


@dataclass
class ArmResult:
    """Per-evaluation deviations for one patch arm."""

    name: str
    feature_devs: np.ndarray
    action_devs: np.ndarray

    @property
    def mean_feature_dev(self) -> float:
        return float(self.feature_devs.mean())

    @property
    def mean_action_dev(self) -> float:
        return float(self.action_devs.mean())

    def attack_rate(self, theta_act: float) -> float:
        return float(np.mean(self.action_devs > theta_act))


@dataclass
class TransferMetrics:
    theta_act: float
    arms: dict[str, ArmResult]
    n_items: int
    n_placements: int
    transforms: list  # per item, per placement (shared across arms)
    audit: dict[str, int] = field(default_factory=dict)


def transfer_eval(
    patch: PatchTexture,
    victim: Policy,
    eval_set: Sequence[tuple[np.ndarray, str]],
    *,
    theta_act: float | None = None,
    n_placements: int = 5,
    seed: int = 0,
    limits: TransformLimits = TransformLimits(theta_max=0.5),
) -> TransferMetrics:
    """Score a patch against a victim under fresh placement draws.

    Each item is evaluated at ``n_placements`` transforms shared across
    three arms (learned patch, seeded uniform-random patch, mid-gray blank
    patch), recording the victim's pooled-feature and action deviations.
    The attack rate counts action deviations above ``theta_act`` (default:
    half the RMS clean action norm, recomputed per run). Only the victim
    is ever invoked; its access counts are recorded in the audit field.
    """
    if not len(eval_set):
        raise ValueError("empty eval set")
    if n_placements < 1:
        raise ValueError("need at least one placement")
    frame = (victim.spec.height, victim.spec.width)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    items = [
        (np.asarray(x, dtype=np.float64), victim.tokenize(text)) for x, text in eval_set
    ]
    transforms = [
        [
            sample_transform(rng, frame, (patch.height, patch.width), limits)
            for _ in range(n_placements)
        ]
        for _ in items
    ]
    accesses_before = victim.access_count
    clean_actions, clean_pooled = [], []
    for x, instr in items:
        trace = victim.forward(x, instr)
        clean_actions.append(trace.action.value)
        clean_pooled.append(trace.z_v.value.mean(axis=0))
    if theta_act is None:
        rms = math.sqrt(float(np.mean([np.dot(y, y) for y in clean_actions])))
        theta_act = 0.5 * rms

    arm_patches = {
        "learned": patch,
        "random": PatchTexture.random(
            np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0]),
            patch.height,
            patch.width,
        ),
        "blank": PatchTexture.solid(patch.height, patch.width, 0.5),
    }
    arms = {}
    for name, arm_patch in arm_patches.items():
        f_devs, a_devs = [], []
        for i, (x, instr) in enumerate(items):
            for t in transforms[i]:
                patched_frame, _ = paste(x, arm_patch, t)
                trace = victim.forward(patched_frame.value, instr)
                pooled = trace.z_v.value.mean(axis=0)
                f_devs.append(float(np.linalg.norm(pooled - clean_pooled[i])))
                a_devs.append(float(np.linalg.norm(trace.action.value - clean_actions[i])))
        arms[name] = ArmResult(
            name=name,
            feature_devs=np.asarray(f_devs),
            action_devs=np.asarray(a_devs),
        )
    return TransferMetrics(
        theta_act=theta_act,
        arms=arms,
        n_items=len(items),
        n_placements=n_placements,
        transforms=transforms,
        audit={victim.label: victim.access_count - accesses_before},
    )
