"""The four attack losses and their weighted combinations.

All losses are built from the closed autodiff op set, so they are exact
under ``check_gradient`` and compose into one scalar objective per batch:
the feature-space term (l1 deviation + repulsive InfoNCE), the attention
dominance term over text-to-vision shares, and the semantic misalignment
term over the pooled patch feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .policy import FeaturePair, ForwardTrace

__all__ = [
    "LossWeights",
    "AttentionShares",
    "OuterSample",
    "PROBE_SETS",
    "probe_anchors",
    "l1_deviation",
    "infonce_repulsion",
    "attention_shares",
    "pad_loss",
    "pooled_patch_feature",
    "PooledPatch",
    "psm_loss",
    "trace_features",
    "j_tr",
    "j_out",
]

# Probe phrase sets for the semantic anchors; "combined" mixes action verbs
# with spatial words, the reduced variants isolate one kind each.
PROBE_SETS: dict[str, tuple[str, ...]] = {
    "combined": ("put", "pick up", "place", "open", "close", "left", "right"),
    "action": ("put", "pick up", "place", "turn on", "push", "open", "close"),
    "direction": ("left", "right", "bottom", "back", "middle", "top", "front"),
}


@dataclass(frozen=True)
class LossWeights:
    """Every loss hyperparameter, with working defaults.

    ``lambda_l1`` multiplies the (otherwise unit-weight) l1 term so the
    feature-space stage can be ablated away cleanly.
    """

    lambda_l1: float = 1.0
    lambda_con: float = 1.0
    lambda_pad: float = 0.5
    lambda_psm: float = 0.5
    tau_con: float = 0.1
    tau_psm: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    lambda_nonpatch: float = 1.0
    margin: float = 0.05
    topk_fraction: float = 0.25
    attn_last_n: int = 2

    def validate(self, backbone_depth: int | None = None) -> None:
        if min(self.lambda_l1, self.lambda_con, self.lambda_pad, self.lambda_psm) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau_con <= 0 or self.tau_psm <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.lambda_nonpatch < 0 or self.margin < 0:
            raise ValueError("lambda_nonpatch and margin must be nonnegative")
        if not 0 < self.topk_fraction <= 1:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.attn_last_n < 1:
            raise ValueError("attn_last_n must be positive")
        if backbone_depth is not None and self.attn_last_n > backbone_depth:
            raise ValueError(
                f"attn_last_n {self.attn_last_n} exceeds backbone depth {backbone_depth}"
            )


@dataclass
class AttentionShares:
    """Layer- and head-averaged text-to-vision attention shares (rows sum to 1).

    ``row_mass`` keeps each text row's pre-normalization attention mass on
    the vision tokens; the action-relevant row selection scores rows by it
    (after normalization every row sums to 1, which would make the
    selection vacuous).
    """

    shares: Var  # n_text x n_vision
    row_mass: np.ndarray | None = None
    from_patched_run: bool = False

    @property
    def values(self) -> np.ndarray:
        return self.shares.value

    def selection_mass(self) -> np.ndarray:
        if self.row_mass is not None:
            return self.row_mass
        return self.values.sum(axis=1)

    def validate(self) -> None:
        rows = self.values.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-6):
            raise ValueError("attention share rows do not sum to 1")


@dataclass
class OuterSample:
    """One batch item's inputs to the outer objective."""

    clean: ForwardTrace  # detached
    patched: ForwardTrace
    token_weights: np.ndarray


class PooledPatch:
    """Unit-normalized mask-weighted patch feature, with a degeneracy flag."""

    def __init__(self, direction: Var, degenerate: bool):
        self.direction = direction
        self.degenerate = degenerate


def probe_anchors(policy, phrases: Sequence[str]) -> np.ndarray:
    """Stack the policy's text anchors for a probe set into a K x D matrix."""
    if not phrases:
        raise ValueError("probe set is empty")
    return np.stack([policy.text_anchor(p) for p in phrases])


def _as_pair_lists(patched, clean):
    patched = list(patched) if isinstance(patched, (list, tuple)) else [patched]
    clean = list(clean) if isinstance(clean, (list, tuple)) else [clean]
    if len(patched) != len(clean):
        raise ValueError("patched and clean batches differ in length")
    return patched, clean


def l1_deviation(patched, clean) -> Var:
    """Sum of absolute feature differences, averaged over the batch."""
    patched, clean = _as_pair_lists(patched, clean)
    terms = []
    for p, c in zip(patched, clean):
        p, c = ad.as_var(p), ad.as_var(c)
        if p.value.shape != c.value.shape:
            raise ValueError(
                f"feature shape mismatch: {p.value.shape} vs {c.value.shape}"
            )
        terms.append(ad.vsum(ad.absval(ad.sub(p, c))))
    return _mean_vars(terms)


def _mean_vars(terms: Sequence[Var]) -> Var:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def _as_matrix(z) -> Var:
    if isinstance(z, (list, tuple)):
        return ad.stack_rows([ad.as_var(v) for v in z])
    z = ad.as_var(z)
    return z if z.value.ndim == 2 else ad.reshape(z, (1, z.value.size))


def infonce_repulsion(clean, patched, tau: float) -> Var:
    """Repulsive InfoNCE over cosine similarities.

    Clean vectors are the anchors, patched vectors the candidates; the
    positive pair sits on the diagonal. Maximizing the value pushes each
    patched feature away from its clean anchor.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    zc, zp = _as_matrix(clean), _as_matrix(patched)
    if zc.value.shape != zp.value.shape:
        raise ValueError("clean and patched feature batches differ in shape")
    n = zc.value.shape[0]
    for name, m in (("clean", zc), ("patched", zp)):
        norms = np.linalg.norm(m.value, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError(f"zero-norm vector in {name} batch (cosine undefined)")

    def rows_normalized(m: Var) -> Var:
        sq = ad.vsum(ad.mul(m, m), axis=1, keepdims=True)
        return ad.div(m, ad.vsqrt(sq))

    sims = ad.matmul(rows_normalized(zc), ad.transpose(rows_normalized(zp), (1, 0)))
    logits = ad.mul(sims, 1.0 / tau)
    diag = ad.vsum(ad.mul(logits, np.eye(n)), axis=1)
    lse = ad.logsumexp(logits, axis=1)
    return ad.neg(ad.vmean(ad.sub(diag, lse)))


def attention_shares(trace: ForwardTrace, last_n: int, patched_run: bool = False) -> AttentionShares:
    """Average heads, slice text-to-vision, row-normalize, average last layers."""
    if not trace.attention:
        raise ValueError("trace carries no attention maps")
    depth = len(trace.attention)
    if not 1 <= last_n <= depth:
        raise ValueError(f"last_n must be in [1, {depth}], got {last_n}")
    p, t = trace.n_vision, trace.n_text
    text_rows = np.arange(p, p + t)
    vision_cols = np.arange(p)
    per_layer = []
    mass = np.zeros(t)
    for attn in trace.attention[depth - last_n :]:
        head_mean = ad.vmean(attn, axis=0)
        tv = ad.take(ad.take(head_mean, text_rows, axis=0), vision_cols, axis=1)
        row_sums = ad.vsum(tv, axis=1, keepdims=True)
        mass += row_sums.value[:, 0]
        per_layer.append(ad.div(tv, row_sums))
    return AttentionShares(
        shares=_mean_vars(per_layer), row_mass=mass / last_n, from_patched_run=patched_run
    )


def _topk_rows(mass: np.ndarray, fraction: float) -> np.ndarray:
    """Text rows with the largest clean attention mass; ties to lower index."""
    t = mass.shape[0]
    k = min(t, max(1, math.ceil(fraction * t)))
    order = np.argsort(-mass, kind="stable")
    return np.sort(order[:k])


def pad_loss(
    b_patched: AttentionShares,
    b_clean: AttentionShares,
    token_weights: np.ndarray,
    weights: LossWeights,
) -> Var:
    """Attention dominance: reward patch-routed share increments on the
    action-relevant text rows, penalize non-patch increments, and demand a
    margin over the strongest non-patch route.

    Row selection uses only the clean run and is a constant of the graph.
    """
    bp, bc = b_patched.shares, b_clean.shares
    if bp.value.shape != bc.value.shape:
        raise ValueError(
            f"share shape mismatch: patched {bp.value.shape}, clean {bc.value.shape}"
        )
    token_weights = np.asarray(token_weights, dtype=np.float64)
    if token_weights.shape != (bp.value.shape[1],):
        raise ValueError("token weights do not match the vision token count")
    selected = _topk_rows(b_clean.selection_mass(), weights.topk_fraction)
    increment = ad.take(ad.sub(bp, bc), selected, axis=0)
    on_patch = ad.vsum(ad.mul(increment, token_weights), axis=1)
    off_patch = ad.mul(increment, 1.0 - token_weights)
    d_non = ad.vsum(off_patch, axis=1)
    non_top = ad.vmax(off_patch, axis=1)
    hinge = ad.relu(ad.sub(weights.margin, ad.sub(on_patch, non_top)))
    return ad.sub(
        ad.sub(ad.vmean(on_patch), ad.mul(ad.vmean(ad.relu(d_non)), weights.lambda_nonpatch)),
        ad.vmean(hinge),
    )


def pooled_patch_feature(z_v, token_weights: np.ndarray, eps: float = 1e-6) -> PooledPatch:
    """Mask-weighted token mean, l2-normalized; zero-mass masks flag degenerate."""
    z_v = ad.as_var(z_v)
    token_weights = np.asarray(token_weights, dtype=np.float64)
    if token_weights.shape != (z_v.value.shape[0],):
        raise ValueError("token weights do not match the token count")
    weighted = ad.vsum(ad.mul(z_v, token_weights[:, None]), axis=0)
    pooled = ad.mul(weighted, 1.0 / (float(token_weights.sum()) + eps))
    if np.linalg.norm(pooled.value) < 1e-9:
        return PooledPatch(Var(np.zeros(z_v.value.shape[1])), degenerate=True)
    unit = ad.div(pooled, ad.vsqrt(ad.vsum(ad.mul(pooled, pooled))))
    return PooledPatch(unit, degenerate=False)


def psm_loss(
    v_patch: PooledPatch,
    probes: np.ndarray,
    instruction_anchor: np.ndarray,
    weights: LossWeights,
) -> Var:
    """Semantic misalignment: log-sum-exp pull toward any probe anchor minus
    a push along the instruction embedding. Degenerate pooled features
    contribute exactly zero."""
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[0] == 0:
        raise ValueError("probe matrix must be K x D with K >= 1")
    if v_patch.degenerate:
        return Var(0.0)
    v = v_patch.direction
    sims = ad.vsum(ad.mul(probes, v), axis=1)
    pull = ad.logsumexp(ad.mul(sims, 1.0 / weights.tau_psm))
    push = ad.vsum(ad.mul(v, np.asarray(instruction_anchor, dtype=np.float64)))
    return ad.sub(ad.mul(pull, weights.alpha), ad.mul(push, weights.beta))


def trace_features(trace: ForwardTrace) -> FeaturePair:
    return FeaturePair(tokens=trace.z_v, pooled=ad.vmean(trace.z_v, axis=0))


def j_tr(clean_feats, patched_feats, weights: LossWeights) -> Var:
    """Feature-space objective: weighted l1 deviation plus repulsive InfoNCE."""
    clean = list(clean_feats) if isinstance(clean_feats, (list, tuple)) else [clean_feats]
    patched = list(patched_feats) if isinstance(patched_feats, (list, tuple)) else [patched_feats]
    l1 = l1_deviation([p.tokens for p in patched], [c.tokens for c in clean])
    con = infonce_repulsion([c.pooled for c in clean], [p.pooled for p in patched], weights.tau_con)
    return ad.add(ad.mul(l1, weights.lambda_l1), ad.mul(con, weights.lambda_con))


def _instruction_anchor(clean: ForwardTrace) -> np.ndarray:
    anchor = clean.text_states.value.mean(axis=0)
    norm = np.linalg.norm(anchor)
    if norm < 1e-12:
        raise ValueError("degenerate instruction embedding")
    return anchor / norm


def j_out(samples: Sequence[OuterSample], probes: np.ndarray, weights: LossWeights):
    """Full outer objective over a batch; returns (scalar, component values).

    Components are the unweighted batch means of each loss, recorded for
    run histories.
    """
    if not samples:
        raise ValueError("empty batch")
    clean_feats = [trace_features(s.clean) for s in samples]
    patched_feats = [trace_features(s.patched) for s in samples]
    l1 = l1_deviation([f.tokens for f in patched_feats], [f.tokens for f in clean_feats])
    con = infonce_repulsion(
        [f.pooled for f in clean_feats], [f.pooled for f in patched_feats], weights.tau_con
    )
    pad_terms, psm_terms = [], []
    for s in samples:
        b_c = attention_shares(s.clean, weights.attn_last_n, patched_run=False)
        b_p = attention_shares(s.patched, weights.attn_last_n, patched_run=True)
        pad_terms.append(pad_loss(b_p, b_c, s.token_weights, weights))
        pooled = pooled_patch_feature(s.patched.z_v, s.token_weights)
        psm_terms.append(psm_loss(pooled, probes, _instruction_anchor(s.clean), weights))
    pad = _mean_vars(pad_terms)
    psm = _mean_vars(psm_terms)
    total = ad.add(
        ad.add(ad.mul(l1, weights.lambda_l1), ad.mul(con, weights.lambda_con)),
        ad.add(ad.mul(pad, weights.lambda_pad), ad.mul(psm, weights.lambda_psm)),
    )
    parts = {
        "l1": float(l1.value),
        "con": float(con.value),
        "pad": float(pad.value),
        "psm": float(psm.value),
    }
    return total, parts
