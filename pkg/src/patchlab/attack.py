"""Bi-level universal patch optimization.

Per mini-batch: an inner PGD loop finds one small invisible perturbation
per item that *reduces* the feature objective (hardening the surrogate
locally), then K outer steps ascend the full objective w.r.t. the shared
patch with AdamW under fresh placement draws, clamping the patch to [0,1]
after every step. Every random stream derives from the master seed, so a
run is bit-reproducible and any recorded step can be replayed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .losses import LossWeights, OuterSample, j_out, j_tr, trace_features
from .optim import AdamState, adamw_update, linf_project
from .policy import Instruction, Policy
from .render import (
    PatchTexture,
    TransformLimits,
    TransformSample,
    paste,
    rasterize,
    sample_transform,
)

__all__ = [
    "AttackConfig",
    "InnerResult",
    "StepRecord",
    "RunHistory",
    "inner_minimize",
    "outer_step",
    "run_upa_rfas",
    "replay_outer_objective",
]


@dataclass(frozen=True)
class AttackConfig:
    """Every knob of the bi-level attack, with documented defaults."""

    eps_sigma: float = 8 / 255
    eta_sigma: float = 2 / 255
    eta_delta: float = 0.01
    inner_steps: int = 5
    outer_steps: int = 10
    epochs: int = 3
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    patch_height: int = 8
    patch_width: int = 8
    area_budget: int = 65
    theta_max: float = 0.5
    skew_max: float = 0.0
    master_seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.eps_sigma < 0:
            raise ValueError("eps_sigma must be nonnegative")
        if self.eta_sigma <= 0 or self.eta_delta <= 0:
            raise ValueError("step sizes must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be nonnegative")
        if self.outer_steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("outer_steps, epochs, and batch_size must be positive")
        if self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("patch dims must be positive")
        if self.patch_height * self.patch_width >= self.area_budget:
            raise ValueError(
                f"patch area {self.patch_height * self.patch_width} must be "
                f"strictly below the area budget {self.area_budget}"
            )
        self.weights.validate()

    @property
    def limits(self) -> TransformLimits:
        return TransformLimits(theta_max=self.theta_max, skew_max=self.skew_max)

    @property
    def patch_shape(self) -> tuple[int, int]:
        return (self.patch_height, self.patch_width)


class InnerResult(NamedTuple):
    sigma: np.ndarray
    losses: tuple[float, ...]  # J_in before each step


@dataclass
class StepRecord:
    """One outer step, with enough state to replay its objective bit-exactly."""

    epoch: int
    batch_index: int
    outer_k: int
    global_step: int
    item_indices: tuple[int, ...]
    j_out: float
    parts: dict[str, float]
    transforms: tuple[TransformSample, ...]
    inner_losses: tuple[tuple[float, ...], ...]
    delta_before: np.ndarray
    sigmas: tuple[np.ndarray, ...]


@dataclass
class RunHistory:
    records: list[StepRecord] = field(default_factory=list)

    def epoch_mean_jout(self, epoch: int) -> float:
        vals = [r.j_out for r in self.records if r.epoch == epoch]
        if not vals:
            raise ValueError(f"no records for epoch {epoch}")
        return float(np.mean(vals))

    def to_csv(self, path) -> None:
        header = (
            "epoch,batch,outer_k,global_step,j_out,l1,con,pad,psm,"
            "j_in_first,j_in_last,transforms\n"
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header)
            for r in self.records:
                inner_first = r.inner_losses[0][0] if r.inner_losses and r.inner_losses[0] else ""
                inner_last = r.inner_losses[0][-1] if r.inner_losses and r.inner_losses[0] else ""
                tf = ";".join(
                    f"{t.dx}:{t.dy}:{t.theta!r}:{t.skew!r}" for t in r.transforms
                )
                fh.write(
                    f"{r.epoch},{r.batch_index},{r.outer_k},{r.global_step},"
                    f"{r.j_out!r},{r.parts['l1']!r},{r.parts['con']!r},"
                    f"{r.parts['pad']!r},{r.parts['psm']!r},"
                    f"{inner_first!r},{inner_last!r},{tf}\n"
                )


def worker_count(n_jobs: int) -> int:
    """Worker cap from the UPA_THREADS env var (default 1 = sequential)."""
    try:
        cap = int(os.environ.get("UPA_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


def _detached_features(policy: Policy, x: np.ndarray):
    feats = policy.features(x)
    from .policy import FeaturePair

    return FeaturePair(tokens=Var(feats.tokens.value), pooled=Var(feats.pooled.value))


def inner_minimize(
    x: np.ndarray,
    delta: np.ndarray,
    transform: TransformSample,
    surrogate: Policy,
    cfg: AttackConfig,
) -> InnerResult:
    """PGD descent on the feature objective w.r.t. a full-frame perturbation.

    The patch and the placement stay fixed; the perturbation starts at zero
    and every iterate is projected back onto the l-inf ball of radius
    ``eps_sigma``. Inside the pasted footprint the perturbation is
    irrelevant (the paste overwrites it).
    """
    if cfg.inner_steps < 0:
        raise ValueError("inner_steps must be nonnegative")
    if cfg.eps_sigma < 0:
        raise ValueError("eps_sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    frame = (x.shape[0], x.shape[1])
    clean = _detached_features(surrogate, x)
    raster = rasterize(delta, transform, frame)
    sigma = np.zeros_like(x)
    losses = []
    for _ in range(cfg.inner_steps):
        sigma_var = Var(sigma)
        patched_frame, _ = paste(ad.add(Var(x), sigma_var), delta, transform, raster=raster)
        feats = surrogate.features(patched_frame)
        j_in = j_tr([clean], [feats], cfg.weights)
        losses.append(float(j_in.value))
        grads = ad.backward(j_in, [sigma_var])
        g = grads.get(id(sigma_var), np.zeros_like(sigma))
        sigma = linf_project(sigma - cfg.eta_sigma * g, cfg.eps_sigma)
    return InnerResult(sigma=sigma, losses=tuple(losses))


def _outer_objective(
    items: Sequence[tuple[np.ndarray, Instruction]],
    sigmas: Sequence[np.ndarray],
    delta: np.ndarray,
    surrogate: Policy,
    cfg: AttackConfig,
    transforms: Sequence[TransformSample],
    probes: np.ndarray,
    clean_traces: Sequence,
):
    """Build the batch objective graph; returns (total Var, parts, delta leaf)."""
    delta_var = Var(delta)
    grid = surrogate.spec.grid
    samples = []
    for (x, instr), sigma, transform, clean in zip(items, sigmas, transforms, clean_traces):
        frame = (x.shape[0], x.shape[1])
        raster = rasterize(delta, transform, frame, grid=grid)
        patched_frame, mask = paste(Var(x + sigma), delta_var, transform, raster=raster)
        trace = surrogate.forward(patched_frame, instr)
        samples.append(
            OuterSample(clean=clean, patched=trace, token_weights=mask.token_weights)
        )
    total, parts = j_out(samples, probes, cfg.weights)
    return total, parts, delta_var


def outer_step(
    items: Sequence[tuple[np.ndarray, Instruction]],
    sigmas: Sequence[np.ndarray],
    delta: np.ndarray,
    surrogate: Policy,
    cfg: AttackConfig,
    opt_state: AdamState,
    transforms: Sequence[TransformSample],
    probes: np.ndarray,
    clean_traces: Sequence,
):
    """One ascent step on the patch: AdamW on the negated objective, then clamp."""
    total, parts, delta_var = _outer_objective(
        items, sigmas, delta, surrogate, cfg, transforms, probes, clean_traces
    )
    grads = ad.backward(total, [delta_var])
    g = grads.get(id(delta_var), np.zeros_like(delta))
    new_delta, new_state = adamw_update(
        delta,
        -g,
        opt_state,
        lr=cfg.eta_delta,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    new_delta = np.clip(new_delta, 0.0, 1.0)
    return new_delta, new_state, float(total.value), parts


def run_upa_rfas(
    dataset: Sequence[tuple[np.ndarray, str]],
    surrogate: Policy,
    cfg: AttackConfig,
    probes: np.ndarray | None = None,
) -> tuple[PatchTexture, RunHistory]:
    """Full two-phase optimization over a dataset of (image, instruction).

    All randomness (patch init, batch order, placement draws) derives from
    ``cfg.master_seed``; identical inputs give a bit-identical patch and
    history.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")
    if probes is None:
        from .losses import PROBE_SETS, probe_anchors

        probes = probe_anchors(surrogate, PROBE_SETS["combined"])
    frame = (surrogate.spec.height, surrogate.spec.width)
    init_ss, shuffle_ss, inner_ss, outer_ss = np.random.SeedSequence(
        cfg.master_seed
    ).spawn(4)
    rng_init = np.random.default_rng(init_ss)
    rng_shuffle = np.random.default_rng(shuffle_ss)
    rng_inner = np.random.default_rng(inner_ss)
    rng_outer = np.random.default_rng(outer_ss)

    delta = rng_init.uniform(0.0, 1.0, size=(cfg.patch_height, cfg.patch_width, 3))
    items = [
        (np.asarray(x, dtype=np.float64), surrogate.tokenize(text)) for x, text in dataset
    ]
    clean_traces = [surrogate.forward(x, instr).detach() for x, instr in items]

    state = AdamState.fresh(delta.shape)
    history = RunHistory()
    global_step = 0
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(len(items))
        batches = [
            order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)
        ]
        for batch_index, batch in enumerate(batches):
            batch = [int(i) for i in batch]
            inner_transforms = [
                sample_transform(rng_inner, frame, cfg.patch_shape, cfg.limits)
                for _ in batch
            ]
            jobs = [
                (items[i][0], delta, t) for i, t in zip(batch, inner_transforms)
            ]
            workers = worker_count(len(jobs))
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    inner_results = list(
                        pool.map(
                            lambda args: inner_minimize(args[0], args[1], args[2], surrogate, cfg),
                            jobs,
                        )
                    )
            else:
                inner_results = [
                    inner_minimize(x, d, t, surrogate, cfg) for x, d, t in jobs
                ]
            sigmas = tuple(r.sigma for r in inner_results)
            inner_losses = tuple(r.losses for r in inner_results)
            batch_items = [items[i] for i in batch]
            batch_cleans = [clean_traces[i] for i in batch]
            for k in range(cfg.outer_steps):
                transforms = tuple(
                    sample_transform(rng_outer, frame, cfg.patch_shape, cfg.limits)
                    for _ in batch
                )
                delta_before = delta.copy()
                delta, state, value, parts = outer_step(
                    batch_items,
                    sigmas,
                    delta,
                    surrogate,
                    cfg,
                    state,
                    transforms,
                    probes,
                    batch_cleans,
                )
                history.records.append(
                    StepRecord(
                        epoch=epoch,
                        batch_index=batch_index,
                        outer_k=k,
                        global_step=global_step,
                        item_indices=tuple(batch),
                        j_out=value,
                        parts=parts,
                        transforms=transforms,
                        inner_losses=inner_losses,
                        delta_before=delta_before,
                        sigmas=sigmas,
                    )
                )
                global_step += 1
    return PatchTexture(delta), history


def replay_outer_objective(
    record: StepRecord,
    dataset: Sequence[tuple[np.ndarray, str]],
    surrogate: Policy,
    cfg: AttackConfig,
    probes: np.ndarray,
) -> float:
    """Recompute a recorded step's objective from its stored state.

    Bit-identical to the recorded value: the graph is rebuilt on the same
    inputs in the same op order.
    """
    items = [
        (
            np.asarray(dataset[i][0], dtype=np.float64),
            surrogate.tokenize(dataset[i][1]),
        )
        for i in record.item_indices
    ]
    clean_traces = [surrogate.forward(x, instr).detach() for x, instr in items]
    total, _, _ = _outer_objective(
        items,
        record.sigmas,
        record.delta_before,
        surrogate,
        cfg,
        record.transforms,
        probes,
        clean_traces,
    )
    return float(total.value)
