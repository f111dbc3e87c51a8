"""Command-line entry points: train, eval, analyze, gradcheck, export.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 artifact error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import analyze_alignment, transfer_eval
from .artifact import ArtifactError, load_patch, save_patch, write_ppm
from .attack import run_upa_rfas
from .config import ConfigError, RunConfig, load_config
from .datagen import generate_dataset
from .losses import (
    PROBE_SETS,
    AttentionShares,
    LossWeights,
    OuterSample,
    infonce_repulsion,
    j_out,
    l1_deviation,
    pad_loss,
    pooled_patch_feature,
    probe_anchors,
    psm_loss,
)
from .policy import PolicySpec, build_policy
from .render import PatchTexture, TransformSample, paste, token_mask

__all__ = ["main", "cmd_train", "cmd_eval", "cmd_analyze", "cmd_gradcheck", "cmd_export"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_VERIFY = 4

GRADCHECK_TOL = 1e-4
KINK_CLEARANCE = 1e-3


def _out_dir(out: str | None) -> Path:
    path = Path(out) if out else Path("patchlab_out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.manifest_text().encode("utf-8")).hexdigest()[:16]


def cmd_train(config_path: str, out: str | None, seed_override: int | None = None) -> int:
    cfg = load_config(config_path, seed_override=seed_override)
    out_path = _out_dir(out)
    surrogate = build_policy(cfg.surrogate, "surrogate")
    dataset = generate_dataset(
        cfg.dataset_count, cfg.dataset_seed, cfg.surrogate.height, cfg.surrogate.width
    )
    probes = probe_anchors(surrogate, cfg.probe_phrases)
    patch, history = run_upa_rfas(dataset, surrogate, cfg.attack, probes=probes)
    metadata = {
        "config_hash": _config_hash(cfg),
        "master_seed": str(cfg.attack.master_seed),
        "probe_set": cfg.probe_set,
        "lambda_l1": repr(cfg.attack.weights.lambda_l1),
        "lambda_con": repr(cfg.attack.weights.lambda_con),
        "lambda_pad": repr(cfg.attack.weights.lambda_pad),
        "lambda_psm": repr(cfg.attack.weights.lambda_psm),
    }
    save_patch(out_path / "patch.upaf", patch, metadata)
    history.to_csv(out_path / "history.csv")
    (out_path / "manifest.txt").write_text(cfg.manifest_text(), encoding="utf-8")
    first = history.epoch_mean_jout(0)
    last = history.epoch_mean_jout(cfg.attack.epochs - 1)
    print(f"trained patch -> {out_path / 'patch.upaf'}")
    print(f"mean J_out: first epoch {first:.6f}, last epoch {last:.6f}")
    return EXIT_OK


def cmd_eval(patch_path: str, config_path: str, out: str | None) -> int:
    patch, _meta = load_patch(patch_path)
    cfg = load_config(config_path)
    out_path = _out_dir(out)
    victim = build_policy(cfg.victim, "victim")
    eval_set = generate_dataset(
        cfg.eval_count, cfg.eval_seed, cfg.victim.height, cfg.victim.width
    )
    metrics = transfer_eval(
        patch,
        victim,
        eval_set,
        theta_act=cfg.theta_act,
        n_placements=cfg.eval_placements,
        seed=cfg.eval_seed,
        limits=cfg.attack.limits,
    )
    lines = ["kind,arm,item,placement,dx,dy,theta,skew,feature_dev,action_dev,exceeds"]
    learned = metrics.arms["learned"]
    row = 0
    for i in range(metrics.n_items):
        for j in range(metrics.n_placements):
            t = metrics.transforms[i][j]
            fd = float(learned.feature_devs[row])
            adev = float(learned.action_devs[row])
            lines.append(
                f"detail,learned,{i},{j},{t.dx},{t.dy},{t.theta!r},{t.skew!r},"
                f"{fd!r},{adev!r},{int(adev > metrics.theta_act)}"
            )
            row += 1
    for name in ("learned", "random", "blank"):
        arm = metrics.arms[name]
        lines.append(
            f"summary,{name},,,,,,,{arm.mean_feature_dev!r},{arm.mean_action_dev!r},"
            f"{arm.attack_rate(metrics.theta_act)!r}"
        )
    (out_path / "transfer.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"theta_act = {metrics.theta_act:.6f}")
    for name in ("learned", "random", "blank"):
        arm = metrics.arms[name]
        print(
            f"{name}: feature_dev {arm.mean_feature_dev:.6f} "
            f"action_dev {arm.mean_action_dev:.6f} "
            f"attack_rate {arm.attack_rate(metrics.theta_act):.3f}"
        )
    return EXIT_OK


def cmd_analyze(config_path: str, out: str | None, patch_path: str | None = None) -> int:
    cfg = load_config(config_path)
    out_path = _out_dir(out)
    surrogate = build_policy(cfg.surrogate, "surrogate")
    victim = build_policy(cfg.victim, "victim")
    images = [
        x
        for x, _ in generate_dataset(
            cfg.analysis_count, cfg.analysis_seed, cfg.surrogate.height, cfg.surrogate.width
        )
    ]
    if patch_path is not None:
        patch, _ = load_patch(patch_path)
    else:
        patch_rng = np.random.default_rng(np.random.SeedSequence([cfg.analysis_seed, 1]))
        patch = PatchTexture.random(patch_rng, cfg.attack.patch_height, cfg.attack.patch_width)
    report = analyze_alignment(
        surrogate,
        victim,
        images,
        patch,
        seed=cfg.analysis_seed,
        limits=cfg.attack.limits,
        cca_k=cfg.cca_k,
    )
    (out_path / "alignment.txt").write_text(report.to_text(), encoding="utf-8")
    (out_path / "bounds.csv").write_text(report.bounds_csv(), encoding="utf-8")
    print(
        f"sigma_min {report.sigma_min:.6f}  epsilon_e {report.epsilon_e:.6f}  "
        f"R^2 {report.r_squared:.6f}  top CCA {report.cca[0]:.6f}"
    )
    if not report.all_l2_ok:
        print("FAIL: an l2 displacement bound was violated (implementation bug)")
        return EXIT_VERIFY
    return EXIT_OK


def _tiny_policy():
    spec = PolicySpec(
        seed=5,
        height=8,
        width=8,
        grid=4,
        branch_dims=(6, 6),
        vision_depth=1,
        token_dim=8,
        depth=2,
        heads=2,
    )
    return build_policy(spec, "gradcheck")


def _pad_clearance(b_p, b_c, token_weights, weights) -> float:
    """Distance of the PAD inputs to the nearest ReLU/max kink."""
    from .losses import _topk_rows

    selected = _topk_rows(b_c.sum(axis=1), weights.topk_fraction)
    inc = (b_p - b_c)[selected]
    off = inc * (1.0 - token_weights)
    d_patch = (inc * token_weights).sum(axis=1)
    d_non = off.sum(axis=1)
    top2 = np.sort(off, axis=1)[:, -2:]
    gaps = top2[:, 1] - top2[:, 0]
    hinge = weights.margin - (d_patch - off.max(axis=1))
    return float(min(np.abs(d_non).min(), np.abs(hinge).min(), gaps.min()))


def _gradcheck_cases(seed: int):
    """One (name, program, inputs, wrt) tuple per loss, nudged off kinks."""
    rng = np.random.default_rng(np.random.SeedSequence([987, seed]))
    weights = LossWeights()
    cases = []

    z_clean = rng.normal(size=24)
    z_patched = rng.normal(size=24) + 0.01  # off the |.| kink at equality
    cases.append(
        (
            "l1",
            lambda v: l1_deviation(v["z_patched"], v["z_clean"]),
            {"z_patched": z_patched, "z_clean": z_clean},
            {"z_patched", "z_clean"},
        )
    )

    clean = rng.normal(size=(4, 6))
    patched = rng.normal(size=(4, 6))
    cases.append(
        (
            "infonce",
            lambda v: infonce_repulsion(v["clean"], v["patched"], weights.tau_con),
            {"clean": clean, "patched": patched},
            {"patched"},
        )
    )

    t_rows, p_cols = 6, 16
    while True:
        b_c = rng.uniform(0.1, 1.0, size=(t_rows, p_cols))
        b_p = b_c + rng.normal(scale=0.2, size=(t_rows, p_cols))
        m_z = rng.uniform(0.0, 1.0, size=p_cols)
        if _pad_clearance(b_p, b_c, m_z, weights) > KINK_CLEARANCE:
            break
    b_c_shares = AttentionShares(ad.Var(b_c))
    cases.append(
        (
            "pad",
            lambda v: pad_loss(AttentionShares(v["b_p"]), b_c_shares, m_z, weights),
            {"b_p": b_p},
            {"b_p"},
        )
    )

    z_v = rng.normal(size=(16, 8))
    mask_w = rng.uniform(0.2, 1.0, size=16)
    probes = rng.normal(size=(4, 8))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    t_hat = rng.normal(size=8)
    t_hat /= np.linalg.norm(t_hat)
    cases.append(
        (
            "psm",
            lambda v: psm_loss(pooled_patch_feature(v["z_v"], mask_w), probes, t_hat, weights),
            {"z_v": z_v},
            {"z_v"},
        )
    )
    return cases


def _jout_case(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([988, seed]))
    policy = _tiny_policy()
    weights = LossWeights()
    x = rng.uniform(0.0, 1.0, size=(8, 8, 3))
    delta = rng.uniform(0.05, 0.95, size=(4, 4, 3))
    transform = TransformSample(
        dx=int(rng.integers(0, 5)), dy=int(rng.integers(0, 5)), theta=float(rng.uniform(-0.4, 0.4))
    )
    instr = policy.tokenize("pick up the block")
    clean = policy.forward(x, instr).detach()
    probes = probe_anchors(policy, PROBE_SETS["combined"][:3])

    def program(v):
        frame, mask = paste(x, v["delta"], transform)
        trace = policy.forward(frame, instr)
        tw = token_mask(mask.pixels, policy.spec.grid)
        total, _ = j_out([OuterSample(clean=clean, patched=trace, token_weights=tw)], probes, weights)
        return total

    return program, {"delta": delta}, {"delta"}


def cmd_gradcheck(seeds: int = 5) -> int:
    """Finite-difference verification of every loss and the full outer path."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, program, inputs, wrt in _gradcheck_cases(seed):
            report = ad.check_gradient(program, inputs, wrt)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_err)
        program, inputs, wrt = _jout_case(seed)
        report = ad.check_gradient(program, inputs, wrt)
        worst["j_out"] = max(worst.get("j_out", 0.0), report.max_rel_err)
    status = EXIT_OK
    for name in ("l1", "infonce", "pad", "psm", "j_out"):
        err = worst[name]
        verdict = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} {verdict}")
        if err >= GRADCHECK_TOL:
            status = EXIT_VERIFY
    return status


def cmd_export(patch_path: str, out: str | None, scale: int = 1) -> int:
    patch, _ = load_patch(patch_path)
    if out is None:
        out = str(Path(patch_path).with_suffix(".ppm"))
    write_ppm(out, patch, scale=scale)
    print(f"wrote {out}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlab",
        description="Universal transferable adversarial patch lab for toy VLA policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="optimize a universal patch on the surrogate")
    train.add_argument("--config", required=True)
    train.add_argument("--out", default=None)
    train.add_argument("--seed-override", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate patch transfer to the victim")
    ev.add_argument("--patch", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--out", default=None)

    an = sub.add_parser("analyze", help="fit the alignment map and check its bounds")
    an.add_argument("--config", required=True)
    an.add_argument("--out", default=None)
    an.add_argument("--patch", default=None)

    sub.add_parser("gradcheck", help="finite-difference verification of the losses")

    ex = sub.add_parser("export", help="export a patch artifact as binary PPM")
    ex.add_argument("--patch", required=True)
    ex.add_argument("--out", default=None)
    ex.add_argument("--scale", type=int, default=1)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed_override)
        if args.command == "eval":
            return cmd_eval(args.patch, args.config, args.out)
        if args.command == "analyze":
            return cmd_analyze(args.config, args.out, args.patch)
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "export":
            return cmd_export(args.patch, args.out, args.scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
