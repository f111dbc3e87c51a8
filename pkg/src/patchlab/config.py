"""Run configuration: flat dotted-key text files with documented defaults.

Every key has a default; unknown keys are errors (a silently ignored typo
in a loss-weight name would invalidate an ablation). The fully resolved
configuration is written into the run manifest so no default stays hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attack import AttackConfig
from .losses import PROBE_SETS, LossWeights
from .policy import PolicySpec

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "parse_config", "resolve", "load_config"]


class ConfigError(Exception):
    """Malformed, unknown, or inconsistent configuration input."""


# key -> default; the default's type decides how the value string is parsed.
DEFAULTS: dict[str, object] = {
    "surrogate.seed": 0,
    "surrogate.height": 32,
    "surrogate.width": 32,
    "surrogate.grid": 8,
    "surrogate.branch1": 16,
    "surrogate.branch2": 16,
    "surrogate.vision_depth": 2,
    "surrogate.token_dim": 32,
    "surrogate.depth": 4,
    "surrogate.heads": 4,
    "surrogate.vocab": 1024,
    "surrogate.action_dim": 7,
    "victim.seed": 1000,
    "victim.height": 32,
    "victim.width": 32,
    "victim.grid": 8,
    "victim.branch1": 24,
    "victim.branch2": 8,
    "victim.vision_depth": 3,
    "victim.token_dim": 48,
    "victim.depth": 3,
    "victim.heads": 6,
    "victim.vocab": 1024,
    "victim.action_dim": 7,
    "attack.eps_sigma": 8 / 255,
    "attack.eta_sigma": 2 / 255,
    "attack.eta_delta": 0.01,
    "attack.inner_steps": 5,
    "attack.outer_steps": 10,
    "attack.epochs": 3,
    "attack.batch_size": 4,
    "attack.beta1": 0.9,
    "attack.beta2": 0.999,
    "attack.adam_eps": 1e-8,
    "attack.weight_decay": 0.0,
    "attack.patch_height": 8,
    "attack.patch_width": 8,
    "attack.area_budget": 65,
    "attack.theta_max": 0.5,
    "attack.skew_max": 0.0,
    "attack.seed": 0,
    "loss.lambda_l1": 1.0,
    "loss.lambda_con": 1.0,
    "loss.lambda_pad": 0.5,
    "loss.lambda_psm": 0.5,
    "loss.tau_con": 0.1,
    "loss.tau_psm": 0.07,
    "loss.alpha": 1.0,
    "loss.beta": 1.0,
    "loss.lambda_nonpatch": 1.0,
    "loss.margin": 0.05,
    "loss.topk_fraction": 0.25,
    "loss.attn_last_n": 2,
    "probes.set": "combined",
    "probes.custom": "",
    "dataset.count": 16,
    "dataset.seed": 11,
    "eval.count": 20,
    "eval.seed": 402,
    "eval.placements": 5,
    "eval.theta_act": "auto",
    "analysis.count": 100,
    "analysis.seed": 77,
    "analysis.cca_k": 0,  # 0 means min(d_s, d_t)
}


@dataclass
class RunConfig:
    surrogate: PolicySpec
    victim: PolicySpec
    attack: AttackConfig
    probe_set: str
    probe_phrases: tuple[str, ...]
    dataset_count: int
    dataset_seed: int
    eval_count: int
    eval_seed: int
    eval_placements: int
    theta_act: float | None
    analysis_count: int
    analysis_seed: int
    cca_k: int | None
    resolved: dict[str, str]

    def manifest_text(self) -> str:
        lines = [f"{k} = {self.resolved[k]}" for k in sorted(self.resolved)]
        lines.append(f"probes.words = {'|'.join(self.probe_phrases)}")
        lines.append("anchor.image = gray-0.5")
        lines.append("artifact.format = UPAF v1")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; unknown keys raise."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _parse_value(key: str, value: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            raise TypeError("no boolean keys")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {value!r}: {exc}") from None


def _policy_spec(values: dict, prefix: str) -> PolicySpec:
    return PolicySpec(
        seed=values[f"{prefix}.seed"],
        height=values[f"{prefix}.height"],
        width=values[f"{prefix}.width"],
        grid=values[f"{prefix}.grid"],
        branch_dims=(values[f"{prefix}.branch1"], values[f"{prefix}.branch2"]),
        vision_depth=values[f"{prefix}.vision_depth"],
        token_dim=values[f"{prefix}.token_dim"],
        depth=values[f"{prefix}.depth"],
        heads=values[f"{prefix}.heads"],
        vocab=values[f"{prefix}.vocab"],
        action_dim=values[f"{prefix}.action_dim"],
    )


def resolve(raw: dict[str, str], seed_override: int | None = None) -> RunConfig:
    """Fill defaults, type-check, cross-validate, and build the run objects."""
    values = {k: _parse_value(k, v) for k, v in raw.items()}
    for key, default in DEFAULTS.items():
        values.setdefault(key, default)
    if seed_override is not None:
        values["attack.seed"] = int(seed_override)

    weights = LossWeights(
        lambda_l1=values["loss.lambda_l1"],
        lambda_con=values["loss.lambda_con"],
        lambda_pad=values["loss.lambda_pad"],
        lambda_psm=values["loss.lambda_psm"],
        tau_con=values["loss.tau_con"],
        tau_psm=values["loss.tau_psm"],
        alpha=values["loss.alpha"],
        beta=values["loss.beta"],
        lambda_nonpatch=values["loss.lambda_nonpatch"],
        margin=values["loss.margin"],
        topk_fraction=values["loss.topk_fraction"],
        attn_last_n=values["loss.attn_last_n"],
    )
    attack = AttackConfig(
        eps_sigma=values["attack.eps_sigma"],
        eta_sigma=values["attack.eta_sigma"],
        eta_delta=values["attack.eta_delta"],
        inner_steps=values["attack.inner_steps"],
        outer_steps=values["attack.outer_steps"],
        epochs=values["attack.epochs"],
        batch_size=values["attack.batch_size"],
        betas=(values["attack.beta1"], values["attack.beta2"]),
        adam_eps=values["attack.adam_eps"],
        weight_decay=values["attack.weight_decay"],
        patch_height=values["attack.patch_height"],
        patch_width=values["attack.patch_width"],
        area_budget=values["attack.area_budget"],
        theta_max=values["attack.theta_max"],
        skew_max=values["attack.skew_max"],
        master_seed=values["attack.seed"],
        weights=weights,
    )
    probe_set = values["probes.set"]
    if probe_set == "custom":
        phrases = tuple(p.strip() for p in str(values["probes.custom"]).split(",") if p.strip())
        if not phrases:
            raise ConfigError("probes.set = custom requires a nonempty probes.custom list")
    elif probe_set in PROBE_SETS:
        phrases = PROBE_SETS[probe_set]
    else:
        raise ConfigError(
            f"probes.set must be one of {sorted(PROBE_SETS) + ['custom']}, got {probe_set!r}"
        )

    theta_raw = str(values["eval.theta_act"])
    if theta_raw == "auto":
        theta_act = None
    else:
        try:
            theta_act = float(theta_raw)
        except ValueError:
            raise ConfigError("eval.theta_act must be 'auto' or a number") from None

    try:
        surrogate = _policy_spec(values, "surrogate")
        victim = _policy_spec(values, "victim")
        surrogate.validate()
        victim.validate()
        attack.validate()
        weights.validate(backbone_depth=min(surrogate.depth, victim.depth))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if surrogate.seed == victim.seed:
        raise ConfigError("surrogate.seed must differ from victim.seed")
    if values["dataset.seed"] == values["eval.seed"]:
        raise ConfigError("dataset.seed must differ from eval.seed")
    if values["dataset.count"] < 1 or values["eval.count"] < 1 or values["analysis.count"] < 1:
        raise ConfigError("dataset, eval, and analysis counts must be positive")
    if values["eval.placements"] < 1:
        raise ConfigError("eval.placements must be positive")
    if (surrogate.height, surrogate.width) != (victim.height, victim.width):
        raise ConfigError("surrogate and victim must share the frame size")

    resolved = {k: _format_value(values[k]) for k in DEFAULTS}
    return RunConfig(
        surrogate=surrogate,
        victim=victim,
        attack=attack,
        probe_set=probe_set,
        probe_phrases=phrases,
        dataset_count=values["dataset.count"],
        dataset_seed=values["dataset.seed"],
        eval_count=values["eval.count"],
        eval_seed=values["eval.seed"],
        eval_placements=values["eval.placements"],
        theta_act=theta_act,
        analysis_count=values["analysis.count"],
        analysis_seed=values["analysis.seed"],
        cca_k=values["analysis.cca_k"] or None,
        resolved=resolved,
    )


def _format_value(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return resolve(parse_config(text), seed_override=seed_override)
