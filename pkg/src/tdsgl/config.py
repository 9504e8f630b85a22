"""Flat ``section.key`` configuration and the named experiment variants."""

from __future__ import annotations

from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .trainer import Hyperparameters

# config key -> Hyperparameters field
HYPER_KEYS = {
    "model.dim": "dim",
    "model.layers": "layers",
    "model.self_loop": "self_loop",
    "model.init_std": "init_std",
    "ssl.tau": "tau",
    "ssl.lambda": "ssl_lambda",
    "ssl.full_contrast": "full_contrast",
    "ssl.include_positive_in_denominator": "include_positive",
    "mask.beta": "beta",
    "mask.beta_item": "beta_item",
    "aug.kind": "aug_kind",
    "aug.rho": "rho",
    "fe.kind": "fe_kind",
    "reg.mu": "mu",
    "train.lr": "lr",
    "train.batch": "batch",
    "train.epochs": "epochs",
    "train.patience": "patience",
    "train.seed": "seed",
    "eval.k": "eval_k",
    "eval.every": "eval_every",
}

# keys consumed outside the hyperparameters
RUN_KEYS = {
    "dataset.path": "dataset",
    "dataset.format": "fmt",
    "split.ratios": "ratios",
    "split.seed": "split_seed",
    "run.variant": "variant",
    "run.repeats": "repeats",
    "run.out": "out",
    "run.jobs": "jobs",
}

_FLAG_FIELDS = ("ssl_enabled", "use_mask", "use_aux", "fe_kind")

# Every variant pins the full objective/encoder flag combination.
VARIANTS: dict[str, dict] = {
    "tdsgl": dict(ssl_enabled=True, use_mask=True, use_aux=True, fe_kind="linear"),
    "tdsgl-tf": dict(ssl_enabled=True, use_mask=True, use_aux=False, fe_kind="linear"),
    "tdsgl-gif": dict(ssl_enabled=True, use_mask=False, use_aux=True, fe_kind="linear"),
    "tdsgl-nl": dict(ssl_enabled=True, use_mask=True, use_aux=True, fe_kind="nl"),
    "tdsgl-nl+w": dict(ssl_enabled=True, use_mask=True, use_aux=True, fe_kind="nl+w"),
    "sgl-ed": dict(ssl_enabled=True, use_mask=False, use_aux=False, fe_kind="linear", aug_kind="ed"),
    "sgl-nd": dict(ssl_enabled=True, use_mask=False, use_aux=False, fe_kind="linear", aug_kind="nd"),
    "sgl-rw": dict(ssl_enabled=True, use_mask=False, use_aux=False, fe_kind="linear", aug_kind="rw"),
    "lightgcn": dict(ssl_enabled=False, use_mask=False, use_aux=False, fe_kind="linear"),
}

ABLATION_VARIANTS = ("sgl-ed", "tdsgl-tf", "tdsgl-gif", "tdsgl")


def apply_variant(hyper: Hyperparameters, variant: str) -> Hyperparameters:
    try:
        flags = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return hyper.replace(**flags)


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[_normalize_key(key)] = v
    return out


def load_config(path: str) -> dict:
    """Read a TOML file into a flat ``{"section.key": value}`` mapping."""
    with open(path, "rb") as fh:
        return flatten(tomllib.load(fh))


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` where value is parsed as a TOML value, else kept as a string."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return _normalize_key(key), value


@dataclass
class ExperimentPlan:
    variant: str = "tdsgl"
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    dataset: str | None = None
    fmt: str = "auto"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    sweep: list[int] | None = None
    repeats: int = 1
    out: str = "runs"
    jobs: int = 1

    @property
    def resolved_hyper(self) -> Hyperparameters:
        return apply_variant(self.hyper, self.variant)


def build_plan(settings: dict) -> ExperimentPlan:
    """Turn a flat key mapping (config merged with overrides) into a plan."""
    hyper_kwargs, plan_kwargs = {}, {}
    for key, value in settings.items():
        key = _normalize_key(key)
        if key in HYPER_KEYS:
            hyper_kwargs[HYPER_KEYS[key]] = value
        elif key in RUN_KEYS:
            plan_kwargs[RUN_KEYS[key]] = value
        elif key == "sweep.beta":
            plan_kwargs["sweep"] = [int(b) for b in value]
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "ratios" in plan_kwargs:
        plan_kwargs["ratios"] = tuple(float(r) for r in plan_kwargs["ratios"])
    plan = ExperimentPlan(hyper=Hyperparameters(**hyper_kwargs), **plan_kwargs)
    apply_variant(plan.hyper, plan.variant)
    return plan
