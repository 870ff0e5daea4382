"""Run configuration: JSON schema validation, defaults, and hashing."""

from __future__ import annotations

import hashlib
import json
from importlib import resources

import jsonschema

from . import __version__
from .curves import ConventionalCurve
from .da_eq import INF_TRADERS, MarketSetup, Numerics
from .scenarios import DistributionSpec, ScenarioModel, sample

__all__ = [
    "load_schema",
    "load_config",
    "validate_config",
    "default_config",
    "config_hash",
    "build_setup",
    "build_model",
    "trader_count",
]


def load_schema() -> dict:
    with resources.files("two_settle.schema").joinpath("config.schema.json").open() as fh:
        return json.load(fh)


def _apply_defaults(obj, schema, root):
    """Fill in schema defaults recursively (objects only)."""
    if "$ref" in schema:
        ref = schema["$ref"].split("/")[-1]
        schema = {**root["$defs"][ref], **{k: v for k, v in schema.items() if k != "$ref"}}
    if schema.get("type") == "object" and isinstance(obj, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in obj and "default" in sub:
                d = sub["default"]
                obj[key] = json.loads(json.dumps(d))  # deep copy
            if key in obj:
                _apply_defaults(obj[key], sub, root)
    return obj


def validate_config(cfg: dict) -> dict:
    schema = load_schema()
    cfg = json.loads(json.dumps(cfg))
    _apply_defaults(cfg, schema, schema)
    jsonschema.validate(cfg, schema)
    conv = cfg["market"]["conventional"]
    if conv["family"] == "power" and conv["p_c"] != 0.0:
        raise jsonschema.ValidationError("the power conventional family requires p_c = 0")
    for key in ("demand", "capacity"):
        spec = cfg["scenario"][key]
        if spec["hi"] < spec["lo"]:
            raise jsonschema.ValidationError(f"{key}: hi must be >= lo")
    return cfg


def default_config() -> dict:
    return validate_config({})


def load_config(path) -> dict:
    with open(path) as fh:
        return validate_config(json.load(fh))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dist(spec: dict) -> DistributionSpec:
    return DistributionSpec(
        family=spec["family"],
        lo=spec["lo"],
        hi=spec["hi"],
        rho=spec.get("rho", 0.0),
        mean=spec.get("mean"),
        sd=spec.get("sd"),
        a=spec.get("alpha"),
        b=spec.get("beta"),
    )


def build_model(cfg: dict) -> ScenarioModel:
    sc = cfg["scenario"]
    n_sup = cfg["market"]["n_suppliers"] if cfg["market"]["renewables_enabled"] else 0
    return ScenarioModel(
        time_steps=sc["time_steps"],
        n_suppliers=n_sup,
        demand=_dist(sc["demand"]),
        capacity=_dist(sc["capacity"]),
        seed=cfg["seed"],
    )


def _numerics(cfg: dict) -> Numerics:
    num = cfg["numerics"]
    fields = {k: num[k] for k in Numerics.__dataclass_fields__ if k in num}
    return Numerics(**fields)


def build_setup(cfg: dict, n_scenarios: int = None) -> MarketSetup:
    conv = cfg["market"]["conventional"]
    curve = ConventionalCurve(
        family=conv["family"], a=conv["a"], p_c=conv["p_c"], alpha=conv["alpha"]
    )
    model = build_model(cfg)
    scen = sample(model, n_scenarios or cfg["scenario"]["n_scenarios"])
    return MarketSetup(
        curve=curve,
        n_suppliers=model.n_suppliers,
        scenarios=scen,
        trader_slope=cfg["market"]["traders"]["slope"],
        numerics=_numerics(cfg),
    )


def trader_count(cfg: dict):
    count = cfg["market"]["traders"]["count"]
    return INF_TRADERS if count == "inf" else int(count)


def version() -> str:
    return __version__
