"""Run configuration: input paths, prompt variant, named seeds and provenance."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .prompts import PromptVariant

SEED_NAMES = ("assignment", "sampling", "bootstrap", "mcmc")
PATH_KEYS = ("course", "submissions", "examples", "graders", "templates", "gold", "human_grades", "ratings", "fixtures", "cache_dir")
REQUIRED_PATHS = ("course", "submissions", "graders")
DEFAULT_MCMC = {
    "iterations": 2000,
    "warmup": 1000,
    "chains": 4,
    "sampler": "hmc",
    "leapfrog_steps": 16,
    "metric": "dense",
    "levels": 5,
    "split": False,
    "reference": None,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    path: Path
    raw: dict
    paths: dict
    output_dir: Path
    variant: PromptVariant
    eval_variants: list
    seeds: dict
    example_count: int = 10
    resample_examples_per_submission: bool = False
    bootstrap_resamples: int = 2000
    max_in_flight: int = 4
    dry_run_grader: Optional[str] = None
    backend_overrides: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    review_revised: bool = False

    def get(self, key: str) -> Optional[Path]:
        return self.paths.get(key)

    @property
    def config_hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        h = hashlib.sha256(json.dumps(doc, sort_keys=True).encode())
        for key in PATH_KEYS:
            p = self.paths.get(key)
            if p is not None and p.is_file():
                h.update(key.encode())
                h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()[:16]

    @property
    def seeds_text(self) -> str:
        return ";".join(f"{k}={self.seeds[k]}" for k in SEED_NAMES)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "seeds": dict(self.seeds), "seeds_text": self.seeds_text}


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON run config; relative paths resolve against its directory.

    ``overrides`` may set ``variant``, ``output_dir`` and ``seeds.<name>``;
    they are folded into the hashed config so provenance reflects them.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("seeds."):
            raw.setdefault("seeds", {})[key.split(".", 1)[1]] = int(value)
        else:
            raw[key] = value
    base = path.parent
    paths = {}
    missing = []
    for key in PATH_KEYS:
        value = raw.get(key)
        if value is None:
            if key in REQUIRED_PATHS:
                missing.append(f"{key} (not set)")
            continue
        p = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
        if key != "cache_dir" and not p.exists():
            missing.append(f"{key} ({p})")
        paths[key] = p
    if missing:
        raise ConfigError("missing input path(s): " + ", ".join(missing))
    seeds = {name: int((raw.get("seeds") or {}).get(name, 0)) for name in SEED_NAMES}
    try:
        variant = PromptVariant(raw.get("variant", "both"))
        eval_variants = [PromptVariant(v) for v in raw.get("eval_variants", [v.value for v in PromptVariant])]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    output_dir = Path(raw.get("output_dir", "out"))
    if not output_dir.is_absolute():
        output_dir = (base / output_dir).resolve()
    mcmc = dict(DEFAULT_MCMC)
    mcmc.update(raw.get("mcmc") or {})
    return RunConfig(
        path=path,
        raw=raw,
        paths=paths,
        output_dir=output_dir,
        variant=variant,
        eval_variants=eval_variants,
        seeds=seeds,
        example_count=int(raw.get("example_count", 10)),
        resample_examples_per_submission=bool(raw.get("resample_examples_per_submission", False)),
        bootstrap_resamples=int(raw.get("bootstrap_resamples", 2000)),
        max_in_flight=int(raw.get("max_in_flight", 4)),
        dry_run_grader=raw.get("dry_run_grader"),
        backend_overrides=dict(raw.get("backend_overrides") or {}),
        mcmc=mcmc,
        review_revised=bool(raw.get("review_revised", False)),
    )
