"""Pipeline configuration: one TOML file, overridable key by key."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import tomli

from gsbuild import align, filters, refine
from gsbuild.backends import protocol as P
from gsbuild.textnorm import SHIPPED_LANGUAGES, LanguageProfile, get_profile, load_profile_file

DEFAULTS: dict[str, Any] = {
    "paths": {"audio_root": "audio", "work_dir": "work"},
    "language": {"code": "id", "profile_file": ""},
    "ingest": {"workers": 4, "canonicalize": True},
    "transcribe": {"parallelism": 4},
    "align": {"gap_s": align.DEFAULT_GAP_S, "min_s": align.DEFAULT_MIN_S, "max_s": align.DEFAULT_MAX_S,
              "workers": 4},
    "filter": {"lid_threshold": filters.DEFAULT_LID_THRESHOLD, "min_duration_s": filters.DEFAULT_MIN_S,
               "max_duration_s": filters.DEFAULT_MAX_S, "max_dup_per_channel": filters.DEFAULT_MAX_DUP,
               "rules": list(filters.RULES), "parallelism": 8},
    "partition": {"dev_hours": 10.0, "test_hours": 10.0, "seed": 0, "tolerance": 0.10},
    "refine": {"n": 3, "tau": refine.DEFAULT_TAU, "relabel": True, "capacities": [], "seed": 0,
               "parallelism": 4, "noise": {}},
    "stats": {"bin_width_s": 1.0},
    "backends": {"retries": 2, "backoff_s": 0.5},
}

BACKEND_ROLES = P.ROLES


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = problems


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "noise":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``section.key=value`` with the value parsed as TOML (bare strings allowed)."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError([f"override {item!r} is not of the form section.key=value"])
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(data: dict, path: list[str], value: Any) -> None:
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path: Optional[str | Path], overrides: Optional[list[str]] = None) -> "PipelineConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                with open(path, "rb") as fh:
                    raw = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError([f"{path}: {exc}"]) from exc
            base = path.resolve().parent
        data = _merge(DEFAULTS, raw)
        for item in overrides or []:
            keys, value = parse_override(item)
            apply_override(data, keys, value)
        return cls(data, base)

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work_dir(self) -> Path:
        return self.path("work_dir")

    def profile(self) -> LanguageProfile:
        lang = self.data["language"]
        if lang.get("profile_file"):
            f = Path(lang["profile_file"])
            return load_profile_file(f if f.is_absolute() else self.base_dir / f)
        return get_profile(lang["code"])

    def backend_spec(self, role: str) -> Optional[dict]:
        return self.data["backends"].get(role)

    def validate(self, need_backends: tuple[str, ...] = (), need_audio: bool = False) -> None:
        problems = []
        d = self.data
        lang = d["language"]
        if lang.get("profile_file"):
            f = Path(lang["profile_file"])
            f = f if f.is_absolute() else self.base_dir / f
            if not f.is_file():
                problems.append(f"language.profile_file {f} does not exist")
        elif lang.get("code") not in SHIPPED_LANGUAGES:
            problems.append(f"language.code {lang.get('code')!r} has no shipped profile {SHIPPED_LANGUAGES}")
        if need_audio and not self.path("audio_root").is_dir():
            problems.append(f"paths.audio_root {self.path('audio_root')} is not a directory")

        a = d["align"]
        if not (0 < a["min_s"] < a["max_s"]) or a["gap_s"] <= 0:
            problems.append("align: need gap_s > 0 and 0 < min_s < max_s")
        f = d["filter"]
        if not 0 <= f["lid_threshold"] <= 1:
            problems.append("filter.lid_threshold must lie in [0, 1]")
        if not f["min_duration_s"] < f["max_duration_s"]:
            problems.append("filter.min_duration_s must be below filter.max_duration_s")
        if int(f["max_dup_per_channel"]) < 1:
            problems.append("filter.max_dup_per_channel must be >= 1")
        bad_rules = set(f["rules"]) - set(filters.RULES)
        if bad_rules:
            problems.append(f"filter.rules has unknown entries {sorted(bad_rules)}")
        p = d["partition"]
        if p["dev_hours"] < 0 or p["test_hours"] < 0:
            problems.append("partition targets must be non-negative")
        r = d["refine"]
        if int(r["n"]) < 1:
            problems.append("refine.n must be >= 1")
        if not 0 <= r["tau"] <= 1:
            problems.append("refine.tau must lie in [0, 1]")
        if not isinstance(r.get("noise"), dict):
            problems.append("refine.noise must be a table")
        caps = r.get("capacities") or []
        if caps:
            if len(caps) != int(r["n"]) + 1:
                problems.append(f"refine.capacities needs n + 1 = {int(r['n']) + 1} entries")
            try:
                ranks = [P.capacity_rank(c) for c in caps]
                if ranks != sorted(ranks):
                    problems.append("refine.capacities must be non-decreasing")
            except ValueError as exc:
                problems.append(f"refine.capacities: {exc}")
        if d["stats"]["bin_width_s"] <= 0:
            problems.append("stats.bin_width_s must be positive")
        for role in need_backends:
            spec = self.backend_spec(role)
            if not spec or not spec.get("command"):
                problems.append(f"backends.{role}.command is not set")
            elif not isinstance(spec["command"], list) or not all(isinstance(x, str) for x in spec["command"]):
                problems.append(f"backends.{role}.command must be a list of strings")
            elif spec.get("mode", "stream") not in ("stream", "file"):
                problems.append(f"backends.{role}.mode must be 'stream' or 'file'")
        if problems:
            raise ConfigError(problems)
