"""Config-driven separation experiments (the histogram and heatmap runs).

Config grammar, one setting per line::

    # comment
    key = value            # trailing comments allowed
    owners = a.nnet, b.nnet
    suspects = a_copy.nnet, tcp://127.0.0.1:7878

Values are parsed as int, then float, then left as text; list-valued keys
are split on commas.  Relative paths in the file resolve against the file's
directory; paths given as overrides resolve against the working directory.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attack import AttackParams
from .data import builtin_synthetic_dataset, load_dataset
from .network import load_model
from .protocol import (DEFAULT_THRESHOLD, TABLE_P_TARGETS, ExperimentReport,
                       run_separation_experiment)
from .service import RemoteOracle

log = logging.getLogger(__name__)

_LIST_KEYS = {"owners", "suspects", "p_targets"}


@dataclass
class ExperimentConfig:
    owners: list = field(default_factory=list)
    suspects: list = field(default_factory=list)
    data: str | None = None
    synthetic_k: int = 10
    synthetic_per_class: int = 20
    synthetic_side: int = 16
    synthetic_seed: int = 1
    synthetic_noise: float = 0.05
    n_images: int = 100
    p_targets: list = field(default_factory=lambda: list(TABLE_P_TARGETS))
    eps: float = 0.05
    alpha_com: float = 1e-3
    l: int = 5
    t_diff: float = 5e-3
    n_max: int = 1000
    alpha_floor: float = 1e-10
    seed: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    out: str = "experiment_out"
    workers: int = 1
    bin_width: float = 0.05

    def attack_params(self) -> AttackParams:
        return AttackParams(epsilon=self.eps, alpha_com=self.alpha_com, l=self.l,
                            t_diff=self.t_diff, n_max=self.n_max, alpha_floor=self.alpha_floor)

    def validate(self) -> None:
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if not self.owners or not self.suspects:
            raise ValueError("at least one owner and one suspect are required")
        for p in self.owners + [s for s in self.suspects if not s.startswith("tcp://")]:
            if not Path(p).exists():
                raise FileNotFoundError(p)
        if self.data is not None and not Path(self.data).exists():
            raise FileNotFoundError(self.data)
        self.attack_params()


def _coerce(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        if key in _LIST_KEYS:
            out[key] = [_coerce(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _coerce(value)
    return out


def build_config(values: dict, base_dir: Path | None = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = replace(ExperimentConfig(), **values)
    if base_dir is not None:
        def resolve(p):
            p = str(p)
            if p.startswith("tcp://") or Path(p).is_absolute():
                return p
            return os.path.normpath(base_dir / p)
        cfg.owners = [resolve(p) for p in cfg.owners]
        cfg.suspects = [resolve(p) for p in cfg.suspects]
        if cfg.data is not None:
            cfg.data = resolve(cfg.data)
        cfg.out = resolve(cfg.out)
    cfg.p_targets = [float(p) for p in cfg.p_targets]
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    cfg = build_config(parse_config_text(path.read_text(encoding="utf-8")), path.parent)
    # overrides come from the command line, so their paths stay relative to the cwd
    return build_config({**asdict(cfg), **(overrides or {})}) if overrides else cfg


def _suspect(spec: str):
    if spec.startswith("tcp://"):
        oracle = RemoteOracle(spec[len("tcp://"):])
        return spec, oracle
    return Path(spec).stem, load_model(spec)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Every owner against every suspect; returns the merged report."""
    cfg.validate()
    if cfg.data is not None:
        dataset = load_dataset(cfg.data)
    else:
        dataset = builtin_synthetic_dataset(cfg.synthetic_k, cfg.synthetic_per_class,
                                            cfg.synthetic_side, cfg.synthetic_seed,
                                            cfg.synthetic_noise)
    named = [_suspect(s) for s in cfg.suspects]
    report = ExperimentReport(threshold=cfg.threshold)
    for owner_path in cfg.owners:
        owner = load_model(owner_path)
        log.info("owner %s: %d images x %d suspects", owner_path, cfg.n_images, len(named))
        report.extend(run_separation_experiment(
            owner, [o for _, o in named], dataset, cfg.n_images, cfg.p_targets,
            cfg.attack_params(), cfg.seed, owner_name=Path(owner_path).stem,
            suspect_names=[n for n, _ in named], workers=cfg.workers,
            threshold=cfg.threshold))
    return report


def write_report(report: ExperimentReport, out_dir, bin_width: float = 0.05) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"histogram": out_dir / "histogram.csv", "heatmap": out_dir / "heatmap.csv",
             "summary": out_dir / "summary.txt"}
    paths["histogram"].write_text(report.histogram_csv(bin_width), encoding="utf-8")
    paths["heatmap"].write_text(report.heatmap_csv(), encoding="utf-8")
    paths["summary"].write_text(report.summary(), encoding="utf-8")
    return paths
