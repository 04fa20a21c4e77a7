"""Experiment configuration: a flat key/value text format with section prefixes.

Example::

    phantom.side = 64
    if.noise = 0.10
    noise.count_scale = 1000000
    solver.name = reg-as-tr
    solver.beta = 0.25
    fit.prior_high = 0.5,0.5,0.5,0.1

Unknown keys are rejected so typos fail loudly.  ``parse(serialize(cfg))``
round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .imaging import PixelFitPolicy
from .optim import LmConfig, TrConfig, config_from_mapping


@dataclass
class ExperimentConfig:
    # phantom
    phantom_side: int = 64
    phantom_label_path: str = ""
    # input function
    if_aa_mbq: float = 350.0
    if_vd_liters: float = 12.7
    if_t_peak_min: float = 0.5
    if_fractions: tuple = (0.6, 0.3, 0.1)
    if_decay_rates: tuple = (4.0, 0.5, 0.01)
    if_noise: float = 0.0
    if_seed: int = 1234
    # sinogram noise
    count_scale: float = 1e6
    replicates: int = 3
    master_seed: int = 2024
    n_angles: int = 90
    # fitting
    solver: str = "reg-as-tr"
    deblur: bool = False
    deblur_sigma: float = 1.0
    deblur_window: int = 3
    prior_low: tuple = (0.001, 0.001, 0.001, 0.001)
    # k4 (dephosphorylation) is physiologically much slower than the other
    # rates; a prior box reaching 0.5 makes random initializations start far
    # above any plausible value, and pixels whose fit stops early keep a
    # large residue of that init, inflating region means
    prior_high: tuple = (0.5, 0.5, 0.5, 0.1)
    neighbor_init: bool = True
    tau2_boundary: float = 10.0
    tau2_inner: float = 3.0
    scan: str = "raster"
    threads: int = 1
    # solver constants
    tr: TrConfig = field(default_factory=TrConfig)
    lm: LmConfig = field(default_factory=LmConfig)

    def policy(self) -> PixelFitPolicy:
        return PixelFitPolicy(
            prior_low=np.array(self.prior_low),
            prior_high=np.array(self.prior_high),
            neighbor_init=self.neighbor_init,
            tau2_boundary=self.tau2_boundary,
            tau2_inner=self.tau2_inner,
            scan=self.scan,
        )


# (section, key) -> ExperimentConfig attribute
_KEYMAP = {
    "phantom.side": "phantom_side",
    "phantom.label_path": "phantom_label_path",
    "if.aa_mbq": "if_aa_mbq",
    "if.vd_liters": "if_vd_liters",
    "if.t_peak_min": "if_t_peak_min",
    "if.fractions": "if_fractions",
    "if.decay_rates": "if_decay_rates",
    "if.noise": "if_noise",
    "if.seed": "if_seed",
    "noise.count_scale": "count_scale",
    "noise.replicates": "replicates",
    "noise.master_seed": "master_seed",
    "noise.n_angles": "n_angles",
    "fit.solver": "solver",
    "fit.deblur": "deblur",
    "fit.deblur_sigma": "deblur_sigma",
    "fit.deblur_window": "deblur_window",
    "fit.prior_low": "prior_low",
    "fit.prior_high": "prior_high",
    "fit.neighbor_init": "neighbor_init",
    "fit.tau2_boundary": "tau2_boundary",
    "fit.tau2_inner": "tau2_inner",
    "fit.scan": "scan",
    "fit.threads": "threads",
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def serialize(cfg: ExperimentConfig) -> str:
    lines = ["# petkin experiment configuration"]
    for key, attr in _KEYMAP.items():
        lines.append(f"{key} = {_fmt(getattr(cfg, attr))}")
    for f_ in fields(TrConfig):
        lines.append(f"solver.{f_.name} = {_fmt(getattr(cfg.tr, f_.name))}")
    for f_ in fields(LmConfig):
        lines.append(f"lm.{f_.name} = {_fmt(getattr(cfg.lm, f_.name))}")
    return "\n".join(lines) + "\n"


class ConfigError(ValueError):
    pass


def parse(text: str) -> ExperimentConfig:
    defaults = ExperimentConfig()
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        kv[key.strip()] = raw.strip()

    cfg_kwargs = {}
    solver_kv = {}
    lm_kv = {}
    tr_names = {f_.name for f_ in fields(TrConfig)}
    lm_names = {f_.name for f_ in fields(LmConfig)}
    for key, raw in kv.items():
        if key in _KEYMAP:
            attr = _KEYMAP[key]
            cfg_kwargs[attr] = _parse_value(getattr(defaults, attr), raw)
        elif key.startswith("solver.") and key[len("solver."):] in tr_names:
            solver_kv[key[len("solver."):]] = raw
        elif key.startswith("lm.") and key[len("lm."):] in lm_names:
            lm_kv[key[len("lm."):]] = raw
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    try:
        cfg_kwargs["tr"] = config_from_mapping(TrConfig, solver_kv)
        cfg_kwargs["lm"] = config_from_mapping(LmConfig, lm_kv)
        return ExperimentConfig(**cfg_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse(fh.read())


def save(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(cfg))
