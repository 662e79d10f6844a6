"""End-to-end pipeline: ingest, embed, linear identification, foliation fits
and normal-form backbones, with every stage checkpointed in the output
directory so that later stages can be rerun on their own.

Files written to ``out``:

``data_train.csv``, ``data_test.csv``
    raw trajectories (ingest)
``embedded_train.csv``, ``embedded_test.csv``, ``embedding.json``
    delay-embedded and reduced trajectories (embed)
``linear_model.bin``, ``bundles.json``
    linear skew-product model and bundle report (linid)
``foliation_k.bin``, ``history_k.csv``, ``relerr_k.csv``, ``fit.json``
    fitted foliations with optimizer history and binned errors (fit)
``backbone_k.csv``, ``backbone_oracle_k.csv``, ``manifold.json``
    backbones of every two-dimensional foliation and the residual report
    (normalform)
"""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io, linalg
from .basis import (FunctionLibrary, RankDeficiencyError, ShiftOperator, fit_shift_lsq, pair_indices,
                    rotation_shift)
from .data import CsvSchema, ParseError, TrajectorySet, delay_embed, export_csv, ingest_csv, pca_reduce, translate
from .foliation import DivergenceError, LossConfig, default_epsilon, relative_error
from .linid import (ClusteringError, DeadModeError, SteadyStateError, _real_rows, dmd_fit, fit_linear_model,
                    solve_bundles)
from .normalform import (NormalFormError, PolarGrid, backbone, compare_backbones, default_rho_max,
                         solve_polar_map, solve_polar_ode)
from .optim import ConstraintError, OptimConfig, fit_latent_ics, initialize, minimize_continued
from .oracle import IntegrationError, benchmark, make_dataset, random_linear_skew_product

log = logging.getLogger(__name__)

STAGES = ("ingest", "embed", "linid", "fit", "normalform")

# collocation sizes used for forced systems when the config leaves n_Y open
DEFAULT_N_Y = {"shaw-pierre": 19, "car-following": 17}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage failure with its exit code (1 numerical, 2 input)."""

    def __init__(self, stage, message, code):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage
        self.code = code


NUMERICAL = (np.linalg.LinAlgError, SteadyStateError, ClusteringError, DeadModeError, RankDeficiencyError,
             ConstraintError, NormalFormError, IntegrationError, DivergenceError, ArithmeticError, RuntimeError)
INPUT = (ParseError, ConfigError, OSError, KeyError, TypeError, ValueError)


# ---------------------------------------------------------------- configuration


def _defaults():
    return dict(
        input={},
        embedding={"delay": 1, "modes": None, "method": "pca"},
        library={"kind": "auto", "n_Y": None, "domain": None},
        foliations=[],
        loss={"epsilon": None, "max_horizon": None},
        optimizer={"max_iter": 100, "gtol": 1e-9, "xtol": 1e-12, "rtol": 1e-14, "horizons": None},
        normal_form={"n_rho": 12, "n_beta": 9, "rho_max": None, "alpha": None, "oracle": True,
                     "n_points": 101},
        relerr_bins=10,
        out="folrom-out",
        seed=0,
    )


FOLIATION_KEYS = {"index_set", "encoder", "enc_order", "map_order", "autonomous_map"}


@dataclass
class PipelineConfig:
    """Pipeline settings; see :func:`PipelineConfig.from_dict` for the layout.

    ``input`` is either ``{"csv": path, "test_csv": path, "dt": dt}`` or a
    benchmark description ``{"benchmark": name, "params": {...}, "n_traj",
    "n_test", "length", "dt", "amplitudes", "modes", "param",
    "param_values", "test_values"}``. Foliation index sets are 0-based
    bundle indices in the sorted bundle order.
    """

    input: dict
    foliations: list
    embedding: dict = field(default_factory=dict)
    library: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    normal_form: dict = field(default_factory=dict)
    relerr_bins: int = 10
    out: str = "folrom-out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        base = _defaults()
        unknown = set(d) - set(base)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for k, v in d.items():
            if isinstance(base[k], dict):
                if not isinstance(v, dict):
                    raise ConfigError(f"config section {k!r} must be an object")
                if k not in ("input",):
                    bad = set(v) - set(base[k])
                    if bad:
                        raise ConfigError(f"unknown keys {sorted(bad)} in section {k!r}")
                base[k] = {**base[k], **v}
            else:
                base[k] = v
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        inp = self.input
        if ("csv" in inp) == ("benchmark" in inp):
            raise ConfigError("input needs exactly one of 'csv' or 'benchmark'")
        if not self.foliations:
            raise ConfigError("at least one foliation spec is required")
        seen = set()
        for k, f in enumerate(self.foliations):
            bad = set(f) - FOLIATION_KEYS
            if bad:
                raise ConfigError(f"unknown keys {sorted(bad)} in foliation {k + 1}")
            if "index_set" not in f or not f["index_set"]:
                raise ConfigError(f"foliation {k + 1} needs a non-empty index_set")
            I = set(int(i) for i in f["index_set"])
            if I & seen:
                raise ConfigError(f"index set of foliation {k + 1} overlaps an earlier one")
            seen |= I
        if self.embedding["method"] not in ("pca", "dmd"):
            raise ConfigError(f"unknown embedding method {self.embedding['method']!r}")
        if self.library["kind"] not in ("auto", "autonomous", "torus", "interval"):
            raise ConfigError(f"unknown library kind {self.library['kind']!r}")

    @property
    def out_dir(self):
        return Path(self.out)

    def loss_config(self, data):
        eps = self.loss["epsilon"] or default_epsilon(data)
        return LossConfig(epsilon=float(eps), max_horizon=self.loss["max_horizon"])

    def horizons(self):
        h = self.optimizer["horizons"]
        return (self.loss["max_horizon"],) if h is None else tuple(h)

    def optim_config(self, loss):
        o = self.optimizer
        return OptimConfig(loss=loss, max_iter=int(o["max_iter"]), gtol=o["gtol"], xtol=o["xtol"], rtol=o["rtol"])


PRESETS = {
    "shaw-pierre": dict(
        input=dict(benchmark="shaw-pierre", params={"variant": "decoupled"}, n_traj=12, n_test=1, length=300,
                   dt=0.278, amplitudes=[0.2, 0.6]),
        foliations=[dict(index_set=[0], encoder="reducible", enc_order=3, map_order=3),
                    dict(index_set=[1], encoder="generic", enc_order=1, map_order=1)],
        optimizer=dict(max_iter=60, horizons=[20, None]),
    ),
    "shaw-pierre-parametric": dict(
        input=dict(benchmark="shaw-pierre", params={"variant": "decoupled"}, n_traj=16, n_test=1, length=300,
                   dt=0.278, amplitudes=[0.4, 0.6], param="alpha", param_values={"chebyshev": [16, 0.4, 0.6]},
                   test_values=[0.48988]),
        library=dict(kind="interval", n_Y=5, domain=[0.4, 0.6]),
        foliations=[dict(index_set=[0], encoder="generic", enc_order=3, map_order=3),
                    dict(index_set=[1], encoder="generic", enc_order=1, map_order=1)],
        optimizer=dict(max_iter=60, horizons=[20, None]),
        normal_form=dict(alpha=0.48988),
    ),
    "car-following": dict(
        input=dict(benchmark="car-following", n_traj=8, n_test=1, length=200, dt=0.5, amplitudes=[0.05, 0.3],
                   modes=[0]),
        foliations=[dict(index_set=[0], encoder="generic", enc_order=3, map_order=3),
                    dict(index_set=[1, 2, 3, 4], encoder="generic", enc_order=1, map_order=1)],
        optimizer=dict(max_iter=30, horizons=[20, None]),
    ),
    "linear-test": dict(
        input=dict(benchmark="linear-test", n_traj=8, n_test=2, length=60, dt=0.3, amplitudes=[0.1, 1.0]),
        foliations=[dict(index_set=[0], encoder="generic", enc_order=1, map_order=1)],
    ),
    "linear-skew-product": dict(
        input=dict(benchmark="linear-skew-product", params={"d_X": 4, "omega": 0.7, "seed": 1}, n_traj=10,
                   n_test=2, length=40, amplitude=1.0),
        library=dict(kind="torus", n_Y=5),
        foliations=[dict(index_set=[0], encoder="generic", enc_order=1, map_order=1),
                    dict(index_set=[1], encoder="generic", enc_order=1, map_order=1)],
    ),
}


def preset(name, **overrides) -> PipelineConfig:
    """Built-in configuration ``name`` with top-level keys replaced by ``overrides``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    d.update(overrides)
    return PipelineConfig.from_dict(d)


def load_config(spec, out=None, seed=None) -> PipelineConfig:
    """Config from a JSON file or a preset name, with optional overrides."""
    p = Path(spec)
    if p.exists():
        cfg = PipelineConfig.from_file(p)
    elif spec in PRESETS:
        cfg = preset(spec)
    else:
        raise ConfigError(f"config {spec!r} is neither a file nor a preset ({sorted(PRESETS)})")
    if out is not None:
        cfg.out = str(out)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


# ---------------------------------------------------------------- helpers


def _values(spec):
    if isinstance(spec, dict) and "chebyshev" in spec:
        n, a, b = spec["chebyshev"]
        return linalg.cheb_first_kind(int(n), a, b)
    return np.asarray(spec, dtype=float)


def _system(cfg):
    inp = cfg.input
    return benchmark(inp["benchmark"], **inp.get("params", {}))


def _is_ode_benchmark(cfg):
    return "benchmark" in cfg.input and cfg.input["benchmark"] != "linear-skew-product"


def _read(path, dt=None):
    return ingest_csv(path, CsvSchema(dt=dt))


def _load_pair(out, prefix):
    train = _read(out / f"{prefix}_train.csv")
    test_path = out / f"{prefix}_test.csv"
    return train, (_read(test_path) if test_path.exists() else None)


def _library(cfg, data: TrajectorySet):
    """Library and shift operator for the configured forcing."""
    L = cfg.library
    kind = L["kind"]
    if kind == "auto":
        if data.d_Y == 0:
            kind = "autonomous"
        elif cfg.input.get("param"):
            kind = "interval"
        else:
            kind = "torus"
    if kind == "autonomous":
        if data.d_Y:
            raise ConfigError("autonomous library requested but the data carries forcing columns")
        return FunctionLibrary.autonomous(), ShiftOperator.identity(1)
    if data.d_Y == 0:
        raise ConfigError(f"{kind} library needs forcing columns in the data")
    if kind == "interval":
        n = int(L["n_Y"] or 5)
        a, b = L["domain"] or (float(data.forcing.min()), float(data.forcing.max()))
        return FunctionLibrary.interval(n, a, b), ShiftOperator.identity(n)
    name = cfg.input.get("benchmark")
    n = int(L["n_Y"] or DEFAULT_N_Y.get(name, 9))
    lib = FunctionLibrary.torus(*([n] * data.d_Y))
    if name == "linear-skew-product":
        return lib, rotation_shift(lib, cfg.input.get("params", {}).get("omega", 0.7))
    if name is not None:
        return lib, rotation_shift(lib, _system(cfg).forcing_rates * data.dt)
    return lib, fit_shift_lsq(data.alphas(lib), data.boundaries)


def _embedding_basis(cfg, data):
    e = cfg.embedding
    m = e["modes"]
    if m is None:
        return None
    if e["method"] == "pca":
        return pca_reduce(data, int(m))[1]
    k = pair_indices(data.boundaries)
    res = dmd_fit(data.states[k].T, data.states[k + 1].T)
    rows = _real_rows(res.eigvals, res.left_eigvecs)[:int(m)]
    return np.linalg.qr(rows.T)[0]


# ---------------------------------------------------------------- stages


def stage_ingest(cfg: PipelineConfig):
    out = cfg.out_dir
    inp = cfg.input
    if "csv" in inp:
        train = _read(inp["csv"], inp.get("dt"))
        test = _read(inp["test_csv"], inp.get("dt")) if inp.get("test_csv") else None
    elif inp["benchmark"] == "linear-skew-product":
        p = dict(inp.get("params", {}))
        gen = random_linear_skew_product(p.get("d_X", 4), seed=p.get("seed", 1), omega=p.get("omega", 0.7))
        amp = inp.get("amplitude", 1.0)
        train = gen.simulate(inp.get("n_traj", 10), inp.get("length", 40), seed=cfg.seed + 2, amplitude=amp)
        nt = inp.get("n_test", 0)
        test = gen.simulate(nt, inp.get("length", 40), seed=cfg.seed + 3, amplitude=amp) if nt else None
    else:
        sys = _system(cfg)
        kw = {}
        if inp.get("param"):
            kw = dict(param=inp["param"], param_values=_values(inp["param_values"]),
                      test_values=_values(inp["test_values"]))
        train, test = make_dataset(sys, int(inp.get("n_traj", 12)), int(inp.get("length", 200)),
                                   float(inp.get("dt", 0.1)), seed=cfg.seed,
                                   amplitudes=tuple(inp.get("amplitudes", (0.1, 1.0))),
                                   n_test=int(inp.get("n_test", 1)), modes=inp.get("modes"), **kw)
        if test.n_samples == 0:
            test = None
    out.mkdir(parents=True, exist_ok=True)
    export_csv(train, out / "data_train.csv")
    if test is not None:
        export_csv(test, out / "data_test.csv")
    return train, test


def stage_embed(cfg: PipelineConfig, train=None, test=None):
    out = cfg.out_dir
    if train is None:
        train, test = _load_pair(out, "data")
    d = int(cfg.embedding["delay"])
    tr = delay_embed(train, d) if d > 1 else train
    te = (delay_embed(test, d) if d > 1 else test) if test is not None else None
    U = _embedding_basis(cfg, tr)
    if U is not None:
        tr = replace(tr, states=tr.states @ U)
        te = replace(te, states=te.states @ U) if te is not None else None
    export_csv(tr, out / "embedded_train.csv")
    if te is not None:
        export_csv(te, out / "embedded_test.csv")
    io.write_json(out / "embedding.json", {"delay": d, "method": cfg.embedding["method"],
                                           "basis": None if U is None else U})
    return tr, te


def stage_linid(cfg: PipelineConfig, train=None):
    out = cfg.out_dir
    if train is None:
        train, _ = _load_pair(out, "embedded")
    lib, shift = _library(cfg, train)
    model = fit_linear_model(train, lib, shift)
    bundles = solve_bundles(model, train, dt=train.dt)
    io.save_linear_model(out / "linear_model.bin", model, {"dt": train.dt})
    sets = [sorted(int(i) for i in f["index_set"]) for f in cfg.foliations]
    if np.all(bundles.intervals()[:, 1] < 1):
        io.write_bundle_report(out / "bundles.json", bundles, sets, train.dt)
    else:
        rep = bundles.report((), train.dt)
        rep["spectral_quotients"] = "undefined: some |lambda| >= 1"
        io.write_json(out / "bundles.json", rep)
    return model, bundles


def _load_model(cfg, train):
    model, _ = io.load_linear_model(cfg.out_dir / "linear_model.bin")
    return model, solve_bundles(model, train, dt=train.dt)


def stage_fit(cfg: PipelineConfig, train=None, test=None, model=None, bundles=None):
    out = cfg.out_dir
    if train is None:
        train, test = _load_pair(out, "embedded")
    if model is None:
        model, bundles = _load_model(cfg, train)
    lib = model.library
    trT = translate(train, model.steady, lib)
    teT = translate(test, model.steady, lib) if test is not None else None
    loss = cfg.loss_config(trT)
    ocfg = cfg.optim_config(loss)
    horizons = cfg.horizons()
    eval_loss = replace(loss, max_horizon=horizons[-1])
    edges = np.linspace(0.0, np.linalg.norm(trT.states, axis=1).max(), int(cfg.relerr_bins) + 1)
    fols, summary = [], []
    for k, spec in enumerate(cfg.foliations, start=1):
        fol = initialize(bundles, spec["index_set"], spec.get("encoder", "generic"), spec.get("enc_order", 1),
                         spec.get("map_order", 1), spec.get("autonomous_map", False), data=trT)
        fol, hist = minimize_continued(fol, trT, teT, ocfg, horizons)
        io.save_foliation(out / f"foliation_{k}.bin", fol)
        io.write_history(out / f"history_{k}.csv", hist)
        E, _, bins = relative_error(fol, trT, eval_loss, bins=edges)
        row = {"foliation": k, "status": hist.status, "accepted_steps": hist.accepted_steps,
               "L_train": hist.L_train[-1], "E_rel_train_mean": float(np.mean(E)),
               "E_rel_train_max": float(np.max(E)), "epsilon": loss.epsilon,
               "constraint_residual": fol.constraint_residual()}
        test_bins = None
        if teT is not None:
            ft = fit_latent_ics(fol, teT, eval_loss)
            Et, _, test_bins = relative_error(ft, teT, eval_loss, bins=edges)
            row.update(L_test=hist.L_test[-1], E_rel_test_mean=float(np.mean(Et)),
                       E_rel_test_max=float(np.max(Et)))
        io.write_relerr(out / f"relerr_{k}.csv", bins, test_bins)
        log.info("foliation %d: %s after %d steps, mean E_rel %.3e", k, hist.status, hist.accepted_steps,
                 row["E_rel_train_mean"])
        fols.append(fol)
        summary.append(row)
    io.write_json(out / "fit.json", {"foliations": summary})
    return fols


def _load_fols(cfg):
    return [io.load_foliation(cfg.out_dir / f"foliation_{k}.bin") for k in range(1, len(cfg.foliations) + 1)]


def stage_normalform(cfg: PipelineConfig, train=None, model=None, bundles=None, fols=None):
    out = cfg.out_dir
    if train is None:
        train, _ = _load_pair(out, "embedded")
    if model is None:
        model, bundles = _load_model(cfg, train)
    if fols is None:
        fols = _load_fols(cfg)
    trT = translate(train, model.steady, model.library)
    nfc = cfg.normal_form
    report = {"backbones": [], "skipped": []}
    if sum(f.d_Z for f in fols) != fols[0].d_X:
        report["skipped"].append("latent dimensions do not add up to the state dimension")
        io.write_json(out / "manifold.json", report)
        return report
    lib = model.library
    alpha = nfc["alpha"]
    if lib.kind == "interval" and lib.n_Y > 1 and alpha is None:
        alpha = 0.5 * (lib.domain[0] + lib.domain[1])
    shift = model.shift if lib.is_torus else None
    oracle_ok = (nfc["oracle"] and _is_ode_benchmark(cfg) and cfg.embedding["delay"] == 1
                 and cfg.embedding["modes"] is None and not cfg.input.get("param"))
    for k, fol in enumerate(fols, start=1):
        if fol.d_Z != 2:
            continue
        order = [fol] + [f for j, f in enumerate(fols, start=1) if j != k]
        rows = bundles.rows(cfg.foliations[k - 1]["index_set"])
        rho_tr = default_rho_max(order, trT)
        grid = PolarGrid(nfc["n_rho"], nfc["n_beta"], nfc["rho_max"] or rho_tr)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            nf = solve_polar_map(order, grid, trT.dt, shift, alpha, target=bundles.eigvals[rows[0]],
                                 rho_trained=rho_tr)
        bb = backbone(nf, nfc["n_points"])
        bb.to_csv(out / f"backbone_{k}.csv")
        amp, ph = nf.constraint_residuals()
        entry = {"foliation": k, "kind": nf.kind, "rho_max": nf.rho_max, "rho_trained": rho_tr,
                 "truncated": nf.truncated, "newton_residual": nf.residual,
                 "amplitude_residual": float(np.abs(amp).max()), "phase_residual": float(np.abs(ph).max()),
                 "linear_eigenvalue": nf.info["linear_eigenvalue"], "omega_0": float(bb.omega[0]),
                 "zeta_0": float(bb.zeta[0])}
        if oracle_ok:
            sys = _system(cfg)
            n_Y = lib.grid_sizes[0] if lib.is_torus else 1
            target = bundles.continuous(trT.dt)[rows[0]]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                nfo = solve_polar_ode(sys, PolarGrid(nfc["n_rho"], nfc["n_beta"], grid.rho_max), n_Y,
                                      target=target, rho_trained=rho_tr)
            bo = backbone(nfo, nfc["n_points"])
            bo.to_csv(out / f"backbone_oracle_{k}.csv")
            entry["oracle"] = {"omega_0": float(bo.omega[0]), "zeta_0": float(bo.zeta[0]),
                               **compare_backbones(bb, bo, by="rho")}
        report["backbones"].append(entry)
    io.write_json(out / "manifold.json", report)
    return report


# ---------------------------------------------------------------- driver


def _classify(exc):
    if isinstance(exc, NUMERICAL) and not isinstance(exc, (ParseError, ConfigError)):
        return 1
    if isinstance(exc, INPUT):
        return 2
    return 1


def run_stage(name, fn, *args, **kw):
    """Call a stage, converting failures into :class:`StageError`."""
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure becomes a stage diagnostic
        raise StageError(name, f"{type(e).__name__}: {e}", _classify(e)) from e


STAGE_FUNCS = {"ingest": stage_ingest, "embed": stage_embed, "linid": stage_linid, "fit": stage_fit,
               "normalform": stage_normalform}


def run_pipeline(cfg: PipelineConfig, stages=STAGES):
    """Run the given stages in order, each reading its inputs from the output directory."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    io.write_json(cfg.out_dir / "config.json", cfg.to_dict())
    result = None
    for s in stages:
        log.info("stage %s", s)
        result = run_stage(s, STAGE_FUNCS[s], cfg)
    return result
