"""Configuration parsing, experiment orchestration, persistence, and
metric/report emission; the reproducibility surface of the repository.

Configs are YAML.  Every persisted byte of a run is a pure function of
(config, seed) except the wall-time columns.  ``verify`` replays a run
directory's invariants without writing anything.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np
import yaml

from . import matrix as mx
from . import optimizers as op
from . import tasks as tk
from . import theory as th
from .errors import ConfigError
from .matrix import Matrix
from .registry import (
    ComposedModel,
    LoRAFactorPair,
    read_factor_file,
    write_factor_file,
)
from .rng import make_rng, split

MANIFEST_FORMAT = "seqlora-run/1"

METRICS_COLUMNS = [
    "run_id", "concept", "iteration", "objective", "grad_a_norm",
    "reduced_grad_b_norm", "alpha", "beta", "feasibility_defect", "wall_ms",
]

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output": "run",
    "task": {
        "kind": "linear-population",
        "m": 32,
        "n": 32,
        "rank": 4,
        "concepts": 8,
        "p": 64,
        "noise_std": 0.01,
        "teacher_mixing": 0.0,
        "layers": [32, 32, 32],
        "activation": "identity",
        "spectrum": {
            "profile": "geometric",
            "value": 1.0,
            "ratio": 0.9,
            "top": 1.0,
            "spikes": 1,
            "magnitude": 10.0,
            "base": 1.0,
            "values": None,
            "rotation_seed": None,
        },
    },
    "optimizer": {
        "method": "seqlora",
        "bilevel_iters": 3,
        "local_b_steps": 2,
        "local_a_steps": 2,
        "alpha_mode": "theoretical",
        "alpha": None,
        "beta_mode": "theoretical",
        "beta": None,
        "epsilon": 1e-8,
        "hessian_point": "outer-iterate",
        "a_restart": "outer",
        "init_scale": 0.1,
    },
    "studies": {
        "run": ["descent", "forgetting", "basis", "hw"],
        "mc_trials": 1000,
        "hw_samples": 10000,
        "hw_sampler": "gaussian",
        "xi": [0.1, 0.05, 0.01],
        "c1_grid": [0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
        "e2e_xi": 0.05,
        "e2e_c1": 1.0,
    },
    "sweep": {
        "seeds": [0],
        "optimizers": ["seqlora"],
    },
}

KNOWN_STUDIES = ("descent", "forgetting", "basis", "hw", "e2e")


def fmt17(x: float) -> str:
    """17 significant digits, the determinism-checkable text form."""
    return f"{float(x):.17g}"


@dataclass(frozen=True)
class RunConfig:
    raw: dict  # fully merged and validated config tree

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def task(self) -> dict:
        return self.raw["task"]

    @property
    def optimizer(self) -> dict:
        return self.raw["optimizer"]

    @property
    def studies(self) -> dict:
        return self.raw["studies"]

    @property
    def sweep(self) -> dict:
        return self.raw["sweep"]

    @property
    def run_id(self) -> str:
        return f"{self.optimizer['method']}-seed{self.seed}"

    def bilevel_config(self) -> op.BilevelConfig:
        o = self.optimizer
        return op.BilevelConfig(
            bilevel_iters=o["bilevel_iters"],
            local_b_steps=o["local_b_steps"],
            local_a_steps=o["local_a_steps"],
            alpha_mode=o["alpha_mode"],
            alpha=o["alpha"],
            beta_mode=o["beta_mode"],
            beta=o["beta"],
            epsilon=o["epsilon"],
            hessian_point=o["hessian_point"],
            a_restart=o["a_restart"],
            init_scale=o["init_scale"],
        )


def _merge_with_defaults(defaults, user, path=""):
    """Deep merge rejecting unknown keys so typos never pass silently."""
    if not isinstance(user, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}")
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            merged[key] = _merge_with_defaults(defaults[key], value, f"{path}{key}.")
        else:
            merged[key] = value
    return merged


def _validate(cfg: dict) -> None:
    t = cfg["task"]
    o = cfg["optimizer"]
    s = cfg["studies"]
    if not 0 <= int(cfg["seed"]) < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if t["kind"] not in (tk.LINEAR_POPULATION, tk.LINEAR_SAMPLED, tk.DEEP):
        raise ConfigError(f"unknown task kind {t['kind']!r}")
    if t["kind"] == tk.DEEP:
        dims = t["layers"]
        if len(dims) < 3:
            raise ConfigError("deep tasks need at least 2 layers (3 widths)")
        if t["activation"] not in tk.ACTIVATIONS:
            raise ConfigError(f"unknown activation {t['activation']!r}")
        if t["teacher_mixing"]:
            raise ConfigError("teacher_mixing applies only to linear task kinds")
        feature_dims = dims[:-1]
    else:
        feature_dims = [t["m"]]
    r, T = int(t["rank"]), int(t["concepts"])
    if r < 1 or T < 1:
        raise ConfigError("rank and concepts must be positive")
    for m in feature_dims:
        if T * r > m:
            raise ConfigError(
                f"capacity exceeded: concepts*rank = {T}*{r} = {T * r} > m = {m}"
            )
    prof = t["spectrum"]["profile"]
    if prof not in ("flat", "geometric", "spiked", "explicit"):
        raise ConfigError(f"unknown spectrum profile {prof!r}")
    if o["method"] not in op.OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {o['method']!r}")
    for name in s["run"]:
        if name not in KNOWN_STUDIES:
            raise ConfigError(f"unknown study {name!r}")
    if s["hw_sampler"] not in th.SUBG_SAMPLERS:
        raise ConfigError(f"unknown hw_sampler {s['hw_sampler']!r}")
    if "e2e" in s["run"] and t["kind"] != tk.DEEP:
        raise ConfigError("the e2e study requires a deep task stream")
    if "forgetting" in s["run"] and t["kind"] != tk.LINEAR_POPULATION:
        raise ConfigError("the forgetting study requires linear-population tasks")
    # Construction doubles as validation of the optimizer block.
    RunConfig(cfg).bilevel_config()


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    try:
        user = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: YAML syntax error: {exc}") from exc
    if user is None:
        user = {}
    cfg = _merge_with_defaults(DEFAULT_CONFIG, user)
    _validate(cfg)
    return RunConfig(cfg)


def parse_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def spectrum_from_config(spec_cfg: dict, dimension: int) -> tk.SpectrumSpec:
    prof = spec_cfg["profile"]
    seed = spec_cfg["rotation_seed"]
    if prof == "flat":
        return tk.SpectrumSpec.flat(dimension, spec_cfg["value"], seed)
    if prof == "geometric":
        return tk.SpectrumSpec.geometric(dimension, spec_cfg["ratio"], spec_cfg["top"], seed)
    if prof == "spiked":
        return tk.SpectrumSpec.spiked(
            dimension, spec_cfg["spikes"], spec_cfg["magnitude"], spec_cfg["base"], seed
        )
    values = spec_cfg["values"]
    if values is None or len(values) != dimension:
        raise ConfigError("explicit spectrum needs a 'values' list of length m")
    return tk.SpectrumSpec(dimension, np.asarray(values, dtype=float), seed)


def build_stream(cfg: RunConfig):
    """Tasks plus zero base weights, reproduced deterministically from the
    config and seed (streams are never persisted)."""
    t = cfg.task
    rng = make_rng(cfg.seed)
    if t["kind"] == tk.DEEP:
        dims = [int(d) for d in t["layers"]]
        spec = spectrum_from_config(t["spectrum"], dims[0])
        stream = [
            tk.make_deep_task(dims, t["activation"], spec, t["noise_std"], child,
                              p=t["p"])
            for child in split(rng, t["concepts"])
        ]
        w0s = [Matrix.zeros(dims[ell + 1], dims[ell]) for ell in range(len(dims) - 1)]
    else:
        spec = spectrum_from_config(t["spectrum"], t["m"])
        stream = tk.make_linear_stream(
            t["concepts"], t["m"], t["n"], spec, t["noise_std"], rng,
            kind=t["kind"], p=t["p"], mixing=t["teacher_mixing"],
        )
        w0s = [Matrix.zeros(t["n"], t["m"])]
    return stream, w0s


def fit_stream(cfg: RunConfig, stream, w0s) -> op.FitResult:
    fitters = {
        "seqlora": op.seqlora_fit,
        "alternating": op.alternating_fit,
        "frozen": op.frozen_basis_fit,
    }
    fit = fitters[cfg.optimizer["method"]]
    return fit(stream, w0s, cfg.task["rank"], cfg.bilevel_config(),
               make_rng(cfg.seed + 1))


def metrics_rows(cfg: RunConfig, result: op.FitResult) -> list[list[str]]:
    rows = []
    for trace in result.traces:
        for r in trace.rows:
            rows.append([
                cfg.run_id,
                str(trace.concept),
                str(r.iteration),
                fmt17(r.objective),
                fmt17(r.grad_a_norm),
                fmt17(r.reduced_grad_b_norm),
                fmt17(r.alpha),
                fmt17(r.beta),
                fmt17(r.feasibility_defect),
                fmt17(r.wall_ms),
            ])
    return rows


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(rows)


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _basis_condition_numbers(result: op.FitResult) -> list[list[float]]:
    conds = []
    for concept in result.model.concepts:
        per_layer = []
        for pair in concept:
            gram = mx.matmul(mx.transpose(pair.b), pair.b)
            vals = mx.sym_eig(gram).values
            lo = float(vals[-1])
            per_layer.append(math.sqrt(float(vals[0]) / lo) if lo > 0 else float("inf"))
        conds.append(per_layer)
    return conds


def residual_sigma(task: tk.ConceptTask, model: ComposedModel, j: int) -> Matrix:
    """Population covariance compressed outside concept j's learned basis."""
    from .registry import basis_complement_projector

    p_perp = basis_complement_projector(model.concepts[j][0].b)
    out = mx.matmul(mx.matmul(p_perp, task.sigma), p_perp)
    a2 = out.to_numpy()
    return Matrix(out.rows, out.cols, ((a2 + a2.T) / 2.0).ravel())


def run_studies(cfg: RunConfig, stream, result: op.FitResult, out_dir) -> list[str]:
    """Execute the configured studies, write their JSON reports plus a
    summary CSV, and return the list of invariant violations."""
    violations: list[str] = []
    summary: list[tuple[str, int, str, float]] = []  # study, concept, metric, value
    s = cfg.studies
    model = result.model
    theoretical = (
        cfg.optimizer["alpha_mode"] == "theoretical"
        and cfg.optimizer["beta_mode"] == "theoretical"
    )
    studies_dir = os.path.join(out_dir, "studies")
    os.makedirs(studies_dir, exist_ok=True)

    if "descent" in s["run"]:
        audit = {str(tr.concept): th.audit_descent(tr) for tr in result.traces}
        _json_dump(audit, os.path.join(studies_dir, "descent_audit.json"))
        for concept, bad in audit.items():
            summary.append(("descent", int(concept), "violations", float(len(bad))))
        if theoretical:
            for concept, bad in audit.items():
                if bad:
                    violations.append(
                        f"descent: concept {concept} rose at iterations {bad}"
                    )

    for trace in result.traces:
        for r in trace.rows:
            if not r.feasible:
                violations.append(
                    f"feasibility: concept {trace.concept} iteration {r.iteration} "
                    f"defect {r.feasibility_defect:.3e}"
                )

    # Crosstalk annihilation holds for every fitted stream.
    from .registry import basis_projector

    for j in range(model.num_concepts):
        for ell in range(model.num_layers):
            cj = model.crosstalk_operator(j, ell)
            pj = basis_projector(model.concepts[j][ell].b)
            overlap = mx.frob(mx.matmul(cj, pj))
            limit = 1e-8 * (mx.frob(cj) * mx.frob(pj) + 1e-30)
            if overlap > limit:
                violations.append(
                    f"annihilation: concept {j} layer {ell} overlap {overlap:.3e}"
                )

    # Studies consume dedicated generator splits, one per concept per study.
    study_rng = make_rng(cfg.seed + 2)
    splits = {name: split(study_rng, model.num_concepts) for name in KNOWN_STUDIES}

    if "forgetting" in s["run"]:
        reports = []
        for j in range(model.num_concepts):
            try:
                rep = th.forgetting_decomposition(model, stream[j], j)
            except Exception as exc:  # identity violations surface here
                violations.append(f"forgetting: concept {j}: {exc}")
                continue
            reports.append(rep.to_dict())
            summary.append(("forgetting", j, "lhs", rep.lhs))
            summary.append(("forgetting", j, "residual_energy", rep.residual_energy))
        _json_dump(reports, os.path.join(studies_dir, "forgetting.json"))

    if "basis" in s["run"]:
        reports = []
        from .registry import BasisRegistry

        replay = BasisRegistry(result.registries[0].m, epsilon=cfg.optimizer["epsilon"])
        for j in range(model.num_concepts):
            study = th.optimal_basis_study(
                stream[j].sigma, replay, cfg.task["rank"], s["mc_trials"],
                splits["basis"][j],
            )
            reports.append(study.to_dict())
            summary.append(("basis", j, "optimal_residual", study.optimal_residual))
            summary.append(("basis", j, "mc_mean_residual", study.mc_mean_residual))
            if study.optimal_residual > study.mc_min_residual + 1e-10:
                violations.append(f"basis: concept {j} eigenprojector beaten")
            gap = abs(study.mc_mean_captured - study.expected_random_captured)
            if gap > 3.0 * study.mc_se_captured + 1e-12:
                violations.append(f"basis: concept {j} Haar mean off by {gap:.3e}")
            replay.append_basis(model.concepts[j][0].b)
        _json_dump(reports, os.path.join(studies_dir, "basis.json"))

    if "hw" in s["run"]:
        reports = []
        for j in range(model.num_concepts):
            task = stream[j]
            psi = task.psi if task.psi is not None else Matrix.identity(task.p)
            rep = th.hw_crosstalk_study(
                residual_sigma(task, model, j), psi,
                model.crosstalk_operator(j, 0), s["hw_samples"], s["xi"],
                s["c1_grid"], splits["hw"][j], sampler=s["hw_sampler"],
            )
            reports.append(rep.to_dict())
            summary.append(("hw", j, "mu_z", rep.mu_z))
            summary.append(("hw", j, "empirical_mean", rep.empirical_mean))
            if rep.mu_z > 0 and abs(rep.empirical_mean - rep.mu_z) > 3.0 * rep.empirical_se:
                violations.append(f"hw: concept {j} mean identity off")
            want = th.regime_from_ranks(
                rep.r_eff_psi, rep.r_eff_qtq, rep.regime_reference_c1,
                rep.regime_reference_xi,
            )
            if rep.regime_label != want:
                violations.append(f"hw: concept {j} regime label inconsistent")
        _json_dump(reports, os.path.join(studies_dir, "hw.json"))

    if "e2e" in s["run"]:
        reports = []
        for j in range(model.num_concepts):
            rep = th.e2e_forgetting_bound(
                model, stream[j], j, s["e2e_xi"], s["e2e_c1"], splits["e2e"][j]
            )
            reports.append(rep.to_dict())
            summary.append(("e2e", j, "empirical_forgetting", rep.empirical_forgetting))
            summary.append(("e2e", j, "bound_value", rep.bound_value))
            if rep.empirical_forgetting > rep.bound_value + 1e-12:
                violations.append(
                    f"e2e: concept {j} measured {rep.empirical_forgetting:.6e} "
                    f"exceeds bound {rep.bound_value:.6e}"
                )
        _json_dump(reports, os.path.join(studies_dir, "e2e.json"))

    with open(os.path.join(studies_dir, "summary.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(["run_id", "study", "concept", "metric", "value"])
        for study, concept, metric, value in summary:
            writer.writerow([cfg.run_id, study, str(concept), metric, fmt17(value)])

    return violations


def run(cfg: RunConfig, out_dir) -> int:
    """Fit, study, persist.  Exit status 0 iff every enforced invariant
    held; violations are listed in the manifest and printed."""
    os.makedirs(out_dir, exist_ok=True)
    factors_dir = os.path.join(out_dir, "factors")
    os.makedirs(factors_dir, exist_ok=True)

    stream, w0s = build_stream(cfg)
    result = fit_stream(cfg, stream, w0s)

    factor_files = []
    for j, concept in enumerate(result.model.concepts):
        for ell, pair in enumerate(concept):
            name = f"concept_{j:03d}_layer_{ell:02d}.bin"
            write_factor_file(os.path.join(factors_dir, name), pair)
            factor_files.append(name)

    write_metrics(os.path.join(out_dir, "metrics.csv"), metrics_rows(cfg, result))
    violations = run_studies(cfg, stream, result, out_dir)

    manifest = {
        "format": MANIFEST_FORMAT,
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer["method"],
        "epsilon": cfg.optimizer["epsilon"],
        "concepts": result.model.num_concepts,
        "concept_order": list(range(result.model.num_concepts)),
        "rank": cfg.task["rank"],
        "layer_shapes": [[w.rows, w.cols] for w in w0s],
        "basis_condition_numbers": _basis_condition_numbers(result),
        "factor_files": factor_files,
        "violations": violations,
        "config": cfg.raw,
    }
    _json_dump(manifest, os.path.join(out_dir, "manifest.json"))

    for v in violations:
        print(f"VIOLATION: {v}", file=sys.stderr)
    return 0 if not violations else 1


def load_run(run_dir):
    """Manifest, config, and the model rebuilt from persisted factors."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    missing = [
        p for p in ("manifest.json", "metrics.csv", "factors")
        if not os.path.exists(os.path.join(run_dir, p))
    ]
    if missing:
        raise FileNotFoundError(f"incomplete run directory, missing: {missing}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported manifest format {manifest.get('format')!r}")
    cfg = RunConfig(_merge_with_defaults(DEFAULT_CONFIG, manifest["config"]))
    _validate(cfg.raw)

    shapes = manifest["layer_shapes"]
    model = ComposedModel([Matrix.zeros(n, m) for n, m in shapes])
    for j in range(manifest["concepts"]):
        pairs = []
        for ell in range(len(shapes)):
            name = f"concept_{j:03d}_layer_{ell:02d}.bin"
            pairs.append(read_factor_file(os.path.join(run_dir, "factors", name), ell))
        model.append_concept(pairs)
    return manifest, cfg, model


def _read_metrics(run_dir):
    with open(os.path.join(run_dir, "metrics.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def verify(run_dir) -> list[str]:
    """Replay every checkable invariant from persisted artifacts; returns
    the violation list.  Never writes into the run directory."""
    problems: list[str] = []
    manifest, cfg, model = load_run(run_dir)

    header, rows = _read_metrics(run_dir)
    if header != METRICS_COLUMNS:
        problems.append(f"metrics: unexpected header {header}")

    # Descent audit from the persisted objective column.
    theoretical = (
        cfg.optimizer["alpha_mode"] == "theoretical"
        and cfg.optimizer["beta_mode"] == "theoretical"
    )
    by_concept: dict[int, list[float]] = {}
    for row in rows:
        by_concept.setdefault(int(row[1]), []).append(float(row[3]))
    if theoretical:
        for concept, objs in sorted(by_concept.items()):
            bad = th.audit_descent(objs)
            if bad:
                problems.append(f"descent: concept {concept} rose at {bad}")

    # Factors must reproduce the exact fit under (config, seed).
    stream, w0s = build_stream(cfg)
    result = fit_stream(cfg, stream, w0s)
    for j, concept in enumerate(result.model.concepts):
        for ell, pair in enumerate(concept):
            stored = model.concepts[j][ell]
            if (
                stored.a.data.tobytes() != pair.a.data.tobytes()
                or stored.b.data.tobytes() != pair.b.data.tobytes()
            ):
                problems.append(f"factors: concept {j} layer {ell} not reproducible")

    from .registry import basis_projector

    for j in range(model.num_concepts):
        for ell in range(model.num_layers):
            cj = model.crosstalk_operator(j, ell)
            pj = basis_projector(model.concepts[j][ell].b)
            overlap = mx.frob(mx.matmul(cj, pj))
            if overlap > 1e-8 * (mx.frob(cj) * mx.frob(pj) + 1e-30):
                problems.append(f"annihilation: concept {j} layer {ell}")

    if cfg.task["kind"] == tk.LINEAR_POPULATION:
        for j in range(model.num_concepts):
            try:
                th.forgetting_decomposition(model, stream[j], j)
            except Exception as exc:
                problems.append(f"forgetting: concept {j}: {exc}")

    # Persisted study reports must be internally consistent.
    studies_dir = os.path.join(run_dir, "studies")
    hw_path = os.path.join(studies_dir, "hw.json")
    if os.path.exists(hw_path):
        with open(hw_path, encoding="utf-8") as fh:
            for j, rep in enumerate(json.load(fh)):
                if rep["mu_z"] > 0 and abs(rep["empirical_mean"] - rep["mu_z"]) > (
                    3.0 * rep["empirical_se"]
                ):
                    problems.append(f"hw report {j}: mean identity off")
                want = th.regime_from_ranks(
                    rep["r_eff_psi"], rep["r_eff_qtq"],
                    rep["regime_reference_c1"], rep["regime_reference_xi"],
                )
                if rep["regime_label"] != want:
                    problems.append(f"hw report {j}: regime label inconsistent")
    basis_path = os.path.join(studies_dir, "basis.json")
    if os.path.exists(basis_path):
        with open(basis_path, encoding="utf-8") as fh:
            for j, rep in enumerate(json.load(fh)):
                if rep["optimal_residual"] > rep["mc_min_residual"] + 1e-10:
                    problems.append(f"basis report {j}: domination violated")

    return problems


def build_report(run_dir) -> dict:
    """Per-concept initial/final losses and forgetting deltas, recomputed
    from persisted factors and the regenerated stream."""
    manifest, cfg, model = load_run(run_dir)
    stream, w0s = build_stream(cfg)

    def concept_loss(j: int, upto: int) -> float:
        task = stream[j]
        weights = [model.compose_weight(ell, upto=upto) for ell in range(model.num_layers)]
        if task.kind == tk.LINEAR_POPULATION:
            return tk.population_loss(task, weights[0])
        x, y = task.x_train, task.y_train
        return tk.batch_mse(tk.forward_layers(task, weights, x)[-1], y)

    concepts = []
    for j in range(model.num_concepts):
        initial = concept_loss(j, j + 1)
        final = concept_loss(j, model.num_concepts)
        concepts.append({
            "concept": j,
            "initial_loss": initial,
            "final_loss": final,
            "forgetting": final - initial,
        })

    studies = {}
    studies_dir = os.path.join(run_dir, "studies")
    if os.path.isdir(studies_dir):
        for name in sorted(os.listdir(studies_dir)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(studies_dir, name), encoding="utf-8") as fh:
                studies[name.removesuffix(".json")] = json.load(fh)

    return {
        "run_id": manifest["run_id"],
        "seed": manifest["seed"],
        "optimizer": manifest["optimizer"],
        "concepts": concepts,
        "violations": manifest["violations"],
        "studies_present": sorted(studies.keys()),
    }


def render_report_text(report: dict) -> str:
    out = io.StringIO()
    out.write(f"run {report['run_id']} (seed {report['seed']}, "
              f"{report['optimizer']})\n")
    out.write("concept  initial              final                forgetting\n")
    for c in report["concepts"]:
        out.write(
            f"{c['concept']:>7d}  {fmt17(c['initial_loss']):<19s}  "
            f"{fmt17(c['final_loss']):<19s}  {fmt17(c['forgetting'])}\n"
        )
    out.write(f"studies: {', '.join(report['studies_present']) or 'none'}\n")
    if report["violations"]:
        out.write("violations:\n")
        for v in report["violations"]:
            out.write(f"  - {v}\n")
    else:
        out.write("violations: none\n")
    return out.getvalue()


# -- standalone studies -------------------------------------------------------


def basis_study_standalone(cfg: RunConfig, prior_concepts: int = 0) -> dict:
    """Optimal-basis study for the configured covariance, after
    ``prior_concepts`` random orthogonal bases have been frozen."""
    from .registry import BasisRegistry

    t = cfg.task
    m = t["m"] if t["kind"] != tk.DEEP else t["layers"][0]
    rng = make_rng(cfg.seed)
    sigma = tk.covariance_from_spectrum(spectrum_from_config(t["spectrum"], m), rng)
    reg = BasisRegistry(m, epsilon=cfg.optimizer["epsilon"])
    for _ in range(prior_concepts):
        reg.append_basis(reg.project(mx.haar_frame(m, t["rank"], rng)))
    study = th.optimal_basis_study(
        sigma, reg, t["rank"], cfg.studies["mc_trials"], make_rng(cfg.seed + 2)
    )
    return study.to_dict()


def hw_study_standalone(cfg: RunConfig) -> dict:
    """Concentration study with the configured spectrum taken as the
    residual covariance and a seeded Gaussian crosstalk operator."""
    t = cfg.task
    m = t["m"] if t["kind"] != tk.DEEP else t["layers"][0]
    n = t["n"] if t["kind"] != tk.DEEP else t["layers"][-1]
    rng = make_rng(cfg.seed)
    sigma_perp = tk.covariance_from_spectrum(spectrum_from_config(t["spectrum"], m), rng)
    c_j = mx.gaussian_matrix(n, m, rng)
    rep = th.hw_crosstalk_study(
        sigma_perp, Matrix.identity(t["p"]), c_j, cfg.studies["hw_samples"],
        cfg.studies["xi"], cfg.studies["c1_grid"], make_rng(cfg.seed + 2),
        sampler=cfg.studies["hw_sampler"],
    )
    return rep.to_dict()


# -- sweep --------------------------------------------------------------------


def _sweep_cell(args) -> tuple[str, int]:
    raw_cfg, out_dir = args
    cfg = RunConfig(raw_cfg)
    status = run(cfg, out_dir)
    return out_dir, status


def sweep(cfg: RunConfig, out_root, jobs: int = 1) -> int:
    """Cartesian product over the sweep block's seeds and optimizers, one
    independent run directory per cell."""
    cells = []
    for method in cfg.sweep["optimizers"]:
        if method not in op.OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {method!r} in sweep")
        for seed in cfg.sweep["seeds"]:
            raw = copy.deepcopy(cfg.raw)
            raw["seed"] = int(seed)
            raw["optimizer"]["method"] = method
            _validate(raw)
            cells.append((raw, os.path.join(out_root, f"cell-{method}-seed{seed}")))

    results = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    worst = 0
    for out_dir, status in results:
        print(f"{'ok ' if status == 0 else 'FAIL'} {out_dir}")
        worst = max(worst, status)
    return worst


# -- entry point --------------------------------------------------------------


def _load_cli_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config_text("")
    if args.seed is not None:
        raw = copy.deepcopy(cfg.raw)
        raw["seed"] = args.seed
        _validate(raw)
        cfg = RunConfig(raw)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="seqlora",
        description="sequential orthogonal low-rank adaptation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_out=True):
        p.add_argument("--config", help="YAML config path (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if with_out:
            p.add_argument("--out", help="output directory")

    p_run = sub.add_parser("run", help="fit a stream, run studies, persist artifacts")
    add_common(p_run)

    p_verify = sub.add_parser("verify", help="replay invariants from a run directory")
    p_verify.add_argument("run_dir")

    p_report = sub.add_parser("report", help="per-concept forgetting summary")
    p_report.add_argument("run_dir")
    p_report.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p_basis = sub.add_parser("basis-study", help="standalone optimal-basis study")
    add_common(p_basis)
    p_basis.add_argument("--prior", type=int, default=0,
                         help="number of random frozen bases before the study")

    p_hw = sub.add_parser("hw-study", help="standalone crosstalk concentration study")
    add_common(p_hw)

    p_sweep = sub.add_parser("sweep", help="run the config's seed x optimizer grid")
    add_common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=1)

    args = parser.parse_args(argv)

    if args.command == "run":
        cfg = _load_cli_config(args)
        return run(cfg, args.out or cfg.raw["output"])

    if args.command == "verify":
        problems = verify(args.run_dir)
        categories = [
            ("metrics schema", "metrics:"),
            ("descent audit", "descent:"),
            ("factor reproducibility", "factors:"),
            ("crosstalk annihilation", "annihilation:"),
            ("forgetting identity", "forgetting:"),
            ("hw report consistency", "hw report"),
            ("basis report consistency", "basis report"),
        ]
        for label, prefix in categories:
            related = [p for p in problems if p.startswith(prefix)]
            print(f"{'FAIL' if related else 'pass'} {label}")
            for p in related:
                print(f"     {p}")
        return 0 if not problems else 1

    if args.command == "report":
        report = build_report(args.run_dir)
        if args.json:
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            print(render_report_text(report), end="")
        return 0

    if args.command == "basis-study":
        cfg = _load_cli_config(args)
        doc = basis_study_standalone(cfg, prior_concepts=args.prior)
        text = json.dumps(doc, indent=2, sort_keys=True)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "basis_study.json"), "w") as fh:
                fh.write(text + "\n")
        print(text)
        return 0

    if args.command == "hw-study":
        cfg = _load_cli_config(args)
        doc = hw_study_standalone(cfg)
        text = json.dumps(doc, indent=2, sort_keys=True)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "hw_study.json"), "w") as fh:
                fh.write(text + "\n")
        print(text)
        return 0

    if args.command == "sweep":
        cfg = _load_cli_config(args)
        return sweep(cfg, args.out or cfg.raw["output"], jobs=args.jobs)

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
