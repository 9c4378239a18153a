import os
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import typer
from dotenv import load_dotenv
from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

load_dotenv()

from db.mesh_cache import MeshCache  # noqa: E402
from services import asymptotics_service, eigen_service, lift_service, mesh_service, nodal_service  # noqa: E402
from services.asymptotics_service import AmbiguousOrder, InsufficientSamples, classify_vanishing, critical_combination  # noqa: E402
from services.eigen_service import apriori_report, cluster_multiplicities, lowest_eigenpairs, spectrum_summary  # noqa: E402
from services.experiment_service import (  # noqa: E402
    c2_antipodal_spectrum,
    coalesce_study,
    flow_ascent,
    packing_eigenvalue_study,
    pair_identity_check,
    platonic_criticality,
    spectral_flow_c2,
)
from services.geometry_service import (  # noqa: E402
    antipodal_configuration,
    load_configuration,
    random_configuration,
)
from services.lift_service import (  # noqa: E402
    ClosedFormEvaluator,
    MeshSectionEvaluator,
    ShellGrid,
    closed_coclosed_residuals,
    holder_exponent_fit,
    homogeneity_check,
    lift_sample_points,
    make_lift,
    sample_lift,
)
from services.mesh_service import MeshParams, build_operators, export_mesh, import_mesh  # noqa: E402
from services.nodal_service import euler_characteristic, extract_zero_graph, vanishing_census  # noqa: E402
from services.storage_service import CODE_VERSION, StorageService, load_json  # noqa: E402
from services.variation_service import BranchSwap, DegenerateCluster, gradient_check_trial  # noqa: E402

# Setup logging
LOG_LEVEL = os.getenv("Z2EIG_LOG_LEVEL", "INFO").upper()
logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

OUT_DIR = os.getenv("Z2EIG_OUT_DIR", "output")

app = typer.Typer(help="Twisted Laplacian eigenvalue laboratory on the 2-sphere.", no_args_is_help=True)
console = Console()


# Models
class MeshOptions(BaseModel):
    background: int = Field(mesh_service.BACKGROUND_COUNT, ge=500)
    refine: int = Field(mesh_service.GRADE_DEPTH, ge=0)
    grade_radius: float = Field(mesh_service.GRADE_RADIUS, gt=0)

    def params(self) -> MeshParams:
        return MeshParams(background_count=self.background, grade_depth=self.refine, grade_radius=self.grade_radius)


class ClusterReport(BaseModel):
    value: float
    multiplicity: int


class SpectrumReport(BaseModel):
    n_points: int
    n_vertices: int
    n_free: int
    eigenvalues: List[float]
    residuals: List[float]
    clusters: List[ClusterReport]
    apriori: List[Dict[str, Any]]


class BranchReport(BaseModel):
    index: int
    eigenvalue: float
    orders: List[int] = []
    p_f: List[int] = []
    points: List[Dict[str, Any]] = []
    error: Optional[str] = None


class GraphReport(BaseModel):
    trial: int
    seed: int
    n_pairs: int
    eigenvalue: float
    count: int
    bound: int
    cycles: int
    passed: bool
    chi: int
    chi_closed_form: float
    chi_agree: bool
    unresolved: int


class RunManifest(BaseModel):
    command: str
    parameters: Dict[str, Any]
    seed: int
    code_version: str = CODE_VERSION
    created: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    inputs: Dict[str, str] = {}
    outputs: List[str] = []


# Shared options
SEED = typer.Option(eigen_service.DEFAULT_SEED, "--seed", help="Seed for solvers, directions and configurations.")
THREADS = typer.Option(1, "--threads", min=1, help="Worker threads; 1 is the deterministic mode.")
VERBOSE = typer.Option(False, "--verbose", "-v", help="Debug logging.")
CHECK = typer.Option(False, "--assert", help="Exit 4 if an acceptance check fails.")
BACKGROUND = typer.Option(mesh_service.BACKGROUND_COUNT, "--background", help="Background point count.")
REFINE = typer.Option(mesh_service.GRADE_DEPTH, "--refine", help="Grading depth around configuration points.")
GRADE_RADIUS = typer.Option(mesh_service.GRADE_RADIUS, "--grade-radius", help="Radius of the innermost grading ring.")


def _out(command: str, out: Optional[str]) -> str:
    return out or os.path.join(OUT_DIR, command)


def _setup(verbose: bool) -> None:
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def _execute(stage: str, body: Callable[[], List[str]], check: bool) -> None:
    """Run a command body; map input errors to 2, numerical failures to 3, failed checks to 4."""
    try:
        failures = body()
    except ValueError as e:
        logger.error(f"{stage}: invalid input: {str(e)}")
        console.print(f"[red]{stage}: {type(e).__name__}: {str(e)}[/red]")
        raise typer.Exit(code=2)
    except RuntimeError as e:
        logger.error(f"{stage}: numerical failure: {str(e)}")
        logger.debug(traceback.format_exc())
        console.print(f"[red]{stage}: {type(e).__name__}: {str(e)}[/red]")
        raise typer.Exit(code=3)
    if failures:
        for failure in failures:
            console.print(f"[yellow]check failed: {failure}[/yellow]")
        if check:
            raise typer.Exit(code=4)
    elif check:
        console.print("[green]all checks passed[/green]")


def _manifest(storage: StorageService, command: str, parameters: Dict[str, Any], seed: int) -> None:
    record = RunManifest(
        command=command, parameters=parameters, seed=seed,
        inputs=storage.inputs, outputs=storage.output_names(),
    )
    storage.write_manifest(record.model_dump())


def _table(title: str, rows: List[Dict[str, Any]], columns: List[str]) -> None:
    table = Table(title=title)
    for c in columns:
        table.add_column(c)
    for row in rows:
        table.add_row(*[_fmt(row.get(c)) for c in columns])
    console.print(table)


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return "" if value is None else str(value)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise typer.BadParameter(f"expected comma-separated numbers, got '{text}'") from e


# Commands


@app.command()
def solve(
    points: str = typer.Argument(..., help="Configuration JSON with a 'points' list."),
    num_eigs: int = typer.Option(6, "--num-eigs", "-k", min=1),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Lowest eigenpairs of the twisted Laplacian for a configuration."""
    _setup(verbose)

    def body() -> List[str]:
        mesh_opts = MeshOptions(background=background, refine=refine, grade_radius=grade_radius)
        config = load_configuration(points)
        storage = StorageService(_out("solve", out))
        storage.add_input(points)
        ops = build_operators(config, mesh_opts.params(), cache=MeshCache())
        pairs = lowest_eigenpairs(ops, num_eigs, seed=seed)
        clusters = cluster_multiplicities([p.eigenvalue for p in pairs])
        summary = spectrum_summary(pairs, clusters)
        report = SpectrumReport(
            n_points=config.n_points,
            n_vertices=ops.mesh.n_vertices,
            n_free=ops.n_free,
            eigenvalues=summary["eigenvalues"],
            residuals=summary["residuals"],
            clusters=[ClusterReport(**c) for c in summary["clusters"]],
            apriori=apriori_report(ops, pairs),
        )
        storage.write_json("spectrum.json", report.model_dump())
        storage.write_npz("sections.npz", sections=np.column_stack([p.section for p in pairs]))
        export_mesh(ops, storage.register_output("mesh.off"))
        storage.register_output("mesh.off.json")

        branch = []
        for i, pair in enumerate(pairs):
            if not config.n_points:
                break
            try:
                census = classify_vanishing(pair.section, ops)
                branch.append(BranchReport(
                    index=i, eigenvalue=pair.eigenvalue, orders=census["orders"], p_f=census["p_f"],
                    points=[b.to_dict() for b in census["data"]],
                ))
            except (InsufficientSamples, AmbiguousOrder) as e:
                logger.warning(f"Branch data unavailable for eigenpair {i}: {str(e)}")
                branch.append(BranchReport(index=i, eigenvalue=pair.eigenvalue, error=str(e)))
        storage.write_json("branch_report.json", [b.model_dump() for b in branch])
        _manifest(storage, "solve", {"points": points, "num_eigs": num_eigs, **mesh_opts.model_dump()}, seed)

        _table("Clusters", [c.model_dump() for c in report.clusters], ["value", "multiplicity"])
        return [
            f"eigenpair {row['index']}: |f'Sf - lambda| / lambda = {row['identity_error']:.3e} > 0.02"
            for row in report.apriori
            if row["eigenvalue"] > 1e-8 and row["identity_error"] > 0.02
        ]

    _execute("solve", body, check)


@app.command()
def gradcheck(
    n: int = typer.Option(1, "--n", min=1, help="Number of point pairs."),
    trials: int = typer.Option(10, "--trials", min=1),
    h: float = typer.Option(1e-3, "--h"),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Ground-state gradient formula against central finite differences."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        storage = StorageService(_out("gradcheck", out))
        rows = []
        attempt = 0
        with tqdm(total=trials, desc="gradcheck") as bar:
            while len(rows) < trials and attempt < 3 * trials:
                s = seed + attempt
                attempt += 1
                config = random_configuration(2 * n, s)
                try:
                    rows.append(gradient_check_trial(config, s, params, h=h, config_id=f"n{n}-s{s}", threads=threads))
                    bar.update(1)
                except (DegenerateCluster, BranchSwap) as e:
                    logger.warning(f"Skipping configuration seed {s}: {str(e)}")
        storage.write_csv(
            "gradcheck.csv", rows,
            ["config_id", "direction_id", "eigenvalue", "formula_slope", "fd_slope", "forward", "backward", "relative_error"],
        )
        _manifest(storage, "gradcheck", {"n": n, "trials": trials, "h": h, "threads": threads, **params.to_dict()}, seed)
        _table("Gradient check", rows, ["config_id", "formula_slope", "fd_slope", "relative_error"])
        failures = [f"{r['config_id']}: relative error {r['relative_error']:.3e} > 0.05" for r in rows if r["relative_error"] > 0.05]
        if len(rows) < trials:
            failures.append(f"only {len(rows)} of {trials} configurations had a simple ground state")
        return failures

    _execute("gradcheck", body, check)


@app.command()
def flow(
    points: Optional[str] = typer.Option(None, "--points", help="Start configuration; random if omitted."),
    n: int = typer.Option(1, "--n", min=1, help="Pairs of a random start configuration."),
    step: float = typer.Option(0.05, "--step"),
    max_iters: int = typer.Option(40, "--max-iters", min=1),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Gradient ascent of the lowest eigenvalue over configurations."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        storage = StorageService(_out("flow", out))
        storage.add_input(points)
        config = load_configuration(points) if points else random_configuration(2 * n, seed)
        trajectory = flow_ascent(config, step=step, max_iters=max_iters, params=params, seed=seed, progress=True, threads=threads)
        steps = [
            {
                "iteration": i,
                "lambda_1": s.eigenvalues[0],
                "eigenvalues": s.eigenvalues,
                "gradient_norm": s.gradient_norm,
                "multiplicity": s.multiplicity,
                "step": s.step,
                "points": s.points.tolist(),
            }
            for i, s in enumerate(trajectory.steps)
        ]
        storage.write_json("flow.json", {"reason": trajectory.reason, "steps": steps})
        storage.write_csv("flow.csv", steps, ["iteration", "lambda_1", "gradient_norm", "multiplicity", "step"])
        _manifest(storage, "flow", {"points": points, "n": n, "step": step, "max_iters": max_iters, "threads": threads, **params.to_dict()}, seed)
        _table(f"Flow ({trajectory.reason})", steps, ["iteration", "lambda_1", "gradient_norm", "multiplicity"])
        values = [s["lambda_1"] for s in steps]
        return [
            f"lambda_1 decreased at iteration {i + 1}"
            for i, (a, b) in enumerate(zip(values, values[1:]))
            if b < a - 1e-6
        ]

    _execute("flow", body, check)


@app.command("sweep-c2")
def sweep_c2(
    steps: int = typer.Option(40, "--steps", min=2),
    s_min: float = typer.Option(0.05, "--s-min"),
    num_eigs: int = typer.Option(6, "--num-eigs", "-k", min=2),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Spectral flow of the lowest eigenvalues as an antipodal pair merges."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        storage = StorageService(_out("sweep_c2", out))
        separations = np.linspace(np.pi, s_min, steps)
        result = spectral_flow_c2(separations, n_eigs=num_eigs, params=params, seed=seed, progress=True)
        rows = [
            {"separation": s, "min_overlap": o, **{f"branch_{j}": v for j, v in enumerate(values)}}
            for s, o, values in zip(result.separations, result.min_overlaps, result.branches.tolist())
        ]
        storage.write_csv("branches.csv", rows, ["separation", "min_overlap"] + [f"branch_{j}" for j in range(num_eigs)])
        report = result.endpoint_report()
        storage.write_json("endpoints.json", {**report, "swaps": result.swaps})
        _manifest(storage, "sweep-c2", {"steps": steps, "s_min": s_min, "num_eigs": num_eigs, **params.to_dict()}, seed)
        _table("Endpoints", [{"start": a, "end": b} for a, b in zip(report["start"], report["end"])], ["start", "end"])

        failures = []
        doublet = sorted(result.branches[0, :2])
        if any(abs(v - 0.75) > 0.03 * 0.75 for v in doublet):
            failures.append(f"starting doublet {doublet} not within 3% of 0.75")
        low, high = sorted(result.branches[-1, :2])
        if low > 0.1:
            failures.append(f"lower doublet branch ends at {low:.4f} > 0.1")
        if abs(high - 2.0) > 0.2:
            failures.append(f"upper doublet branch ends at {high:.4f}, not within 10% of 2")
        return failures

    _execute("sweep-c2", body, check)


@app.command()
def packing(
    radii: str = typer.Option("0.7,0.5,0.35", "--radii", help="Comma-separated packing radii."),
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Lowest eigenvalue of R-packed pair configurations."""
    _setup(verbose)

    def body() -> List[str]:
        values = _floats(radii)
        storage = StorageService(_out("packing", out))
        rows = packing_eigenvalue_study(values, threads=threads, seed=seed, progress=True)
        storage.write_csv("packing.csv", rows)
        _manifest(storage, "packing", {"radii": values, "threads": threads}, seed)
        _table("Packing", rows, ["R", "n_pairs", "E", "E_R2", "untwisted"])

        failures = []
        ordered = sorted(rows, key=lambda r: -r["R"])
        for a, b in zip(ordered, ordered[1:]):
            if b["E"] <= a["E"]:
                failures.append(f"E(R={b['R']}) = {b['E']:.4f} not above E(R={a['R']}) = {a['E']:.4f}")
        band = [r["E_R2"] for r in rows]
        if band and max(band) > 3.0 * min(band):
            failures.append(f"E R^2 spread {min(band):.3f}..{max(band):.3f} exceeds a factor 3")
        return failures

    _execute("packing", body, check)


@app.command()
def coalesce(
    points: Optional[str] = typer.Option(None, "--points", help="Base configuration; antipodal pair if omitted."),
    separations: str = typer.Option("0.4,0.2,0.1,0.05,0.02", "--separations"),
    identity_separation: float = typer.Option(0.1, "--identity-separation"),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Insert a coalescing pair into a base configuration."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        values = sorted(_floats(separations), reverse=True)
        storage = StorageService(_out("coalesce", out))
        storage.add_input(points)
        base = load_configuration(points) if points else antipodal_configuration()
        rows = coalesce_study(base, values, params=params, seed=seed, progress=True, threads=threads)
        x = np.asarray(rows[0]["x"]) if rows else None
        identity = pair_identity_check(base, identity_separation, x=x, params=params, seed=seed)
        storage.write_csv("coalesce.csv", rows, ["separation", "E_p", "E_q", "gap", "transfer_rayleigh", "e1", "e2", "eps"])
        storage.write_json("pair_identity.json", identity)
        _manifest(
            storage, "coalesce",
            {"points": points, "separations": values, "identity_separation": identity_separation, "threads": threads, **params.to_dict()},
            seed,
        )
        _table("Coalescence", rows, ["separation", "E_p", "E_q", "gap", "transfer_rayleigh"])

        failures = [f"E_p = {r['E_p']:.5f} not above E_q = {r['E_q']:.5f} at s = {r['separation']}" for r in rows if r["E_p"] <= r["E_q"]]
        if rows and rows[-1]["gap"] > 0.1:
            failures.append(f"gap {rows[-1]['gap']:.3f} > 10% at s = {rows[-1]['separation']}")
        if not identity["signs_agree"]:
            failures.append("pair identity sides have opposite signs")
        elif abs(identity["lhs"] - identity["rhs"]) > 0.15 * abs(identity["lhs"]):
            failures.append(f"pair identity sides {identity['lhs']:.4e} and {identity['rhs']:.4e} differ by more than 15%")
        return failures

    _execute("coalesce", body, check)


@app.command()
def nodal(
    ns: str = typer.Option("1,2,3", "--n", help="Comma-separated pair counts, cycled over trials."),
    trials: int = typer.Option(20, "--trials", min=1),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Zero-graph census of ground states over seeded random configurations."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        counts = [int(v) for v in _floats(ns)]
        storage = StorageService(_out("nodal", out))
        def trial(t: int) -> tuple:
            n_pairs = counts[t % len(counts)]
            s = seed + t
            config = random_configuration(2 * n_pairs, s)
            ops = build_operators(config, params)
            pair = lowest_eigenpairs(ops, 1, seed=s)[0]
            graph = extract_zero_graph(pair.section, ops)
            census = vanishing_census(graph, k=1)
            chi = euler_characteristic(graph)
            report = GraphReport(
                trial=t, seed=s, n_pairs=n_pairs, eigenvalue=pair.eigenvalue,
                count=census["count"], bound=census["bound"], cycles=census["cycles"], passed=census["passed"],
                chi=chi["combinatorial"], chi_closed_form=chi["closed_form"], chi_agree=chi["agree"],
                unresolved=len(graph.unresolved),
            )
            return report, {"seed": s, "points": config.points.tolist(), "graph": graph.to_dict()}

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(tqdm(pool.map(trial, range(trials)), total=trials, desc="nodal"))
        else:
            results = [trial(t) for t in tqdm(range(trials), desc="nodal")]
        reports = [r for r, _ in results]
        graphs = [g for _, g in results]
        rows = [r.model_dump() for r in reports]
        storage.write_csv("census.csv", rows)
        storage.write_json("graphs.json", graphs)
        _manifest(storage, "nodal", {"n": counts, "trials": trials, "threads": threads, **params.to_dict()}, seed)
        _table("Census", rows, ["seed", "n_pairs", "count", "bound", "cycles", "chi", "chi_closed_form", "unresolved"])

        failures = [f"seed {r.seed}: census {r.count} < {r.bound} or {r.cycles} cycles" for r in reports if not r.passed]
        failures += [f"seed {r.seed}: V - E = {r.chi} but closed form {r.chi_closed_form}" for r in reports if not r.unresolved and not r.chi_agree]
        return failures

    _execute("nodal", body, check)


@app.command()
def lift(
    run: Optional[str] = typer.Option(None, "--run", help="Output directory of `solve`; closed form if omitted."),
    index: int = typer.Option(0, "--index", min=0, help="Eigenpair index within the run."),
    m: int = typer.Option(1, "--m", min=1, help="Closed-form antipodal mode."),
    alpha: float = typer.Option(0.0, "--alpha"),
    convention: str = typer.Option("stated", "--convention", help="'stated' or 'harmonic' radial power."),
    samples: int = typer.Option(200, "--samples", min=1),
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    threads: int = THREADS,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Lift an eigensection to a homogeneous 1-form on R^3 and check its properties."""
    _setup(verbose)

    def body() -> List[str]:
        storage = StorageService(_out("lift", out))
        if run:
            spectrum_path = os.path.join(run, "spectrum.json")
            storage.add_input(spectrum_path)
            eigenvalues = load_json(spectrum_path)["eigenvalues"]
            if not 0 <= index < len(eigenvalues):
                raise ValueError(f"index {index} out of range for {len(eigenvalues)} eigenvalues")
            lam = float(eigenvalues[index])
            lift_service.homogeneity_exponent(lam)
            ops = import_mesh(os.path.join(run, "mesh.off"))
            with np.load(os.path.join(run, "sections.npz")) as data:
                section = data["sections"][:, index]
            if section.size != ops.n_free:
                raise ValueError(f"section length {section.size} does not match {ops.n_free} free vertices")
            evaluator = MeshSectionEvaluator(ops, section)
        else:
            lam = float(c2_antipodal_spectrum(m).values()[-1])
            evaluator = ClosedFormEvaluator(m, alpha)
        harmonic = make_lift(lam, evaluator, convention)
        x = lift_sample_points(samples, seed=seed)
        rows = sample_lift(harmonic, x)
        storage.write_csv("lift_samples.csv", rows, ["x", "y", "z", "nu1", "nu2", "nu3", "norm"])

        report: Dict[str, Any] = {
            "eigenvalue": lam,
            "mu": harmonic.mu,
            "convention": convention,
            "degree": harmonic.degree,
            "homogeneity_deviation": homogeneity_check(harmonic, x),
            "holder": [holder_exponent_fit(harmonic, i) for i in range(len(evaluator.points))],
        }
        failures = []
        if report["homogeneity_deviation"] > 1e-6:
            failures.append(f"homogeneity deviation {report['homogeneity_deviation']:.2e} > 1e-6")
        if not run:
            grid = ShellGrid()
            residuals = {
                "stated": closed_coclosed_residuals(make_lift(lam, evaluator, "stated"), grid, threads),
                "harmonic": closed_coclosed_residuals(make_lift(lam, evaluator, "harmonic"), grid, threads),
            }
            corrupted = closed_coclosed_residuals(make_lift(lam, evaluator, "harmonic").with_eigenvalue(lam + 0.2), grid, threads)
            sensitivity = corrupted["delta_residual"] / max(residuals["harmonic"]["delta_residual"], 1e-300)
            report.update({"residuals": residuals, "corrupted": corrupted, "sensitivity": sensitivity})
            if not residuals["stated"]["d_order"] >= 1.0:
                failures.append(f"d residual order {residuals['stated']['d_order']:.2f} < 1")
            if not residuals["harmonic"]["delta_order"] >= 1.0:
                failures.append(f"coclosed residual order {residuals['harmonic']['delta_order']:.2f} < 1")
            if sensitivity < 5.0:
                failures.append(f"coclosed sensitivity {sensitivity:.2f} < 5")
        storage.write_json("lift_report.json", report)
        _manifest(
            storage, "lift",
            {"run": run, "index": index, "m": m, "alpha": alpha, "convention": convention, "samples": samples},
            seed,
        )
        _table("Lift", [{"eigenvalue": lam, "mu": harmonic.mu, "homogeneity": report["homogeneity_deviation"]}], ["eigenvalue", "mu", "homogeneity"])
        return failures

    _execute("lift", body, check)


@app.command()
def critical(
    kinds: str = typer.Option("tetrahedron,cube,icosahedron", "--kinds"),
    num_eigs: int = typer.Option(12, "--num-eigs", "-k", min=2),
    background: int = BACKGROUND,
    refine: int = REFINE,
    grade_radius: float = GRADE_RADIUS,
    out: Optional[str] = typer.Option(None, "--out"),
    seed: int = SEED,
    verbose: bool = VERBOSE,
    check: bool = CHECK,
):
    """Critical-combination minima on the antipodal pair and on platonic configurations."""
    _setup(verbose)

    def body() -> List[str]:
        params = MeshOptions(background=background, refine=refine, grade_radius=grade_radius).params()
        storage = StorageService(_out("critical", out))
        ops = build_operators(antipodal_configuration(), params)
        pairs = lowest_eigenpairs(ops, 7, seed=seed)
        doublet = critical_combination(pairs[0:2], ops)
        quartet = critical_combination(pairs[2:6], ops)
        antipodal = [
            {"kind": "antipodal", "eigenvalue": float(np.mean([p.eigenvalue for p in pairs[0:2]])), "multiplicity": 2,
             "relative_minimum": doublet["relative_minimum"]},
            {"kind": "antipodal", "eigenvalue": float(np.mean([p.eigenvalue for p in pairs[2:6]])), "multiplicity": 4,
             "relative_minimum": quartet["relative_minimum"]},
        ]
        names = [k.strip() for k in kinds.split(",") if k.strip()]
        rows = antipodal + platonic_criticality(names, n_eigs=num_eigs, params=params, seed=seed)
        storage.write_csv("critical.csv", rows, ["kind", "eigenvalue", "multiplicity", "relative_minimum"])
        _manifest(storage, "critical", {"kinds": names, "num_eigs": num_eigs, **params.to_dict()}, seed)
        _table("Critical combinations", rows, ["kind", "eigenvalue", "multiplicity", "relative_minimum"])

        failures = []
        if quartet["relative_minimum"] > 1e-3:
            failures.append(f"m = 2 cluster minimum {quartet['relative_minimum']:.2e} > 1e-3")
        if doublet["relative_minimum"] < 0.1:
            failures.append(f"m = 1 cluster minimum {doublet['relative_minimum']:.2e} < 0.1")
        return failures

    _execute("critical", body, check)


@app.command()
def info():
    """Print the resolved environment configuration."""
    settings = {
        "Z2EIG_LOG_LEVEL": LOG_LEVEL,
        "Z2EIG_OUT_DIR": OUT_DIR,
        "Z2EIG_CACHE_DIR": os.getenv("Z2EIG_CACHE_DIR", ""),
        "Z2EIG_SEED": eigen_service.DEFAULT_SEED,
        "Z2EIG_BACKGROUND_COUNT": mesh_service.BACKGROUND_COUNT,
        "Z2EIG_GRADE_DEPTH": mesh_service.GRADE_DEPTH,
        "Z2EIG_GRADE_RADIUS": mesh_service.GRADE_RADIUS,
        "Z2EIG_MIN_ANGLE": mesh_service.MIN_ANGLE_DEG,
        "Z2EIG_CUT_ATTEMPTS": mesh_service.CUT_ATTEMPTS,
        "Z2EIG_SOLVER_SHIFT": eigen_service.SOLVER_SHIFT,
        "Z2EIG_SOLVER_TOL": eigen_service.SOLVER_TOL,
        "Z2EIG_DENSE_LIMIT": eigen_service.DENSE_LIMIT,
        "Z2EIG_GAP_FACTOR": eigen_service.GAP_FACTOR,
        "Z2EIG_FIT_INNER_FACTOR": asymptotics_service.FIT_INNER_FACTOR,
        "Z2EIG_FIT_OUTER_FACTOR": asymptotics_service.FIT_OUTER_FACTOR,
        "Z2EIG_FIT_MAX_ORDER": asymptotics_service.FIT_MAX_ORDER,
        "Z2EIG_FIT_REL_TOL": asymptotics_service.FIT_REL_TOL,
        "Z2EIG_ZERO_EPS": nodal_service.ZERO_EPS,
        "Z2EIG_CLUSTER_FACTOR": nodal_service.CLUSTER_FACTOR,
        "Z2EIG_LIFT_THETA_EXCL": lift_service.THETA_EXCL,
        "Z2EIG_LIFT_FD_STEP": lift_service.FD_STEP,
    }
    _table("Configuration", [{"variable": k, "value": v} for k, v in settings.items()], ["variable", "value"])


if __name__ == "__main__":
    app()
