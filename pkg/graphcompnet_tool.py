"""
Command-line pipeline: remesh a part, print it through the oracle, train the
predictor and compensator, compensate a CAD cloud and report deviations.

Every subcommand writes its artifacts and a manifest.txt into --out.
"""
from __future__ import annotations

import argparse
from dataclasses import replace
import logging
from pathlib import Path
import sys
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from dataset import (
    BUCKET_KINDS,
    DEFAULT_DATASET_VOXEL,
    Dataset,
    bar_nesting_layout,
    bucket_layout,
    build_synthetic_dataset,
    dataset_from_clouds,
    split_ids,
)
from diff_engine import Tape
from errors import ArgumentError, ConfigError, GraphCompNetError
from geometry_core import ChamberSpec, Placement, TriangleMesh, resample_uniform
from graphnet import EngineKind, GraphEngine, NetworkConfig, trace_composition
from losses import trace_deformation
import mesh_io
from part_library import bar_mesh, cube_mesh, egg_plate_mesh
from print_oracle import OraclePredictor, WarpSpec, simulate_print
from registration import icp_align
from remesh import IsoGraph, isometry_report, read_isograph, remesh, write_isograph
from run_config import RunConfig, file_sha256, write_manifest
import diff_engine as de
import evaluation
import trainer

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
PART_KINDS = ("bar", "cube", "egg-plate")


# --- helpers ------------------------------------------------------------------


def _read_mesh(path: str) -> TriangleMesh:
    if Path(path).suffix.lower() == ".obj":
        return mesh_io.read_obj(path)
    data = mesh_io.read_ply(path)
    if data.faces is None or not len(data.faces):
        raise ArgumentError(f"{path}: mesh PLY has no faces")
    return TriangleMesh(data.points, data.faces)


def _part_mesh(kind: str) -> TriangleMesh:
    if kind == "bar":
        return bar_mesh()
    if kind == "cube":
        return cube_mesh(20.0)
    return egg_plate_mesh()


def _placement(args: argparse.Namespace) -> Placement:
    rx, ry, rz = args.rotate
    return Placement.from_euler(rx, ry, rz, translation=np.asarray(args.translate, dtype=np.float64))


class Run:
    """Resolved config, output directory and the manifest entries of one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = RunConfig.load(args.config).override(
            warp__amplitude=getattr(args, "amplitude", None),
            warp__edge_gain=getattr(args, "edge_gain", None),
            warp__wavelength=getattr(args, "wavelength", None),
            warp__noise=getattr(args, "noise", None),
            train__epochs=getattr(args, "epochs", None),
            train__learning_rate=getattr(args, "learning_rate", None),
            train__rounds=getattr(args, "rounds", None),
            train__train_fraction=getattr(args, "train_fraction", None),
            remesh__voxel_size=getattr(args, "voxel_size", None),
            resample__points=getattr(args, "points", None),
        )
        if getattr(args, "position_blind", False):
            self.config = self.config.override(net__position_aware=False)
        self.manifest: dict[str, Any] = {"subcommand": args.command, "seed": args.seed}
        for key, value in sorted(vars(args).items()):
            if key not in ("command", "func", "seed", "verbose"):
                self.manifest[f"arg.{key}"] = value
        for key, value in self.config.items():
            self.manifest[f"config.{key}"] = value

    @property
    def seed(self) -> int:
        return int(self.args.seed)

    def warp(self) -> WarpSpec:
        return self.config.warp(self.seed)

    def record_input(self, name: str, path: Optional[str]) -> None:
        if path:
            self.manifest[f"input.{name}.sha256"] = file_sha256(path)

    def path(self, name: str) -> Path:
        return self.out / name

    def finish(self) -> None:
        write_manifest(self.path("manifest.txt"), self.manifest)
        logger.info(f"Artifacts written to {self.out}")


def _print_report(title: str, report: Any) -> None:
    print(f"\n--- {title} ---")
    print(yaml.dump(report, sort_keys=False))


def _load_dataset(run: Run) -> Dataset:
    """Synthetic build layout or user-supplied graph + CAD/scan pairs."""
    args = run.args
    fraction = float(run.config["train.train_fraction"])
    if args.synthetic:
        chamber = run.config.chamber()
        if args.synthetic == "bars":
            mesh = bar_mesh()
            placements = bar_nesting_layout(chamber)
        else:
            mesh = egg_plate_mesh()
            placements = bucket_layout(args.synthetic, chamber)
        ids = [str(i) for i in range(len(placements))]
        train, validation = split_ids(ids, fraction, run.seed)
        voxel = run.config["remesh.voxel_size"] or DEFAULT_DATASET_VOXEL
        dataset = build_synthetic_dataset(
            mesh,
            [placements[int(i)] for i in train],
            [placements[int(i)] for i in validation],
            warp=run.warp(),
            voxel_size=float(voxel),
            seed=run.seed,
        )
    else:
        if not (args.graph and args.cad and args.scan):
            raise ArgumentError("Give --synthetic LAYOUT or --graph with matching --cad and --scan files.")
        run.record_input("graph", args.graph)
        for i, (cad_path, scan_path) in enumerate(zip(args.cad, args.scan)):
            run.record_input(f"cad{i}", cad_path)
            run.record_input(f"scan{i}", scan_path)
        dataset = dataset_from_clouds(
            read_isograph(args.graph),
            [mesh_io.read_cloud(p) for p in args.cad],
            [mesh_io.read_cloud(p) for p in args.scan],
            train_fraction=fraction,
            seed=run.seed,
        )
    run.manifest["dataset_hash"] = dataset.content_hash()
    return dataset


def _training(run: Run) -> trainer.TrainingConfig:
    checkpoints = run.path("checkpoints") if run.config["train.checkpoint_every"] else None
    return run.config.training(run.seed, checkpoint_dir=checkpoints)


def _save_engine(run: Run, result: trainer.TrainingResult, name: str) -> dict[str, Any]:
    model_path = run.path(f"{name}.wcp")
    result.engine.save(model_path)
    trainer.write_loss_curve(result.history, run.path(f"loss_{name}.csv"))
    run.manifest[f"output.{name}.sha256"] = file_sha256(model_path)
    return {
        "model": str(model_path),
        "initial_loss": result.initial_total,
        "final_loss": result.final_total,
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
    }


# --- subcommands --------------------------------------------------------------


def cmd_remesh(run: Run) -> None:
    args = run.args
    if args.mesh:
        run.record_input("mesh", args.mesh)
        mesh = _read_mesh(args.mesh)
    else:
        mesh = _part_mesh(args.part)
    placed = mesh.transformed(_placement(args))
    graph = remesh(placed, voxel_size=run.config["remesh.voxel_size"], seed=run.seed)
    write_isograph(graph, run.path("graph.ply"))
    mesh_io.write_cloud(graph.cloud(), run.path("cad.ply"))
    resampled = resample_uniform(placed, int(run.config["resample.points"]), run.seed)
    mesh_io.write_cloud(resampled, run.path("resampled.ply"))
    stats = isometry_report(graph)
    _print_report(
        "Remesh Report",
        {
            "vertices": graph.vertex_count,
            "edges": int(len(graph.edges)),
            "faces": int(len(graph.faces)),
            "edge_length_mean": stats.mean,
            "edge_length_std": stats.std,
            "edge_length_cv": stats.cv,
        },
    )


def cmd_simulate(run: Run) -> None:
    run.record_input("cad", run.args.cad)
    cad = mesh_io.read_cloud(run.args.cad)
    warp = run.warp()
    scan = simulate_print(cad, warp)
    mesh_io.write_cloud(scan, run.path("scan.ply"), comments=[f"warp {warp.fingerprint()}"])
    displacement = np.linalg.norm(scan.points - cad.points, axis=1)
    _print_report(
        "Print Simulation",
        {"points": len(cad), "abs_mean_displacement": float(displacement.mean()), "max_displacement": float(displacement.max())},
    )


def cmd_train_predict(run: Run) -> None:
    dataset = _load_dataset(run)
    result = trainer.train_predictor(
        dataset, _training(run), run.config.network(), run.config.chamber()
    )
    _print_report("Predictor Training", _save_engine(run, result, "predictor"))


def _require_same_chamber(engine: GraphEngine, chamber: ChamberSpec, path: str) -> None:
    same = np.array_equal(engine.chamber.min_corner, chamber.min_corner) and np.array_equal(
        engine.chamber.max_corner, chamber.max_corner
    )
    if not same:
        raise ConfigError(
            f"{path} was trained for chamber {engine.chamber.min_corner.tolist()}..{engine.chamber.max_corner.tolist()}, "
            f"the run config uses {chamber.min_corner.tolist()}..{chamber.max_corner.tolist()}"
        )


def cmd_train_compensate(run: Run) -> None:
    args = run.args
    dataset = _load_dataset(run)
    config = _training(run)
    network = run.config.network()
    chamber = run.config.chamber()
    summary: dict[str, Any] = {}
    if args.oracle or args.predictor:
        if args.oracle:
            predictor: Any = OraclePredictor(run.warp())
        else:
            run.record_input("predictor", args.predictor)
            predictor = GraphEngine.load(args.predictor).freeze()
            _require_same_chamber(predictor, chamber, args.predictor)
        result = trainer.train_compensator(dataset, predictor, config, network, chamber)
        summary["compensator"] = _save_engine(run, result, "compensator")
        compensator = result.engine
    else:
        rounds = trainer.iterate_loop(
            dataset,
            config,
            int(run.config["train.rounds"]),
            warp=run.warp(),
            augment=bool(run.config["train.augment"]),
            network=network,
            chamber=chamber,
        )
        last = rounds[-1]
        summary["rounds"] = len(rounds)
        summary["predictor"] = _save_engine(run, last.predictor, "predictor")
        summary["compensator"] = _save_engine(run, last.compensator, "compensator")
        compensator = last.compensator.engine
    rows = evaluation.evaluate_compensation(dataset.validation() or dataset.train(), compensator, run.warp())
    evaluation.write_report_csv([(r.part_id, r.compensated) for r in rows], run.path("report.csv"))
    summary["held_out"] = {r.part_id: r.compensated.to_dict() for r in rows}
    _print_report("Compensator Training", summary)


def cmd_compensate(run: Run) -> None:
    args = run.args
    for name in ("model", "cad", "graph"):
        run.record_input(name, getattr(args, name))
    engine = GraphEngine.load(args.model)
    if engine.kind is not EngineKind.COMPENSATOR:
        raise ArgumentError(f"{args.model} holds a {engine.kind.value} engine, not a compensator")
    cad = mesh_io.read_cloud(args.cad)
    graph = read_isograph(args.graph)
    compensated = engine.forward(cad, graph)
    mesh_io.write_cloud(compensated, run.path("compensated.ply"))
    shift = np.linalg.norm(compensated.points - cad.points, axis=1)
    _print_report(
        "Compensation",
        {"points": len(cad), "mean_shift": float(shift.mean()), "max_shift": float(shift.max())},
    )


def cmd_evaluate(run: Run) -> None:
    args = run.args
    for name in ("cad", "scan", "graph", "baseline_scan"):
        run.record_input(name, getattr(args, name))
    cad = mesh_io.read_cloud(args.cad)
    scan = mesh_io.read_cloud(args.scan)
    graph = read_isograph(args.graph)
    if args.align:
        scan = icp_align(scan, cad).apply(scan)
    baseline = None
    rows: list[tuple[str, evaluation.DeviationReport]] = []
    if args.baseline_scan:
        baseline, _ = evaluation.deviation_report(
            cad, mesh_io.read_cloud(args.baseline_scan), graph, mode=args.mode
        )
        rows.append(("baseline", baseline))
    report, field = evaluation.deviation_report(cad, scan, graph, baseline=baseline, mode=args.mode)
    rows.append(("evaluated", report))
    evaluation.export_heatmap(field, cad, run.path("heatmap.ply"))
    evaluation.write_report_csv(rows, run.path("report.csv"))
    _print_report("Deviation Report", report.to_dict())


def _gradcheck_setup(run: Run) -> tuple[IsoGraph, np.ndarray, np.ndarray, NetworkConfig, WarpSpec]:
    """Box graph at the chamber centre, its oracle print and the configured network."""
    warp = run.warp()
    cube = cube_mesh(20.0, center=warp.chamber.center)
    graph = IsoGraph.from_faces(cube.vertices, cube.faces)
    scan = simulate_print(graph.cloud(), warp).points
    network = replace(run.config.network(), zero_residual=False)
    if run.args.widths:
        network = replace(network, layer_widths=tuple(run.args.widths))
    return graph, graph.vertices, scan, network, warp


def cmd_gradcheck(run: Run) -> int:
    graph, cad, scan, network, warp = _gradcheck_setup(run)
    predictor = GraphEngine.initialize(EngineKind.PREDICTOR, network, warp.chamber, seed=run.seed)
    frozen = GraphEngine.initialize(EngineKind.PREDICTOR, network, warp.chamber, seed=run.seed + 2).freeze()
    compensator = GraphEngine.initialize(EngineKind.COMPENSATOR, network, warp.chamber, seed=run.seed + 1)
    logger.info(f"Checking gradients of a {list(network.layer_widths)} network on {graph.vertex_count} vertices")

    weights = run.config.loss_weights()

    def predictor_objective(tape: Tape, bound: Any) -> Any:
        shift = predictor.trace_shift(tape, cad, None, graph, bound)
        return trace_deformation(tape, shift, scan, weights, base=cad).total

    def compensator_objective(tape: Tape, bound: Any) -> Any:
        shift = trace_composition(tape, cad, graph, compensator, frozen, bound)
        return trace_deformation(tape, shift, cad, weights, base=cad).total

    results = {
        "predictor": de.grad_check_detail(predictor_objective, predictor.params),
        "compensator": de.grad_check_detail(compensator_objective, compensator.params),
    }
    worst = max(r.max_relative_error for r in results.values())
    _print_report(
        "Gradient Check",
        {
            "max_relative_error": worst,
            "tolerance": GRADCHECK_TOLERANCE,
            "layer_widths": list(network.layer_widths),
            **{
                kind: {"max_relative_error": r.max_relative_error, "worst_parameter": r.worst_parameter, "checked": r.checked}
                for kind, r in results.items()
            },
        },
    )
    run.manifest["gradcheck.layer_widths"] = ",".join(str(w) for w in network.layer_widths)
    run.manifest["max_relative_error"] = repr(worst)
    return 0 if worst <= GRADCHECK_TOLERANCE else 1


# --- argument parsing -----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random choice in the run.")
    parser.add_argument("--config", help="key=value config file.")
    parser.add_argument("--out", default="out", help="Output directory (default: out).")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging.")


def _add_warp(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--amplitude", type=float, help="Warp amplitude in mm.")
    parser.add_argument("--edge-gain", type=float, help="Edge amplification of the warp.")
    parser.add_argument("--wavelength", type=float, help="Dome wavelength along x in mm.")
    parser.add_argument("--noise", type=float, help="Scan noise standard deviation in mm.")


def _add_dataset(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--synthetic",
        choices=("bars",) + BUCKET_KINDS,
        help="Build the dataset from a synthetic build layout printed through the oracle.",
    )
    parser.add_argument("--graph", help="IsoGraph PLY shared by all parts.")
    parser.add_argument("--cad", nargs="+", help="Placed CAD clouds, one per part.")
    parser.add_argument("--scan", nargs="+", help="Scans, one per part, in --cad order.")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--train-fraction", type=float)
    parser.add_argument("--voxel-size", type=float)
    parser.add_argument("--position-blind", action="store_true", help="Re-centre parts before the network.")
    _add_warp(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphcompnet",
        description="Position-aware shape deviation prediction and compensation for 3D printed parts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("remesh", help="Remesh a CAD part into an isometric graph.")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--mesh", help="OBJ or PLY triangle mesh.")
    source.add_argument("--part", choices=PART_KINDS, default="bar", help="Built-in synthetic part.")
    p.add_argument("--translate", type=float, nargs=3, default=(190.0, 142.0, 190.0), metavar=("X", "Y", "Z"))
    p.add_argument("--rotate", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("RX", "RY", "RZ"))
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--points", type=int, help="Uniform resample size.")
    _add_common(p)
    p.set_defaults(func=cmd_remesh)

    p = sub.add_parser("simulate", help="Print a placed CAD cloud through the synthetic oracle.")
    p.add_argument("--cad", required=True)
    _add_warp(p)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-predict", help="Train the predictor engine.")
    _add_dataset(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_predict)

    p = sub.add_parser("train-compensate", help="Train the compensator against a frozen predictor.")
    _add_dataset(p)
    chooser = p.add_mutually_exclusive_group()
    chooser.add_argument("--predictor", help="Trained predictor model file.")
    chooser.add_argument("--oracle", action="store_true", help="Use the analytic oracle as the predictor.")
    p.add_argument("--rounds", type=int, help="Predictor/compensator rounds when no predictor is given.")
    _add_common(p)
    p.set_defaults(func=cmd_train_compensate)

    p = sub.add_parser("compensate", help="Apply a trained compensator to a CAD cloud.")
    p.add_argument("--model", required=True)
    p.add_argument("--cad", required=True)
    p.add_argument("--graph", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("evaluate", help="Signed deviation report and heatmap.")
    p.add_argument("--cad", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--baseline-scan", help="Scan of the uncompensated print, for the improvement column.")
    p.add_argument("--mode", choices=evaluation.CORRESPONDENCE_MODES, default="nearest")
    p.add_argument("--align", action="store_true", help="ICP-align the scan onto the CAD first.")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="Check analytic gradients of both engines.")
    p.add_argument(
        "--widths", type=int, nargs="+", help="Hidden layer widths (default: net.layer_widths)."
    )
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    # Configure logging to output to stdout
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s: %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        run = Run(args)
        status = args.func(run)
        run.finish()
    except (GraphCompNetError, OSError) as e:
        logging.error(f"Error: {e}")
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
