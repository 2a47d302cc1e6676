import argparse
import copy
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy
from dotenv import load_dotenv

from src.anomaly import AnomalyModel, CalibrationError, estimation_residuals
from src.config import VERSION, ConfigError, ExperimentConfig, validate_environment
from src.data_processor import Dataset, SampleDataProcessor, write_trace
from src.inference import Observation, SimulationSession, control, estimate
from src.modality import MaskSet, enumerate_all_masks
from src.model import GeMuCoModel, ParametricBias
from src.online import OnlineUpdater
from src.scenarios import (
    SCENARIOS,
    build_worlds,
    iter_config,
    loss_spec,
    network_options,
    online_config,
    parse_state,
    run_scenario,
    structure_thresholds,
    train_config,
)
from src.structure import determine_structure
from src.testbed import collect_dataset
from src.trainer import Trainer, pb_principal_coordinates

# Load environment variables
load_dotenv()

log_level = getattr(logging, os.getenv('LOG_LEVEL', 'INFO').upper(), logging.INFO)
logging.basicConfig(
    level=log_level,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)
logger = logging.getLogger(__name__)

CommandResult = Tuple[List[Path], int]


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with the command-line overrides applied."""
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    config = config.with_seed(args.seed)
    if getattr(args, "world", None):
        data = copy.deepcopy(config.data)
        data["world"]["name"] = args.world
        config = ExperimentConfig(data, config.source, config.path)
    return config


def _states(args: argparse.Namespace):
    return [parse_state(args.state)] if getattr(args, "state", None) else None


def _dataset(args: argparse.Namespace, config: ExperimentConfig) -> Dataset:
    """Samples from --data, or a fresh rollout of the configured world."""
    if getattr(args, "data", None):
        return SampleDataProcessor().read_csv(args.data)
    worlds = build_worlds(config, _states(args))
    n = args.n or config["collect"]["n_samples"]
    return collect_dataset(worlds, n, config.seed, config["collect"]["available"])


def _pb(model: GeMuCoModel, label: Optional[str]) -> Optional[ParametricBias]:
    if model.pb_dim == 0 or label is None:
        return None
    return model.pb(label)


def _flatten(prefix_values: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {f"{name}_{i}": float(v) for name, values in prefix_values.items() for i, v in enumerate(np.ravel(values))}


def cmd_collect(args, config, out_dir: Path) -> CommandResult:
    dataset = _dataset(args, config)
    target = out_dir / "samples.csv"
    SampleDataProcessor().write_csv(dataset, target)
    return [target], 0


def cmd_determine(args, config, out_dir: Path) -> CommandResult:
    dataset = _dataset(args, config)
    result = determine_structure(dataset, structure_thresholds(config), train_config(config), network_options(config))
    report_path, table_path, model_path = out_dir / "structure.json", out_dir / "structure.csv", out_dir / "model.json"
    result.report.save(report_path)
    result.report.table().to_csv(table_path, index=False)
    result.final.model.save(model_path)
    return [report_path, table_path, model_path], 0


def cmd_train(args, config, out_dir: Path) -> CommandResult:
    dataset = _dataset(args, config)
    layout = dataset.layout
    if args.structure:
        report = json.loads(Path(args.structure).read_text())
        in_groups, out_groups, masks = report["in_groups"], report["out_groups"], MaskSet.from_list(report["masks"])
    else:
        in_groups, out_groups, masks = layout.names, layout.names, enumerate_all_masks(layout.n_groups)
    options = network_options(config)
    model = GeMuCoModel.create(
        layout, in_groups, out_groups, dataset.fit_normalizer(), masks,
        pb_dim=options.pb_dim, latent_dim=options.latent_dim, hidden=options.hidden, seed=options.seed,
    )
    result = Trainer(train_config(config)).train(model, dataset)
    model_path, loss_path = out_dir / "model.json", out_dir / "training_loss.csv"
    result.model.save(model_path)
    write_trace(({"epoch": k, "loss": loss} for k, loss in enumerate(result.loss_history)), loss_path)
    outputs = [model_path, loss_path]
    if result.model.pb_dim:
        pb_path = out_dir / "pb_map.csv"
        pb_principal_coordinates(result.pb_table).to_csv(pb_path, index=False, float_format="%.17g")
        outputs.append(pb_path)
    return outputs, 0


def cmd_adapt(args, config, out_dir: Path) -> CommandResult:
    model = GeMuCoModel.load(args.model)
    start = _pb(model, args.start_state) or ParametricBias.zeros(model.pb_dim)
    updater = OnlineUpdater(model, start, online_config(config))
    updater.observe_all(_dataset(args, config).samples)
    adapted, pb = updater.snapshot()
    adapted = adapted.with_pb_table({**adapted.pb_table, "adapted": ParametricBias(pb.values, "adapted")})
    model_path, trajectory_path = out_dir / "model_adapted.json", out_dir / "pb_trajectory.csv"
    adapted.save(model_path)
    updater.trajectory_frame().to_csv(trajectory_path, index=False, float_format="%.17g")
    return [model_path, trajectory_path], 0


def cmd_estimate(args, config, out_dir: Path) -> CommandResult:
    model = GeMuCoModel.load(args.model)
    hidden = config["estimate"]["hidden"]
    p = _pb(model, args.start_state or config["estimate"]["state"])
    cfg = iter_config(config)
    layout = model.data_layout
    rows = []
    for sample in _dataset(args, config).samples:
        shown = {
            name: sample.values[layout.slice(name)]
            for name, flag in zip(layout.names, sample.available)
            if flag and name not in hidden
        }
        est = estimate(model, Observation.from_groups(layout, shown), p, cfg)
        rows.append({"state_id": sample.state_id, "strategy": est.strategy.value, **_flatten(est.values)})
    target = out_dir / "estimates.csv"
    write_trace(rows, target)
    return [target], 0


def cmd_control(args, config, out_dir: Path) -> CommandResult:
    model = GeMuCoModel.load(args.model)
    section = config["control"]
    if section["group"] is None or section["loss"] is None:
        raise ConfigError("control.group and control.loss are required for the control command", config.path)
    group = section["group"]
    dims = model.data_layout.dim(group) if group in model.data_layout else 0
    init = np.asarray(section["init"], dtype=float) if section["init"] is not None else np.zeros(dims)
    result = control(model, loss_spec(config, section["loss"]), group, init, _pb(model, args.start_state), iter_config(config))
    value_path, trace_path = out_dir / "control.csv", out_dir / "control_trace.csv"
    write_trace([{"strategy": result.strategy.value, **_flatten({group: result.value})}], value_path)
    trajectory = result.result.trajectory if result.result is not None else []
    write_trace(({"iteration": k, "loss": loss} for k, loss in enumerate(trajectory)), trace_path)
    return [value_path, trace_path], 0


def cmd_simulate(args, config, out_dir: Path) -> CommandResult:
    model = GeMuCoModel.load(args.model)
    section = config["simulate"]
    group = section["command_group"]
    constraints = loss_spec(config, section["constraints"]) if section["constraints"] else None
    session = SimulationSession(
        model, group, constraints, _pb(model, args.start_state), iter_config(config), section["carry_over"]
    )
    rows = []
    layout = model.data_layout
    for step, sample in enumerate(_dataset(args, config).samples):
        x_send = sample.values[layout.slice(group)]
        result = session.step(x_send)
        rows.append({"step": step, "final_loss": result.trajectory[-1], **_flatten(result.values)})
    target = out_dir / "simulation.csv"
    write_trace(rows, target)
    return [target], 0


RESIDUAL_CHUNK = 256


def _scan_residual_csv(path: str, n_cal: int, n_sigma: float) -> Tuple[AnomalyModel, pd.DataFrame]:
    """Calibrate on the first n_cal rows of a residual CSV, then score the rest chunk by chunk."""
    detector, pending, scans = None, [], []
    for chunk in pd.read_csv(path, chunksize=RESIDUAL_CHUNK):
        rows = chunk.to_numpy(dtype=float)
        if detector is None:
            pending.append(rows)
            collected = np.concatenate(pending)
            if len(collected) < n_cal:
                continue
            detector = AnomalyModel.calibrate(collected[:n_cal], n_sigma)
            rows = collected[n_cal:]
        if len(rows):
            scans.append(detector.scan(rows))
    if not scans:
        raise CalibrationError(f"Need more than {n_cal} residual rows: the first {n_cal} calibrate, the rest are scored")
    return detector, pd.concat(scans, ignore_index=True)


def cmd_detect(args, config, out_dir: Path) -> CommandResult:
    section = config["detect"]
    n_cal = section["n_calibration"]
    if args.residuals:
        detector, scan = _scan_residual_csv(args.residuals, n_cal, float(section["n_sigma"]))
    else:
        if not args.model:
            raise ConfigError("detect needs --model unless precomputed --residuals are given")
        model = GeMuCoModel.load(args.model)
        samples = _dataset(args, config).samples
        if len(samples) <= n_cal:
            raise CalibrationError(f"Need more than {n_cal} samples: the first {n_cal} calibrate, the rest are scored")
        p = _pb(model, args.start_state)
        cfg = iter_config(config)
        calibration = estimation_residuals(model, samples[:n_cal], section["hidden"], p, cfg)
        detector = AnomalyModel.calibrate(calibration, float(section["n_sigma"]))
        scan = detector.scan(estimation_residuals(model, samples[n_cal:], section["hidden"], p, cfg))
    scan.insert(0, "step", np.arange(len(scan)))
    target = out_dir / "detection.csv"
    scan.to_csv(target, index=False, float_format="%.17g")
    logger.info(f"Flagged {int(scan['anomalous'].sum())} of {len(scan)} samples (threshold {detector.threshold:.4f})")
    return [target], 0


def cmd_eval(args, config, out_dir: Path) -> CommandResult:
    result = run_scenario(args.scenario, config)
    target = out_dir / f"{args.scenario}.json"
    target.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    if not result.passed:
        logger.warning(f"Scenario {args.scenario} did not meet its acceptance checks")
    return [target], 0 if result.passed else 1


COMMANDS: Dict[str, Callable[..., CommandResult]] = {
    "collect": cmd_collect,
    "determine": cmd_determine,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "estimate": cmd_estimate,
    "control": cmd_control,
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config (YAML); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--out-dir", help="Output directory (default: $BODYSCHEMA_OUT_DIR)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="Samples CSV; a fresh world rollout is used when omitted")
    data.add_argument("--world", choices=["A", "B", "C"], help="Override the configured world")
    data.add_argument("--n", type=int, help="Samples per state for a fresh rollout")

    with_model = argparse.ArgumentParser(add_help=False)
    with_model.add_argument("--model", required=True, help="Model JSON written by train or determine")
    with_model.add_argument("--start-state", help="State label whose parametric bias is used")

    parser = argparse.ArgumentParser(prog="bodyschema", description="Body schema learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    collect = sub.add_parser("collect", parents=[common, data], help="Roll out a world to CSV")
    collect.add_argument("--state", help="Hidden state, e.g. 500,30 (world A) or 0.08,176 (world C)")
    sub.add_parser("determine", parents=[common, data], help="Determine inputs, outputs and feasible masks")
    train = sub.add_parser("train", parents=[common, data], help="Train a model")
    train.add_argument("--structure", help="structure.json from determine; all groups in and out when omitted")
    sub.add_parser("adapt", parents=[common, data, with_model], help="Online update from streamed samples")
    sub.add_parser("estimate", parents=[common, data, with_model], help="Estimate hidden groups")
    sub.add_parser("control", parents=[common, with_model], help="Compute a control value")
    sub.add_parser("simulate", parents=[common, data, with_model], help="Simulate commanded states")
    detect = sub.add_parser("detect", parents=[common, data], help="Mahalanobis anomaly detection")
    detect.add_argument("--model", help="Model JSON; residuals are computed from the samples with it")
    detect.add_argument("--start-state", help="State label whose parametric bias is used")
    detect.add_argument("--residuals", help="CSV of precomputed residual rows, scored without a model")
    evaluate = sub.add_parser("eval", parents=[common], help="Run a named acceptance scenario")
    evaluate.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    return parser


def write_manifest(out_dir: Path, command: str, argv: List[str], config: ExperimentConfig, outputs: List[Path]) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config_path": config.path,
        "config_sha256": config.sha256,
        "config": config.data,
        "seed": config.seed,
        "outputs": [path.name for path in outputs],
        "versions": {
            "bodyschema": VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
    }
    target = out_dir / f"{command}.manifest.json"
    target.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return target


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        validate_environment()
        config = load_config(args)
        out_dir = Path(args.out_dir or os.environ["BODYSCHEMA_OUT_DIR"])
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs, code = COMMANDS[args.command](args, config, out_dir)
        write_manifest(out_dir, args.command, argv, config, outputs)
        logger.info(f"{args.command} wrote {', '.join(str(p) for p in outputs)}")
        return code
    except ConfigError as e:
        logger.error(str(e))
        return 2
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
