import copy
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import typer
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from aim_merge.config import load_config, resolve_threads, save_sample_config
from aim_merge.core.ablation import ScoreSetup, ToySetup, calib_size_sweep, omega_sweep, rows_to_csv
from aim_merge.core.aim import relax
from aim_merge.core.calibration import load_calibration
from aim_merge.core.errors import AimMergeError, CompatibilityError, InputError
from aim_merge.core.evaluation import hv_report, load_scores
from aim_merge.core.manifest import build_manifest, write_manifest
from aim_merge.core.mergers import run_merge
from aim_merge.core.models import MergeConfig, RelaxationConfig
from aim_merge.core.profiler import load_profile, profile_activations, profile_sensitivity, save_profile
from aim_merge.core.runtime import load_model_spec
from aim_merge.core.tensors import checkpoint_compat_check, checkpoint_load, checkpoint_save
from aim_merge.logging_setup import setup_logging

logger = logging.getLogger(__name__)

app = typer.Typer(
    help="Activation-informed model merging: profile, merge, relax and evaluate.",
    no_args_is_help=True,
    add_completion=False,
)


@contextmanager
def _exit_on_error():
    """Turn library errors into their exit codes."""
    try:
        yield
    except AimMergeError as e:
        logger.error(str(e))
        raise typer.Exit(code=e.exit_code)


def _config(ctx: typer.Context) -> Dict[str, Any]:
    return ctx.obj["config"]


def _emit_json(payload: Any) -> None:
    typer.echo(json.dumps(payload, indent=2, sort_keys=True))


def _round(value: Any, decimals: int) -> Any:
    if isinstance(value, float):
        return round(value, decimals)
    if isinstance(value, dict):
        return {k: _round(v, decimals) for k, v in value.items()}
    if isinstance(value, list):
        return [_round(v, decimals) for v in value]
    return value


def _parse_list(raw: str, cast, label: str) -> List:
    try:
        return [cast(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise InputError(f"cannot parse {label} '{raw}': {e}") from e


def _relaxation_settings(omega: float, variant: str = "activation") -> RelaxationConfig:
    try:
        return RelaxationConfig(omega=omega, variant=variant)
    except ValueError as e:
        raise InputError(f"invalid relaxation settings: {e}") from e


@app.callback()
def callback(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="YAML settings file.", envvar="AIM_CONFIG"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level."),
):
    """
    Merge fine-tuned experts into their base model and protect the base model's
    salient input channels with activation-informed relaxation.

    Examples:
    aim-merge profile --spec spec.json --base base.tmap --calib calib.csv --out profile.json

    aim-merge merge --method ties --base base.tmap --expert code.tmap --expert math.tmap --out-delta delta.tmap --out-model merged.tmap

    aim-merge relax --base base.tmap --delta delta.tmap --profile profile.json --omega 0.4 --out aim.tmap

    aim-merge eval --scores scores.csv --population Code --population Math --merged Merged --include-base
    """
    config_data = load_config(config)
    setup_logging("DEBUG" if verbose else config_data["runtime"]["log_level"])
    ctx.obj = {"config": config_data}


@app.command()
def profile(
    ctx: typer.Context,
    spec: Path = typer.Option(..., "--spec", help="Model spec JSON."),
    base: Path = typer.Option(..., "--base", help="Base model checkpoint (TMAPv1)."),
    calib: Path = typer.Option(..., "--calib", help="Calibration set (CSV or CALBv1)."),
    variant: Optional[str] = typer.Option(None, "--variant", help="activation or sensitivity."),
    out: Path = typer.Option(..., "--out", help="Profile JSON to write."),
):
    """Measure the base model's saliency over a calibration set."""
    config_data = _config(ctx)
    with _exit_on_error():
        variant = variant or config_data["profile"]["variant"]
        if variant not in ("activation", "sensitivity"):
            raise InputError(f"unknown profile variant '{variant}', expected activation or sensitivity")
        threads = resolve_threads(config_data)

        model_spec = load_model_spec(spec)
        base_model = checkpoint_load(base)
        calibration = load_calibration(calib)
        if variant == "activation":
            result = profile_activations(model_spec, base_model, calibration, threads)
        else:
            result = profile_sensitivity(model_spec, base_model, calibration, threads)
        save_profile(result, out)

        resolved = copy.deepcopy(config_data)
        resolved["profile"]["variant"] = variant
        argv = ["profile", "--spec", str(spec), "--base", str(base), "--calib", str(calib),
                "--variant", variant, "--out", str(out)]
        write_manifest(build_manifest("profile", argv, resolved, [spec, base, calib], [out]), out)
        _emit_json({"profile": str(out), "kind": result.kind, "samples": result.sample_count})


@app.command()
def merge(
    ctx: typer.Context,
    base: Path = typer.Option(..., "--base", help="Base model checkpoint."),
    expert: List[Path] = typer.Option(..., "--expert", help="Expert checkpoint; repeat for each expert."),
    method: Optional[str] = typer.Option(
        None, "--method", help="average, task_arithmetic, ties, dare_ta, dare_ties or dare_average."
    ),
    lambdas: Optional[List[float]] = typer.Option(None, "--lambda", help="Per-expert weight; repeat once per expert."),
    density: Optional[float] = typer.Option(None, "--density", help="Fraction of entries kept by the TIES trim."),
    drop_rate: Optional[float] = typer.Option(None, "--drop-rate", help="DARE drop probability."),
    seed: Optional[int] = typer.Option(None, "--seed", help="DARE seed."),
    merge_config: Optional[Path] = typer.Option(None, "--merge-config", help="MergeConfig JSON file."),
    out_delta: Path = typer.Option(..., "--out-delta", help="Merged delta checkpoint to write."),
    out_model: Path = typer.Option(..., "--out-model", help="Merged model checkpoint to write."),
):
    """Merge expert checkpoints into the base model."""
    config_data = _config(ctx)
    with _exit_on_error():
        settings = dict(config_data["merge"])
        if merge_config is not None:
            if not merge_config.is_file():
                raise InputError(f"merge config not found: {merge_config}")
            try:
                from_file = json.loads(merge_config.read_text(encoding="utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise InputError(f"{merge_config}: invalid JSON: {e}") from e
            if not isinstance(from_file, dict):
                raise InputError(f"{merge_config}: expected a JSON object")
            settings.update(from_file)
        overrides = {"method": method, "lambdas": lambdas or None, "density": density,
                     "drop_rate": drop_rate, "seed": seed}
        settings.update({k: v for k, v in overrides.items() if v is not None})

        try:
            merge_settings = MergeConfig.model_validate(settings)
        except ValueError as e:
            raise InputError(f"invalid merge settings: {e}") from e
        threads = resolve_threads(config_data)

        base_model = checkpoint_load(base)
        experts = [checkpoint_load(path) for path in expert]
        delta, merged = run_merge(base_model, experts, merge_settings, threads)
        checkpoint_save(delta, out_delta)
        checkpoint_save(merged, out_model)

        resolved = copy.deepcopy(config_data)
        resolved["merge"] = merge_settings.model_dump(mode="json")
        argv = ["merge", "--method", merge_settings.method.value, "--base", str(base)]
        for path in expert:
            argv += ["--expert", str(path)]
        for lam in merge_settings.resolved_lambdas(len(experts)):
            argv += ["--lambda", repr(lam)]
        argv += ["--density", repr(merge_settings.density), "--drop-rate", repr(merge_settings.drop_rate),
                 "--seed", str(merge_settings.seed), "--out-delta", str(out_delta), "--out-model", str(out_model)]
        manifest = build_manifest("merge", argv, resolved, [base, *expert], [out_delta, out_model],
                                  seed=merge_settings.seed)
        write_manifest(manifest, out_delta)
        write_manifest(manifest, out_model)
        _emit_json({"delta": str(out_delta), "model": str(out_model), "method": merge_settings.method.value,
                    "experts": len(experts)})


@app.command("relax")
def relax_command(
    ctx: typer.Context,
    base: Path = typer.Option(..., "--base", help="Base model checkpoint."),
    delta: Path = typer.Option(..., "--delta", help="Merged delta checkpoint."),
    profile_path: Path = typer.Option(..., "--profile", help="Profile JSON; its kind selects the variant."),
    omega: Optional[float] = typer.Option(None, "--omega", help="Relaxation factor in [0, 1]."),
    spec: Optional[Path] = typer.Option(None, "--spec", help="Model spec JSON, checked against the profile."),
    out: Path = typer.Option(..., "--out", help="Relaxed model checkpoint to write."),
):
    """Apply the relaxation to a merged delta."""
    config_data = _config(ctx)
    with _exit_on_error():
        omega = config_data["relax"]["omega"] if omega is None else omega
        threads = resolve_threads(config_data)

        base_model = checkpoint_load(base)
        merged_delta = checkpoint_load(delta)
        saliency = load_profile(profile_path)
        omega = _relaxation_settings(omega, saliency.kind).omega
        model_spec = load_model_spec(spec) if spec is not None else None
        relaxed = relax(base_model, merged_delta, saliency, omega, model_spec, threads)
        checkpoint_save(relaxed, out)

        resolved = copy.deepcopy(config_data)
        resolved["relax"]["omega"] = omega
        argv = ["relax", "--base", str(base), "--delta", str(delta), "--profile", str(profile_path),
                "--omega", repr(float(omega))]
        inputs = [base, delta, profile_path]
        if spec is not None:
            argv += ["--spec", str(spec)]
            inputs.append(spec)
        argv += ["--out", str(out)]
        write_manifest(build_manifest("relax", argv, resolved, inputs, [out]), out)
        _emit_json({"model": str(out), "variant": saliency.kind, "omega": float(omega)})


@app.command("eval")
def eval_command(
    ctx: typer.Context,
    scores: Path = typer.Option(..., "--scores", help="Score CSV: model,<bench1>,..."),
    population: List[str] = typer.Option(..., "--population", help="Population member; repeat for each."),
    merged: str = typer.Option(..., "--merged", help="Row name of the merged model."),
    include_base: Optional[bool] = typer.Option(
        None, "--include-base/--no-include-base", help="Add the base row to the population."
    ),
    base_name: Optional[str] = typer.Option(None, "--base-name", help="Row name of the base model."),
    compare: Optional[str] = typer.Option(None, "--compare", help="Row to report percentage changes against."),
    out: Optional[Path] = typer.Option(None, "--out", help="Also write the JSON report here."),
):
    """Compute HV Gain of a merged model over a population."""
    config_data = _config(ctx)
    evaluation = config_data["evaluation"]
    with _exit_on_error():
        include_base = evaluation["include_base"] if include_base is None else include_base
        base_name = base_name or evaluation["base_name"]
        table = load_scores(scores)
        report = hv_report(table, population, merged, include_base, base_name, compare)
        payload = _round(report.model_dump(mode="json"), evaluation["decimals"])

        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            resolved = copy.deepcopy(config_data)
            resolved["evaluation"].update({"include_base": include_base, "base_name": base_name})
            argv = ["eval", "--scores", str(scores)]
            for name in population:
                argv += ["--population", name]
            argv += ["--merged", merged, "--include-base" if include_base else "--no-include-base",
                     "--base-name", base_name]
            if compare is not None:
                argv += ["--compare", compare]
            argv += ["--out", str(out)]
            write_manifest(build_manifest("eval", argv, resolved, [scores], [out]), out)
        _emit_json(payload)


@app.command()
def ablate(
    ctx: typer.Context,
    omegas: Optional[str] = typer.Option(None, "--omegas", help="Comma-separated omega values."),
    calib_sizes: Optional[str] = typer.Option(None, "--calib-sizes", help="Comma-separated calibration sizes."),
    spec: Optional[Path] = typer.Option(None, "--spec", help="Model spec JSON."),
    base: Optional[Path] = typer.Option(None, "--base", help="Base model checkpoint."),
    delta: Optional[Path] = typer.Option(None, "--delta", help="Merged delta checkpoint."),
    profile_path: Optional[Path] = typer.Option(None, "--profile", help="Profile JSON for the omega sweep."),
    calib: Optional[Path] = typer.Option(None, "--calib", help="Calibration set."),
    scores: Optional[Path] = typer.Option(None, "--scores", help="Score CSV holding one merged row per omega."),
    population: Optional[List[str]] = typer.Option(None, "--population", help="Population member; repeat."),
    merged_template: Optional[str] = typer.Option(
        None, "--merged-template", help="Merged row name per omega, e.g. 'WIDEN w={omega:.1f}'."
    ),
    include_base: Optional[bool] = typer.Option(None, "--include-base/--no-include-base"),
    base_name: Optional[str] = typer.Option(None, "--base-name"),
    omega: Optional[float] = typer.Option(None, "--omega", help="Omega used by the calibration-size sweep."),
    out: Optional[Path] = typer.Option(None, "--out", help="Also write the CSV here."),
):
    """Sweep omega or the calibration-set size; prints a CSV table."""
    config_data = _config(ctx)
    with _exit_on_error():
        if omegas is not None and calib_sizes is not None:
            raise InputError("give at most one of --omegas or --calib-sizes")
        if omegas is None and calib_sizes is None:
            defaults = config_data["ablate"]
            if scores is not None or profile_path is not None:
                omegas = ",".join(repr(float(v)) for v in defaults["omegas"])
            else:
                calib_sizes = ",".join(str(v) for v in defaults["calib_sizes"])
            logger.info(f"No sweep given; using the configured {'omegas' if omegas else 'calib_sizes'}")
        threads = resolve_threads(config_data)
        decimals = config_data["evaluation"]["decimals"]
        omega = _relaxation_settings(config_data["relax"]["omega"] if omega is None else omega).omega

        model_spec = load_model_spec(spec) if spec is not None else None
        base_model = checkpoint_load(base) if base is not None else None
        merged_delta = checkpoint_load(delta) if delta is not None else None
        calibration = load_calibration(calib) if calib is not None else None

        if omegas is not None:
            values = [_relaxation_settings(value).omega for value in _parse_list(omegas, float, "--omegas")]
            toy = None
            if base_model is not None or merged_delta is not None or calibration is not None:
                if None in (model_spec, base_model, merged_delta, calibration):
                    raise InputError("the toy omega sweep needs --spec, --base, --delta and --calib")
                toy = ToySetup(model_spec, base_model, merged_delta, calibration)
            score_setup = None
            if scores is not None:
                if not population or not merged_template:
                    raise InputError("the score omega sweep needs --population and --merged-template")
                score_setup = ScoreSetup(
                    load_scores(scores),
                    list(population),
                    merged_template,
                    config_data["evaluation"]["include_base"] if include_base is None else include_base,
                    base_name or config_data["evaluation"]["base_name"],
                )
            saliency = load_profile(profile_path) if profile_path is not None else None
            rows = omega_sweep(values, saliency, toy, score_setup, threads)
        else:
            sizes = _parse_list(calib_sizes, int, "--calib-sizes")
            if None in (model_spec, base_model, calibration):
                raise InputError("the calibration-size sweep needs --spec, --base and --calib")
            rows = calib_size_sweep(model_spec, base_model, calibration, sizes, merged_delta, omega, threads)

        table = rows_to_csv(rows, decimals)
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(table, encoding="utf-8")
            argv = ["ablate"]
            if omegas is not None:
                argv += ["--omegas", omegas]
            else:
                argv += ["--calib-sizes", calib_sizes, "--omega", repr(float(omega))]
            named = {"--spec": spec, "--base": base, "--delta": delta, "--profile": profile_path,
                     "--calib": calib, "--scores": scores}
            for flag, path in named.items():
                if path is not None:
                    argv += [flag, str(path)]
            for name in population or []:
                argv += ["--population", name]
            if merged_template is not None:
                argv += ["--merged-template", merged_template]
            if include_base is not None:
                argv.append("--include-base" if include_base else "--no-include-base")
            if base_name is not None:
                argv += ["--base-name", base_name]
            argv += ["--out", str(out)]
            inputs = [path for path in named.values() if path is not None]
            write_manifest(build_manifest("ablate", argv, copy.deepcopy(config_data), inputs, [out]), out)
        typer.echo(table, nl=False)


@app.command("init-config")
def init_config(
    path: Path = typer.Argument(Path("aim_config.yml"), help="Where to write the sample settings."),
):
    """Write a YAML settings file holding every option at its default."""
    save_sample_config(path)
    _emit_json({"config": str(path)})


@app.command("inspect")
def inspect_command(
    checkpoint: Path = typer.Argument(..., help="Checkpoint to summarize."),
    other: Optional[Path] = typer.Option(None, "--against", help="Second checkpoint to compare with."),
):
    """Summarize a checkpoint, or report merge compatibility of two checkpoints."""
    with _exit_on_error():
        first = checkpoint_load(checkpoint)
        if other is None:
            _emit_json({
                "path": str(checkpoint),
                "tensors": {name: list(shape) for name, shape in first.shapes().items()},
                "parameters": int(sum(first[name].size for name in first.names)),
                "finite": all(bool(np.isfinite(first[name]).all()) for name in first.names),
                "meta": dict(first.meta),
            })
            return
        report = checkpoint_compat_check(first, checkpoint_load(other))
        _emit_json({**report.model_dump(mode="json"), "compatible": report.is_compatible})
        if not report.is_compatible:
            raise CompatibilityError(report, f"'{checkpoint}' and '{other}'")


def main():
    app()


if __name__ == "__main__":
    main()
