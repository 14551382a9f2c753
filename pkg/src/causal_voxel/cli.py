"""Command-line entry point wiring the package into reproducible runs.

Config precedence is flags > config file > built-in defaults, and every run
echoes its fully resolved configuration next to its main artifact so any
result can be reproduced from the echo file alone. All randomness flows
from --seed; identical invocations produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cohort, dataset_io
from .flows import train_flow_mechanism
from .inversion import OptimizerConfig, invert
from .latent_edit import counterfactual_image, fit_regression, load_regression, save_regression
from .mechanisms import (TrainConfig, eval_loglik_table, load_mechanisms,
                         save_mechanisms, train_mechanisms)
from .metrics import volume_change_eval, volume_change_table
from .phantom import GridSpec, PhantomGenerator, measure_volumes
from .scm import load_graph

_UNSET = object()

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def main(argv=None) -> int:
    parser = _build_parser()
    argv = _join_settings_value(list(sys.argv[1:] if argv is None else argv))
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return USAGE_ERROR
    try:
        resolved = _resolve_config(args)
        handler = COMMANDS[args.command]
        handler(resolved)
        return 0
    except BrokenPipeError:
        return RUNTIME_ERROR
    except Exception as exc:  # runtime failures exit 1 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def _join_settings_value(argv: list) -> list:
    """Fold `--settings -15,...` into one token so argparse does not read the
    leading minus as an option prefix."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--settings" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--settings={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalvoxel",
        description="Causal synthesis and counterfactual editing of brain phantoms",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", default=_UNSET, help="JSON config file (flags win)")
        p.add_argument("--seed", type=int, default=_UNSET, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=_UNSET,
                       help="worker cap (or CAUSAL_VOXEL_THREADS)")

    p = sub.add_parser("train-scm", help="fit conditional-affine mechanisms by MLE")
    p.add_argument("--graph", default=_UNSET, help="graph JSON path, or 'default'")
    p.add_argument("--data", required=True, help="training manifest CSV")
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--flow-out", default=_UNSET, help="also train the spline-flow baseline")
    p.add_argument("--epochs", type=int, default=_UNSET)
    p.add_argument("--lr", type=float, default=_UNSET)
    p.add_argument("--batch-size", type=int, default=_UNSET)
    common(p)

    p = sub.add_parser("eval-loglik", help="per-variable average log-likelihood table")
    p.add_argument("--scm", action="append", required=True,
                   help="model JSON (repeat to compare methods)")
    p.add_argument("--data", required=True, help="held-out manifest CSV")
    p.add_argument("--out", required=True, help="output table CSV")
    common(p)

    p = sub.add_parser("sample-dataset", help="sample an SCM cohort and synthesize volumes")
    p.add_argument("--scm", default=_UNSET,
                   help="model JSON (default: built-in calibrated ground truth)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dims", default=_UNSET, help="grid dims, e.g. 64,64,64")
    p.add_argument("--spacing", type=float, default=_UNSET)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--fit-regression", default=_UNSET,
                   help="also fit volume regressions, write to this JSON")
    common(p)

    p = sub.add_parser("invert", help="recover style and noise latents from a volume")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="inversion summary JSON")
    p.add_argument("--noise-out", default=_UNSET, help="write recovered noise as .nii")
    p.add_argument("--budget", type=int, default=_UNSET, help="style search evaluations")
    common(p)

    p = sub.add_parser("counterfactual", help="counterfactual image for an intervention")
    p.add_argument("--image", required=True)
    p.add_argument("--set", action="append", required=True, metavar="VAR=VALUE",
                   help="intervention, e.g. --set mmse=30 or --set m=30")
    p.add_argument("--scm", required=True)
    p.add_argument("--reg", required=True)
    p.add_argument("--out", required=True, help="counterfactual volume .nii")
    p.add_argument("--audit", default=_UNSET, help="audit JSON path (default <out>.audit.json)")
    p.add_argument("--mode", choices=["exact", "paper_literal"], default=_UNSET)
    p.add_argument("--age", type=float, default=_UNSET)
    p.add_argument("--sex", type=float, default=_UNSET)
    p.add_argument("--mmse", type=float, default=_UNSET)
    common(p)

    p = sub.add_parser("eval-volumes", help="volume-change fidelity protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reg", required=True)
    p.add_argument("--settings", default=_UNSET, help="percent list, e.g. -15,-10,-5,5,10,15")
    p.add_argument("--n", type=int, default=_UNSET, help="subjects per setting (default 50)")
    p.add_argument("--mode", choices=["exact", "paper_literal"], default=_UNSET)
    p.add_argument("--out", required=True, help="output table CSV")
    common(p)

    p = sub.add_parser("metrics", help="distribution metrics between two cohorts")
    p.add_argument("--manifest-a", required=True)
    p.add_argument("--manifest-b", required=True)
    p.add_argument("--n", type=int, default=_UNSET, help="volumes per cohort (default all)")
    p.add_argument("--feature-dim", type=int, default=_UNSET,
                   help="feature dimension (needs n > dim samples; default 64)")
    p.add_argument("--out", required=True, help="report JSON (CSV written alongside)")
    common(p)

    p = sub.add_parser("serve", help="run the counterfactual HTTP service")
    p.add_argument("--scm", required=True)
    p.add_argument("--reg", required=True)
    p.add_argument("--host", default=_UNSET)
    p.add_argument("--port", type=int, default=_UNSET)
    p.add_argument("--dims", default=_UNSET)
    p.add_argument("--spacing", type=float, default=_UNSET)
    common(p)

    return parser


DEFAULTS = {
    "seed": 0,
    "threads": None,
    "graph": "default",
    "epochs": 500,
    "lr": 1e-3,
    "batch_size": 256,
    "dims": "64,64,64",
    "spacing": 3.0,
    "settings": "-15,-10,-5,5,10,15",
    "n": 50,
    "budget": 700,
    "mode": "exact",
    "host": "127.0.0.1",
    "port": 8000,
    "feature_dim": 64,
    "flow_out": None,
    "fit_regression": None,
    "noise_out": None,
    "audit": None,
    "age": None,
    "sex": None,
    "mmse": None,
    "scm": None,
    "config": None,
}


def _resolve_config(args) -> dict:
    """flags > config file > defaults, plus the environment thread cap."""
    raw = vars(args)
    file_config = {}
    if raw.get("config") not in (None, _UNSET):
        with open(raw["config"], "r", encoding="utf-8") as f:
            file_config = json.load(f)
    resolved = {}
    for key, value in raw.items():
        if key == "config":
            resolved[key] = None if value is _UNSET else value
            continue
        if value is not _UNSET and value is not None:
            resolved[key] = value
        elif key in file_config:
            resolved[key] = file_config[key]
        else:
            resolved[key] = DEFAULTS.get(key)
    if resolved.get("threads") is None:
        env = os.environ.get("CAUSAL_VOXEL_THREADS")
        resolved["threads"] = int(env) if env else 1
    return resolved


def _echo_config(resolved: dict, anchor) -> None:
    anchor = Path(anchor)
    target = anchor / "resolved_config.json" if anchor.is_dir() else \
        anchor.with_name(anchor.name + ".config.json")
    payload = {k: v for k, v in sorted(resolved.items()) if k != "config"}
    target.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n",
                      encoding="utf-8")


def _load_graph_arg(spec: str):
    if spec in (None, "default"):
        return cohort.default_ad_graph()
    return load_graph(spec)


def _load_model_arg(spec):
    """Mechanisms + graph from a model JSON, or the built-in ground truth."""
    if spec in (None, "default", "ground-truth"):
        return cohort.ground_truth_mechanisms(), cohort.default_ad_graph()
    mechs, graph = load_mechanisms(spec)
    if graph is None:
        graph = cohort.default_ad_graph()
    return mechs, graph


def _generator_from(resolved) -> PhantomGenerator:
    dims = tuple(int(x) for x in str(resolved["dims"]).split(","))
    if len(dims) == 1:
        dims = dims * 3
    return PhantomGenerator(GridSpec(dims, float(resolved["spacing"])))


def _cmd_train_scm(resolved: dict) -> None:
    graph = _load_graph_arg(resolved["graph"])
    manifest = dataset_io.read_manifest(resolved["data"])
    columns = manifest.columns()
    config = TrainConfig(
        learning_rate=float(resolved["lr"]),
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        seed=int(resolved["seed"]),
    )
    mechs, history = train_mechanisms(columns, graph, config)
    out = Path(resolved["out"])
    save_mechanisms(out, mechs, graph=graph, seed=config.seed,
                    metadata={"method": "conditional_affine", "data": str(resolved["data"])})
    _write_history_csv(out.with_name(out.stem + "_history.csv"), history)
    if resolved.get("flow_out"):
        flow_config = TrainConfig(
            learning_rate=float(resolved["lr"]) * 3.0,
            epochs=min(int(resolved["epochs"]), 300),
            batch_size=max(int(resolved["batch_size"]), 1024),
            seed=int(resolved["seed"]),
        )
        flows, flow_hist = train_mechanisms(columns, graph, flow_config,
                                            mechanism_factory=train_flow_mechanism)
        flow_out = Path(resolved["flow_out"])
        save_mechanisms(flow_out, flows, graph=graph, seed=flow_config.seed,
                        metadata={"method": "monotone_flow", "data": str(resolved["data"])})
        _write_history_csv(flow_out.with_name(flow_out.stem + "_history.csv"), flow_hist)
    _echo_config(resolved, out)
    print(f"trained {len(mechs)} mechanisms -> {out}")


def _write_history_csv(path, history) -> None:
    lines = ["mechanism,epoch,train_nll,val_nll"]
    for row in history.to_rows():
        lines.append(f"{row['mechanism']},{row['epoch']},{row['train_nll']:.8g},"
                     f"{row['val_nll']:.8g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_eval_loglik(resolved: dict) -> None:
    manifest = dataset_io.read_manifest(resolved["data"])
    columns = manifest.columns()
    named = {}
    for path in resolved["scm"]:
        mechs, _ = _load_model_arg(path)
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f).get("metadata", {})
        name = meta.get("method", Path(path).stem)
        named[name] = mechs
    table = eval_loglik_table(named, columns)
    out = Path(resolved["out"])
    out.write_text(table.to_csv(), encoding="utf-8")
    _echo_config(resolved, out)
    print(table.to_text())


def _cmd_sample_dataset(resolved: dict) -> None:
    mechs, graph = _load_model_arg(resolved.get("scm"))
    generator = _generator_from(resolved)
    manifest = dataset_io.sample_dataset(
        graph, mechs, generator, n=int(resolved["n"]), seed=int(resolved["seed"]),
        out_dir=resolved["out_dir"], with_noise=not resolved.get("no_noise", False),
        threads=int(resolved["threads"]),
    )
    if resolved.get("fit_regression"):
        styles = np.array([dataset_io.style_for_record(r, generator)
                           for r in manifest.records])
        volumes = {}
        measured = [measure_volumes(dataset_io.read_volume(
            Path(resolved["out_dir"]) / r.image_path)) for r in manifest.records]
        for key in ("brain", "gm", "ventricle"):
            volumes[key] = np.array([m[key] for m in measured])
        reg = fit_regression(styles, volumes)
        save_regression(resolved["fit_regression"], reg,
                        provenance_paths=[Path(resolved["out_dir"]) / "manifest.csv"])
    _echo_config(resolved, resolved["out_dir"])
    flagged = sum(r.flagged for r in manifest.records)
    print(f"wrote {len(manifest.records)} subjects to {resolved['out_dir']} "
          f"({flagged} flagged)")


def _cmd_invert(resolved: dict) -> None:
    image = dataset_io.read_volume(resolved["image"])
    generator = PhantomGenerator(image.grid)
    config = OptimizerConfig(max_iterations=int(resolved["budget"]),
                             seed=int(resolved["seed"]))
    result = invert(image, generator, config)
    out = Path(resolved["out"])
    payload = {
        "w_hat": [float(x) for x in result.w_hat],
        "l1_error": result.l1_error,
        "iterations": result.iterations,
        "converged": result.converged,
        "volumes": measure_volumes(image).as_dict(),
    }
    out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if resolved.get("noise_out"):
        from .phantom import VoxelGrid

        dataset_io.write_volume(resolved["noise_out"], VoxelGrid(result.n_hat, image.spacing))
    _echo_config(resolved, out)
    print(f"inverted {resolved['image']}: l1={result.l1_error:.3e} "
          f"converged={result.converged}")


_VARIABLE_ALIASES = {"age": "a", "sex": "s", "mmse": "m", "score": "m",
                     "brain": "b", "gm": "g", "ventricle": "v"}


def _cmd_counterfactual(resolved: dict) -> None:
    from .metrics import ssim3d

    image = dataset_io.read_volume(resolved["image"])
    generator = PhantomGenerator(image.grid)
    mechs, graph = _load_model_arg(resolved["scm"])
    regression = load_regression(resolved["reg"])
    interventions = {}
    for item in resolved["set"]:
        key, _, value = item.partition("=")
        if not value:
            raise ValueError(f"intervention {item!r} is not VAR=VALUE")
        name = _VARIABLE_ALIASES.get(key.strip().lower(), key.strip())
        interventions[name] = float(value)
    demographics = {}
    for flag, var in (("age", "a"), ("sex", "s"), ("mmse", "m")):
        if resolved.get(flag) is not None:
            demographics[var] = float(resolved[flag])
    result = counterfactual_image(
        image, interventions, graph, mechs, generator, regression,
        demographics=demographics, mode=resolved["mode"],
        inversion_config=OptimizerConfig(seed=int(resolved["seed"])),
    )
    out = Path(resolved["out"])
    dataset_io.write_volume(out, result.image)
    audit_path = Path(resolved["audit"]) if resolved.get("audit") else \
        out.with_name(out.name + ".audit.json")
    audit = {
        "interventions": interventions,
        "factual_evidence": result.factual_evidence,
        "counterfactual_evidence": result.counterfactual_evidence,
        "factual_volumes": result.factual_volumes.as_dict(),
        "counterfactual_volumes": measure_volumes(result.image).as_dict(),
        "targets": result.targets,
        "defaulted_evidence": result.defaulted_evidence,
        "w_hat": [float(x) for x in result.inversion.w_hat],
        "w_edited": [float(x) for x in result.w_edited],
        "inversion_l1": result.inversion.l1_error,
        "ssim": ssim3d(image, result.image),
        "mode": resolved["mode"],
    }
    audit_path.write_text(json.dumps(audit, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")
    _echo_config(resolved, out)
    print(f"counterfactual -> {out} (ssim {audit['ssim']:.3f})")


def _cmd_eval_volumes(resolved: dict) -> None:
    manifest = dataset_io.read_manifest(resolved["manifest"])
    grid = GridSpec(manifest.grid_dims, manifest.grid_spacing)
    generator = PhantomGenerator(grid)
    regression = load_regression(resolved["reg"])
    settings = tuple(float(s) / 100.0 for s in str(resolved["settings"]).split(","))
    n = min(int(resolved["n"]), len(manifest.records))
    subjects = [
        {"w": dataset_io.style_for_record(r, generator), "n": r.noise_seed}
        for r in manifest.records[:n]
    ]
    report = volume_change_eval(subjects, generator, regression, settings=settings,
                                mode=resolved["mode"])
    out = Path(resolved["out"])
    out.write_text(report.to_csv(), encoding="utf-8")
    out.with_suffix(".json").write_text(report.to_json() + "\n", encoding="utf-8")
    _echo_config(resolved, out)
    print(volume_change_table(report))


def _cmd_metrics(resolved: dict) -> None:
    from .metrics import FeatureExtractor, batch_mmd2_images, frechet_distance, gaussian_stats, mmd2

    def load_batch(path):
        manifest = dataset_io.read_manifest(path)
        base = Path(path).parent
        records = manifest.records
        if resolved.get("n"):
            records = records[: int(resolved["n"])]
        return manifest, [dataset_io.read_volume(base / r.image_path) for r in records]

    manifest_a, images_a = load_batch(resolved["manifest_a"])
    _, images_b = load_batch(resolved["manifest_b"])
    grid = GridSpec(manifest_a.grid_dims, manifest_a.grid_spacing)
    extractor = FeatureExtractor(grid, out_dim=int(resolved["feature_dim"]))
    feats_a = np.array([extractor(img) for img in images_a])
    feats_b = np.array([extractor(img) for img in images_b])
    payload = {
        "frechet_features": frechet_distance(gaussian_stats(feats_a), gaussian_stats(feats_b)),
        "mmd2_features": mmd2(feats_a, feats_b),
        "bmmd2_images": batch_mmd2_images(images_a, images_b),
        "n_a": len(images_a),
        "n_b": len(images_b),
        "footnote": "fixed seeded feature extractor; not comparable to pretrained-network scores",
    }
    out = Path(resolved["out"])
    out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _echo_config(resolved, out)
    print(json.dumps(payload, indent=1, sort_keys=True))


def _cmd_serve(resolved: dict) -> None:
    import uvicorn

    from .service import build_app

    mechs, graph = _load_model_arg(resolved["scm"])
    generator = _generator_from(resolved)
    regression = load_regression(resolved["reg"])
    app = build_app(graph, mechs, generator, regression, seed=int(resolved["seed"]))
    uvicorn.run(app, host=resolved["host"], port=int(resolved["port"]), log_level="warning")


COMMANDS = {
    "train-scm": _cmd_train_scm,
    "eval-loglik": _cmd_eval_loglik,
    "sample-dataset": _cmd_sample_dataset,
    "invert": _cmd_invert,
    "counterfactual": _cmd_counterfactual,
    "eval-volumes": _cmd_eval_volumes,
    "metrics": _cmd_metrics,
    "serve": _cmd_serve,
}


if __name__ == "__main__":
    sys.exit(main())
