"""Command-line entry point.

Subcommands: train, predict, generate, eval, synth, perturb. Every run is
driven by an INI-style config file (flat key=value under sections) with
CLI flags overriding file keys, writes a ``manifest`` capturing the
resolved configuration, and is byte-for-byte reproducible given the same
config and seeds. Seeds are mandatory; there are no wall-clock defaults.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import checkpoint_sha256, load_checkpoint, save_checkpoint
from .data import (
    ETHUCY_SCENES,
    ParseError,
    Perturbation,
    apply_perturbation,
    export_scene_csv,
    leave_one_out_split,
    load_ethucy,
    load_scene_csv,
    make_windows,
    write_ethucy,
)
from .denoiser import (
    DenoiserModel,
    ModelConfig,
    NumericError,
    TrainConfig,
    fit_trajectory_codec,
    train,
)
from .metrics import EvalReport, evaluate_scene
from .sampler import (
    PRESETS,
    predict,
    read_prediction_csv,
    write_diagnostics_csv,
    write_prediction_csv,
)
from .schedule import NoiseSchedule
from .synthgen import SCENE_KINDS, SynthConfig, generate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling

def _read_config(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    return {section: dict(parser[section]) for section in parser.sections()}


def _get(cfg: dict, section: str, key: str, default=None, required: bool = False):
    value = cfg.get(section, {}).get(key, None)
    if value is None:
        if required:
            raise UsageError(f"missing config key [{section}] {key}")
        return default
    return value


def _get_int(cfg, section, key, default=None, required=False):
    raw = _get(cfg, section, key, default, required)
    if raw is None:
        return None
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config [{section}] {key}: expected integer, got {raw!r}") from None


def _get_float(cfg, section, key, default=None, required=False):
    raw = _get(cfg, section, key, default, required)
    if raw is None:
        return None
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config [{section}] {key}: expected number, got {raw!r}") from None


def _get_bool(cfg, section, key, default=False):
    raw = _get(cfg, section, key)
    if raw is None:
        return default
    return str(raw).strip().lower() in ("1", "true", "yes", "on")


def _resolved_items(cfg: dict):
    for section in sorted(cfg):
        for key in sorted(cfg[section]):
            yield f"{section}.{key}", cfg[section][key]


def _write_manifest(cfg: dict, out_dir: Path, extra: dict) -> None:
    lines = [f"{k}={v}" for k, v in _resolved_items(cfg)]
    lines += [f"{k}={v}" for k, v in sorted(extra.items())]
    (out_dir / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _override(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg.setdefault(section, {})[key] = str(value)


# ---------------------------------------------------------------------------
# dataset assembly

def _synth_config(cfg: dict, role: str) -> SynthConfig:
    section = "data"
    seed = _get_int(cfg, section, f"{role}_seed", required=True)
    kinds = tuple(
        k.strip() for k in _get(cfg, section, "kinds", ",".join(SCENE_KINDS)).split(",")
        if k.strip()
    )
    return SynthConfig(
        n_scenes=_get_int(cfg, section, f"{role}_scenes", required=True),
        agents_min=_get_int(cfg, section, "agents_min", 1),
        agents_max=_get_int(cfg, section, "agents_max", 3),
        kinds=kinds,
        speed_min=_get_float(cfg, section, "speed_min", 0.3),
        speed_max=_get_float(cfg, section, "speed_max", 0.6),
        noise=_get_float(cfg, section, "noise", 0.0),
        seed=seed,
        t_hist=_get_int(cfg, section, "t_hist", 8),
        t_fut=_get_int(cfg, section, "t_fut", 12),
        arena=_get_float(cfg, section, "arena", 20.0),
    )


def _load_dataset(cfg: dict, role: str):
    """role is 'train' or 'eval'; returns a list of scenes."""
    kind = _get(cfg, "data", "kind", required=True)
    t_hist = _get_int(cfg, "data", "t_hist", 8)
    t_fut = _get_int(cfg, "data", "t_fut", 12)
    stride = _get_int(cfg, "data", "stride", 1)
    if kind == "synth":
        return generate(_synth_config(cfg, role))
    if kind == "ethucy":
        root = Path(_get(cfg, "data", "path", required=True))
        holdout = _get(cfg, "data", "holdout", required=True)
        train_names, eval_name = leave_one_out_split(holdout)
        names = train_names if role == "train" else (eval_name,)
        scenes = []
        for name in names:
            tracks = load_ethucy(root / f"{name}.txt")
            scenes.extend(make_windows(
                tracks, t_hist, t_fut, stride, scene_prefix=f"{name}-"
            ))
        if not scenes:
            raise ParseError(f"no usable windows in {names}")
        return scenes
    if kind == "scene_csv":
        root = Path(_get(cfg, "data", "path", required=True))
        files = sorted(root.glob("*.csv"))
        if not files:
            raise ParseError(f"no scene CSVs under {root}")
        return [load_scene_csv(f) for f in files]
    raise UsageError(f"unknown data kind {kind!r}")


def _parse_perturb_flag(text: str) -> tuple[str, float]:
    if ":" not in text:
        raise UsageError(f"--perturb expects kind:param, got {text!r}")
    kind, _, param = text.partition(":")
    kind = kind.strip().lower()
    aliases = {
        "gaussian": "gaussian_noise", "gaussian_noise": "gaussian_noise",
        "noise": "gaussian_noise", "mask": "frame_mask", "frame_mask": "frame_mask",
    }
    if kind not in aliases:
        raise UsageError(f"unknown perturbation kind {kind!r}")
    try:
        value = float(param)
    except ValueError:
        raise UsageError(f"bad perturbation parameter {param!r}") from None
    return aliases[kind], value


def _perturbation_from(cfg: dict, flag: str | None, run_seed: int) -> Perturbation | None:
    if flag is not None:
        kind, value = _parse_perturb_flag(flag)
    elif "perturb" in cfg and "kind" in cfg["perturb"]:
        kind = _get(cfg, "perturb", "kind")
        kind, value = _parse_perturb_flag(
            f"{kind}:{_get(cfg, 'perturb', 'sigma' if 'gauss' in kind else 'ratio', required=True)}"
        )
    else:
        return None
    seed = _get_int(cfg, "perturb", "seed", run_seed)
    if kind == "gaussian_noise":
        return Perturbation(kind=kind, sigma=value, seed=seed)
    return Perturbation(kind=kind, missing_ratio=value, seed=seed)


# ---------------------------------------------------------------------------
# model assembly

def _model_params(cfg: dict) -> dict:
    return {
        "k": _get_int(cfg, "model", "k", 10),
        "hidden": _get_int(cfg, "model", "hidden", 128),
        "layers": _get_int(cfg, "model", "layers", 3),
        "time_embed_dim": _get_int(cfg, "model", "time_embed_dim", 32),
    }


def _schedule_from_cfg(cfg: dict) -> NoiseSchedule:
    return NoiseSchedule.create(
        T=_get_int(cfg, "model", "t_steps", 100),
        kind=_get(cfg, "model", "beta_schedule", "linear"),
        gamma=_get_float(cfg, "model", "gamma", 5.0),
        beta_start=_get_float(cfg, "model", "beta_start", 1e-4),
        beta_end=_get_float(cfg, "model", "beta_end", 0.05),
    )


def _spec_overrides(cfg: dict) -> dict:
    out = {}
    if _get(cfg, "sample", "lambda") is not None:
        out["lambda_base"] = _get_float(cfg, "sample", "lambda")
    out["goal_weight"] = _get_float(cfg, "sample", "goal_weight", 1.0)
    out["repeller_weight"] = _get_float(cfg, "sample", "repeller_weight", 0.0)
    out["repeller_radius"] = _get_float(cfg, "sample", "repeller_radius", 0.4)
    out["grad_clip"] = _get_float(cfg, "sample", "grad_clip", 1.0)
    out["full_chain"] = _get_bool(cfg, "sample", "full_chain", True)
    return out


def _out_dir(cfg: dict, flag) -> Path:
    out = flag or _get(cfg, "output", "dir")
    if out is None:
        raise UsageError("no output directory (set --out or [output] dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands

def _cmd_train(args) -> int:
    cfg = _read_config(args.config)
    _override(cfg, "train", "seed", args.seed)
    _override(cfg, "train", "epochs", args.epochs)
    _override(cfg, "output", "dir", args.out)
    out = _out_dir(cfg, None)
    seed = _get_int(cfg, "train", "seed", required=True)

    scenes = _load_dataset(cfg, "train")
    sched = _schedule_from_cfg(cfg)
    params = _model_params(cfg)
    codec, scale = fit_trajectory_codec(scenes, params["k"])
    model = DenoiserModel(ModelConfig(**params), codec, scale, seed=seed)
    history = train(model, scenes, sched, TrainConfig(
        batch_size=_get_int(cfg, "train", "batch", 32),
        lr=_get_float(cfg, "train", "lr", 1e-3),
        epochs=_get_int(cfg, "train", "epochs", required=True),
        seed=seed,
    ))

    ckpt_path = out / "checkpoint.tdif"
    save_checkpoint(model, sched, ckpt_path)
    loss_lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(history)]
    (out / "loss_history.csv").write_text("\n".join(loss_lines) + "\n", encoding="utf-8")
    _write_manifest(cfg, out, {
        "checkpoint_sha256": checkpoint_sha256(ckpt_path),
        "package_version": __version__,
        "n_train_scenes": len(scenes),
    })
    print(f"trained {len(scenes)} scenes for {len(history)} epochs -> {ckpt_path}")
    if history:
        print(f"first epoch loss {history[0]:.6f}, last epoch loss {history[-1]:.6f}")
    return EXIT_OK


def _sample_one(model, sched, scene, K, preset, seed, goals, overrides):
    return predict(model, sched, scene, K, preset=preset, seed=seed,
                   goals=goals, **overrides)


def _run_sampling(cfg, model, sched, scenes, preset, seed, jobs,
                  goals_per_scene=None):
    K = _get_int(cfg, "sample", "k_samples", 20)
    overrides = _spec_overrides(cfg)
    tasks = []
    for i, scene in enumerate(scenes):
        goals = None if goals_per_scene is None else goals_per_scene[i]
        tasks.append((scene, K, preset, seed + i, goals))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda t: _sample_one(model, sched, t[0], t[1], t[2], t[3], t[4], overrides),
                tasks,
            ))
    else:
        results = [
            _sample_one(model, sched, s, K, p, sd, g, overrides)
            for s, K, p, sd, g in tasks
        ]
    return results


def _write_sample_outputs(out: Path, scenes, results, sched) -> EvalReport:
    pred_dir = out / "predictions"
    diag_dir = out / "diagnostics"
    pred_dir.mkdir(exist_ok=True)
    diag_dir.mkdir(exist_ok=True)
    evals = []
    threshold = 0.2
    for scene, result in zip(scenes, results):
        write_prediction_csv(result, scene.t_hist, pred_dir / f"{scene.scene_id}.csv")
        write_diagnostics_csv(result, sched.T, diag_dir / f"{scene.scene_id}.csv")
        evals.append(evaluate_scene(
            scene.scene_id, result.samples, scene.future, threshold
        ))
    report = EvalReport(per_scene=tuple(evals), collision_threshold=threshold)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return report


def _cmd_predict(args) -> int:
    cfg = _read_config(args.config)
    _override(cfg, "sample", "seed", args.seed)
    _override(cfg, "sample", "preset", args.preset)
    _override(cfg, "output", "dir", args.out)
    out = _out_dir(cfg, None)
    seed = _get_int(cfg, "sample", "seed", required=True)
    preset = _get(cfg, "sample", "preset", "predict")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    if preset == "controllable":
        raise UsageError("use the generate subcommand for the controllable preset")

    model, sched = load_checkpoint(_require_checkpoint(args, cfg))
    truth_scenes = _load_dataset(cfg, "eval")
    perturbation = _perturbation_from(cfg, args.perturb, seed)
    cond_scenes = (
        [apply_perturbation(s, perturbation) for s in truth_scenes]
        if perturbation else truth_scenes
    )

    results = _run_sampling(cfg, model, sched, cond_scenes, preset, seed, args.jobs)
    report = _write_sample_outputs(out, truth_scenes, results, sched)
    truth_dir = out / "truth"
    truth_dir.mkdir(exist_ok=True)
    for scene in truth_scenes:
        export_scene_csv(scene, truth_dir / f"{scene.scene_id}.csv")
    _write_manifest(cfg, out, {
        "checkpoint_sha256": checkpoint_sha256(_require_checkpoint(args, cfg)),
        "package_version": __version__,
        "perturb": args.perturb or "none",
        "n_eval_scenes": len(truth_scenes),
    })
    print(report.to_table())
    return EXIT_OK


def _require_checkpoint(args, cfg) -> str:
    ckpt = args.checkpoint or _get(cfg, "sample", "checkpoint")
    if ckpt is None:
        raise UsageError("no checkpoint (set --checkpoint or [sample] checkpoint)")
    if not Path(ckpt).exists():
        raise ParseError(f"checkpoint not found: {ckpt}")
    return ckpt


def _read_goals_csv(path, scenes):
    """Goals file: header ``scene,agent,x,y`` with one row per agent per scene."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "scene,agent,x,y":
            raise ParseError(f"{path}: unexpected header {header!r}", line=1)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields", line=lineno)
            table.setdefault(fields[0], {})[int(fields[1])] = (
                float(fields[2]), float(fields[3])
            )
    goals = []
    for scene in scenes:
        rows = table.get(scene.scene_id)
        if rows is None:
            raise ParseError(f"{path}: no goal rows for scene {scene.scene_id}")
        if sorted(rows) != list(range(scene.n_agents)):
            raise ParseError(
                f"{path}: scene {scene.scene_id} needs agents 0..{scene.n_agents - 1}"
            )
        goals.append(np.array([rows[a] for a in range(scene.n_agents)]))
    return goals


def _cmd_generate(args) -> int:
    cfg = _read_config(args.config)
    _override(cfg, "sample", "seed", args.seed)
    _override(cfg, "output", "dir", args.out)
    out = _out_dir(cfg, None)
    seed = _get_int(cfg, "sample", "seed", required=True)

    model, sched = load_checkpoint(_require_checkpoint(args, cfg))
    scenes = _load_dataset(cfg, "eval")
    goals = _read_goals_csv(args.goals, scenes)
    results = _run_sampling(
        cfg, model, sched, scenes, "controllable", seed, args.jobs,
        goals_per_scene=goals,
    )
    report = _write_sample_outputs(out, scenes, results, sched)

    lines = ["scene,jade,mean_endpoint_to_goal"]
    for scene, result, goal in zip(scenes, results, goals):
        endpoint_err = float(np.mean(np.linalg.norm(
            result.samples[:, :, -1] - goal[None], axis=2
        )))
        scene_eval = next(e for e in report.per_scene if e.scene_id == scene.scene_id)
        lines.append(f"{scene.scene_id},{scene_eval.jade!r},{endpoint_err!r}")
    (out / "goal_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(cfg, out, {
        "checkpoint_sha256": checkpoint_sha256(_require_checkpoint(args, cfg)),
        "package_version": __version__,
        "goals_file": str(args.goals),
    })
    print(report.to_table())
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    truth_path = Path(args.truth)
    pairs = []
    if pred_path.is_dir() != truth_path.is_dir():
        raise UsageError("--pred and --truth must both be files or both directories")
    if pred_path.is_dir():
        for pred_file in sorted(pred_path.glob("*.csv")):
            truth_file = truth_path / pred_file.name
            if not truth_file.exists():
                raise ParseError(f"no truth file for {pred_file.name}")
            pairs.append((pred_file, truth_file))
        if not pairs:
            raise ParseError(f"no prediction CSVs under {pred_path}")
    else:
        pairs.append((pred_path, truth_path))

    evals = []
    for pred_file, truth_file in pairs:
        full, t_hist, t_fut = read_prediction_csv(pred_file)
        truth = load_scene_csv(truth_file)
        if truth.t_fut != t_fut or truth.n_agents != full.shape[1]:
            raise ParseError(
                f"{pred_file.name}: prediction shape "
                f"(N={full.shape[1]}, t_fut={t_fut}) does not match truth "
                f"(N={truth.n_agents}, t_fut={truth.t_fut})"
            )
        evals.append(evaluate_scene(pred_file.stem, full[:, :, t_hist:], truth.future))
    report = EvalReport(per_scene=tuple(evals))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_table())
    return EXIT_OK


def _cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    if args.seed is not None:
        _override(cfg, "data", "train_seed", args.seed)
    _override(cfg, "output", "dir", args.out)
    out = _out_dir(cfg, None)
    scenes = generate(_synth_config(cfg, "train"))
    write_ethucy(scenes, out / "scenes.txt")
    _write_manifest(cfg, out, {
        "package_version": __version__,
        "n_scenes": len(scenes),
    })
    print(f"wrote {len(scenes)} scenes -> {out / 'scenes.txt'}")
    return EXIT_OK


def _cmd_perturb(args) -> int:
    cfg = _read_config(args.config)
    _override(cfg, "output", "dir", args.out)
    out = _out_dir(cfg, None)
    seed = args.seed if args.seed is not None else _get_int(cfg, "perturb", "seed")
    if seed is None:
        raise UsageError("perturb requires a seed (--seed or [perturb] seed)")
    perturbation = _perturbation_from(cfg, args.perturb, seed)
    if perturbation is None:
        raise UsageError("no perturbation given (--perturb or [perturb] section)")
    scenes = _load_dataset(cfg, "eval")
    scene_dir = out / "scenes"
    scene_dir.mkdir(exist_ok=True)
    for scene in scenes:
        export_scene_csv(apply_perturbation(scene, perturbation), scene_dir / f"{scene.scene_id}.csv")
    _write_manifest(cfg, out, {
        "package_version": __version__,
        "perturb_kind": perturbation.kind,
        "n_scenes": len(scenes),
    })
    print(f"perturbed {len(scenes)} scenes -> {scene_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="trajdiffuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, perturb=False, jobs=False, preset=False):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        if perturb:
            p.add_argument("--perturb", default=None, metavar="KIND:PARAM")
        if jobs:
            p.add_argument("--jobs", type=int, default=1)
        if preset:
            p.add_argument("--preset", default=None, choices=PRESETS)

    p_train = sub.add_parser("train", help="fit codec + denoiser, write checkpoint")
    common(p_train)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.set_defaults(func=_cmd_train)

    p_pred = sub.add_parser("predict", help="guided sampling + evaluation")
    common(p_pred, checkpoint=True, perturb=True, jobs=True, preset=True)
    p_pred.set_defaults(func=_cmd_predict)

    p_gen = sub.add_parser("generate", help="goal-conditioned generation")
    common(p_gen, checkpoint=True, jobs=True)
    p_gen.add_argument("--goals", required=True, help="CSV: scene,agent,x,y")
    p_gen.set_defaults(func=_cmd_generate)

    p_eval = sub.add_parser("eval", help="metrics from prediction/truth CSVs")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_synth = sub.add_parser("synth", help="emit synthetic scenes as ETH/UCY text")
    common(p_synth)
    p_synth.set_defaults(func=_cmd_synth)

    p_pert = sub.add_parser("perturb", help="export perturbed scene CSVs")
    common(p_pert, perturb=True)
    p_pert.set_defaults(func=_cmd_perturb)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)   # keeps runs byte-reproducible across hosts
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
