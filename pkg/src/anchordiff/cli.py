"""Command-line entry points.

Commands:

    anchordiff toy train      fit the toy MLP denoiser and save it
    anchordiff toy sample     run one toy regime and dump samples + SVG
    anchordiff gen            generate corridor scenes (free/goal/adversarial)
    anchordiff eval           per-scene metrics, aggregates, histograms, JSD

All commands share --config/--seed/--out/--jobs plus repeatable
--set section.key=value overrides. Exit code is 0 only when every output
was written; failures print one machine-readable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from .corridor import build_corridor_map, make_corridor_scene
from .denoiser import GmmOracleDenoiser, load_denoiser, save_denoiser, train_denoiser
from .game import choose_attacker
from .geometry import walk_polyline
from .guidance import route_candidates
from .manifest import RunManifest, content_hash, write_manifest
from .metrics import (histogram_counts, jsd, scene_report, scene_statistics,
                      write_histogram_csv, write_scene_reports_csv)
from .render import render_scene, render_toy
from .sampler import SamplerConfig, diagnostics_to_csv, generate_scene
from .scene import load_scene, save_scene, set_goal_condition
from .toy import REGIMES, make_toy_world, mode_statistics, sample_toy


class CliError(RuntimeError):
    pass


def _add_common(parser):
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="anchordiff")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="toy mixture experiments")
    toy_sub = toy.add_subparsers(dest="subcommand", required=True)
    toy_train = toy_sub.add_parser("train", help="fit the toy denoiser")
    _add_common(toy_train)
    toy_sample = toy_sub.add_parser("sample", help="sample one guidance regime")
    _add_common(toy_sample)
    toy_sample.add_argument("--regime", choices=REGIMES, default="trust_region")
    toy_sample.add_argument("--samples", type=int, default=None,
                            help="override [toy] num_samples")
    toy_sample.add_argument("--denoiser", default=None,
                            help="parameter file (required for [toy] denoiser=mlp)")

    gen = sub.add_parser("gen", help="generate corridor scenes")
    _add_common(gen)
    gen.add_argument("--mode", choices=("free", "goal", "adversarial"), default="free")
    gen.add_argument("--scenes", type=int, default=1)
    gen.add_argument("--denoiser", default=None,
                     help="scene denoiser parameter file (trained and cached when absent)")
    gen.add_argument("--goal", default=None, metavar="X,Y[,PSI,V]",
                     help="explicit ego goal for --mode goal")
    gen.add_argument("--kappa", type=float, default=None,
                     help="override [solver] kappa")

    ev = sub.add_parser("eval", help="evaluate generated scenes")
    _add_common(ev)
    ev.add_argument("scenes", nargs="+", help="scene JSON files or directories")
    ev.add_argument("--baseline", default=None,
                    help="second scene set (file/dir) for JSD comparison")
    ev.add_argument("--ego", type=int, default=0)
    return parser


def _load_config(args):
    overrides = list(args.overrides)
    if getattr(args, "kappa", None) is not None:
        overrides.append(f"solver.kappa={args.kappa}")
    return cfgmod.load_config(args.config, overrides)


def _finish(args, cfg, started, inputs=()):
    manifest = RunManifest(
        command=" ".join(sys.argv[1:]) or args.command,
        config_path=str(args.config) if args.config else "",
        seed=int(args.seed),
        out_dir=str(args.out),
        content_hash=content_hash(cfgmod.config_lines(cfg), inputs),
        duration_s=time.monotonic() - started,
    )
    write_manifest(manifest, os.path.join(args.out, "manifest.json"))


def cmd_toy_train(args):
    started = time.monotonic()
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    world = make_toy_world(cfg.get("toy", "seed"),
                           reward_scale=cfg.get("toy", "reward_scale"))
    sched = cfgmod.toy_schedule(cfg)
    rng = np.random.default_rng(args.seed)
    dataset = world.target.sample(cfg.get("train", "dataset_size"), rng)[:, None, :]
    den = train_denoiser(dataset, sched, cfgmod.train_config(cfg), rng)
    save_denoiser(den, os.path.join(args.out, "toy_denoiser.json"))
    with open(os.path.join(args.out, "toy_train_loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(den.loss_history):
            fh.write(f"{epoch},{loss!r}\n")
    _finish(args, cfg, started)
    return 0


def _toy_denoiser(cfg, world, sched, path):
    kind = cfg.get("toy", "denoiser")
    if kind == "gmm_oracle":
        return GmmOracleDenoiser(world.target, sched)
    if kind == "mlp":
        if path is None or not os.path.exists(path):
            raise CliError("mlp sampling needs --denoiser pointing at a trained "
                           "parameter file (run `anchordiff toy train` first)")
        return load_denoiser(path)
    raise CliError(f"unknown [toy] denoiser kind {kind!r}")


def cmd_toy_sample(args):
    started = time.monotonic()
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    world = make_toy_world(cfg.get("toy", "seed"),
                           reward_scale=cfg.get("toy", "reward_scale"))
    sched = cfgmod.toy_schedule(cfg)
    den = _toy_denoiser(cfg, world, sched, args.denoiser)
    num = args.samples if args.samples is not None else cfg.get("toy", "num_samples")
    rng = np.random.default_rng(args.seed)
    samples, info = sample_toy(world, den, sched, args.regime, num, rng=rng)
    stats = mode_statistics(world, samples)

    with open(os.path.join(args.out, f"samples_{args.regime}.csv"), "w") as fh:
        fh.write("x,y,mode\n")
        for pt, mode in zip(samples, stats.assignments):
            fh.write(f"{pt[0]!r},{pt[1]!r},{int(mode)}\n")
    summary = {
        "regime": args.regime,
        "num_samples": int(num),
        "mode_masses": [float(m) for m in stats.masses],
        "within_fraction": float(stats.within_fraction),
        "drift_fraction": float(stats.drift_fraction),
        "guided_mode": int(stats.guided_mode),
        "mean_kl": float(np.mean(info["mean_kl"])) if len(info["mean_kl"]) else 0.0,
    }
    with open(os.path.join(args.out, f"stats_{args.regime}.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    render_toy(world, samples, os.path.join(args.out, f"toy_{args.regime}.svg"),
               assignments=stats.assignments)
    _finish(args, cfg, started, inputs=[args.denoiser] if args.denoiser else ())
    return 0


def _scene_dataset(corridor_map, cfg, rng):
    """Clean lane-following trajectories for denoiser fitting."""
    s = cfg.section("scene")
    frames = s["history_steps"] + s["future_steps"]
    rows = []
    target = cfg.get("train", "dataset_size")
    while len(rows) < target:
        scene = make_corridor_scene(
            corridor_map, s["num_agents"], s["history_steps"], rng,
            future_steps=s["future_steps"], dt=s["dt"],
            speed_range=(s["speed_min"], s["speed_max"]))
        for a in range(scene.num_agents):
            if scene.valid[a].all():
                rows.append(scene.values[a, :, :4])
    data = np.stack(rows)
    if data.shape[1] != frames:
        raise CliError("scene dataset frame count mismatch")
    return data


def scene_denoiser(cfg, corridor_map, path=None):
    """Load the scene denoiser, or fit one deterministically and cache it."""
    if path is not None and os.path.exists(path):
        return load_denoiser(path)
    if path is None:
        raise CliError("no denoiser path given")
    rng = np.random.default_rng(cfg.get("train", "seed"))
    dataset = _scene_dataset(corridor_map, cfg, rng)
    den = train_denoiser(dataset, cfgmod.scene_schedule(cfg),
                         cfgmod.train_config(cfg), rng)
    save_denoiser(den, path)
    return den


def _parse_goal(raw):
    parts = [float(p) for p in raw.split(",")]
    if len(parts) not in (2, 4):
        raise CliError("--goal expects X,Y or X,Y,PSI,V")
    return parts


def _ego_goal(scene, corridor_map, cfg, explicit):
    s = cfg.section("scene")
    horizon = s["future_steps"] * s["dt"]
    hist = np.flatnonzero(scene.inpaint[0, :, 0])
    pose = scene.values[0, hist[-1], :3]
    speed = scene.values[0, hist[-1], 3]
    if explicit is not None:
        parts = _parse_goal(explicit)
        if len(parts) == 2:
            parts += [float(pose[2]), float(speed)]
        return parts
    candidates = route_candidates(corridor_map, pose)
    if not candidates:
        raise CliError("goal mode: ego has no route candidate to place a goal on")
    point, heading = walk_polyline(candidates[0], 0.0, speed * horizon)
    return [float(point[0]), float(point[1]), float(heading), float(speed)]


def _sampler_config(cfg, mode):
    params, solver = cfgmod.solver_settings(cfg)
    return SamplerConfig(
        mode=mode,
        t_low=cfg.get("sampler", "t_low"),
        warmup_spec=cfgmod.guidance_spec(cfg, enable_safety=False),
        rolling_spec=cfgmod.guidance_spec(cfg, enable_safety=True),
        params=params,
        solver=solver,
        updates_per_frame=cfg.get("sampler", "updates_per_frame"),
        route_depth=cfg.get("sampler", "route_depth"),
        game=cfgmod.game_config(cfg) if mode == "adversarial" else None,
    )


def cmd_gen(args):
    started = time.monotonic()
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    corridor_map = build_corridor_map(cfgmod.corridor_spec(cfg))
    den_path = args.denoiser or os.path.join(args.out, "scene_denoiser.json")
    den = scene_denoiser(cfg, corridor_map, den_path)
    sched = cfgmod.scene_schedule(cfg)
    sampler_cfg = _sampler_config(cfg, args.mode)
    s = cfg.section("scene")
    game = sampler_cfg.game

    def one_scene(index):
        rng = np.random.default_rng([args.seed, index])
        scene = make_corridor_scene(
            corridor_map, s["num_agents"], s["history_steps"], rng,
            future_steps=s["future_steps"], dt=s["dt"],
            speed_range=(s["speed_min"], s["speed_max"]))
        if args.mode == "goal":
            scene = set_goal_condition(scene, 0, _ego_goal(scene, corridor_map,
                                                           cfg, args.goal))
        scene_cfg = sampler_cfg
        if game is not None and game.attacker_index < 0:
            picked = replace(game, attacker_index=choose_attacker(
                scene, game.ego_index, game))
            scene_cfg = replace(sampler_cfg, game=picked)
        out_scene, diagnostics = generate_scene(scene, den, sched, scene_cfg,
                                                rng, corridor_map=corridor_map)
        tag = f"{index:04d}"
        save_scene(out_scene, corridor_map, os.path.join(args.out, f"scene_{tag}.json"))
        diagnostics_to_csv(diagnostics, os.path.join(args.out, f"diagnostics_{tag}.csv"))
        played = scene_cfg.game
        render_scene(out_scene, corridor_map,
                     os.path.join(args.out, f"scene_{tag}.svg"),
                     ego=played.ego_index if played else 0,
                     attacker=played.attacker_index if played else None)

    indices = range(args.scenes)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(one_scene, indices))
    else:
        for i in indices:
            one_scene(i)
    _finish(args, cfg, started,
            inputs=[args.denoiser] if args.denoiser and os.path.exists(args.denoiser) else ())
    return 0


def _scene_files(paths):
    files = []
    for entry in paths:
        if os.path.isdir(entry):
            files.extend(sorted(glob.glob(os.path.join(entry, "scene_*.json"))))
        else:
            files.append(entry)
    if not files:
        raise CliError("no scene files found")
    return files


def _load_scenes(paths):
    scenes = []
    for path in paths:
        try:
            scenes.append((path, *load_scene(path)))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CliError(f"{path}: {exc}") from exc
    return scenes


def _pooled_histograms(scenes, specs):
    pooled = {name: np.zeros(spec.bin_count) for name, spec in specs.items()}
    for _, scene, corridor_map in scenes:
        stats = scene_statistics(scene, corridor_map)
        for name, spec in specs.items():
            if stats[name].size:
                pooled[name] += histogram_counts(stats[name], spec)
    return pooled


def cmd_eval(args):
    started = time.monotonic()
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    limits = cfgmod.kinematic_limits(cfg)
    horizon = cfg.get("metrics", "ttc_horizon")
    files = _scene_files(args.scenes)
    scenes = _load_scenes(files)

    def evaluate(entry):
        _, scene, corridor_map = entry
        return scene_report(scene, corridor_map, ego=args.ego, limits=limits,
                            horizon_s=horizon)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(evaluate, scenes))
    else:
        reports = [evaluate(entry) for entry in scenes]
    write_scene_reports_csv(reports, os.path.join(args.out, "metrics.csv"))

    specs = cfgmod.histogram_specs(cfg)
    pooled = _pooled_histograms(scenes, specs)
    for name, counts in pooled.items():
        write_histogram_csv(specs[name], counts,
                            os.path.join(args.out, f"hist_{name}.csv"))

    if args.baseline is not None:
        base_scenes = _load_scenes(_scene_files([args.baseline]))
        base_pooled = _pooled_histograms(base_scenes, specs)
        with open(os.path.join(args.out, "jsd.csv"), "w") as fh:
            fh.write("statistic,jsd\n")
            for name in sorted(specs):
                if pooled[name].sum() == 0 or base_pooled[name].sum() == 0:
                    fh.write(f"{name},nan\n")
                else:
                    fh.write(f"{name},{jsd(pooled[name], base_pooled[name])!r}\n")
    _finish(args, cfg, started, inputs=files)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "toy":
        runner = cmd_toy_train if args.subcommand == "train" else cmd_toy_sample
    elif args.command == "gen":
        runner = cmd_gen
    else:
        runner = cmd_eval
    try:
        return runner(args)
    except (CliError, cfgmod.ConfigError, ValueError, OSError, RuntimeError) as exc:
        line = json.dumps({"error": str(exc),
                           "type": type(exc).__name__,
                           "command": args.command})
        print(line, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
