"""Command-line front end.

Every subcommand resolves its configuration, runs deterministically from
explicit seeds, and, when given --out-dir, writes its artifacts plus a
manifest.json recording the resolved config, seeds, and input hashes.
Reruns with identical arguments produce byte-identical files.

Exit codes: 0 on success, 1 on a runtime diagnostic (bad input content,
divergence, failed verification), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablate import (EVAL_SCRIPTS, NOISE_PRESETS, ablate_alignment,
                     ablate_dem, ablate_m, ablate_qbs, benchmark_config,
                     eval_script, m_report_text, separable_fixture)
from .config import ConfigError, RunConfig, make_manifest, manifest_text
from .dem import load_dem, save_dem
from .metrics import evaluate, report_text
from .motio import MotParseError, parse_mot, serialize_mot, write_mot
from .probes import run_suite, suite_text
from .scene import (BUILTIN_SCRIPTS, builtin_script, generate_scene,
                    truths_to_gt)
from .trackbook import (load_book, margin_satisfaction, retrieval_accuracy,
                        save_book, tune_prompts)
from .tracker import (NoiseModel, clip_train_loop, pretrain_dem,
                      resolve_script, run_sequence, scene_text)


def _load_config(args) -> RunConfig:
    """Without --config, fall back to the benchmark defaults (plain-gradient
    prompt tuning enabled); the manifest records whichever was resolved."""
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return benchmark_config()


def _scene_by_name(name: str):
    if name in BUILTIN_SCRIPTS:
        return builtin_script(name)
    if name in EVAL_SCRIPTS:
        return eval_script(name)
    raise ValueError(
        f"unknown scene {name!r}; builtins: "
        f"{sorted(list(BUILTIN_SCRIPTS) + list(EVAL_SCRIPTS))}")


def _resolve_scene(args):
    if getattr(args, "scene", None):
        return _scene_by_name(args.scene)
    return resolve_script(Path(args.script))[0]


def _noise(args) -> NoiseModel:
    name = getattr(args, "noise", "oracle")
    if name not in NOISE_PRESETS:
        raise ValueError(f"unknown noise preset {name!r}; available: "
                         f"{sorted(NOISE_PRESETS)}")
    return NOISE_PRESETS[name]


def _out_dir(args) -> Path | None:
    if getattr(args, "out_dir", None) is None:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(out: Path | None, name: str, text: str) -> None:
    if out is not None:
        (out / name).write_text(text)


def _emit_manifest(out: Path | None, manifest: dict) -> None:
    _write(out, "manifest.json", manifest_text(manifest))


# -- subcommands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _load_config(args)
    script = _resolve_scene(args)
    seed = config.seed if args.seed is None else args.seed
    truths = generate_scene(script, seed, latent_dim=config.latent_dim)
    gt = truths_to_gt(truths)
    text = scene_text(script)
    out = _out_dir(args)
    _write(out, "gt.txt", serialize_mot(gt))
    _write(out, "scene.txt", text)
    manifest = make_manifest(config, "synth", inputs={"scene": text},
                             extras={"seed": seed, "frames": script.frames,
                                     "identities": len(script.objects),
                                     "boxes": len(gt.lines)})
    _emit_manifest(out, manifest)
    print(f"synth: {script.frames} frames, {len(script.objects)} identities, "
          f"{len(gt.lines)} boxes")
    return 0


def cmd_track(args) -> int:
    config = _load_config(args)
    script = _resolve_scene(args)
    dem = load_dem(args.dem) if args.dem else None
    book = load_book(args.book) if args.book else None
    run = run_sequence(script, config, dem=dem, noise=_noise(args),
                       seed=args.seed, scene_seed=args.scene_seed, book=book)
    report = evaluate(run.gt, run.results)
    out = _out_dir(args)
    _write(out, "pred.txt", serialize_mot(run.results))
    _write(out, "gt.txt", serialize_mot(run.gt))
    _write(out, "report.txt", report_text(report))
    _emit_manifest(out, run.manifest)
    print(report_text(report), end="")
    return 0


def cmd_eval(args) -> int:
    gt = parse_mot(args.gt, gt=True)
    pred = parse_mot(args.pred)
    report = evaluate(gt.lines, pred.lines)
    text = report_text(report)
    out = _out_dir(args)
    _write(out, "report.txt", text)
    manifest = make_manifest(benchmark_config(), "eval",
                             inputs={"gt": serialize_mot(gt),
                                     "pred": serialize_mot(pred)})
    _emit_manifest(out, manifest)
    print(text, end="")
    return 0


def cmd_tune_prompts(args) -> int:
    config = _load_config(args)
    if args.m:
        config = config.replace(prompt_len=args.m)
    book, pool = separable_fixture(config, identities=args.identities,
                                   samples=args.samples, sigma=args.sigma,
                                   seed=args.seed)
    tuned = tune_prompts(book, pool, steps=args.steps, lr=config.prompt_lr,
                         seed=args.seed)
    t2i = retrieval_accuracy(tuned.book, pool, "t2i")
    i2t = retrieval_accuracy(tuned.book, pool, "i2t")
    margin = margin_satisfaction(tuned.book, pool)
    out = _out_dir(args)
    if out is not None:
        save_book(tuned.book, out / "book.json")
    manifest = make_manifest(
        config, "tune-prompts",
        extras={"identities": args.identities, "samples": args.samples,
                "sigma": args.sigma, "steps": args.steps, "seed": args.seed,
                "retrieval_t2i": t2i, "retrieval_i2t": i2t, "margin": margin,
                "final_loss": round(tuned.trace[-1], 9) if tuned.trace
                else None})
    _emit_manifest(out, manifest)
    print(f"tune-prompts: retrieval t2i {t2i:.3f} i2t {i2t:.3f} "
          f"margin {margin:.3f} over {len(pool)} samples")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    scripts = []
    texts = {}
    for name in args.scenes.split(","):
        name = name.strip()
        if name in BUILTIN_SCRIPTS or name in EVAL_SCRIPTS:
            script = _scene_by_name(name)
        else:
            script = resolve_script(Path(name))[0]
        scripts.append(script)
        texts[f"scene:{name}"] = scene_text(script)
    seed = config.seed if args.seed is None else args.seed
    dem = pretrain_dem(config, scripts, seed=seed)
    result = clip_train_loop(scripts, config, dem=dem, seed=seed,
                             train_dem=args.train_dem)
    out = _out_dir(args)
    if out is not None:
        save_dem(result.dem, out / "dem.json")
        save_book(result.book, out / "book.json")
        trace = "".join(f"{v:.9f}\n" for v in result.clip_trace)
        _write(out, "trace.txt", trace)
    manifest = make_manifest(
        config, "train", inputs=texts,
        extras={"seed": seed, "iterations": result.iterations,
                "positives": result.positives, "pool": len(result.pool),
                "final_loss": round(result.clip_trace[-1], 9)
                if result.clip_trace else None})
    _emit_manifest(out, manifest)
    print(f"train: {result.iterations} iterations, "
          f"{result.positives} positive detect labels, "
          f"pool {len(result.pool)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(points=args.points)
    text = suite_text(results)
    out = _out_dir(args)
    _write(out, "gradcheck.txt", text)
    manifest = make_manifest(
        benchmark_config(), "gradcheck",
        extras={"points": args.points,
                "worst_rel_err": max(r.worst_rel_err for r in results),
                "passed": all(r.passed for r in results)})
    _emit_manifest(out, manifest)
    print(text, end="")
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(args) -> int:
    config = benchmark_config()
    seeds = range(100, 100 + args.seeds)
    if args.axis == "m":
        rows = ablate_m(config, steps=args.steps)
        text = m_report_text(rows)
        extras = {"rows": {str(m): r for m, r in rows.items()}}
    else:
        runner = {"dem": ablate_dem, "qbs": ablate_qbs,
                  "alignment": ablate_alignment}[args.axis]
        report = runner(config, seeds=seeds)
        text = report.text()
        extras = {"summary": report.summary}
        extras.update(report.extras)
    out = _out_dir(args)
    _write(out, "ablate.txt", text)
    manifest = make_manifest(config, f"ablate --axis {args.axis}",
                             extras=extras)
    _emit_manifest(out, manifest)
    print(text, end="")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querytrack",
        description="Query-based tracking testbed: synthetic scenes, "
                    "balanced-assignment training, dedup scoring, prompt "
                    "books, and standards-conformant metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scene_args(p, script_required=False):
        group = p.add_mutually_exclusive_group(required=script_required)
        group.add_argument("--scene", help="builtin scene name")
        group.add_argument("--script", help="path to a scene script file")

    p = sub.add_parser("synth", help="generate a scripted scene's ground truth")
    add_scene_args(p, script_required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="run the tracker over a scene")
    add_scene_args(p, script_required=True)
    p.add_argument("--config")
    p.add_argument("--noise", default="oracle",
                   help="noise preset: " + ", ".join(sorted(NOISE_PRESETS)))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scene-seed", type=int, default=None)
    p.add_argument("--dem", help="trained dedup head (json)")
    p.add_argument("--book", help="prompt book for re-association (json)")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a prediction file against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune-prompts",
                       help="tune prompt tokens on the separable fixture")
    p.add_argument("--config")
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--m", type=int, default=None, help="prompt length")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_tune_prompts)

    p = sub.add_parser("train", help="pretrain the dedup head and run the "
                                     "alternating alignment loop")
    p.add_argument("--scenes", required=True,
                   help="comma-separated builtin names or script paths")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-dem", action="store_true",
                   help="keep taking dedup steps inside the loop")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check every loss gradient")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a paired ablation axis")
    p.add_argument("--axis", required=True,
                   choices=("qbs", "dem", "alignment", "m"))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int, default=300,
                   help="tuning steps for the m axis")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MotParseError, ValueError, RuntimeError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
