"""Command-line harness: data generation, training, attacks, eval, rendering.

Every command resolves its parameters from, in order of precedence: explicit
flags, a ``--config`` key=value file, the VENOM_SEED environment variable
(seed only), then built-in defaults — and echoes the final values into the
output location as ``resolved.cfg`` so any run can be reproduced from that
file alone.

Exit codes: 0 success, 1 usage/validation, 2 I/O or file format,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import diffusion as diff_mod
from . import metrics as metrics_mod
from . import victims as victims_mod
from .data import IMG_H, IMG_W, generate_dataset, load_dataset, save_dataset
from .errors import ContractViolationError, FormatError, NumericError

_PURIFY_TAG = 0x50555246  # domain separation for defense noise streams

# Evaluation-time purification depth.  At 16×16 the class content is global
# and survives deep re-noising (clean accuracy stays ≈0.94), so the defense
# re-noises most of the way before regenerating; shallower settings leave
# guided perturbations largely intact.
_PURIFY_DEPTH = 0.8


# ---------------------------------------------------------------------------
# config resolution


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ContractViolationError(f"not a boolean: {text!r}")


# per-command parameter schema: key -> (caster, default); required keys use
# the _REQUIRED sentinel and must arrive via flag or config file
_REQUIRED = object()

_SCHEMAS = {
    "gen-data": {
        "out": (str, _REQUIRED),
        "seed": (int, 0),
        "per_class": (int, 1000),
    },
    "train-diffusion": {
        "data": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "steps": (int, 20000),
        "batch": (int, 128),
        "lr": (float, 1e-3),
        "lr_floor": (float, 0.03),
        "cfg_dropout": (float, 0.1),
        "seed": (int, 0),
    },
    "train-victim": {
        "data": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "arch": (str, "a"),
        "steps": (int, 2000),
        "batch": (int, 64),
        "lr": (float, 1e-3),
        "adv_eps": (float, 0.0),
        "seed": (int, 0),
    },
    "attack": {
        "diff": (str, _REQUIRED),
        "victim": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "mode": (str, "nae"),
        "direction": (str, "targeted"),
        "class": (int, None),
        "target": (int, None),
        "ref": (str, None),
        "count": (int, 100),
        "n": (int, 5),
        "tstart": (int, 12),
        "scale": (float, 0.5),
        "beta": (float, 0.5),
        "cfg_scale": (float, 1.0),
        "jobs": (int, 1),
        "seed": (int, 0),
    },
    "eval": {
        "run": (str, _REQUIRED),
        "clean_ref": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "transfer": (str, None),
        "advtrain": (str, None),
        "defense": (str, None),
    },
    "ablate": {
        "diff": (str, _REQUIRED),
        "victim": (str, _REQUIRED),
        "clean_ref": (str, _REQUIRED),
        "out": (str, _REQUIRED),
        "module": (str, "all"),
        "mode": (str, "nae"),
        "direction": (str, "targeted"),
        "ref": (str, None),
        "count": (int, 80),
        "n": (int, 5),
        "tstart": (int, 12),
        "scale": (float, 0.5),
        "beta": (float, 0.5),
        "cfg_scale": (float, 1.0),
        "jobs": (int, 1),
        "seed": (int, 0),
    },
    "render": {
        "out": (str, _REQUIRED),
        "grid": (str, _REQUIRED),
        "run": (str, None),
        "dataset": (str, None),
    },
}


def parse_config_file(path, schema) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolationError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise ContractViolationError(f"{path}:{line_no}: unknown key {key!r}")
        caster = schema[key][0]
        try:
            values[key] = _bool(value) if caster is bool else caster(value)
        except ValueError:
            raise ContractViolationError(f"{path}:{line_no}: bad value for {key}: {value!r}")
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags > config file > VENOM_SEED (seed only) > defaults."""
    schema = _SCHEMAS[command]
    from_file = {}
    if getattr(args, "config", None):
        from_file = parse_config_file(args.config, schema)
    resolved = {}
    for key, (caster, default) in schema.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in from_file:
            resolved[key] = from_file[key]
        elif key == "seed" and "VENOM_SEED" in os.environ:
            try:
                resolved[key] = int(os.environ["VENOM_SEED"])
            except ValueError:
                raise ContractViolationError(
                    f"VENOM_SEED is not an integer: {os.environ['VENOM_SEED']!r}"
                )
        elif default is _REQUIRED:
            raise ContractViolationError(f"missing required parameter: {key}")
        else:
            resolved[key] = default
    return resolved


def write_resolved(path, resolved: dict) -> None:
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "resolved.cfg", resolved)
    return out


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_dataset(path, split: str):
    """Accept either a dataset file or a gen-data output directory."""
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.vnmd"
    return load_dataset(p, split=split)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(resolved: dict) -> int:
    if resolved["per_class"] < 1:
        raise ContractViolationError("per_class must be >= 1")
    out = _out_dir(resolved)
    train, test = generate_dataset(seed=resolved["seed"], per_class=resolved["per_class"])
    save_dataset(train, out / "train.vnmd")
    save_dataset(test, out / "test.vnmd")
    manifest = [
        f"train.vnmd n={train.n} sha256={_sha256_file(out / 'train.vnmd')}",
        f"test.vnmd n={test.n} sha256={_sha256_file(out / 'test.vnmd')}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    print(f"wrote {train.n} train and {test.n} test samples to {out}")
    return 0


def cmd_train_diffusion(resolved: dict) -> int:
    dataset = _resolve_dataset(resolved["data"], "train")
    out = _out_dir(resolved)
    config = diff_mod.DiffusionTrainConfig(
        steps=resolved["steps"],
        batch=resolved["batch"],
        lr=resolved["lr"],
        cfg_dropout=resolved["cfg_dropout"],
        lr_floor=resolved["lr_floor"],
    )
    schedule = diff_mod.build_schedule()
    rng = np.random.default_rng(np.random.SeedSequence([0x44494646, resolved["seed"]]))
    predictor, trace = diff_mod.train_denoiser(schedule, dataset, config, rng)
    diff_mod.save_diffusion(out / "diffusion.vnmc", predictor, schedule)
    lines = ["step,loss"] + [f"{i + 1},{loss:.6f}" for i, loss in enumerate(trace)]
    (out / "trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    trailing = float(np.mean(trace[-1000:]))
    print(f"trained {config.steps} steps; trailing-1000 mean loss {trailing:.4f}")
    return 0


def cmd_train_victim(resolved: dict) -> int:
    arch = resolved["arch"].lower()
    if arch not in ("a", "b"):
        raise ContractViolationError(f"arch must be 'a' or 'b', got {resolved['arch']!r}")
    train = _resolve_dataset(resolved["data"], "train")
    test = _resolve_dataset(resolved["data"], "test")
    out = _out_dir(resolved)
    config = victims_mod.VictimTrainConfig(
        steps=resolved["steps"], batch=resolved["batch"], lr=resolved["lr"]
    )
    rng = np.random.default_rng(np.random.SeedSequence([0x56494354, resolved["seed"]]))
    if resolved["adv_eps"] > 0:
        clf, report = victims_mod.adv_train_classifier(
            train, test, arch, resolved["adv_eps"], config, rng
        )
    else:
        clf, report = victims_mod.train_classifier(train, test, arch, config, rng)
    victims_mod.save_victim(out / "victim.vnmc", clf)
    rows = [
        "split,accuracy",
        f"train,{report.train_accuracy:.6f}",
        f"test,{report.test_accuracy:.6f}",
    ]
    if report.perturbed_accuracy is not None:
        rows.append(f"perturbed,{report.perturbed_accuracy:.6f}")
    (out / "trace.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"arch {arch} test accuracy {report.test_accuracy:.4f}")
    return 0


def _summary_csv(summary) -> str:
    def cell(v):
        return "NA" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

    header = "n,asr,mean_passes,mean_guidance_steps,errors"
    row = ",".join(
        cell(v)
        for v in (summary.n, summary.asr, summary.mean_passes, summary.mean_guidance_steps, summary.errors)
    )
    return header + "\n" + row + "\n"


def cmd_attack(resolved: dict, parser=None) -> int:
    if resolved["mode"] == "uae" and not resolved["ref"]:
        raise ContractViolationError("uae mode needs --ref")
    config = attack_mod.AttackConfig(
        mode=resolved["mode"],
        direction=resolved["direction"],
        n_restarts=resolved["n"],
        t_start=resolved["tstart"],
        s=resolved["scale"],
        beta=resolved["beta"],
        class_id=resolved["class"],
        y_a=resolved["target"],
        cfg_scale=resolved["cfg_scale"],
        seed=resolved["seed"],
    )
    if config.direction == "targeted" and config.mode == "nae" \
            and config.y_a is not None and config.y_a == config.class_id:
        raise ContractViolationError("targeted attack needs target != class")
    config.validate()
    predictor, schedule = diff_mod.load_diffusion(resolved["diff"])
    clf = victims_mod.load_victim(resolved["victim"])
    references = None
    if resolved["mode"] == "uae":
        ref_ds = _resolve_dataset(resolved["ref"], "test")
        references = (ref_ds.images, ref_ds.labels)
    out = _out_dir(resolved)
    records, summary = attack_mod.run_batch(
        config,
        schedule,
        predictor,
        clf,
        count=resolved["count"],
        references=references,
        jobs=resolved["jobs"],
    )
    attack_mod.save_records(out / "records.jsonl", records)
    (out / "summary.csv").write_text(_summary_csv(summary), encoding="utf-8")
    shown = "NA" if summary.asr is None else f"{summary.asr:.3f}"
    print(f"{summary.n} attacks, asr {shown}, errors {summary.errors}")
    return 0


def _load_run(run_dir):
    run = Path(run_dir)
    records = attack_mod.load_records(run / "records.jsonl")
    run_cfg = parse_config_file(run / "resolved.cfg", _SCHEMAS["attack"])
    return run, records, run_cfg


def cmd_eval(resolved: dict) -> int:
    run, records, run_cfg = _load_run(resolved["run"])
    if len(records) == 0:
        raise ContractViolationError("run has no records to evaluate")
    models = {"white": victims_mod.load_victim(run_cfg["victim"])}
    if resolved["transfer"]:
        models["transfer"] = victims_mod.load_victim(resolved["transfer"])
    if resolved["advtrain"]:
        models["adv_trained"] = victims_mod.load_victim(resolved["advtrain"])
    defenses = {}
    if resolved["defense"]:
        if resolved["defense"] != "purify":
            raise ContractViolationError(f"unknown defense {resolved['defense']!r}")
        predictor, schedule = diff_mod.load_diffusion(run_cfg["diff"])
        counter = {"i": 0}

        def purify_defense(x):
            rng = np.random.default_rng(
                np.random.SeedSequence([_PURIFY_TAG, run_cfg.get("seed", 0), counter["i"]])
            )
            counter["i"] += 1
            return diff_mod.purify(schedule, predictor, x, depth_fraction=_PURIFY_DEPTH, rng=rng)

        defenses["purify"] = purify_defense
    clean = _resolve_dataset(resolved["clean_ref"], "test")
    out = _out_dir(resolved)
    report = metrics_mod.evaluate_suite(
        records, clean.images, models, defenses, run_id=run.name
    )
    metrics_mod.write_metrics_csv(out / "metrics.csv", [report])
    print(metrics_mod.metrics_csv([report]), end="")
    return 0


_ABLATION_CELLS = {
    # cell -> (momentum on, adaptive switch on)
    "both": (True, True),
    "mo": (True, False),
    "as": (False, True),
    "none": (False, False),
}


def cmd_ablate(resolved: dict) -> int:
    module = resolved["module"].lower()
    if module == "all":
        cells = ["both", "mo", "as", "none"]
    elif module in _ABLATION_CELLS:
        cells = [module]
    else:
        raise ContractViolationError(f"module must be one of both|mo|as|none|all, got {module!r}")
    if resolved["mode"] == "uae" and not resolved["ref"]:
        raise ContractViolationError("uae mode needs --ref")
    predictor, schedule = diff_mod.load_diffusion(resolved["diff"])
    clf = victims_mod.load_victim(resolved["victim"])
    clean = _resolve_dataset(resolved["clean_ref"], "test")
    clean_feats = victims_mod.features(clf, clean.images)
    references = None
    if resolved["mode"] == "uae":
        ref_ds = _resolve_dataset(resolved["ref"], "test")
        references = (ref_ds.images, ref_ds.labels)
    out = _out_dir(resolved)
    rows = ["module,mo,as,n,asr,fd,seed"]
    for cell in cells:
        momentum_on, adaptive_on = _ABLATION_CELLS[cell]
        config = attack_mod.AttackConfig(
            mode=resolved["mode"],
            direction=resolved["direction"],
            n_restarts=resolved["n"],
            t_start=resolved["tstart"],
            s=resolved["scale"],
            beta=resolved["beta"] if momentum_on else 0.0,
            cfg_scale=resolved["cfg_scale"],
            seed=resolved["seed"],
            adaptive_switch=adaptive_on,
        )
        records, summary = attack_mod.run_batch(
            config, schedule, predictor, clf, count=resolved["count"],
            references=references, jobs=resolved["jobs"]
        )
        images = [r.x_star for r in records if r.x_star is not None]
        if not images:
            raise NumericError(f"cell {cell}: every attack failed before producing an image")
        feats = victims_mod.features(clf, np.stack(images))
        fd = metrics_mod.frechet_distance(feats, clean_feats)
        asr_value = 0.0 if summary.asr is None else summary.asr
        rows.append(
            f"{cell},{int(momentum_on)},{int(adaptive_on)},{summary.n},"
            f"{asr_value:.6f},{fd:.6f},{resolved['seed']}"
        )
        attack_mod.save_records(out / f"records_{cell}.jsonl", records)
    (out / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print("\n".join(rows))
    return 0


def _pgm_grid(images, rows, cols) -> bytes:
    tile_h, tile_w = IMG_H + 1, IMG_W + 1
    height = tile_h * rows - 1
    width = tile_w * cols - 1
    canvas = np.full((height, width), 128, dtype=np.uint8)
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        img = np.asarray(images[k], dtype=np.float64)
        pixels = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
        canvas[r * tile_h : r * tile_h + IMG_H, c * tile_w : c * tile_w + IMG_W] = pixels
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + canvas.tobytes()


def cmd_render(resolved: dict) -> int:
    grid = resolved["grid"].lower()
    parts = grid.split("x")
    if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise ContractViolationError(f"grid must look like 8x8, got {resolved['grid']!r}")
    rows, cols = int(parts[0]), int(parts[1])
    if bool(resolved["run"]) == bool(resolved["dataset"]):
        raise ContractViolationError("give exactly one of --run or --dataset")
    if resolved["run"]:
        records = attack_mod.load_records(Path(resolved["run"]) / "records.jsonl")
        images = [r["x_star"] for r in records if r.get("x_star") is not None]
    else:
        images = list(load_dataset(resolved["dataset"]).images)
    if rows * cols > len(images):
        raise ContractViolationError(
            f"grid {rows}x{cols} needs {rows * cols} images; only {len(images)} available"
        )
    out = Path(resolved["out"])
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(_pgm_grid(images, rows, cols))
    write_resolved(str(out) + ".cfg", resolved)
    print(f"wrote {rows}x{cols} grid to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(sub):
    sub.add_argument("--config", help="key=value config file (flags take precedence)")


def build_parser() -> _Parser:
    parser = _Parser(prog="venom", description="Adversarial generation inside DDIM sampling.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("gen-data", help="generate the shape dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    _add_common(p)

    p = commands.add_parser("train-diffusion", help="train the denoiser")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-floor", dest="lr_floor", type=float)
    p.add_argument("--cfg-dropout", dest="cfg_dropout", type=float)
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = commands.add_parser("train-victim", help="train a classifier")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--arch", choices=["a", "b"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--adv-eps", dest="adv_eps", type=float)
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = commands.add_parser("attack", help="run a batch of attacks")
    p.add_argument("--diff")
    p.add_argument("--victim")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["nae", "uae"])
    p.add_argument("--direction", choices=["targeted", "untargeted"])
    p.add_argument("--class", dest="class", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--ref")
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--tstart", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = commands.add_parser("eval", help="score a finished attack run")
    p.add_argument("--run")
    p.add_argument("--clean-ref", dest="clean_ref")
    p.add_argument("--out")
    p.add_argument("--transfer")
    p.add_argument("--advtrain")
    p.add_argument("--defense", choices=["purify"])
    _add_common(p)

    p = commands.add_parser("ablate", help="momentum/switch ablation grid")
    p.add_argument("--diff")
    p.add_argument("--victim")
    p.add_argument("--clean-ref", dest="clean_ref")
    p.add_argument("--out")
    p.add_argument("--module", choices=["both", "mo", "as", "none", "all"])
    p.add_argument("--mode", choices=["nae", "uae"])
    p.add_argument("--direction", choices=["targeted", "untargeted"])
    p.add_argument("--ref")
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--tstart", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = commands.add_parser("render", help="write an image grid as PGM")
    p.add_argument("--run")
    p.add_argument("--dataset")
    p.add_argument("--grid")
    p.add_argument("--out")
    _add_common(p)

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-diffusion": cmd_train_diffusion,
    "train-victim": cmd_train_victim,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = resolve(args.command, args)
        return _COMMANDS[args.command](resolved)
    except NumericError as exc:
        print(f"venom: numeric failure: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"venom: bad file: {exc}", file=sys.stderr)
        return 2
    except ContractViolationError as exc:
        print(f"venom: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"venom: i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
