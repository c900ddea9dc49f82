"""Command-line front end: hide, reveal, train, solve-ot, ablate, bench.

Every command resolves its configuration as flags > config file > defaults,
writes the resolved key=value manifest next to its outputs, and uses a fixed
exit-code partition: 0 success, 2 bad input, 3 model or key mismatch, 4 I/O
failure. All artifacts except bench wall times are byte-stable given the
same resolved config.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import mcot
from . import metrics as mt
from . import net as nn
from . import train as tn
from . import transport as tr
from .core import ImageIOError, SeededRng, load_image, save_image

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_MODEL_MISMATCH = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


# --- config plumbing ------------------------------------------------------------


def parse_config_file(path) -> dict[str, str]:
    """Line-oriented key=value file; blank lines and # comments allowed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{number}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


TRAIN_KEYS: dict[str, type] = {
    "epochs": int,
    "batch": int,
    "seed": int,
    "patch_size": int,
    "base_width": int,
    "mlp_hidden": int,
    "use_mcot": bool,
    "charbonnier_literal": bool,
    "lr_init": float,
    "lr_final": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "charbonnier_eps": float,
}


def resolve_train_config(
    config_path, overrides: dict[str, str]
) -> tuple[nn.TrainConfig, dict[str, str]]:
    """Layer flags over the config file over TrainConfig defaults."""
    layered: dict[str, str] = {}
    if config_path is not None:
        layered.update(parse_config_file(config_path))
    layered.update(overrides)

    cfg = nn.TrainConfig()
    for key, raw in layered.items():
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        kind = TRAIN_KEYS[key]
        try:
            value = _parse_bool(raw) if kind is bool else kind(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
        setattr(cfg, key, value)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    resolved = {}
    for key, kind in TRAIN_KEYS.items():
        value = getattr(cfg, key)
        resolved[key] = repr(float(value)) if kind is float else str(value).lower() if kind is bool else str(value)
    return cfg, resolved


def write_manifest(path, command: str, resolved: dict[str, str]) -> None:
    lines = [f"command={command}"]
    lines += [f"{key}={value}" for key, value in sorted(resolved.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _collect_overrides(args, keys=TRAIN_KEYS) -> dict[str, str]:
    overrides = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for key, kind in TRAIN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, choices=["true", "false"], default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _load_rgb(path) -> np.ndarray:
    img = load_image(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


# --- subcommands -----------------------------------------------------------------


def cmd_hide(args) -> int:
    hiding, _, _, meta = tn.load_checkpoint(args.model)
    cover = _load_rgb(args.cover)
    secret = _load_rgb(args.secret)
    if cover.shape != secret.shape:
        print(f"error: cover {cover.shape} and secret {secret.shape} differ", file=sys.stderr)
        return EXIT_BAD_INPUT
    side = meta["patch_size"]
    if cover.shape[1] != side or cover.shape[2] != side:
        print(f"error: model expects {side}x{side} images, got "
              f"{cover.shape[1]}x{cover.shape[2]}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.mode == "exact" and args.out_key is None:
        print("error: --mode exact requires --out-key for the transport key", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.mode == "entropic" and args.out_key is not None:
        print("error: entropic plans are dense and cannot be exported as a key", file=sys.stderr)
        return EXIT_BAD_INPUT

    epsilon = float(args.epsilon) if args.epsilon is not None else None
    stego, result = nn.hide(cover, secret, hiding, use_mcot=meta["use_mcot"],
                            mode=args.mode, epsilon=epsilon)
    save_image(stego, args.out_stego)
    if args.out_key is not None:
        mcot.export_key(result, args.out_key)
    report = mt.compute_report(cover, stego)
    report_path = Path(str(args.out_stego) + ".report.json")
    report_path.write_text(mt.report_text(report) + "\n")

    resolved = {
        "cover": str(args.cover), "secret": str(args.secret), "model": str(args.model),
        "out_stego": str(args.out_stego), "out_key": str(args.out_key),
        "mode": args.mode, "epsilon": repr(epsilon) if epsilon is not None else "None",
    }
    write_manifest(str(args.out_stego) + ".manifest.txt", "hide", resolved)
    print(f"psnr_cover_stego={report.psnr_y!r}")
    return EXIT_OK


def cmd_reveal(args) -> int:
    _, reveal_net, _, meta = tn.load_checkpoint(args.model)
    stego = _load_rgb(args.stego)
    plans = None
    if args.key is not None:
        plans = mcot.import_key(args.key)
    elif meta["use_mcot"]:
        print("error: this model reveals through a transport key; pass --key", file=sys.stderr)
        return EXIT_BAD_INPUT
    recovery = nn.reveal(stego, plans, reveal_net)
    save_image(recovery, args.out)

    resolved = {
        "stego": str(args.stego), "key": str(args.key), "model": str(args.model),
        "out": str(args.out), "secret": str(args.secret),
    }
    write_manifest(str(args.out) + ".manifest.txt", "reveal", resolved)
    if args.secret is not None:
        secret = _load_rgb(args.secret)
        report = mt.compute_report(secret, recovery)
        Path(str(args.out) + ".report.json").write_text(mt.report_text(report) + "\n")
        print(f"psnr_secret_recovery={report.psnr_y!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, resolved = resolve_train_config(args.config, _collect_overrides(args))
    images = tn.load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    hiding = reveal_net = mlps = None
    start_epoch = 0
    if args.resume is not None:
        hiding, reveal_net, mlps, meta = tn.load_checkpoint(args.resume)
        for key in ("patch_size", "base_width", "mlp_hidden", "use_mcot"):
            want = getattr(cfg, key)
            if meta[key] != want:
                print(f"error: checkpoint {key}={meta[key]} but config asks {want}",
                      file=sys.stderr)
                return EXIT_BAD_INPUT
        start_epoch = meta["epochs_done"]

    result = tn.train(images, cfg, hiding=hiding, reveal_net=reveal_net, mlps=mlps,
                      start_epoch=start_epoch)
    (out_dir / "metrics.csv").write_text(tn.metrics_csv(result.history))
    tn.save_checkpoint(out_dir / "model.stgo", result.hiding, result.reveal_net,
                       result.mlps, cfg, result.epochs_done)
    resolved["data"] = str(args.data)
    resolved["resume"] = str(args.resume)
    write_manifest(out_dir / "manifest.txt", "train", resolved)
    last = result.history[-1]
    print(f"epochs={result.epochs_done} L_total={last['L_total']!r}")
    return EXIT_OK


def _read_points(path) -> np.ndarray:
    """One real per line; blank lines allowed at the end."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read point file {path}: {exc}") from exc
    values = []
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            values.append(float(stripped))
        except ValueError as exc:
            raise ConfigError(f"{path}:{number}: expected one real per line") from exc
    if not values:
        raise ConfigError(f"point file {path} is empty")
    out = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"point file {path} contains non-finite values")
    return out


def cmd_solve_ot(args) -> int:
    x = _read_points(args.x_file)
    y = _read_points(args.y_file)
    if x.size != y.size:
        print(f"error: point clouds differ in size ({x.size} vs {y.size})", file=sys.stderr)
        return EXIT_BAD_INPUT
    cost = tr.cost_matrix(tr.DiscreteDistribution(x), tr.DiscreteDistribution(y))
    if args.solver == "exact":
        plan = tr.solve_exact(cost)
    elif args.solver == "brute":
        if x.size > tr.BRUTE_FORCE_MAX_N:
            print(f"error: brute solver is capped at N={tr.BRUTE_FORCE_MAX_N}, got {x.size}",
                  file=sys.stderr)
            return EXIT_BAD_INPUT
        plan = tr.brute_force_plan(cost)
    else:
        if args.epsilon is None:
            print("error: entropic solver needs --epsilon", file=sys.stderr)
            return EXIT_BAD_INPUT
        plan = tr.solve_entropic(cost, float(args.epsilon))

    print(f"total_cost={plan.total_cost!r}")
    if args.out_plan is not None:
        lines = []
        if plan.perm is not None:
            lines.append("source,target")
            lines += [f"{i},{int(j)}" for i, j in enumerate(plan.perm)]
        else:
            lines.append(",".join(f"t{j}" for j in range(plan.n)))
            lines += [",".join(repr(v) for v in row) for row in plan.coupling]
        Path(args.out_plan).write_text("\n".join(lines) + "\n")
    if args.out_key is not None:
        if plan.perm is None:
            print("error: only exact permutation plans can become keys", file=sys.stderr)
            return EXIT_BAD_INPUT
        result = mcot.McotResult(y[plan.perm][None], [plan], y[None])
        mcot.export_key(result, args.out_key)
    resolved = {
        "x_file": str(args.x_file), "y_file": str(args.y_file), "solver": args.solver,
        "epsilon": str(args.epsilon), "out_plan": str(args.out_plan),
        "out_key": str(args.out_key),
    }
    if args.out_plan is not None:
        write_manifest(str(args.out_plan) + ".manifest.txt", "solve-ot", resolved)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        print("error: --seeds must be at least 1", file=sys.stderr)
        return EXIT_BAD_INPUT
    overrides = _collect_overrides(args)
    images = tn.load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    sums: dict[bool, list[float]] = {True: [], False: []}
    for seed in range(args.seeds):
        for use_mcot in (True, False):
            arm = dict(overrides)
            arm["seed"] = str(seed)
            arm["use_mcot"] = "true" if use_mcot else "false"
            cfg, resolved = resolve_train_config(args.config, arm)
            result = tn.train(images, cfg)
            last = result.history[-1]
            total = last["psnr_cover_stego"] + last["psnr_secret_recovery"]
            sums[use_mcot].append(total)
            rows.append((seed, use_mcot, last["psnr_cover_stego"],
                         last["psnr_secret_recovery"], total))
            if seed == 0:
                name = "manifest_mcot.txt" if use_mcot else "manifest_plain.txt"
                resolved["data"] = str(args.data)
                write_manifest(out_dir / name, "ablate", resolved)

    lines = ["seed,use_mcot,psnr_cover_stego,psnr_secret_recovery,psnr_sum"]
    lines += [f"{s},{str(u).lower()},{cs!r},{sr!r},{t!r}" for s, u, cs, sr, t in rows]
    median_mcot = float(np.median(sums[True]))
    median_plain = float(np.median(sums[False]))
    verdict = "pass" if median_mcot >= median_plain else "fail"
    lines.append(f"median,mcot,{median_mcot!r},,")
    lines.append(f"median,plain,{median_plain!r},,")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"median_mcot={median_mcot!r} median_plain={median_plain!r} direction={verdict}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sizes = [int(tok) for tok in args.sizes.split(",") if tok]
    except ValueError:
        print(f"error: --sizes must be comma-separated integers, got {args.sizes!r}",
              file=sys.stderr)
        return EXIT_BAD_INPUT
    solvers = [tok for tok in args.solvers.split(",") if tok]
    for solver in solvers:
        if solver not in ("exact", "entropic", "brute"):
            print(f"error: unknown solver {solver!r}", file=sys.stderr)
            return EXIT_BAD_INPUT

    lines = ["solver,n,seconds,total_cost,cost_gap"]
    for n in sizes:
        rng = SeededRng(args.seed + n)
        x = rng.normals(n)
        y = rng.normals(n)
        cost = tr.cost_matrix(tr.DiscreteDistribution(x), tr.DiscreteDistribution(y))
        exact_cost = tr.solve_exact(cost).total_cost
        for solver in solvers:
            if solver == "brute" and n > tr.BRUTE_FORCE_MAX_N:
                print(f"note: brute excluded at N={n} (cap {tr.BRUTE_FORCE_MAX_N})")
                continue
            started = time.perf_counter()
            if solver == "exact":
                plan = tr.solve_exact(cost)
            elif solver == "brute":
                plan = tr.brute_force_plan(cost)
            else:
                eps = float(args.epsilon) if args.epsilon is not None else \
                    0.1 * float(np.median(cost.entries))
                plan = tr.solve_entropic(cost, eps)
            elapsed = time.perf_counter() - started
            gap = plan.total_cost - exact_cost
            lines.append(f"{solver},{n},{elapsed:.6f},{plan.total_cost!r},{gap!r}")
            print(f"{solver:8s} n={n:6d} {elapsed:9.4f}s cost={plan.total_cost:.6f} gap={gap:.3e}")
    if args.out is not None:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otsteg",
                                     description="transport-bridged image hiding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hide", help="embed a secret image into a cover image")
    p.add_argument("--cover", required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-stego", required=True)
    p.add_argument("--out-key", default=None)
    p.add_argument("--mode", choices=["exact", "entropic"], default="exact")
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_hide)

    p = sub.add_parser("reveal", help="recover the secret from a stego image")
    p.add_argument("--stego", required=True)
    p.add_argument("--key", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--secret", default=None, help="score recovery against this image")
    p.set_defaults(func=cmd_reveal)

    p = sub.add_parser("train", help="train the hiding/reveal pair on a directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve-ot", help="run one transport solve on two point files")
    p.add_argument("--x-file", required=True)
    p.add_argument("--y-file", required=True)
    p.add_argument("--solver", choices=["exact", "entropic", "brute"], default="exact")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out-plan", default=None)
    p.add_argument("--out-key", default=None)
    p.set_defaults(func=cmd_solve_ot)

    p = sub.add_parser("ablate", help="paired trainings with and without transport")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time the solvers across sizes")
    p.add_argument("--sizes", required=True, help="comma-separated N values")
    p.add_argument("--solvers", default="exact,entropic", help="comma-separated subset")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, tn.DatasetError, mcot.KeyFormatError, mcot.DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (nn.KeyMismatchError, tn.CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_MISMATCH
    except ImageIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except tr.SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
