"""Command-line entry point: ``amber generate|train|infer|evaluate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("amber")

# viridis sampled at 9 evenly spaced positions; colors are interpolated linearly in RGB
VIRIDIS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=float)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def colormap(t) -> np.ndarray:
    """Viridis-like RGB (0-255) for values in [0, 1]."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0) * (len(VIRIDIS) - 1)
    lo = np.minimum(np.floor(t).astype(int), len(VIRIDIS) - 2)
    w = (t - lo)[..., None]
    return np.rint(VIRIDIS[lo] * (1 - w) + VIRIDIS[lo + 1] * w).astype(int)


def render_svg(mesh, sizing, width: int = 640, bar_width: int = 90) -> str:
    """Triangles filled by log sizing, thin black strokes, colorbar on the left."""
    sizing = np.asarray(sizing, dtype=float)
    logs = np.log(sizing)
    lo, hi = float(logs.min()), float(logs.max())
    span = hi - lo if hi > lo else 1.0
    rgb = colormap((logs - lo) / span)
    v = mesh.vertices
    (x0, y0), (x1, y1) = v.min(axis=0), v.max(axis=0)
    pad = 10
    scale = (width - 2 * pad) / max(x1 - x0, y1 - y0)
    height = int(round((y1 - y0) * scale)) + 2 * pad
    px = bar_width + pad + (v[:, 0] - x0) * scale
    py = height - pad - (v[:, 1] - y0) * scale
    stroke = max(0.05, min(0.5, 0.3 * float(np.sqrt(np.median(mesh.volumes))) * scale))
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{bar_width + width}" '
        f'height="{height}" viewBox="0 0 {bar_width + width} {height}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
        f'<g stroke="black" stroke-width="{stroke:.3f}" stroke-linejoin="round">',
    ]
    for t, tri in enumerate(mesh.triangles):
        pts = " ".join(f"{px[k]:.2f},{py[k]:.2f}" for k in tri)
        r, g, b = rgb[t]
        out.append(f'<polygon points="{pts}" fill="rgb({r},{g},{b})"/>')
    out.append("</g>")
    # colorbar: small bands from low (bottom) to high (top), labelled with sizes
    n_bands = 64
    top, bottom = pad + 10, height - pad - 10
    band = (bottom - top) / n_bands
    out.append('<g stroke="none">')
    for k in range(n_bands):
        r, g, b = colormap((k + 0.5) / n_bands)
        y = bottom - (k + 1) * band
        out.append(f'<rect x="{pad}" y="{y:.2f}" width="20" height="{band + 0.05:.2f}" '
                   f'fill="rgb({r},{g},{b})"/>')
    out.append("</g>")
    for frac in (0.0, 0.5, 1.0):
        y = bottom - frac * (bottom - top)
        val = float(np.exp(lo + frac * span))
        out.append(f'<text x="{pad + 24}" y="{y + 4:.2f}" font-family="sans-serif" '
                   f'font-size="10">{val:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- configuration --------------------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("AMBER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"AMBER_SEED must be an integer, got {env!r}")
    return 0


def _pick(args, cfg: dict, name: str, default=None):
    val = getattr(args, name, None)
    if val is not None:
        return val
    return cfg.get(name, default)


# -- commands -------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from amber.dataset import generate_dataset
    cfg = _read_config(args.config)
    out = _pick(args, cfg, "out")
    if out is None:
        raise UsageError("an output directory is required (--out or config 'out')")
    path = generate_dataset(
        out,
        n_train=int(_pick(args, cfg, "n_train", 5)),
        n_eval=int(_pick(args, cfg, "n_eval", 0)),
        n_test=int(_pick(args, cfg, "n_test", 10)),
        seed=_seed(args, cfg),
        preset=_pick(args, cfg, "preset", "easy"),
        theta=float(_pick(args, cfg, "theta", 0.5)),
        workers=int(_pick(args, cfg, "workers", 1)),
    )
    manifest = json.loads(path.read_text())
    print(f"wrote {len(manifest['instances'])} instances to {path}")
    return 0


def cmd_train(args) -> int:
    from amber.dataset import load_instances
    from amber.trainer import TrainConfig, preset, train
    cfg = _read_config(args.config)
    manifest = _pick(args, cfg, "manifest")
    out = _pick(args, cfg, "out")
    if manifest is None or out is None:
        raise UsageError("train needs --manifest and --out (or config entries)")
    fields = {k: v for k, v in cfg.get("train", {}).items()}
    flag_map = {"agg": "aggregator", "loss": "loss", "steps": "training_steps",
                "node_budget": "node_budget", "checkpoint_every": "checkpoint_every"}
    for flag, name in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            fields[name] = val
    fields["seed"] = _seed(args, cfg)
    preset_name = _pick(args, cfg, "preset")
    try:
        tcfg = preset(preset_name, **fields) if preset_name else TrainConfig.from_json(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    instances = load_instances(manifest, "train")
    if not instances:
        raise UsageError("manifest has no training instances")
    res = train(instances, tcfg, out)
    n_events = sum(1 for r in res.log if "event" in r)
    print(f"trained {tcfg.training_steps} steps ({n_events} buffer events); "
          f"checkpoint at {Path(out) / 'checkpoint.ambr'}")
    return 0


def _load_problem(args):
    from amber.dataset import load_instances
    from amber.geometry import GmmLoad, Polygon2
    if args.manifest is not None:
        if args.instance is None:
            raise UsageError("--manifest needs --instance")
        for inst in load_instances(args.manifest):
            if inst.id == args.instance:
                return inst.domain, inst.load
        raise UsageError(f"instance {args.instance!r} not in manifest")
    if args.geometry is None:
        raise UsageError("infer needs --geometry or --manifest/--instance")
    obj = json.loads(Path(args.geometry).read_text())
    geom = obj.get("geometry", obj)
    load = obj.get("load")
    if args.load is not None:
        load = json.loads(Path(args.load).read_text())
    return Polygon2.from_json(geom), (GmmLoad.from_json(load) if load is not None else None)


def cmd_infer(args) -> int:
    from amber.mpn import load_checkpoint
    from amber.trainer import infer
    ckpt = load_checkpoint(args.checkpoint)
    domain, load = _load_problem(args)
    if ckpt.extra.get("features", "poisson") == "poisson" and load is None:
        raise UsageError("this checkpoint needs a load function")
    steps = args.steps if args.steps is not None else int(ckpt.extra.get("inference_steps", 5))
    res = infer(ckpt, domain, load, steps, max_elements=args.max_elements)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, mesh in enumerate(res.meshes):
        sizing = res.sizing[t].values
        mesh.save(out / f"mesh_{t:02d}.tmesh", {"predicted_sizing": sizing})
        (out / f"mesh_{t:02d}.svg").write_text(render_svg(mesh, sizing))
    summary = {"steps": steps, "n_elements": [m.n_elements for m in res.meshes],
               "truncated": res.truncated, "reason": res.reason}
    (out / "inference.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 2 if res.truncated and args.strict else 0


def format_table(report) -> str:
    agg = report.aggregate
    mean = agg["mean"]
    lines = ["step  mean_dcd  mean_vol_diff  mean_elements  n"]
    for t, (d, v, n) in enumerate(zip(mean["dcd"], mean["vol_diff"], mean["n_elements"])):
        cnt = agg["count"]["dcd"][t]
        lines.append(f"{t:>4}  {_num(d)}  {_num(v)}  {_num(n)}  {cnt}")
    lines.append(f"final normalized DCD (mean): {_num(mean['ndcd_final'])}")
    failed = [g["id"] for g in report.geometries if "error" in g]
    if failed:
        lines.append(f"failed: {', '.join(failed)}")
    return "\n".join(lines)


def _num(x) -> str:
    return "nan" if x is None else repr(float(x))


def cmd_evaluate(args) -> int:
    from amber.dataset import load_instances
    from amber.metrics import evaluate
    from amber.mpn import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    instances = load_instances(args.manifest, args.split)
    if not instances:
        raise UsageError(f"split {args.split!r} of {args.manifest} is empty")
    steps = args.steps if args.steps is not None else int(ckpt.extra.get("inference_steps", 5))
    report = evaluate(ckpt, instances, steps, max_elements=args.max_elements, workers=args.workers)
    text = report.dumps()
    if args.out is not None:
        Path(args.out).write_text(text)
    print(format_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amber", description="Learned adaptive mesh generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample problems and build expert meshes")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--preset", choices=["easy", "medium", "hard"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--theta", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a sizing-field model")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--preset", choices=["paper", "desk"])
    t.add_argument("--agg", choices=["mean", "max"])
    t.add_argument("--loss", choices=["mse", "log_mse"])
    t.add_argument("--steps", type=int)
    t.add_argument("--node-budget", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="generate a mesh sequence with a trained model")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--geometry", help="JSON with 'vertices', or with 'geometry' and 'load'")
    i.add_argument("--load", help="JSON load function")
    i.add_argument("--manifest")
    i.add_argument("--instance")
    i.add_argument("--steps", type=int)
    i.add_argument("--max-elements", type=int)
    i.add_argument("--strict", action="store_true", help="exit 2 when the sequence is truncated")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="score a model against expert meshes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=["train", "eval", "test"])
    e.add_argument("--steps", type=int)
    e.add_argument("--max-elements", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"amber: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"amber: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"amber: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
