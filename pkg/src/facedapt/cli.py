"""Command-line entry point: ``facedapt {gen,pretrain,adapt,eval,render}``.

Config files are flat ``key = value`` text (``#`` starts a comment); command
line flags override file values.  Recognised keys: learning_rate, momentum,
epochs, batch_size, seed, tau, deterministic, landmark_dropout, grad_clip,
online, checkpoint_every, checkpoint_dir, lambda_z, lambda_H, lambda_view,
lambda_cftc, lambda_motc, lambda_flrc.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Set
``FACEDAPT_LOG=DEBUG`` (or INFO, WARNING) for log output on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalmetrics, synthdata, trainer
from .encoder import init_encoder, load_encoder, save_encoder
from .facemodel import synth_identity
from .losses import ColorCorrection, LossWeights
from .raster import write_ppm

log = logging.getLogger("facedapt")

WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
CONFIG_TYPES = {
    "learning_rate": float, "momentum": float, "epochs": int, "batch_size": int, "seed": int,
    "tau": float, "landmark_dropout": float, "grad_clip": float, "checkpoint_every": int,
    "checkpoint_dir": str, "deterministic": "bool", "online": "bool",
}


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse a key=value config file into typed values."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in WEIGHT_KEYS:
            out[key] = float(val)
        elif key in CONFIG_TYPES:
            kind = CONFIG_TYPES[key]
            out[key] = _parse_bool(val) if kind == "bool" else kind(val)
        else:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
    return out


def build_config(values: dict, adaptation: bool) -> trainer.TrainConfig:
    weights = LossWeights(**{k: v for k, v in values.items() if k in WEIGHT_KEYS})
    rest = {k: v for k, v in values.items() if k not in WEIGHT_KEYS}
    if adaptation:
        return trainer.TrainConfig.for_adaptation(weights=weights, **rest)
    return trainer.TrainConfig(weights=weights, **rest)


def write_config(path, config: trainer.TrainConfig) -> None:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if f.name == "weights":
            lines += [f"{k} = {getattr(v, k)!r}" for k in (w.name for w in dataclasses.fields(v))]
        else:
            lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _config_values(args, adaptation: bool) -> dict:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in ("epochs", "seed", "learning_rate", "landmark_dropout", "lambda_view"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "online", False):
        values["online"] = True
    if getattr(args, "nondeterministic", False):
        values["deterministic"] = False
    return values


def write_color(path, cc: ColorCorrection) -> None:
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in cc.matrix))


def read_color(path) -> ColorCorrection:
    vals = [float(x) for x in Path(path).read_text().split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(vals)}")
    return ColorCorrection(np.array(vals).reshape(3, 3))


def color_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".color.txt")


def _sidecar_name(model_path, suffix: str) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + suffix)


def _load_sequence(path) -> synthdata.WildSequence:
    seq = synthdata.load_dataset(path)
    if not isinstance(seq, synthdata.WildSequence):
        raise ValueError(f"{path}: expected a monocular (wild) sequence")
    if seq.decoder is None:
        raise FileNotFoundError(f"missing decoder.bin in {path}")
    return seq


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    if args.image_size < 32 or args.image_size % 32:
        raise UsageError("--image-size must be a positive multiple of 32")
    domain = synthdata.read_domain_spec(args.domain_spec) if args.domain_spec else synthdata.DomainSpec()
    decoder = synth_identity(seed=args.seed, d=args.latent_dim)
    out = Path(args.out)
    lab = synthdata.generate_lab(decoder, frames=args.lab_frames, views=args.views, seed=args.seed,
                                 image_size=args.image_size)
    wild = synthdata.generate_wild(decoder, domain, frames=args.frames, seed=args.seed + 1,
                                   image_size=args.image_size)
    synthdata.save_dataset(lab, out / "lab")
    synthdata.save_dataset(wild, out / "wild", with_sidecar=not args.no_sidecar)
    print(f"lab: {lab.frames} frames x {lab.views} views -> {out / 'lab'}")
    print(f"wild: {wild.frames} frames -> {out / 'wild'}")
    print(f"latent_dim={decoder.latent_dim} landmarks={len(decoder.landmark_indices)} "
          f"markers={len(decoder.marker_indices)} cond(M_gt)={np.linalg.cond(domain.color_matrix):.3f}")
    return 0


def cmd_pretrain(args) -> int:
    lab = synthdata.load_dataset(args.lab)
    if not isinstance(lab, synthdata.LabDataset):
        raise ValueError(f"{args.lab}: expected a multiview (lab) dataset")
    if lab.decoder is None:
        raise FileNotFoundError(f"missing decoder.bin in {args.lab}")
    config = build_config(_config_values(args, adaptation=False), adaptation=False)
    encoder = init_encoder(lab.decoder.latent_dim, len(lab.decoder.landmark_indices), seed=config.seed,
                           image_size=lab.images.shape[2])
    history_path = args.history or _sidecar_name(args.out_model, "_history.csv")
    trained, history = trainer.pretrain(encoder, lab.decoder, lab, config, history_csv=history_path)
    save_encoder(trained, args.out_model)
    write_config(_sidecar_name(args.out_model, ".config.txt"), config)
    last = history[-1] if history else {}
    print(f"pretrain: {len(history)} steps, final L_z={last.get('L_z', float('nan')):.6g} -> {args.out_model}")
    return 0


def cmd_adapt(args) -> int:
    encoder = load_encoder(args.model)
    wild = _load_sequence(args.wild)
    values = _config_values(args, adaptation=True)
    values.update(dataclasses.asdict(trainer.arm_weights(args.arm, LossWeights(
        **{k: v for k, v in values.items() if k in WEIGHT_KEYS}))))
    config = build_config(values, adaptation=True)
    history_path = args.history or _sidecar_name(args.out_model, "_history.csv")
    res = trainer.adapt(encoder, wild.decoder, wild, config, history_csv=history_path)
    save_encoder(res.encoder, args.out_model)
    write_color(color_path(args.out_model), res.color)
    write_config(_sidecar_name(args.out_model, ".config.txt"), config)
    print(f"adapt[{args.arm}]: {len(res.history)} steps -> {args.out_model}")
    return 0


def _model_arg(spec: str) -> tuple[str, str]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def cmd_eval(args) -> int:
    wild = _load_sequence(args.wild)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in args.model:
        name, path = _model_arg(spec)
        enc = load_encoder(path)
        cp = color_path(path)
        cc = read_color(cp) if cp.exists() else ColorCorrection()
        tr = trainer.track(enc, wild.decoder, cc, wild.images)
        stab, rep = evalmetrics.evaluate_track(tr, wild.marker_vertices, wild.markers_gt)
        rows.append(evalmetrics.ReportRow(name, stab, rep))
        write_ppm(report.parent / f"strip_{name}.ppm", evalmetrics.overlay_strip(tr.overlays))
        print(f"{name}: stability={stab:.6g} reprojection={rep:.6g}")
    evalmetrics.write_report(report, rows)
    return 0


def cmd_render(args) -> int:
    seq = _load_sequence(args.seq)
    enc = load_encoder(args.model)
    cp = color_path(args.model)
    cc = read_color(cp) if cp.exists() else ColorCorrection()
    tr = trainer.track(enc, seq.decoder, cc, seq.images)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(tr)):
        write_ppm(out / f"{i:06d}.ppm", tr.overlays[i])
    print(f"render: {len(tr)} overlays -> {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facedapt", description="Synthetic face-tracker adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate lab and wild datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=150, help="wild sequence length")
    g.add_argument("--lab-frames", type=int, default=200)
    g.add_argument("--views", type=int, default=3)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--image-size", type=int, default=128, help="a multiple of 32")
    g.add_argument("--domain-spec", default=None)
    g.add_argument("--no-sidecar", action="store_true", help="omit hidden ground truth of the wild sequence")
    g.set_defaults(func=cmd_gen)

    def training_flags(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        sp.add_argument("--landmark-dropout", dest="landmark_dropout", type=float, default=None)
        sp.add_argument("--history", default=None, help="loss history CSV (default: next to the model)")
        sp.add_argument("--nondeterministic", action="store_true", help="allow multithreaded BLAS")

    t = sub.add_parser("pretrain", help="supervised multiview pretraining")
    t.add_argument("--lab", required=True)
    t.add_argument("--out-model", required=True)
    t.add_argument("--lambda-view", dest="lambda_view", type=float, default=None)
    training_flags(t)
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="self-supervised adaptation on a wild sequence")
    a.add_argument("--model", required=True)
    a.add_argument("--wild", required=True)
    a.add_argument("--arm", choices=sorted(trainer.ARMS), default="full")
    a.add_argument("--out-model", required=True)
    a.add_argument("--online", action="store_true")
    training_flags(a)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="stability and marker error per model")
    e.add_argument("--model", action="append", required=True, help="[arm=]path, repeatable")
    e.add_argument("--wild", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="overlay frames for a sequence")
    r.add_argument("--model", required=True)
    r.add_argument("--seq", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FACEDAPT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    limit = contextlib.nullcontext()
    if not getattr(args, "nondeterministic", False):
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(1)
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facedapt: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"facedapt: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
