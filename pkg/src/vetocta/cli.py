"""Command-line entry point.

    vetocta phantom gen   --out DIR [--count N] [phantom flags]
    vetocta dataset build --out DIR (--phantoms N | --volumes FILE...) [--patch P]
    vetocta octa VOLUME   --algo sv|ed [--repeats N] [--k K] --out DIR
    vetocta train         --manifest DIR --out DIR [train/model flags]
    vetocta infer         --checkpoint FILE --input VOLUME --out DIR
    vetocta eval          --manifest DIR (--checkpoint FILE | --predictions DIR) --out FILE
    vetocta report        --out DIR [--loss loss.tsv] [--eval eval.json]

Every command takes ``--config FILE`` (TOML). Keys are read from the table
named after the command (``[phantom]``, ``[dataset]``, ``[octa]``,
``[train]``, ``[model]``, ``[infer]``, ``[eval]``); explicit flags win.

Exit codes: 0 ok, 2 argument/config error, 3 data/format error,
4 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import data as octdata
from .errors import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, ConfigError, FormatError, NumericError, RegistrationError
from .model import VetConfig, VetModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("vetocta")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def merged(args, config: dict, section: str, dc, mapping: dict[str, str]):
    """Build dataclass ``dc`` from defaults, then ``config[section]``, then explicit flags.

    ``mapping`` maps dataclass field names to argparse destinations.
    """
    values = {}
    table = config.get(section, {})
    names = {f.name for f in fields(dc)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    values.update(table)
    for fname, dest in mapping.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[fname] = v
    obj = dc(**values)
    obj.validate()
    return obj


def _opt(config: dict, section: str, args, dest: str, default=None):
    v = getattr(args, dest, None)
    if v is not None:
        return v
    return config.get(section, {}).get(dest, default)


PHANTOM_FLAGS = {
    "nr": "nr",
    "nx": "nx",
    "ny": "ny",
    "nz": "nz",
    "vessel_count": "vessels",
    "radius_min": "radius_min",
    "radius_max": "radius_max",
    "decorrelation": "decorrelation",
    "bulk_motion": "bulk_motion",
    "noise_level": "noise",
    "gain_jitter": "gain_jitter",
    "vessel_reflectivity": "reflectivity",
    "seed": "seed",
}

MODEL_FLAGS = {
    "channels": "channels",
    "vfe_layers": "vfe_layers",
    "heads": "heads",
    "ffn_hidden": "ffn_hidden",
    "residual_scale": "beta",
}

TRAIN_FLAGS = {
    "batch_size": "batch",
    "epochs": "epochs",
    "max_steps": "steps",
    "lr": "lr",
    "beta1": "beta1",
    "beta2": "beta2",
    "augment": "augment",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
    "deterministic": "deterministic",
    "overfit": "overfit",
}


def _phantom_args(p):
    g = p.add_argument_group("phantom")
    g.add_argument("--nr", type=int)
    g.add_argument("--nx", type=int)
    g.add_argument("--ny", type=int)
    g.add_argument("--nz", type=int)
    g.add_argument("--vessels", type=int)
    g.add_argument("--radius-min", type=float)
    g.add_argument("--radius-max", type=float)
    g.add_argument("--decorrelation", type=float)
    g.add_argument("--bulk-motion", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--gain-jitter", type=float)
    g.add_argument("--reflectivity", type=float)


def _common(p):
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True, default=None)
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vetocta", description="Single-scan OCTA vasculature extraction toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic volumes")
    psub = phantom.add_subparsers(dest="action", required=True)
    gen = psub.add_parser("gen", help="generate phantom volume files")
    _common(gen)
    _phantom_args(gen)
    gen.add_argument("--count", type=int)

    dataset = sub.add_parser("dataset", help="training/validation patch datasets")
    dsub = dataset.add_subparsers(dest="action", required=True)
    build = dsub.add_parser("build", help="build a patch dataset and manifest")
    _common(build)
    _phantom_args(build)
    src = build.add_mutually_exclusive_group()
    src.add_argument("--phantoms", type=int, help="generate this many phantom volumes")
    src.add_argument("--volumes", type=Path, nargs="+", help="volume files (.octv)")
    build.add_argument("--patch", type=int)
    build.add_argument("--val-fraction", type=float)
    build.add_argument("--k", type=int)

    octa = sub.add_parser("octa", help="classical SV/ED OCTA on a volume")
    _common(octa)
    octa.add_argument("volume", type=Path)
    octa.add_argument("--algo", choices=("sv", "ed"))
    octa.add_argument("--repeats", type=int)
    octa.add_argument("--k", type=int)

    tr = sub.add_parser("train", help="train VET on a dataset")
    _common(tr)
    tr.add_argument("--manifest", type=Path, required=True)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--beta1", type=float)
    tr.add_argument("--beta2", type=float)
    tr.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--overfit", action="store_const", const=True, default=None)
    tr.add_argument("--channels", type=int)
    tr.add_argument("--vfe-layers", type=int)
    tr.add_argument("--heads", type=int)
    tr.add_argument("--ffn-hidden", type=int)
    tr.add_argument("--beta", type=float, help="residual scale")

    inf = sub.add_parser("infer", help="predict vascular volume from a single-repeat structural volume")
    _common(inf)
    inf.add_argument("--checkpoint", type=Path, required=True)
    inf.add_argument("--input", type=Path, required=True)
    inf.add_argument("--patch", type=int)
    inf.add_argument("--repeat", type=int)

    ev = sub.add_parser("eval", help="metric reports on the validation split")
    _common(ev)
    ev.add_argument("--manifest", type=Path, required=True)
    g = ev.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", type=Path)
    g.add_argument("--predictions", type=Path)

    rep = sub.add_parser("report", help="figures and TSV summaries")
    _common(rep)
    rep.add_argument("--loss", type=Path)
    rep.add_argument("--eval", dest="eval_json", type=Path)
    return parser


def cmd_phantom_gen(args, config) -> int:
    cfg = merged(args, config, "phantom", octdata.PhantomConfig, PHANTOM_FLAGS)
    count = int(_opt(config, "phantom", args, "count", 1))
    from .pipeline import phantom_volumes

    args.out.mkdir(parents=True, exist_ok=True)
    for vid, vol in phantom_volumes(cfg, count):
        octdata.save_volume(vol, args.out / f"{vid}.octv")
        (args.out / f"{vid}.json").write_text(json.dumps(vol.meta, indent=1) + "\n")
        print(args.out / f"{vid}.octv")
    return 0


def cmd_dataset_build(args, config) -> int:
    from .pipeline import build_dataset, phantom_volumes

    volumes_arg = _opt(config, "dataset", args, "volumes")
    if volumes_arg:
        volumes = []
        for p in volumes_arg:
            try:
                volumes.append((Path(p).stem, octdata.load_volume(p)))
            except OSError as exc:
                raise FormatError(f"cannot read volume {p}: {exc}") from None
    else:
        count = int(_opt(config, "dataset", args, "phantoms", 1))
        volumes = phantom_volumes(merged(args, config, "phantom", octdata.PhantomConfig, PHANTOM_FLAGS), count)
    manifest = build_dataset(
        volumes,
        args.out,
        patch_size=int(_opt(config, "dataset", args, "patch", 192)),
        val_fraction=float(_opt(config, "dataset", args, "val_fraction", 0.28)),
        seed=int(_opt(config, "dataset", args, "seed", 0)),
        k=int(_opt(config, "dataset", args, "k", 1)),
    )
    counts = {s: sum(r["split"] == s for r in manifest["records"]) for s in ("train", "val")}
    print(f"{args.out / 'manifest.json'}\ttrain={counts['train']}\tval={counts['val']}")
    return 0


def cmd_octa(args, config) -> int:
    from .pipeline import octa_volume, write_flow_outputs

    vol = octdata.load_volume(args.volume)
    algo = _opt(config, "octa", args, "algo", "ed")
    repeats = _opt(config, "octa", args, "repeats", vol.nr)
    if repeats > vol.nr:
        raise ConfigError(f"--repeats {repeats} exceeds the volume's {vol.nr} repeats")
    flow = octa_volume(vol, algo, repeats, k=int(_opt(config, "octa", args, "k", 1)))
    out = write_flow_outputs(flow, args.out, f"{args.volume.stem}_{algo}{repeats}")
    print(f"{out['volume']}\t{out['enface']}")
    return 0


def cmd_train(args, config) -> int:
    from .pipeline import TrainConfig, train

    tcfg = merged(args, config, "train", TrainConfig, TRAIN_FLAGS)
    mcfg = merged(args, config, "model", VetConfig, MODEL_FLAGS)
    res = train(args.manifest, tcfg, mcfg, args.out)
    first, last = res.losses[0][2], res.losses[-1][2]
    print(f"{res.checkpoint}\tsteps={len(res.losses)}\tloss_first={first:.6g}\tloss_last={last:.6g}")
    return 0


def cmd_infer(args, config) -> int:
    from .pipeline import checkpoint_patch_size, predict_volume, write_flow_outputs

    model = VetModel.load(args.checkpoint)
    patch = int(_opt(config, "infer", args, "patch", checkpoint_patch_size(args.checkpoint)))
    vol = octdata.load_volume(args.input)
    if min(vol.nx, vol.nz) < patch:
        raise ConfigError(f"frames {vol.nx}x{vol.nz} are smaller than the checkpoint patch size {patch}")
    flow = predict_volume(model, vol, patch, repeat=int(_opt(config, "infer", args, "repeat", 0)))
    out = write_flow_outputs(flow, args.out, f"{args.input.stem}_vet")
    print(f"{out['volume']}\t{out['enface']}")
    return 0


def cmd_eval(args, config) -> int:
    from .pipeline import evaluate, reports_to_json

    ckpt = _opt(config, "eval", args, "checkpoint")
    preds = _opt(config, "eval", args, "predictions")
    model = VetModel.load(ckpt) if ckpt else None
    reports = evaluate(args.manifest, model=model, predictions_dir=preds)
    text = reports_to_json(reports)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text)
    for name, rep in reports.items():
        d = rep.to_dict()
        print(f"{name}\tpsnr={d['psnr']['mean']}\tssim={d['ssim']['mean']}\tms_ssim={d['ms_ssim']['mean']}")
    return 0


def cmd_report(args, config) -> int:
    from .report import write_report

    written = write_report(args.out, loss_tsv=args.loss, eval_json=args.eval_json)
    for path in written.values():
        print(path)
    return 0


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("dataset", "build"): cmd_dataset_build,
    ("octa", None): cmd_octa,
    ("train", None): cmd_train,
    ("infer", None): cmd_infer,
    ("eval", None): cmd_eval,
    ("report", None): cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        config = load_config(getattr(args, "config", None))
        return handler(args, config)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, RegistrationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
