"""``clinsynth`` command line: phantom, convert, train, synthesize, evaluate, analyze, config.

Exit codes: 0 success, 2 user/config/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .errors import ConfigError, NumericalError, SubjectError

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="base preset (default: full-scale)")
    p.add_argument("--config", help="YAML config file layered over the preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="NS.KEY=VALUE",
                   help="override one config key (repeatable)")


def _dataset_args(p: argparse.ArgumentParser):
    p.add_argument("--manifest", required=True, help="newline-delimited JSON dataset manifest")
    p.add_argument("--csv", help="clinical table (default: clinical.csv next to the manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic paired phantom cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=[16, 24, 24], metavar=("D", "H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["raw", "nifti"], default="raw")

    p = sub.add_parser("convert", help="render a clinical CSV as one description per row")
    p.add_argument("csv")
    p.add_argument("--schema", help="schema YAML (default: packaged schema)")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="reject columns not in the schema")

    p = sub.add_parser("train", help="train a backbone")
    _common(p)
    _dataset_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--backbone", choices=["unet", "pix2pix", "ddpm"])
    p.add_argument("--use-text", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synthesize", help="synthesize a volume for every manifest subject")
    _common(p)
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="patch-wise FID / KID / IS")
    _common(p)
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crops-per-subject", type=int)
    p.add_argument("--extractor", choices=["stats", "inception", "inception-random"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("analyze", help="counterfactual attribute analysis")
    _common(p)
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attribute")
    p.add_argument("--from", dest="from_value")
    p.add_argument("--to", dest="to_value")
    p.add_argument("--slices", help="'mid' or comma-separated slice indices")
    p.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("config", help="print the effective configuration")
    _common(p)
    return parser


def _config(args, **flag_overrides) -> dict:
    overrides = list(args.overrides)
    for key, value in flag_overrides.items():
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return cfgmod.build_config(args.preset, args.config, None, overrides)


def _csv_path(args) -> Path:
    return Path(args.csv) if args.csv else Path(args.manifest).parent / "clinical.csv"


def _samples(args, cfg):
    from .data_pipeline import load_dataset
    from .tabular_text import load_schema, read_csv

    schema = load_schema(cfg["tabular"]["schema"])
    csv_path = _csv_path(args)
    if not csv_path.exists():
        raise ConfigError(f"clinical table {csv_path} not found")
    records = read_csv(csv_path, schema, strict=bool(cfg["tabular"]["strict"]))
    return load_dataset(args.manifest, records, window=tuple(cfg["data"]["hu_window"])), schema


def _checkpoint(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    from .training import Synthesizer

    return Synthesizer.from_path(path)


def cmd_phantom(args) -> int:
    from .phantoms import write_phantom_dataset

    paths = write_phantom_dataset(args.out, args.subjects, tuple(args.shape), args.seed, args.format)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_convert(args) -> int:
    from .tabular_text import load_schema, read_csv, render_table, write_descriptions

    schema = load_schema(args.schema)
    records = read_csv(args.csv, schema, strict=args.strict)
    descriptions = render_table(records, schema)
    sidecar = write_descriptions(descriptions, args.out)
    print(json.dumps({"rows": len(descriptions), "out": args.out, "manifest": str(sidecar)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .text_embedding import make_encoder
    from .training import train

    cfg = _config(args, **{"train.backbone": args.backbone, "train.use_text": args.use_text,
                           "train.epochs": args.epochs, "train.seed": args.seed})
    tcfg = cfgmod.train_config_from(cfg)
    samples, schema = _samples(args, cfg)
    encoder = None
    if tcfg.use_text:
        e = cfg["embedding"]
        encoder = make_encoder(e["encoder_id"], e["backend"], int(e["dimension"]), e["model_name_or_path"],
                               int(e["max_tokens"]), e["cache_dir"] or Path(args.out) / "embedding_cache")
    cfgmod.write_echo(args.out, cfg, "train", {"seed": tcfg.seed})
    result = train(tcfg, samples, encoder, args.out, schema, resume_from=args.resume, verbose=args.verbose,
                   run_config=cfg)
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": len({r[0] for r in result.history})}))
    return EXIT_OK


def _pad_to(x: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[slice, ...]]:
    pads = [(0, (-s) % factor) for s in x.shape]
    return np.pad(x, pads), tuple(slice(0, s) for s in x.shape)


def cmd_synthesize(args) -> int:
    import torch

    from .data_pipeline import denormalize_hu, subject_seed, write_volume

    cfg = _config(args)
    synth = _checkpoint(args.checkpoint)
    samples, _ = _samples(args, cfg)
    out = Path(args.out)
    cfgmod.write_echo(out, cfg, "synthesize", {"seed": args.seed, "checkpoint": str(args.checkpoint)})
    for s in samples:
        mask, window = _pad_to(s.mask, synth.spatial_factor)
        emb = synth.embed_records([s.record])
        gen = torch.Generator().manual_seed(subject_seed(args.seed, s.subject_id) % (2 ** 63))
        vol = synth.synthesize(torch.from_numpy(mask[None]), emb, gen)[0, 0].numpy()[window]
        write_volume(out / f"{s.subject_id}_synth.raw", denormalize_hu(vol, cfg["data"]["hu_window"]).astype(np.float32),
                     s.spacing)
    print(json.dumps({"subjects": len(samples), "out": str(out)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model, make_extractor

    cfg = _config(args, **{"eval.crops_per_subject": args.crops_per_subject, "eval.extractor": args.extractor,
                           "eval.seed": args.seed})
    synth = _checkpoint(args.checkpoint)
    samples, _ = _samples(args, cfg)
    e = cfg["eval"]
    out = Path(args.out)
    cfgmod.write_echo(out, cfg, "evaluate", {"seed": e["seed"], "checkpoint": str(args.checkpoint)})
    report = evaluate_model(synth, samples, synth.cfg.crop_spec(), make_extractor(e["extractor"]), int(e["seed"]),
                            int(e["crops_per_subject"]), int(e["kid_subsets"]), e["kid_subset_size"],
                            int(e["is_splits"]), checkpoint=str(args.checkpoint))
    text_path, csv_path = report.write(out / "metrics.txt")
    print(json.dumps({"report": str(text_path), "csv": str(csv_path), "fid": report.fid}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .pattern_analysis import CounterfactualSpec, analyze

    subjects = args.subjects.split(",") if args.subjects else None
    slices = None
    if args.slices is not None:
        slices = "mid" if args.slices == "mid" else [int(s) for s in args.slices.split(",")]
    cfg = _config(args, **{"analyze.attribute": args.attribute, "analyze.from": args.from_value,
                           "analyze.to": args.to_value, "analyze.seed": args.seed, "analyze.subjects": subjects,
                           "analyze.slices": slices})
    a = cfg["analyze"]
    synth = _checkpoint(args.checkpoint)
    samples, _ = _samples(args, cfg)
    spec = CounterfactualSpec(a["attribute"], str(a["from"]), str(a["to"]), tuple(a["subjects"] or ()), int(a["seed"]))
    out = Path(args.out)
    cfgmod.write_echo(out, cfg, "analyze", {"seed": spec.seed, "checkpoint": str(args.checkpoint)})
    rows = analyze(synth, samples, spec, synth.cfg.crop_spec(), out, a["slices"])
    print(json.dumps({"rows": len(rows), "aggregate": str(out / "aggregate.csv")}))
    return EXIT_OK


def cmd_config(args) -> int:
    print(yaml.safe_dump(_config(args), sort_keys=False), end="")
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "convert": cmd_convert, "train": cmd_train, "synthesize": cmd_synthesize,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze, "config": cmd_config}


def exit_code_for(exc: BaseException) -> int:
    from .data_pipeline import DataError
    from .evaluation import MetricError
    from .tabular_text import RecordError, SchemaError, UnknownAttributeError

    if isinstance(exc, SubjectError):
        return exit_code_for(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, DataError, SchemaError, UnknownAttributeError, RecordError, MetricError,
                        FileNotFoundError)):
        return EXIT_USER
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == 1:
            traceback.print_exc()
        print(f"clinsynth {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
