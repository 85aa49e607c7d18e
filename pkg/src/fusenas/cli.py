"""Configuration-driven experiment runner.

Subcommands cover the full pipeline: ``synth`` writes toy datasets as
canonical CSVs, ``features`` turns them into windowed feature caches,
``search`` runs the two-phase genetic search, ``decode`` pretty-prints a
genome, ``train`` fits a searched genome, ``eval`` scores a checkpoint
(optionally with test-time adaptation), and ``report`` tabulates results.

Configuration is a JSON file with nested sections; command-line flags
override file values which override built-in defaults.  Every artifact
carries the effective config hash and the master seed; volatile values
(wall-clock timings) live under a top-level "timing" key so that reruns
are byte-identical outside it.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .arch import decode, summarize
from .data import DataError, SyntheticSpec, export_csv, ingest_csv, split_by_trials, synthesize
from .genome import DEFAULT_GENE_RANGES, GeneSpace, GenomeError, deserialize, validate
from .network import build
from .search import SearchConfig, TrainerEvaluator, derive_seed, make_eval_dataset, run_search
from .signal import (SignalError, fit_row_scale, load_feature_cache,
                     prepare_streams, save_feature_cache)
from .training import (NumericError, TrainConfig, evaluate_accuracy, fine_tune,
                       load_checkpoint, save_checkpoint, split_adaptation, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# Desk-scale defaults: small synthetic problem, small filter table, short
# search.  Library defaults keep the full-scale values; a real experiment
# overrides these through its config file.
DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "run",
    "jobs": 1,
    "dataset": {
        "csv_paths": None,
        "synthetic": {
            "num_classes": 5,
            "sub_datasets": 3,
            "repetitions": 6,
            "segment_samples": 800,
            "noise": 0.05,
        },
    },
    "gene_space": {
        "candidate_filters": [2, 3, 4, 5, 6, 8, 10, 12, 14, 16],
    },
    "search": {
        "population_size": 8,
        "rough_generations": 3,
        "transfer_generations": 2,
        "crossover_rate": 0.9,
        "mutation_rate": 0.2,
        "fitness_epochs": 3,
        "rough_subsample": 0.2,
        "valid_fraction": 0.2,
        "batch_size": 32,
    },
    "train": {
        "epochs": 25,
        "base_lr": 0.001,
        "decay_epochs": [12, 20],
        "decay_factor": 10.0,
        "batch_size": 16,
    },
    "fine_tune": {
        "fraction": 0.1,
        "epochs": 3,
        "lr": 0.0001,
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise CliError(EXIT_CONFIG, f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config file is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise CliError(EXIT_CONFIG, "config root must be a JSON object")
        unknown = set(file_cfg) - set(DEFAULT_CONFIG)
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config sections: {sorted(unknown)}")
        cfg = _deep_merge(cfg, file_cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the experiment identity: everything except execution details."""
    identity = {k: v for k, v in cfg.items() if k not in ("output_dir", "jobs")}
    blob = json.dumps(identity, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def gene_space_from(cfg: dict) -> GeneSpace:
    try:
        return GeneSpace(DEFAULT_GENE_RANGES, tuple(cfg["gene_space"]["candidate_filters"]))
    except GenomeError as exc:
        raise CliError(EXIT_CONFIG, f"bad gene_space: {exc}")


def search_config_from(cfg: dict) -> SearchConfig:
    try:
        return SearchConfig(seed=cfg["seed"], **cfg["search"])
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad search config: {exc}")


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    section = cfg["train"]
    try:
        return TrainConfig(
            epochs=section["epochs"], base_lr=section["base_lr"],
            decay_epochs=tuple(section["decay_epochs"]),
            decay_factor=section["decay_factor"],
            batch_size=section["batch_size"], seed=seed,
        )
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad train config: {exc}")


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _artifact(cfg: dict, body: dict, timing: dict | None = None) -> dict:
    out = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "config": {
        k: v for k, v in cfg.items() if k not in ("output_dir", "jobs")}}
    out.update(body)
    out["timing"] = timing or {}
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(cfg["output_dir"]) / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    syn = cfg["dataset"]["synthetic"]
    files = []
    for i in range(syn["sub_datasets"]):
        spec = SyntheticSpec(
            num_classes=syn["num_classes"], repetitions=syn["repetitions"],
            segment_samples=syn["segment_samples"], noise=syn["noise"],
            seed=derive_seed(cfg["seed"], 900, i),
        )
        rs = synthesize(spec)
        path = out_dir / f"sub{i}.csv"
        export_csv(rs, path)
        files.append(str(path))
        print(f"wrote {path} ({len(rs.segments)} segments)")
    manifest = _artifact(cfg, {"files": files},
                         {"seconds": time.perf_counter() - t0})
    _write_json(Path(cfg["output_dir"]) / "synth_manifest.json", manifest)
    return EXIT_OK


def _csv_paths(cfg: dict) -> list[str]:
    if cfg["dataset"]["csv_paths"]:
        return list(cfg["dataset"]["csv_paths"])
    manifest_path = Path(cfg["output_dir"]) / "synth_manifest.json"
    if not manifest_path.exists():
        raise CliError(EXIT_DATA, "no csv_paths configured and no synth manifest found; "
                                  "run `synth` first or set dataset.csv_paths")
    with open(manifest_path) as f:
        return json.load(f)["files"]


def cmd_features(cfg: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(cfg["output_dir"]) / "features"
    out_dir.mkdir(parents=True, exist_ok=True)
    caches = []
    num_classes = None
    for i, path in enumerate(_csv_paths(cfg)):
        rs = ingest_csv(path)
        if num_classes is None:
            num_classes = rs.num_classes
        elif rs.num_classes != num_classes:
            raise CliError(EXIT_DATA, f"{path}: class count {rs.num_classes} differs "
                                      f"from first sub-dataset ({num_classes})")
        train_segs, test_segs = split_by_trials(rs)
        train_ds, test_ds, _ = prepare_streams(train_segs, test_segs, rs.label_to_class())
        meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "sub_dataset": i}
        train_path = out_dir / f"sub{i}_train.fcache"
        test_path = out_dir / f"sub{i}_test.fcache"
        save_feature_cache(train_path, train_ds, {**meta, "split": "train"})
        save_feature_cache(test_path, test_ds, {**meta, "split": "test"})
        caches.append({"sub_dataset": i, "train": str(train_path), "test": str(test_path),
                       "train_windows": len(train_ds), "test_windows": len(test_ds)})
        print(f"sub{i}: {len(train_ds)} train / {len(test_ds)} test windows")
    manifest = _artifact(cfg, {"caches": caches, "num_classes": num_classes},
                         {"seconds": time.perf_counter() - t0})
    _write_json(Path(cfg["output_dir"]) / "features_manifest.json", manifest)
    return EXIT_OK


def _load_caches(cfg: dict, split: str):
    manifest_path = Path(cfg["output_dir"]) / "features_manifest.json"
    if not manifest_path.exists():
        raise CliError(EXIT_DATA, "no features manifest found; run `features` first")
    with open(manifest_path) as f:
        manifest = json.load(f)
    sets = []
    for entry in manifest["caches"]:
        ds, _ = load_feature_cache(entry[split])
        sets.append(ds)
    return sets


def cmd_search(cfg: dict) -> int:
    space = gene_space_from(cfg)
    scfg = search_config_from(cfg)
    subs = _load_caches(cfg, "train")
    evaluator = TrainerEvaluator(space, epochs=scfg.fitness_epochs,
                                 batch_size=scfg.batch_size)
    report = run_search(scfg, subs, evaluator, space, jobs=cfg["jobs"])
    timing = report.pop("timing")
    artifact = _artifact(cfg, {"search": report}, timing)
    _write_json(Path(cfg["output_dir"]) / "search_report.json", artifact)
    for sub in report["transfer"]:
        print(f"sub{sub['sub_dataset']}: best_loss {sub['best_loss']:.6f} "
              f"genome {sub['best_genome']}")
    return EXIT_OK


def cmd_decode(cfg: dict, genome_text: str | None, genome_file: str | None) -> int:
    if genome_text is None and genome_file is None:
        raise CliError(EXIT_CONFIG, "decode needs --genome or --genome-file")
    if genome_file is not None:
        try:
            genome_text = Path(genome_file).read_text().strip()
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"genome file not found: {genome_file}")
    space = gene_space_from(cfg)
    try:
        g = deserialize(genome_text, space)
        validate(g, space)
    except GenomeError as exc:
        raise CliError(EXIT_CONFIG, f"bad genome: {exc}")
    print(summarize(decode(g, space)))
    return EXIT_OK


def _genome_for_sub(cfg: dict, sub: int, genome_text: str | None):
    if genome_text is not None:
        return genome_text
    report_path = Path(cfg["output_dir"]) / "search_report.json"
    if not report_path.exists():
        raise CliError(EXIT_DATA, "no search report found; run `search` or pass --genome")
    with open(report_path) as f:
        report = json.load(f)
    transfers = report["search"]["transfer"]
    if not 0 <= sub < len(transfers):
        raise CliError(EXIT_CONFIG, f"sub-dataset index {sub} out of range "
                                    f"(report has {len(transfers)})")
    return transfers[sub]["best_genome"]


def cmd_train(cfg: dict, sub: int, genome_text: str | None) -> int:
    t0 = time.perf_counter()
    space = gene_space_from(cfg)
    text = _genome_for_sub(cfg, sub, genome_text)
    try:
        g = deserialize(text, space)
        validate(g, space)
    except GenomeError as exc:
        raise CliError(EXIT_CONFIG, f"bad genome: {exc}")
    subs = _load_caches(cfg, "train")
    if not 0 <= sub < len(subs):
        raise CliError(EXIT_CONFIG, f"sub-dataset index {sub} out of range")
    eval_ds = make_eval_dataset(subs[sub], cfg["search"]["valid_fraction"],
                                derive_seed(cfg["seed"], 1 + sub, 2))
    net = build(decode(g, space), subs[sub].num_classes,
                seed=derive_seed(cfg["seed"], 800, sub))
    net.set_input_scale(*fit_row_scale(eval_ds.train))
    tcfg = train_config_from(cfg, seed=derive_seed(cfg["seed"], 801, sub))
    net, history = train(net, eval_ds.train, eval_ds.valid, tcfg)

    ckpt_dir = Path(cfg["output_dir"]) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / f"sub{sub}.npz"
    save_checkpoint(ckpt_path, net, space,
                    extra_meta={"config_hash": config_hash(cfg), "seed": cfg["seed"],
                                "sub_dataset": sub})
    artifact = _artifact(cfg, {"sub_dataset": sub, "genome": text,
                               "checkpoint": str(ckpt_path), "history": history},
                         {"seconds": time.perf_counter() - t0})
    _write_json(Path(cfg["output_dir"]) / f"train_sub{sub}.json", artifact)
    print(f"sub{sub}: final train_loss {history[-1]['train_loss']:.6f} "
          f"valid_loss {history[-1]['valid_loss']:.6f}")
    return EXIT_OK


def cmd_eval(cfg: dict, sub: int, with_fine_tune: bool) -> int:
    t0 = time.perf_counter()
    ckpt_path = Path(cfg["output_dir"]) / "checkpoints" / f"sub{sub}.npz"
    if not ckpt_path.exists():
        raise CliError(EXIT_DATA, f"no checkpoint for sub-dataset {sub}; run `train` first")
    net, meta = load_checkpoint(ckpt_path)
    tests = _load_caches(cfg, "test")
    if not 0 <= sub < len(tests):
        raise CliError(EXIT_CONFIG, f"sub-dataset index {sub} out of range")
    test_ds = tests[sub]

    ft = cfg["fine_tune"]
    adapted = False
    if with_fine_tune:
        adapt, test_ds = split_adaptation(test_ds, ft["fraction"],
                                          seed=derive_seed(cfg["seed"], 802, sub))
        fine_tune(net, adapt, epochs=ft["epochs"], lr=ft["lr"],
                  seed=derive_seed(cfg["seed"], 803, sub), eval_set=test_ds)
        adapted = True
    accuracy = evaluate_accuracy(net, test_ds)
    body = {
        "sub_dataset": sub,
        "genome": meta["genome"],
        "accuracy_percent": accuracy,
        "fine_tuned": adapted,
        "evaluated_windows": len(test_ds),
    }
    artifact = _artifact(cfg, body, {"seconds": time.perf_counter() - t0})
    _write_json(Path(cfg["output_dir"]) / f"eval_sub{sub}.json", artifact)
    print(json.dumps({"accuracy_percent": accuracy, "sub_dataset": sub,
                      "fine_tuned": adapted}))
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    out_dir = Path(cfg["output_dir"])
    rows = []
    search_path = out_dir / "search_report.json"
    search = None
    if search_path.exists():
        with open(search_path) as f:
            search = json.load(f)
    for eval_path in sorted(out_dir.glob("eval_sub*.json")):
        with open(eval_path) as f:
            ev = json.load(f)
        row = {
            "sub": ev["sub_dataset"],
            "accuracy_percent": f"{ev['accuracy_percent']:.2f}",
            "fine_tuned": "yes" if ev["fine_tuned"] else "no",
            "windows": ev["evaluated_windows"],
            "genome": ev["genome"],
        }
        if search is not None:
            transfer = search["search"]["transfer"][ev["sub_dataset"]]
            row["search_loss"] = f"{transfer['best_loss']:.4f}"
        rows.append(row)
    if not rows:
        raise CliError(EXIT_DATA, f"no eval reports under {out_dir}")
    columns = list(rows[0].keys())
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusenas",
        description="Evolutionary architecture search for multimodal gesture classifiers",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--output-dir", help="override the output directory")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--jobs", type=int, help="parallel fitness evaluations (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate synthetic sub-dataset CSVs")
    sub.add_parser("features", help="preprocess CSVs into feature caches")
    sub.add_parser("search", help="run rough + transfer genetic search")

    p_decode = sub.add_parser("decode", help="print the architecture of a genome")
    p_decode.add_argument("--genome", help="genome text (20 comma-separated integers)")
    p_decode.add_argument("--genome-file", help="file containing the genome text")

    p_train = sub.add_parser("train", help="train a genome on one sub-dataset")
    p_train.add_argument("--sub", type=int, default=0, help="sub-dataset index")
    p_train.add_argument("--genome", help="genome text (default: search report best)")

    p_eval = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p_eval.add_argument("--sub", type=int, default=0, help="sub-dataset index")
    p_eval.add_argument("--fine-tune", action="store_true",
                        help="adapt on a held-out slice of test windows first")

    sub.add_parser("report", help="tabulate evaluation reports")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {
            "output_dir": args.output_dir,
            "seed": args.seed,
            "jobs": args.jobs,
        })
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "features":
            return cmd_features(cfg)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "decode":
            return cmd_decode(cfg, args.genome, args.genome_file)
        if args.command == "train":
            return cmd_train(cfg, args.sub, args.genome)
        if args.command == "eval":
            return cmd_eval(cfg, args.sub, args.fine_tune)
        if args.command == "report":
            return cmd_report(cfg)
        raise CliError(EXIT_CONFIG, f"unknown command {args.command}")
    except CliError as exc:
        print(json.dumps({"error": str(exc), "code": exc.code}), file=sys.stderr)
        return exc.code
    except (DataError, SignalError, FileNotFoundError) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_DATA}), file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_NUMERIC}), file=sys.stderr)
        return EXIT_NUMERIC
    except (GenomeError, ValueError) as exc:
        print(json.dumps({"error": str(exc), "code": EXIT_CONFIG}), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
