"""Single entry point wiring all subcommands.

Every command that produces outputs writes a run manifest beside them with
the full parameter snapshot and input digests, sufficient to re-run the
command bit-identically. Exit codes: 0 success, 1 runtime error, 2 usage
error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

from . import __version__, bundles, fusion, metrics, pooling, textnorm, training

_MODE_ALIASES = {
    "decoder": "decoder_only",
    "decoder_only": "decoder_only",
    "local": "local",
    "global": "global",
    "joint": "joint",
}

_ERRORS = (
    bundles.BundleError,
    pooling.PoolingError,
    metrics.NoValidWords,
    fusion.MissingAttention,
    fusion.NonFiniteActivation,
    training.TooFewScenes,
    training.EmptyValidationSet,
    training.ConfigMismatch,
    textnorm.InconsistentOffsets,
    ValueError,
    OSError,
)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dataset_digest(data_dir) -> str:
    """Digest over the dataset files, stable under directory listing order."""
    data_dir = Path(data_dir)
    names = sorted(
        p.name
        for p in data_dir.iterdir()
        if p.is_file() and (p.suffix in (".wlb", ".tsv"))
    )
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode("utf-8"))
        digest.update(sha256_file(data_dir / name).encode("ascii"))
    return digest.hexdigest()


def write_run_manifest(target, command: str, parameters: dict, inputs: dict, extra: dict | None = None) -> Path:
    """Write run_manifest.json beside the command's outputs."""
    target = Path(target)
    if target.suffix:  # file output: sibling manifest
        path = target.with_name(target.name + ".manifest.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "run_manifest.json"
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "parameters": parameters,
        "inputs": inputs,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_label(args) -> int:
    out_lines = []
    with open(args.input, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ValueError(f"{args.input}:{lineno}: need utterance_id, reference, response")
            utt, reference, response = fields[0], fields[1], fields[2]
            ref_words = textnorm.normalize_transcript(reference)
            resp_words = textnorm.normalize_transcript(response)
            labels, ops = textnorm.align_and_label(ref_words, resp_words)
            bits = "".join(str(c) for c in labels.correct)
            out_lines.append(f"{utt}\t{bits}\t{textnorm.ops_to_codes(ops)}")
    Path(args.out).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    write_run_manifest(
        Path(args.out),
        "label",
        {"input": str(args.input), "out": str(args.out)},
        {"input_digest": sha256_file(args.input)},
    )
    return 0


def cmd_synth(args) -> int:
    dims = bundles.SynthDims(
        frames=args.frames,
        enc_dim=args.enc_dim,
        tokens=args.tokens,
        dec_dim=args.dec_dim,
        layers=args.layers,
        heads=args.heads,
        words=args.words,
        align_len=args.align_len,
    )
    planted = bundles.PlantedSignalSpec(mode=args.planted, margin=args.margin, top_k=args.top_k)
    bundles.make_synthetic_dataset(
        args.out,
        base_seed=args.seed,
        count=args.count,
        planted=planted,
        dims=dims,
        n_scenes=args.scenes,
        n_listeners=args.listeners,
        dev_fraction=args.dev_fraction,
    )
    write_run_manifest(
        Path(args.out),
        "synth",
        {
            "seed": args.seed,
            "count": args.count,
            "planted": args.planted,
            "margin": args.margin,
            "top_k": args.top_k,
            "scenes": args.scenes,
            "listeners": args.listeners,
            "dev_fraction": args.dev_fraction,
            "dims": dims.__dict__,
        },
        {},
        extra={"dataset_digest": dataset_digest(args.out)},
    )
    return 0


def cmd_validate(args) -> int:
    paths: list[Path] = [Path(p) for p in args.files]
    if args.data:
        data_dir = Path(args.data)
        for entry in bundles.read_index(data_dir / "index.tsv"):
            paths.append(data_dir / entry.filename)
    if not paths:
        raise ValueError("nothing to validate: pass bundle files or --data")
    failures = 0
    for path in paths:
        try:
            bundle = bundles.read_bundle(path)
            bundles.validate_bundle(bundle, require_attention=args.require_attention)
            print(f"{path}: OK")
        except bundles.BundleError as exc:
            failures += 1
            print(f"{path}: FAIL: {exc}")
    return 1 if failures else 0


def cmd_inspect_alignment(args) -> int:
    bundle = bundles.read_bundle(args.bundle)
    if bundle.cross_attention is None:
        raise ValueError(f"{args.bundle}: bundle has no cross_attention")
    if not 0 <= args.word < bundle.n_words:
        raise ValueError(f"word index {args.word} outside [0, {bundle.n_words})")
    selection = pooling.select_top_heads(bundle.cross_attention, args.top_k)
    profile = pooling.word_attention_profile(
        bundle.cross_attention,
        selection,
        bundle.char_rows[args.word],
        bundle.encoder_mask,
        word_index=args.word,
    )
    lines = ["frame,weight,valid"]
    for t, (w, m) in enumerate(zip(profile.weights, bundle.encoder_mask)):
        lines.append(f"{t},{float(w)!r},{int(m)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_run_manifest(
            Path(args.out),
            "inspect-alignment",
            {"bundle": str(args.bundle), "word": args.word, "top_k": args.top_k},
            {"bundle_digest": sha256_file(args.bundle)},
        )
    else:
        sys.stdout.write(text)
    if profile.degenerate:
        print("# degenerate attention mass: uniform fallback over valid frames", file=sys.stderr)
    return 0


def _load_train_config(args) -> training.TrainConfig:
    if args.config:
        config = training.TrainConfig.from_file(args.config)
    else:
        config = training.TrainConfig()
    updates: dict = {}
    if args.mode:
        updates["mode"] = _MODE_ALIASES[args.mode]
    if args.seeds is not None:
        updates["seeds"] = args.seeds
    if args.folds is not None:
        updates["folds"] = args.folds
    if args.seed_base is not None:
        updates["seed_base"] = args.seed_base
    if updates:
        data = config.to_dict()
        data.update(updates)
        config = training.TrainConfig.from_dict(data)
    return config


def cmd_train(args) -> int:
    config = _load_train_config(args)
    data = bundles.load_dataset(args.data, split=args.split)
    if not data:
        raise ValueError(f"no bundles with split {args.split!r} under {args.data}")
    plan, checkpoints = training.train_cross_validation(data, config, workers=args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ckpt in checkpoints:
        name = f"ckpt_seed{ckpt.seed:03d}_fold{ckpt.fold:02d}.wlck"
        training.save_checkpoint(ckpt, out_dir / name)
        print(f"{name}: epoch {ckpt.epoch}, val incorrect-word F1 {ckpt.val_f1:.4f}")
    write_run_manifest(
        out_dir,
        "train",
        {
            "data": str(args.data),
            "split": args.split,
            "workers": args.workers,
            "config": config.to_dict(),
        },
        {"dataset_digest": dataset_digest(args.data)},
        extra={"fold_plan": {"k": plan.k, "seed": plan.seed, "assignment": plan.assignment},
               "seeds": [config.seed_base + i for i in range(config.seeds)]},
    )
    return 0


def cmd_predict(args) -> int:
    ckpt_dir = Path(args.checkpoints)
    paths = sorted(ckpt_dir.glob("*.wlck"))
    if not paths:
        raise ValueError(f"no checkpoints under {ckpt_dir}")
    checkpoints = [training.load_checkpoint(p) for p in paths]
    data = bundles.load_dataset(args.data, split=args.split)
    if not data:
        raise ValueError(f"no bundles with split {args.split!r} under {args.data}")
    records = training.predict(data, checkpoints, workers=args.workers)
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "utterance_id": rec.utterance_id,
                    "p": rec.probabilities,
                    "y_hat": rec.y_hat,
                    "seed": rec.seed,
                    "folds": rec.folds,
                },
                sort_keys=True,
            )
        )
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_run_manifest(
        Path(args.out),
        "predict",
        {
            "checkpoints": str(args.checkpoints),
            "data": str(args.data),
            "split": args.split,
            "workers": args.workers,
        },
        {
            "dataset_digest": dataset_digest(args.data),
            "checkpoint_digests": {p.name: sha256_file(p) for p in paths},
        },
    )
    return 0


def read_predictions(path) -> list[training.PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                training.PredictionRecord(
                    utterance_id=obj["utterance_id"],
                    probabilities=[float(x) for x in obj["p"]],
                    y_hat=None if obj["y_hat"] is None else float(obj["y_hat"]),
                    seed=int(obj["seed"]),
                    folds=[int(x) for x in obj.get("folds", [])],
                )
            )
    return records


def cmd_evaluate(args) -> int:
    records = read_predictions(args.predictions)
    truths = metrics.read_labels_file(args.labels)
    report = metrics.stratified_report(records, truths)
    out = Path(args.out)
    out.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    table = metrics.render_report_text([(args.system, report)])
    out.with_suffix(".txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    write_run_manifest(
        out,
        "evaluate",
        {"predictions": str(args.predictions), "labels": str(args.labels), "system": args.system},
        {
            "predictions_digest": sha256_file(args.predictions),
            "labels_digest": sha256_file(args.labels),
        },
    )
    return 0


def cmd_report(args) -> int:
    named = []
    for spec in args.reports:
        if "=" not in spec:
            raise ValueError(f"report spec {spec!r} must look like name=path")
        name, path = spec.split("=", 1)
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        named.append(
            (
                name,
                metrics.MetricsReport(
                    seeds=data["seeds"],
                    population=data["population"],
                    by_severity=data["by_severity"],
                    counts=data["counts"],
                ),
            )
        )
    table = metrics.render_report_text(named)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        write_run_manifest(
            Path(args.out),
            "report",
            {"reports": list(args.reports)},
            {spec.split("=", 1)[0]: sha256_file(spec.split("=", 1)[1]) for spec in args.reports},
        )
    else:
        sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wlpred",
        description="Word-level intelligibility prediction toolkit",
    )
    parser.add_argument("--version", action="version", version=f"wlpred {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="derive word labels from reference/response pairs")
    p.add_argument("--input", required=True, help="TSV: utterance_id, reference, response")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("synth", help="generate a synthetic feature-bundle dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--planted", choices=bundles.PLANT_MODES, default="decoder")
    p.add_argument("--out", required=True)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--listeners", type=int, default=4)
    p.add_argument("--dev-fraction", type=float, default=0.2)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--enc-dim", type=int, default=16)
    p.add_argument("--tokens", type=int, default=24)
    p.add_argument("--dec-dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--words", type=int, default=8)
    p.add_argument("--align-len", type=int, default=24)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="validate feature bundles")
    p.add_argument("files", nargs="*", help="bundle files")
    p.add_argument("--data", help="dataset directory with index.tsv")
    p.add_argument("--require-attention", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("inspect-alignment", help="dump one word's attention profile as CSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--word", type=int, required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_alignment)

    p = sub.add_parser("train", help="scene-grouped cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--mode", choices=sorted(_MODE_ALIASES), default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed-base", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="fold-averaged per-seed predictions")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", default="system")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine report JSON files into tables")
    p.add_argument("reports", nargs="+", help="name=report.json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"wlpred {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
