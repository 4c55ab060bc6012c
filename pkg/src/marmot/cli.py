"""Command-line entry point: ``marmot {gen-synth,train,eval,predict,export-attention}``.

Exit codes: 0 success, 1 invalid input (bad flags, missing files, invalid
records or config), 2 runtime failure (for example a diverged run).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from marmot import metrics, plotting, serialize
from marmot.config import RunConfig
from marmot.data import DatasetError, load_dataset, read_records, record_texts, write_records
from marmot.model import SEG_CLS, SEG_IMAGE, ModelConfig, forward, init_params, positive_probability
from marmot.synth import gen_synth
from marmot.training import deep_ensemble, majority_vote, train
from marmot.vocab import Vocab

log = logging.getLogger("marmot")

MODEL_FORMAT = "marmot-model"
REPORT_FORMAT = "marmot-train-report"
METRICS_FORMAT = "marmot-metrics"
TRACE_FORMAT = "marmot-attention"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marmot", description="Train, evaluate and inspect the multimodal text + image classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic text x image XOR dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--height", type=int, default=2)
    p.add_argument("--width", type=int, default=2)
    p.add_argument("--missing-fraction", type=float, default=0.25)
    p.add_argument("--sidecar", action="store_true", help="store feature maps as .npy files")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model (or an ensemble) and write it to --out")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ensemble", type=int, default=1, metavar="N")
    p.add_argument("--no-plots", action="store_true")

    for name, helptext in (("eval", "score a trained model"), ("predict", "write per-example predictions")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="directory written by train")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--threshold", type=float, default=0.5)
        if name == "eval":
            p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("export-attention", help="dump attention weights for chosen examples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", help="comma-separated example ids (default: config trace ids)")
    p.add_argument("--member", type=int, default=0, help="ensemble member to inspect")
    p.add_argument("--out", required=True)
    return parser


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    return path


def cmd_gen_synth(args) -> None:
    records = gen_synth(args.n, args.seed, args.channels, args.height, args.width, args.missing_fraction)
    write_records(records, args.out, sidecar=args.sidecar)


def _model_config(run: RunConfig, vocab: Vocab, records) -> ModelConfig:
    channels = next((r.image.shape[0] for r in records if r.image is not None), None)
    if channels is None:
        channels = run.model.get("channels", 1)
    return ModelConfig(**{**run.model, "vocab_size": len(vocab), "channels": channels})


def cmd_train(args) -> None:
    run = RunConfig.load(_require(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        run.train = dataclasses.replace(run.train, seed=args.seed)
    records = read_records(_require(args.data))
    if not records:
        raise UsageError(f"no training records in {args.data}")
    vocab = Vocab.load(run.vocab_path) if run.vocab_path else Vocab.build(record_texts(records))
    model_cfg = _model_config(run, vocab, records)
    train_set = load_dataset(args.data, vocab, model_cfg.max_positions)
    val_set = load_dataset(_require(args.val), vocab, model_cfg.max_positions) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")

    if args.ensemble > 1:
        members = deep_ensemble(train_set, model_cfg, run.train, args.ensemble, val_set=val_set)
        reports = [None] * len(members)
    else:
        params = init_params(model_cfg, run.train.seed)
        reports = [train(train_set, val_set, params, run.train)]
        members = [params]
    files = []
    for k, params in enumerate(members):
        name = "params.npz" if len(members) == 1 else f"params_{k:02d}.npz"
        serialize.save_params(params, out / name)
        files.append(name)
    if reports[0] is not None:
        serialize.write_json(out / "train_report.json", REPORT_FORMAT, reports[0].to_dict())
        if not args.no_plots:
            plotting.plot_learning_curve(reports[0], out / "learning_curve.png")
    serialize.write_json(
        out / "model.json",
        MODEL_FORMAT,
        {"members": files, "run_config": run.to_dict(), "model_config": dataclasses.asdict(model_cfg)},
    )


def load_model(model_dir) -> tuple:
    model_dir = _require(model_dir)
    manifest = serialize.read_json(_require(model_dir / "model.json"), MODEL_FORMAT)
    members = [serialize.load_params(_require(model_dir / f)) for f in manifest["members"]]
    return Vocab.load(_require(model_dir / "vocab.txt")), members, manifest


def _score(members, examples, threshold) -> list:
    rows = []
    for ex in examples:
        probs = [positive_probability(forward(ex, m).logits) for m in members]
        if len(members) == 1:
            cls = int(probs[0] >= threshold)
        else:
            cls = majority_vote(int(p >= threshold) for p in probs)
        rows.append((ex.id, cls, float(np.mean(probs))))
    return rows


def cmd_predict(args) -> None:
    vocab, members, _ = load_model(args.model)
    examples = load_dataset(_require(args.data), vocab, members[0].config.max_positions)
    serialize.write_predictions(args.out, _score(members, examples, args.threshold))


def cmd_eval(args) -> None:
    vocab, members, _ = load_model(args.model)
    examples = load_dataset(_require(args.data), vocab, members[0].config.max_positions)
    if any(ex.label is None for ex in examples):
        raise UsageError("eval needs a label on every record")
    rows = _score(members, examples, args.threshold)
    labels = [ex.label for ex in examples]
    report = metrics.evaluate([r[1] for r in rows], labels, [r[2] for r in rows])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["threshold"] = args.threshold
    payload["n_examples"] = len(examples)
    serialize.write_json(out / "metrics.json", METRICS_FORMAT, payload)
    if not args.no_plots:
        plotting.plot_roc(report.roc, report.auc, out / "roc.png")


def token_labels(seq, vocab: Vocab) -> list:
    labels, k = [], 0
    for seg, tok in zip(seq.segments, seq.token_ids):
        if seg == SEG_CLS:
            labels.append("CLS")
        elif seg == SEG_IMAGE:
            labels.append(f"ImgFeat-{k}")
            k += 1
        else:
            labels.append(vocab.word(int(tok)))
    return labels


def attention_traces(example, params, vocab: Vocab) -> list:
    """One record per (sub-network, layer, head) with row/column labels."""
    out = forward(example, params, trace=True)
    seq = out.sequence
    fused = token_labels(seq, vocab)
    caption = [lab for lab, seg in zip(fused, seq.segments) if seg == "CAPTION"]
    n_cells = next(
        (e["weights"].shape[1] for e in out.traces["translation"] if e["attention"] == "cross"), 0
    )
    cells = [f"ImgFeat-{k}" for k in range(n_cells)]
    records = []
    for e in out.traces["translation"]:
        cols = caption if e["attention"] == "self" else cells
        records.append((f"translation-decoder-{e['attention']}", e["layer"], e["head"], caption, cols, e["weights"]))
    for e in out.traces["fusion"]:
        records.append(("fusion", e["layer"], e["head"], fused, fused, e["weights"]))
    return records


def cmd_export_attention(args) -> None:
    vocab, members, manifest = load_model(args.model)
    if not 0 <= args.member < len(members):
        raise UsageError(f"--member must be in [0, {len(members)})")
    params = members[args.member]
    ids = args.ids.split(",") if args.ids else manifest["run_config"]["trace"]["example_ids"]
    if not ids:
        raise UsageError("no example ids given (--ids or trace.example_ids in the config)")
    examples = {ex.id: ex for ex in load_dataset(_require(args.data), vocab, params.config.max_positions)}
    missing = [i for i in ids if i not in examples]
    if missing:
        raise UsageError(f"example ids not in dataset: {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ex_id in ids:
        for sub, layer, head, rows, cols, w in attention_traces(examples[ex_id], params, vocab):
            serialize.write_json(
                out / f"{ex_id}__{sub}__L{layer}_H{head}.json",
                TRACE_FORMAT,
                {
                    "example_id": ex_id,
                    "sub_network": sub,
                    "layer": layer,
                    "head": head,
                    "rows": rows,
                    "columns": cols,
                    "weights": w.tolist(),
                },
            )


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, DatasetError, serialize.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"marmot {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"marmot {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
