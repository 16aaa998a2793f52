"""Command-line front end: pretrain, segment, inspect-map, eval-noise, finetune.

Run settings come from defaults, then an optional --config JSON file, then
explicit flags, in that order. Every setting is validated before any file is
touched. Exit codes: 0 success, 2 bad configuration, 3 bad or missing data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from byteblocks import assignment as asg
from byteblocks import evaluation as ev
from byteblocks import training as tr
from byteblocks.bytetext import encode_text, load_corpus
from byteblocks.checkpoint import (CheckpointError, load_train_state,
                                   save_train_state)
from byteblocks.frontier import frontier_probs
from byteblocks.model import ModelConfig
from byteblocks.training import OptimizerGroups, Schedule, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

PRESETS = ("mini", "toy", "small", "base")


class ConfigError(Exception):
    """Run settings that fail validation (exit 2)."""


class DataError(Exception):
    """Unreadable, empty, or malformed inputs (exit 3)."""


@dataclasses.dataclass
class RunConfig:
    """Validated settings for one command invocation."""

    preset: str = "toy"
    seed: int = 0
    seq_len: int = 1024
    batch_size: int = 16
    trunc_factor: int = 4
    optimizer: str = "adam"
    steps: int = 100
    warmup: int | None = None       # default: steps // 10, at least 1
    checkpoint_every: int = 0
    tau: tuple[float, ...] = (0.05, 0.10, 0.15)
    finetune_steps: int = 200

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.seq_len < tr.MIN_DOC_BYTES:
            raise ConfigError(f"seq_len must be at least {tr.MIN_DOC_BYTES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.trunc_factor < 1:
            raise ConfigError("trunc_factor must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 1 or self.finetune_steps < 1:
            raise ConfigError("step counts must be positive")
        if self.warmup is not None and not 0 <= self.warmup < self.steps:
            raise ConfigError("warmup must satisfy 0 <= warmup < steps")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")
        if any(not 0.0 <= t < 1.0 for t in self.tau):
            raise ConfigError("every tau must lie in [0, 1)")

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(ModelConfig.preset(self.preset),
                                   trunc_factor=self.trunc_factor)

    def train_config(self, total_steps: int) -> TrainConfig:
        warmup = self.warmup if self.warmup is not None else max(1, total_steps // 10)
        if warmup >= total_steps:
            raise ConfigError(f"warmup {warmup} must be below the step target {total_steps}")
        return TrainConfig(groups=OptimizerGroups(),
                           schedule=Schedule(warmup, total_steps),
                           optimizer=self.optimizer,
                           batch_size=self.batch_size,
                           seq_len=self.seq_len)


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for key, val in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = tuple(val) if key == "tau" else val
    for name in ("preset", "seed", "seq_len", "batch_size", "trunc_factor",
                 "optimizer", "steps", "warmup", "checkpoint_every", "finetune_steps"):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "tau", None) is not None:
        values["tau"] = tuple(args.tau)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def _tau_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="PATH",
                        help="JSON file of run settings")
    common.add_argument("--seed", type=int, metavar="N",
                        help="global RNG seed (default 0)")

    parser = argparse.ArgumentParser(
        prog="byteblocks",
        description="Gradient-learned byte-to-block segmentation with a seq2seq model on top.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("pretrain", parents=[common],
                       help="span-denoising pretraining on a byte corpus")
    p.add_argument("--corpus", type=Path, required=True, metavar="PATH",
                   help="newline-delimited text documents")
    p.add_argument("--out", type=Path, default=Path("."), metavar="DIR",
                   help="directory for checkpoints and the training log")
    p.add_argument("--steps", type=int, metavar="N", help="total optimizer steps")
    p.add_argument("--warmup", type=int, metavar="N")
    p.add_argument("--batch-size", dest="batch_size", type=int, metavar="N")
    p.add_argument("--seq-len", dest="seq_len", type=int, metavar="N")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--trunc-factor", dest="trunc_factor", type=int, metavar="K")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--checkpoint", type=Path, metavar="PATH",
                   help="resume training from this checkpoint")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, metavar="N")

    p = sub.add_parser("segment", parents=[common],
                       help="print the learned segmentation of a text")
    p.add_argument("--checkpoint", type=Path, required=True, metavar="PATH")
    p.add_argument("--text", required=True, help="text to segment")
    p.add_argument("--show-probs", action="store_true",
                   help="also print the per-byte frontier probabilities")

    p = sub.add_parser("inspect-map", parents=[common],
                       help="dump the byte-to-block assignment map as CSV and PGM")
    p.add_argument("--checkpoint", type=Path, required=True, metavar="PATH")
    p.add_argument("--text", required=True)
    p.add_argument("--out", type=Path, default=Path("."), metavar="DIR")

    p = sub.add_parser("eval-noise", parents=[common],
                       help="classification accuracy under byte noise")
    p.add_argument("--checkpoint", type=Path, required=True, metavar="PATH",
                   help="fine-tuned classifier checkpoint")
    p.add_argument("--data", type=Path, required=True, metavar="PATH",
                   help="label<TAB>text evaluation lines")
    p.add_argument("--tau", type=_tau_list, metavar="LIST",
                   help="comma-separated noise rates (default 0.05,0.10,0.15)")
    p.add_argument("--train-dev", action="store_true",
                   help="re-finetune on noisy copies of --train-data first")
    p.add_argument("--train-data", type=Path, metavar="PATH",
                   help="label<TAB>text fine-tuning lines for --train-dev")
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int, metavar="N")
    p.add_argument("--out", type=Path, metavar="PATH",
                   help="also write the table as CSV here")

    p = sub.add_parser("finetune", parents=[common],
                       help="fine-tune a pretrained checkpoint into a classifier")
    p.add_argument("--checkpoint", type=Path, required=True, metavar="PATH")
    p.add_argument("--data", type=Path, required=True, metavar="PATH")
    p.add_argument("--out", type=Path, default=Path("."), metavar="DIR")
    p.add_argument("--steps", type=int, metavar="N")
    p.add_argument("--batch-size", dest="batch_size", type=int, metavar="N")
    return parser


def _load_state(path: Path):
    try:
        return load_train_state(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc


def _single_map(params, config: ModelConfig, text: str):
    """Frontier probabilities and the full (untruncated) map for one text."""
    ids = encode_text(text)
    if ids.size == 0:
        raise DataError("text is empty after encoding")
    probs = frontier_probs(params, config.frontier, ids)
    moments = asg.cumulative_moments(probs.data.astype(np.float64))
    count = asg.plausible_block_count(moments, ids.size)
    amap = asg.build_assignment_map(moments, count, sigma_floor=config.sigma_floor)
    return ids, probs.data, amap


def cmd_pretrain(cfg: RunConfig, args: argparse.Namespace) -> int:
    try:
        docs, stats = load_corpus(args.corpus)
    except OSError as exc:
        raise DataError(f"cannot read corpus: {exc}") from exc
    docs = tr.usable_corpus(docs)
    if not docs:
        raise DataError(f"{args.corpus}: no usable documents "
                        f"(kept {stats.kept}, need length >= {tr.MIN_DOC_BYTES})")

    model_config = cfg.model_config()
    if args.checkpoint is not None:
        state, model_config = _load_state(args.checkpoint)
        resumed = True
    else:
        state = tr.init_train_state(model_config, cfg.seed)
        resumed = False
    if state.step >= cfg.steps:
        raise ConfigError(f"checkpoint is already at step {state.step} >= --steps {cfg.steps}")
    train_config = cfg.train_config(cfg.steps)

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.ndjson"

    def save(st, tag=None):
        name = f"ckpt_{st.step:06d}.bbck" if tag is None else f"ckpt_{tag}.bbck"
        save_train_state(out_dir / name, st, model_config)
        return out_dir / name

    with open(log_path, "a" if resumed else "w", encoding="utf-8") as log:
        state = tr.pretrain(
            state, docs, model_config, train_config, cfg.steps,
            on_record=lambda rec: print(tr.record_line(rec), file=log),
            checkpoint_every=cfg.checkpoint_every,
            save_fn=lambda st: save(st))
    final = save(state, tag="final")
    print(f"trained to step {state.step}; checkpoint {final}; log {log_path}")
    return EXIT_OK


def cmd_segment(cfg: RunConfig, args: argparse.Namespace) -> int:
    state, model_config = _load_state(args.checkpoint)
    ids, probs, amap = _single_map(state.params, model_config, args.text)
    block_ids = asg.hard_segmentation(amap)
    raw = bytes(int(i) - 2 for i in ids)

    pieces = []
    start = 0
    current = block_ids[0]
    for i in range(1, ids.size):
        # render a boundary only when the block id moves forward
        if block_ids[i] > current:
            pieces.append(raw[start:i])
            start, current = i, block_ids[i]
    pieces.append(raw[start:])
    rendered = "|".join(p.decode("utf-8", errors="backslashreplace") for p in pieces)
    print(f"blocks: {len(pieces)}")
    print(rendered)
    if args.show_probs:
        print("p_F: " + " ".join(f"{p:.3f}" for p in probs))
    return EXIT_OK


def cmd_inspect_map(cfg: RunConfig, args: argparse.Namespace) -> int:
    state, model_config = _load_state(args.checkpoint)
    _, _, amap = _single_map(state.params, model_config, args.text)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / "assignment.csv"
    pgm_path = args.out / "assignment.pgm"
    asg.assignment_to_csv(amap, csv_path)
    asg.assignment_to_pgm(amap, pgm_path)
    arr = amap.as_array()
    print(f"map: {arr.shape[0]} blocks x {arr.shape[1]} bytes")
    print(f"mean column entropy: {asg.mean_column_entropy(amap):.6f}")
    print(f"wrote {csv_path} and {pgm_path}")
    return EXIT_OK


def _load_labeled_or_die(path: Path):
    try:
        return ev.pairs_to_ids(ev.load_labeled(path))
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval_noise(cfg: RunConfig, args: argparse.Namespace) -> int:
    state, model_config = _load_state(args.checkpoint)
    eval_pairs = _load_labeled_or_die(args.data)

    if args.train_dev:
        if args.train_data is None:
            raise ConfigError("--train-dev needs --train-data")
        train_pairs = _load_labeled_or_die(args.train_data)

    print("tau\taccuracy")
    rows = []
    for tau in cfg.tau:
        params = state.params
        if args.train_dev:
            noisy_train = ev.apply_noise(train_pairs, tau, cfg.seed)
            st, _ = _load_state(args.checkpoint)
            st = tr.restart_state(st, cfg.seed)
            st = ev.finetune(st, noisy_train, model_config,
                             cfg.train_config(cfg.finetune_steps), cfg.finetune_steps)
            params = st.params
        noisy = ev.apply_noise(eval_pairs, tau, cfg.seed)
        acc = ev.evaluate_classifier(params, model_config, noisy)
        rows.append((tau, acc))
        print(f"{tau:g}\t{acc:.4f}")
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("tau,accuracy\n")
            for tau, acc in rows:
                fh.write(f"{tau:g},{acc:.6f}\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args: argparse.Namespace) -> int:
    state, model_config = _load_state(args.checkpoint)
    pairs = _load_labeled_or_die(args.data)
    state = tr.restart_state(state, cfg.seed)
    state = ev.finetune(state, pairs, model_config, cfg.train_config(cfg.steps), cfg.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "ckpt_finetuned.bbck"
    save_train_state(path, state, model_config)
    acc = ev.evaluate_classifier(state.params, model_config, pairs)
    print(f"fine-tuned to step {state.step}; train accuracy {acc:.4f}; checkpoint {path}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "segment": cmd_segment,
    "inspect-map": cmd_inspect_map,
    "eval-noise": cmd_eval_noise,
    "finetune": cmd_finetune,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_run_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
