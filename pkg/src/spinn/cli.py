"""Command-line entry points: prep, train, eval, encode, trace, bench, and
gradcheck.

Configuration is flat key = value pairs merged from built-in defaults, then
an optional --config file, then command-line flags; unknown keys are
errors, and every command echoes its resolved configuration into its
output artifacts. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys

import numpy as np

from spinn import bench as bench_mod
from spinn import classifier, data, encoder, oracles, ops, plots, thinstack
from spinn import toydata, trainer
from spinn import transitions as tr

# key -> (type, default, help); bool keys accept true/false in config files
MODEL_KEYS = {
    "variant": (str, "full", "encoder variant: pi_nt, pi, or full"),
    "dim": (int, 300, "model dimension D"),
    "tracking_dim": (int, -1, "tracking LSTM size (-1 = variant default)"),
    "n_tokens": (int, 25, "fixed token length N (transitions are 2N-1)"),
    "mlp_layers": (int, -1, "classifier MLP depth (-1 = variant default)"),
    "mlp_dim": (int, 1024, "classifier MLP width"),
    "lr": (float, -1.0, "initial learning rate (-1 = variant default)"),
    "lr_decay": (float, 0.75, "learning-rate decay factor"),
    "lr_decay_every": (int, 10000, "steps between learning-rate decays"),
    "batch_size": (int, 32, "minibatch size"),
    "max_steps": (int, 250000, "training steps"),
    "l2": (float, -1.0, "L2 coefficient (-1 = variant default)"),
    "alpha": (float, -1.0, "transition-loss weight (-1 = variant default)"),
    "keep_embed": (float, -1.0, "projection dropout keep rate (-1 = default)"),
    "keep_mlp": (float, -1.0, "classifier dropout keep rate (-1 = default)"),
    "rmsprop_rho": (float, 0.9, "RMSProp decay rate"),
    "rmsprop_eps": (float, 1e-6, "RMSProp epsilon"),
    "eval_interval": (int, 1000, "steps between dev evaluations"),
    "seed": (int, 1, "random seed"),
    "clip_norm": (float, 0.0, "global gradient-norm clip (0 = off)"),
    "enforce_valid": (bool, False, "mask structurally invalid predicted actions"),
    "swap_forget_gates": (bool, False,
                          "pair each forget gate with its own child's memory"),
    "float32": (bool, False, "run in 32-bit floats"),
}

BENCH_KEYS = {
    "models": (str, "thin_stack,naive_treernn,sequence_lstm", "models to time"),
    "batch_sizes": (str, "1,32,64,128,256,512", "comma-separated batch sizes"),
    "length": (int, 30, "sentence length in tokens (max 30)"),
    "dim": (int, 300, "model dimension D"),
    "reps": (int, 3, "timed repetitions per cell"),
    "warmup": (int, 1, "warm-up repetitions per cell"),
    "naive_sentences": (int, 16, "sentences per naive-model repetition"),
    "seed": (int, 0, "random seed"),
    "dtype": (str, "float32", "float width for the benchmark"),
    "float32": (bool, False, "unused here; dtype governs the benchmark"),
}

_NO_DEFAULT = {"tracking_dim", "mlp_layers", "lr", "l2", "alpha",
               "keep_embed", "keep_mlp"}


class UsageError(ValueError):
    pass


def _parse_value(key, spec_type, raw):
    if spec_type is bool:
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise UsageError(f"key {key!r}: expected true/false, got {raw!r}")
    try:
        return spec_type(raw)
    except ValueError as err:
        raise UsageError(f"key {key!r}: {err}") from err


def read_config_file(path, registry):
    values = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in registry:
                raise UsageError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = _parse_value(key, registry[key][0], raw)
    return values


def resolve_config(args, registry):
    """defaults <- config file <- explicit flags."""
    resolved = {key: spec[1] for key, spec in registry.items()}
    if getattr(args, "config", None):
        resolved.update(read_config_file(args.config, registry))
    for key in registry:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def config_lines(resolved):
    return [f"{key} = {resolved[key]}" for key in sorted(resolved)]


def echo_config(resolved, out_dir=None):
    lines = config_lines(resolved)
    for line in lines:
        print(line)
    if out_dir is not None:
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")


def _add_registry_flags(parser, registry):
    for key, (spec_type, default, help_text) in registry.items():
        flag = "--" + key.replace("_", "-")
        if spec_type is bool:
            parser.add_argument(flag, dest=key, action="store_const", const=True,
                                default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=key, type=spec_type, default=None,
                                help=f"{help_text} (default {default})")


def make_train_config(resolved):
    kwargs = dict(
        variant=resolved["variant"], dim=resolved["dim"],
        n_tokens=resolved["n_tokens"], mlp_dim=resolved["mlp_dim"],
        lr_decay=resolved["lr_decay"], lr_decay_every=resolved["lr_decay_every"],
        batch_size=resolved["batch_size"], max_steps=resolved["max_steps"],
        rmsprop_rho=resolved["rmsprop_rho"], rmsprop_eps=resolved["rmsprop_eps"],
        eval_interval=resolved["eval_interval"], seed=resolved["seed"],
        clip_norm=resolved["clip_norm"], enforce_valid=resolved["enforce_valid"],
        swap_forget_gates=resolved["swap_forget_gates"])
    for key in _NO_DEFAULT:
        value = resolved[key]
        if value is not None and value >= 0:
            kwargs[key] = value
    return trainer.TrainConfig(**kwargs)


def _maybe_float32(resolved):
    if resolved.get("float32"):
        ops.set_default_dtype("float32")


def _toy_path(name):
    return str(toydata.toy_dir() / name)


def _data_paths(args):
    if args.data == "toy":
        return _toy_path("train.jsonl"), _toy_path("dev.jsonl")
    train_path = os.path.join(args.data, "train.jsonl")
    dev_path = os.path.join(args.data, "dev.jsonl")
    for path in (train_path, dev_path):
        if not os.path.exists(path):
            raise UsageError(f"missing data file {path}")
    return train_path, dev_path


def _glove_path(arg):
    return _toy_path("glove_300d.txt") if arg == "toy" else arg


def _load_table(glove_arg, examples, seed=0):
    vocab = data.build_vocab(examples)
    return data.load_glove(_glove_path(glove_arg), vocab, oov_seed=seed)


# ---------------------------------------------------------------------------
# commands


def cmd_prep(args):
    examples, skipped = data.load_corpus(args.input)
    data.write_cache(examples, args.out)
    print(f"loaded {len(examples)} examples ({skipped} unlabeled skipped)")
    print(f"cache written to {args.out}")
    return 0


def cmd_train(args):
    resolved = resolve_config(args, MODEL_KEYS)
    _maybe_float32(resolved)
    config = make_train_config(resolved)
    train_path, dev_path = _data_paths(args)
    train_examples, skipped_train = data.load_corpus(train_path)
    dev_examples, skipped_dev = data.load_corpus(dev_path)
    table = _load_table(args.glove, train_examples + dev_examples,
                        seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    echo_config(resolved, args.out)
    print(f"train: {len(train_examples)} examples ({skipped_train} skipped); "
          f"dev: {len(dev_examples)} ({skipped_dev} skipped)")

    def log_row(row):
        trans = row.get("dev_transition_accuracy")
        trans_text = f"\ttrans_acc={trans:.4f}" if trans is not None else ""
        print(f"step={row['step']}\tlr={row['lr']:.6g}\t"
              f"train_loss={row['train_loss']:.4f}\t"
              f"dev_acc={row['dev_accuracy']:.4f}{trans_text}")

    result = trainer.train(train_examples, dev_examples, table, config,
                           args.out, resume=args.resume, log_fn=log_row)
    log_path = os.path.join(args.out, "train_log.tsv")
    with open(log_path, "w") as f:
        f.write("step\tlr\ttrain_loss\tdev_accuracy\tdev_transition_accuracy\n")
        for row in result.log_rows:
            trans = row.get("dev_transition_accuracy")
            f.write(f"{row['step']}\t{row['lr']:.8g}\t{row['train_loss']:.6f}\t"
                    f"{row['dev_accuracy']:.6f}\t"
                    f"{'' if trans is None else f'{trans:.6f}'}\n")
    plots.training_curves(result.log_rows, os.path.join(args.out, "train_curves.png"))
    print(f"best dev accuracy {result.best_dev_acc:.4f}; "
          f"checkpoints in {args.out}")
    return 0


def _load_model(checkpoint_path):
    ckpt = trainer.load_checkpoint(checkpoint_path)
    config, enc_config, cls_config, store, stats = ckpt.build_model()
    return ckpt, config, enc_config, cls_config, store, stats


def cmd_eval(args):
    ckpt, config, enc_config, cls_config, store, stats = _load_model(args.checkpoint)
    examples, skipped = data.load_corpus(args.input)
    table = _load_table(args.glove, examples, seed=config.seed)
    dataset = data.PreparedDataset(examples, table, config.n_tokens)
    report = trainer.evaluate(dataset, table, store, stats, enc_config,
                              cls_config, config.loss_weights(),
                              batch_size=config.batch_size,
                              transition_mode=args.transition_mode)
    lines = report.lines()
    lines.insert(0, f"checkpoint\t{args.checkpoint} (step {ckpt.step})")
    lines.insert(1, f"skipped_unlabeled\t{skipped}")
    for line in lines:
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.tsv"), "w") as f:
            f.write("\n".join(lines) + "\n")
        with open(os.path.join(args.out, "config.txt"), "w") as f:
            f.write("\n".join(f"{k} = {v}" for k, v in sorted(ckpt.config.items()))
                    + "\n")
        plots.eval_length_buckets(report, os.path.join(args.out, "eval_buckets.png"))
        print(f"report written to {args.out}")
    return 0


def cmd_encode(args):
    ckpt, config, enc_config, cls_config, store, stats = _load_model(args.checkpoint)
    if args.unparsed and enc_config.variant != "full":
        raise UsageError(
            f"variant {enc_config.variant!r} cannot parse; unparsed input "
            "needs a checkpoint of the full variant")
    with open(args.input, encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    sentences = []
    for line in lines:
        if args.unparsed:
            tokens, actions = line.split(), None
        else:
            tokens, actions = tr.parse_to_transitions(line)
        sentences.append((tokens, actions))
    vocab = sorted({tok for tokens, _ in sentences for tok in tokens})
    table = data.load_glove(_glove_path(args.glove), vocab, oov_seed=config.seed)
    mode_config = enc_config.with_mode("predicted" if args.unparsed else "given")
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for tokens, actions in sentences:
            embeds = table.rows(table.ids(tokens))
            result = encoder.encode(embeds, actions, store, stats, mode_config,
                                    need_backward=False)
            out.write("\t".join(f"{x:.8g}" for x in result.h) + "\n")
    finally:
        if args.out:
            out.close()
            print(f"{len(sentences)} encodings written to {args.out}")
    return 0


def cmd_trace(args):
    tokens = args.sentence.split()
    if args.transitions:
        actions = tr.parse_action_string(args.transitions)
    else:
        parsed_tokens, actions = tr.parse_to_transitions(args.sentence)
        tokens = parsed_tokens
    width = 2
    stack = thinstack.ThinStack(len(actions), width)
    labels = {0: "<zero>"}
    v = 0
    zero = np.zeros(width)
    print("t\taction\tS[t]\tQ")
    for i, action in enumerate(actions):
        t = i + 1
        note = ""
        if action == tr.REDUCE:
            left_idx, right_idx = stack.step(action, None, lambda l, r: zero)
            if left_idx == 0 or right_idx == 0:
                note = "\t[degenerate-pop]"
            labels[t] = f"( {labels[left_idx]} {labels[right_idx]} )"
        else:
            if action == tr.SHIFT and v < len(tokens):
                labels[t] = tokens[v]
            else:
                labels[t] = "<empty>"
                if action == tr.PAD:
                    note = "\t[pad]"
            if action == tr.SHIFT:
                v += 1
            stack.step(action, zero, None)
        q = " ".join(str(x) for x in stack.live_rows())
        print(f"{t}\t{tr.ACTION_NAMES[int(action)]}\t{labels[t]}\t[{q}]{note}")
    return 0


def cmd_bench(args):
    resolved = resolve_config(args, BENCH_KEYS)
    threads = args.threads if args.threads else ops.num_threads()
    config = bench_mod.BenchConfig(
        models=tuple(resolved["models"].split(",")),
        batch_sizes=tuple(int(x) for x in resolved["batch_sizes"].split(",")),
        length=resolved["length"], dim=resolved["dim"], reps=resolved["reps"],
        warmup=resolved["warmup"], naive_sentences=resolved["naive_sentences"],
        seed=resolved["seed"], dtype=resolved["dtype"], threads=threads)
    report = bench_mod.run_bench(config, progress=lambda msg: print(msg))
    print()
    print(report.table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.txt"), "w") as f:
            f.write(report.table() + "\n")
        with open(os.path.join(args.out, "bench.jsonl"), "w") as f:
            f.write(report.jsonl() + "\n")
        echo_config(resolved, args.out)
        plots.bench_throughput(report, os.path.join(args.out,
                                                    "bench_throughput.png"))
        print(f"report written to {args.out}")
    return 0


def cmd_gradcheck(args):
    variant = args.variant
    dim = args.dim
    tracking = args.tracking_dim if args.tracking_dim >= 0 else (
        0 if variant == "pi_nt" else 4)
    enc_config = encoder.EncoderConfig(
        variant=variant, dim=dim, tracking_dim=tracking or None, max_tokens=6,
        keep_embed=1.0)
    cls_config = classifier.ClassifierConfig(mlp_layers=1, mlp_dim=8,
                                             keep_mlp=1.0)
    store, stats = classifier.init_pair_model(enc_config, cls_config,
                                              ops.make_rng(args.seed))
    rng = ops.make_rng(args.seed + 1)

    def side(batch, n_target):
        embeds = np.zeros((batch, n_target, encoder.GLOVE_DIM))
        mask = np.zeros((batch, n_target), bool)
        actions = []
        for lane in range(batch):
            n = 2 + int(rng.integers(n_target - 1))
            tokens, acts = tr.tree_to_transitions(tr.random_tree(n, rng))
            _, padded = tr.pad_and_crop(tokens, acts, n_target)
            embeds[lane, :n] = rng.standard_normal((n, encoder.GLOVE_DIM)) * 0.1
            mask[lane, :n] = True
            actions.append(padded)
        return embeds, mask, np.stack(actions)

    ep, mp, ap = side(2, 4)
    eh, mh, ah = side(2, 4)
    batch = classifier.PairBatch(ep, mp, ap, eh, mh, ah, np.array([0, 2]))
    weights = classifier.LossWeights(alpha=1.3 if variant == "full" else 0.0,
                                     l2=1e-4)

    def loss():
        return classifier.total_loss(batch, store, stats, enc_config,
                                     cls_config, weights, mode="eval",
                                     need_backward=False).total

    store.zero_grads()
    classifier.total_loss(batch, store, stats, enc_config, cls_config,
                          weights, mode="eval", need_backward=True)
    analytic = {name: store.grad(name).copy() for name in store.names()}
    failures = 0
    for name in store.names():
        numeric = oracles.finite_diff_grad(loss, store, h=1e-4, names=[name])
        err = oracles.grad_mismatch({name: analytic[name]}, numeric, floor=1e-2)
        ok = err <= 1e-4
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\tmax_rel_err={err:.3e}")
    print(f"{'all blocks pass' if failures == 0 else f'{failures} blocks FAILED'}")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spinn",
        description="Stack-based sentence encoders: training, evaluation, "
                    "encoding, tracing, benchmarking, and gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="convert a corpus to the cached format")
    p.add_argument("--input", required=True, help="corpus .jsonl file")
    p.add_argument("--out", required=True, help="output cache file")
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True,
                   help="directory with train.jsonl and dev.jsonl, or 'toy'")
    p.add_argument("--glove", required=True,
                   help="embedding text file, or 'toy'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_registry_flags(p, MODEL_KEYS)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="corpus .jsonl file")
    p.add_argument("--glove", required=True)
    p.add_argument("--out", help="directory for report and figure")
    p.add_argument("--transition-mode", choices=("given", "predicted"),
                   default=None, help="override the variant's native mode")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("encode", help="emit sentence vectors, one line each")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="one sentence per line (binary parses unless --unparsed)")
    p.add_argument("--glove", required=True)
    p.add_argument("--out", help="output file (default stdout)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--parsed", action="store_true", default=True)
    mode.add_argument("--unparsed", action="store_true", default=False,
                      help="predict transitions internally (full variant only)")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("trace", help="print a per-step stack trace")
    p.add_argument("sentence", help="space-separated tokens, or a binary parse")
    p.add_argument("--transitions",
                   help="actions like SSSRR; omit to derive from a parse")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("bench", help="feedforward throughput harness")
    p.add_argument("--out", help="directory for reports and figure")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (default: SPINN_THREADS or 1)")
    _add_registry_flags(p, BENCH_KEYS)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every parameter block")
    p.add_argument("--variant", choices=encoder.VARIANTS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--tracking-dim", dest="tracking_dim", type=int, default=-1)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


KNOWN_ERRORS = (ops.ConfigError, ops.ShapeError, data.DataError,
                trainer.TrainError, bench_mod.BenchError, tr.ParseError,
                tr.ValidityError, FloatingPointError, FileNotFoundError,
                ValueError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except KNOWN_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
