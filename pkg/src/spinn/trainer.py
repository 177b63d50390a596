"""Optimization loop: RMSProp with a step-decayed learning rate, train/eval
mode switching for dropout and batch norm, checkpointing with exact resume,
and early stopping on dev accuracy (the best-on-dev checkpoint is kept).

Per-variant defaults (learning rate, L2, transition weight, keep rates,
tracker size, MLP depth) come from the tuned values table in the README.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from spinn import classifier, data, encoder, ops
from spinn.classifier import ClassifierConfig, LossWeights, PairBatch
from spinn.encoder import EncoderConfig
from spinn.transitions import PAD

CHECKPOINT_MAGIC = b"SPNN"
CHECKPOINT_VERSION = 1

VARIANT_DEFAULTS = {
    "pi_nt": dict(lr=3e-4, l2=3e-6, alpha=0.0, keep_embed=0.83, keep_mlp=0.94,
                  mlp_layers=2),
    "pi": dict(lr=7e-3, l2=2e-5, alpha=0.0, keep_embed=0.92, keep_mlp=0.93,
               mlp_layers=2),
    "full": dict(lr=2e-3, l2=3e-5, alpha=3.9, keep_embed=0.86, keep_mlp=0.94,
                 mlp_layers=1),
}


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "full"
    dim: int = 300
    tracking_dim: int = None       # variant default when None
    n_tokens: int = 25
    mlp_layers: int = None
    mlp_dim: int = 1024
    lr: float = None
    lr_decay: float = 0.75
    lr_decay_every: int = 10000
    batch_size: int = 32
    max_steps: int = 250000
    l2: float = None
    alpha: float = None
    keep_embed: float = None
    keep_mlp: float = None
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-6
    eval_interval: int = 1000
    seed: int = 1
    clip_norm: float = 0.0         # 0 disables clipping
    enforce_valid: bool = False
    swap_forget_gates: bool = False

    def __post_init__(self):
        defaults = VARIANT_DEFAULTS.get(self.variant)
        if defaults is None:
            raise ops.ConfigError(f"unknown variant {self.variant!r}")
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.batch_size < 2:
            raise ops.ConfigError("batch_size must be >= 2 (batch norm)")
        for name in ("keep_embed", "keep_mlp"):
            rate = getattr(self, name)
            if not 0.0 < rate <= 1.0:
                raise ops.ConfigError(f"{name} must be in (0, 1], got {rate}")
        if self.alpha < 0 or self.l2 < 0 or self.lr <= 0:
            raise ops.ConfigError("lr must be positive; alpha and l2 nonnegative")

    def encoder_config(self, transition_mode="given"):
        return EncoderConfig(
            variant=self.variant, dim=self.dim,
            tracking_dim=self.tracking_dim or None,
            max_tokens=self.n_tokens, transition_mode=transition_mode,
            enforce_valid=self.enforce_valid,
            swap_forget_gates=self.swap_forget_gates,
            keep_embed=self.keep_embed)

    def classifier_config(self):
        return ClassifierConfig(mlp_layers=self.mlp_layers, mlp_dim=self.mlp_dim,
                                keep_mlp=self.keep_mlp)

    def loss_weights(self):
        return LossWeights(alpha=self.alpha, l2=self.l2)


# ---------------------------------------------------------------------------
# optimizer


def rmsprop_step(store, lr, rho=0.9, eps=1e-6, clip_norm=0.0):
    """rms <- rho*rms + (1-rho)*g^2; theta <- theta - lr*g/sqrt(rms+eps);
    gradients are zeroed afterwards."""
    if clip_norm > 0.0:
        total = 0.0
        for _, _, grad, _ in store.items():
            total += float(np.sum(grad * grad))
        norm = np.sqrt(total)
        if norm > clip_norm:
            scale = clip_norm / norm
            for _, _, grad, _ in store.items():
                grad *= scale
    for name, value, grad, rms in store.items():
        rms *= rho
        rms += (1.0 - rho) * grad * grad
        value -= lr * grad / np.sqrt(rms + eps)
    store.zero_grads()


def lr_schedule(initial_lr, step, decay=0.75, every=10000):
    """Stepwise decay: initial * decay^(step // every)."""
    return initial_lr * decay ** (step // every)


# ---------------------------------------------------------------------------
# checkpoint format


def _pack_tensors(tensors):
    chunks = [struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr64.ndim))
        chunks.append(struct.pack(f"<{arr64.ndim}Q", *arr64.shape))
        chunks.append(arr64.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TrainError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]


def _unpack_tensors(reader):
    tensors = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        tensors.append((name, arr.copy()))
    return tensors


def _pack_rng(rng):
    s = rng.bit_generator.state
    return (s["state"]["state"].to_bytes(16, "little")
            + s["state"]["inc"].to_bytes(16, "little")
            + struct.pack("<II", s["has_uint32"], s["uinteger"]))


def _unpack_rng(raw):
    rng = np.random.Generator(np.random.PCG64(0))
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[0:16], "little"),
                  "inc": int.from_bytes(raw[16:32], "little")},
        "has_uint32": struct.unpack("<I", raw[32:36])[0],
        "uinteger": struct.unpack("<I", raw[36:40])[0],
    }
    return rng


@dataclass
class Checkpoint:
    config: dict
    step: int
    best_dev_acc: float
    epoch: int
    offset: int
    values: list
    rms: list
    stats: list
    rng_state: bytes

    def build_model(self):
        """Reconstruct (train_config, enc_config, cls_config, store, stats)."""
        config = TrainConfig(**self.config)
        store = ops.ParamStore()
        for name, arr in self.values:
            store.add(name, arr)
        for name, arr in self.rms:
            store.rms(name)[...] = arr.astype(ops.default_dtype())
        stats = {name: np.ascontiguousarray(arr, dtype=ops.default_dtype())
                 for name, arr in self.stats}
        return config, config.encoder_config(), config.classifier_config(), store, stats

    def rng(self):
        return _unpack_rng(self.rng_state)


def save_checkpoint(path, config_dict, step, best_dev_acc, epoch, offset,
                    store, stats, rng):
    header = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", step),
        struct.pack("<d", best_dev_acc),
        struct.pack("<QQ", epoch, offset),
        struct.pack("<I", len(header)), header,
        _pack_tensors([(name, value) for name, value, _, _ in store.items()]),
        _pack_tensors([(name, rms) for name, _, _, rms in store.items()]),
        _pack_tensors(sorted(stats.items())),
        struct.pack("<I", 40), _pack_rng(rng),
    ])
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    reader = _Reader(blob)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise TrainError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise TrainError(f"{path}: unsupported checkpoint version {version}")
    step = reader.u64()
    best = reader.f64()
    epoch = reader.u64()
    offset = reader.u64()
    config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    values = _unpack_tensors(reader)
    rms = _unpack_tensors(reader)
    stats = _unpack_tensors(reader)
    rng_len = reader.u32()
    rng_state = reader.take(rng_len)
    return Checkpoint(config, step, best, epoch, offset, values, rms, stats,
                      rng_state)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    per_label_accuracy: dict
    transition_accuracy: float          # None for variants without a head
    length_buckets: dict                # bucket -> (accuracy, count)
    loss: float
    n_examples: int

    def lines(self):
        out = [f"examples\t{self.n_examples}",
               f"accuracy\t{self.accuracy:.4f}",
               f"loss\t{self.loss:.4f}"]
        for label, (acc, count) in self.per_label_accuracy.items():
            out.append(f"accuracy[{label}]\t{acc:.4f}\t(n={count})")
        if self.transition_accuracy is not None:
            out.append(f"transition_accuracy\t{self.transition_accuracy:.4f}")
        for bucket, (acc, count) in self.length_buckets.items():
            out.append(f"accuracy[premise {bucket} words]\t{acc:.4f}\t(n={count})")
        return out


LENGTH_BUCKETS = (("<10", 0, 9), ("10-19", 10, 19), (">=20", 20, 10 ** 9))


def to_pair_batch(batch, table):
    return PairBatch(
        table.rows(batch.ids_premise), batch.mask_premise, batch.actions_premise,
        table.rows(batch.ids_hypothesis), batch.mask_hypothesis,
        batch.actions_hypothesis, batch.labels)


def evaluate(dataset, table, store, stats, enc_config, cls_config, weights,
             batch_size=32, transition_mode=None):
    """Full-dataset evaluation in eval mode (short final batch kept).

    The full variant runs its own predicted transitions, scored against the
    gold parses step by step at non-pad positions; other variants consume
    the given parses.
    """
    if transition_mode is None:
        transition_mode = "predicted" if enc_config.variant == "full" else "given"
    predicted = transition_mode == "predicted"
    correct = np.zeros(0, dtype=bool)
    labels_all = np.zeros(0, dtype=np.int64)
    lengths = np.zeros(0, dtype=np.int64)
    losses = []
    trans_hits = 0
    trans_cells = 0
    count = len(dataset)
    for lo in range(0, count, batch_size):
        batch = dataset.slice(np.arange(lo, min(lo + batch_size, count)))
        pair = to_pair_batch(batch, table)
        if predicted:
            pred_cfg = enc_config.with_mode("predicted")
            embeds = np.concatenate([pair.embeds_premise, pair.embeds_hypothesis])
            mask = np.concatenate([pair.mask_premise, pair.mask_hypothesis])
            gold = np.concatenate([pair.actions_premise, pair.actions_hypothesis])
            enc = encoder.encode_batch(embeds, None, store, stats, pred_cfg,
                                       mode="eval", token_mask=mask,
                                       need_backward=False)
            # a lane with n' real tokens finishes its own run at step 2n'-1;
            # rows are write-once, so its encoding is still in that row
            h = encoder.rows_at_final_step(enc, mask)
            b = pair.size
            feats, _ = classifier.pair_features(h[:b], h[b:])
            logits, probs, _ = classifier.classify(feats, store, stats, cls_config,
                                                   mode="eval")
            loss, _, _ = ops.softmax_xent(logits, pair.labels)
            losses.append(float(loss) * pair.size)
            hits, cells = classifier.free_running_transition_accuracy(
                enc.executed, gold)
            trans_hits += hits
            trans_cells += cells
            batch_probs = probs
        else:
            result = classifier.total_loss(pair, store, stats, enc_config,
                                           cls_config, LossWeights(),
                                           mode="eval", need_backward=False)
            losses.append(result.label_loss * pair.size)
            batch_probs = result.probs
        correct = np.concatenate([correct, batch_probs.argmax(axis=1) == pair.labels])
        labels_all = np.concatenate([labels_all, pair.labels])
        lengths = np.concatenate([lengths, data.premise_lengths(batch)])

    per_label = {}
    for i, name in enumerate(classifier.LABELS):
        sel = labels_all == i
        n = int(np.count_nonzero(sel))
        per_label[name] = (float(correct[sel].mean()) if n else 0.0, n)
    buckets = {}
    for name, lo, hi in LENGTH_BUCKETS:
        sel = (lengths >= lo) & (lengths <= hi)
        n = int(np.count_nonzero(sel))
        buckets[name] = (float(correct[sel].mean()) if n else 0.0, n)
    trans_acc = (trans_hits / trans_cells) if predicted and trans_cells else None
    return EvalReport(float(correct.mean()), per_label, trans_acc, buckets,
                      sum(losses) / max(len(correct), 1), len(correct))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    log_rows: list = field(default_factory=list)
    best_dev_acc: float = 0.0
    steps_run: int = 0


def _first_nonfinite(store):
    for name, value, grad, _ in store.items():
        if not np.all(np.isfinite(value)):
            return name + " (value)"
        if not np.all(np.isfinite(grad)):
            return name + " (gradient)"
    return "loss only"


def train(train_examples, dev_examples, table, config, out_dir, resume=None,
          log_fn=None, stop_fn=None):
    """Run the loop; returns a TrainResult pointing at best/last checkpoints.

    Dev accuracy is evaluated every eval_interval steps and at the end; the
    best-on-dev parameters are kept in best.spnn, and last.spnn supports
    bit-exact resumption (identical to an uninterrupted run). stop_fn, if
    given, sees each eval log row and may return True to stop early.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.spnn")
    last_path = os.path.join(out_dir, "last.spnn")
    config_dict = asdict(config)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        # max_steps is a stopping criterion, not model configuration
        relevant = {k: v for k, v in config_dict.items() if k != "max_steps"}
        saved = {k: v for k, v in ckpt.config.items() if k != "max_steps"}
        if saved != relevant:
            raise TrainError("resume config does not match the checkpoint")
        _, enc_config, cls_config, store, stats = ckpt.build_model()
        train_rng = ckpt.rng()
        step = ckpt.step
        epoch, offset = ckpt.epoch, ckpt.offset
        best_dev = ckpt.best_dev_acc
    else:
        enc_config = config.encoder_config()
        cls_config = config.classifier_config()
        store, stats = classifier.init_pair_model(enc_config, cls_config,
                                                  ops.make_rng(config.seed))
        train_rng = ops.make_rng(config.seed + 1)
        step = 0
        epoch, offset = 0, 0
        best_dev = 0.0

    weights = config.loss_weights()
    train_set = data.PreparedDataset(train_examples, table, config.n_tokens)
    dev_set = data.PreparedDataset(dev_examples, table, config.n_tokens)
    if len(train_set) < config.batch_size:
        raise TrainError(f"need at least {config.batch_size} training examples")
    order = data.epoch_order(len(train_set), config.seed, epoch)
    result = TrainResult(best_path, last_path, best_dev_acc=best_dev)

    def log(row):
        result.log_rows.append(row)
        if log_fn is not None:
            log_fn(row)

    def run_eval_and_checkpoint(at_step, train_loss):
        nonlocal best_dev
        report = evaluate(dev_set, table, store, stats, enc_config, cls_config,
                          weights, batch_size=config.batch_size)
        row = {
            "step": at_step,
            "lr": lr_schedule(config.lr, at_step, config.lr_decay,
                              config.lr_decay_every),
            "train_loss": train_loss,
            "dev_accuracy": report.accuracy,
            "dev_transition_accuracy": report.transition_accuracy,
        }
        log(row)
        if report.accuracy >= best_dev:
            best_dev = report.accuracy
            result.best_dev_acc = best_dev
            save_checkpoint(best_path, config_dict, at_step, best_dev, epoch,
                            offset, store, stats, train_rng)
        save_checkpoint(last_path, config_dict, at_step, best_dev, epoch,
                        offset, store, stats, train_rng)
        return stop_fn(row) if stop_fn is not None else False

    last_loss = float("nan")
    while step < config.max_steps:
        if offset + config.batch_size > len(train_set):
            epoch += 1
            offset = 0
            order = data.epoch_order(len(train_set), config.seed, epoch)
        batch = train_set.slice(order[offset:offset + config.batch_size])
        offset += config.batch_size
        pair = to_pair_batch(batch, table)
        lr = lr_schedule(config.lr, step, config.lr_decay, config.lr_decay_every)
        try:
            loss = classifier.total_loss(pair, store, stats, enc_config,
                                         cls_config, weights, mode="train",
                                         rng=train_rng, need_backward=True)
            rmsprop_step(store, lr, config.rmsprop_rho, config.rmsprop_eps,
                         config.clip_norm)
            last_loss = loss.total
            step += 1
            if step % config.eval_interval == 0:
                if run_eval_and_checkpoint(step, last_loss):
                    result.steps_run = step
                    return result
        except FloatingPointError as err:
            raise TrainError(
                f"aborted at step {step}: {err}; first non-finite tensor: "
                f"{_first_nonfinite(store)}") from err
    if step % config.eval_interval != 0 or step == 0:
        run_eval_and_checkpoint(step, last_loss)
    result.steps_run = step
    return result
