"""Feedforward throughput harness on random input data.

Three encoders are timed across batch sizes: the batched thin-stack tree
encoder (given transitions, no tracking), a naive recursive tree encoder
that can only process one example at a time, and a sequence LSTM baseline.
Before any timing, the fast and naive tree encoders are checked for
agreement on the same inputs; a mismatch aborts the benchmark.

All comparisons are single-threaded by default; an optional lane-parallel
mode (SPINN_THREADS > 1) splits the batch across worker threads and is
reported as separate rows. Batched-vs-single ratios here reflect CPU
batching gains (weight reuse across lanes and amortized per-step work),
not any absolute hardware claim.
"""

import json
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from spinn import encoder, oracles, ops
from spinn import transitions as tr
from spinn.encoder import EncoderConfig

VOCAB_SIZE = 10000


class BenchError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    models: tuple = ("thin_stack", "naive_treernn", "sequence_lstm")
    batch_sizes: tuple = (1, 32, 64, 128, 256, 512)
    length: int = 30            # tokens per sentence, at most 30
    dim: int = 300
    reps: int = 3
    warmup: int = 1
    naive_sentences: int = 16   # per timed repetition of the naive model
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1
    verify_sentences: int = 8

    def __post_init__(self):
        if self.length > 30:
            raise ops.ConfigError("benchmark sentences are capped at 30 tokens")
        if self.reps < 3:
            raise ops.ConfigError("at least 3 timed repetitions are required")


@dataclass
class BenchReport:
    rows: list
    environment: dict
    header: str

    def table(self):
        lines = [self.header, ""]
        fmt = "{:<24} {:>6} {:>12} {:>12} {:>10} {:>14}"
        lines.append(fmt.format("model", "batch", "sents/sec", "median_s",
                                "sentences", "floats/sent"))
        for row in self.rows:
            lines.append(fmt.format(
                row["model"], row["batch_size"],
                f"{row['sentences_per_sec']:.1f}",
                f"{row['median_seconds']:.4f}", row["sentences"],
                row["state_floats_per_sentence"]))
        lines.append("")
        for key, value in self.environment.items():
            lines.append(f"# {key}: {value}")
        return "\n".join(lines)

    def jsonl(self):
        out = [json.dumps({"environment": self.environment, "header": self.header})]
        out.extend(json.dumps(row) for row in self.rows)
        return "\n".join(out)

    def cell(self, model, batch_size):
        for row in self.rows:
            if row["model"] == model and row["batch_size"] == batch_size:
                return row
        raise KeyError((model, batch_size))


def make_inputs(config, n_sentences):
    """Random length-L sentences: uniform token draws from a 10k vocabulary
    and random valid transition sequences from random binary trees."""
    rng = ops.make_rng(config.seed)
    table = rng.uniform(-0.1, 0.1,
                        size=(VOCAB_SIZE, encoder.GLOVE_DIM)).astype(ops.default_dtype())
    n = config.length
    embeds = np.zeros((n_sentences, n, encoder.GLOVE_DIM), dtype=ops.default_dtype())
    actions = np.zeros((n_sentences, 2 * n - 1), dtype=np.int8)
    trees = []
    for s in range(n_sentences):
        tree = tr.random_tree(n, rng)
        trees.append(tree)
        _, acts = tr.tree_to_transitions(tree)
        actions[s] = acts
        ids = rng.integers(0, VOCAB_SIZE, size=n)
        embeds[s] = table[ids]
    return embeds, actions, trees


def build_params(config, rng_seed=1):
    enc_config = EncoderConfig(variant="pi_nt", dim=config.dim,
                               max_tokens=config.length)
    store, stats = encoder.init_params(enc_config, ops.make_rng(rng_seed))
    return enc_config, store, stats


def naive_encode(tree, embeds_row, store, stats):
    """Per-example recursive tree encoder (the conventional implementation);
    operates on a single sentence at a time."""
    leaves = iter(range(embeds_row.shape[0]))

    def lookup(_token):
        return embeds_row[next(leaves)]

    h, _ = oracles.recursive_treelstm(tree, lookup, store, stats)
    return h


def sequence_lstm_init(dim, rng):
    store = ops.ParamStore()
    store.add("lstm.W", ops.he_init(encoder.GLOVE_DIM + dim, 4 * dim, rng))
    store.add("lstm.b", ops.zeros(4 * dim))
    return store


def sequence_lstm_baseline(embeds, store, need_backward=False):
    """Standard LSTM over token embeddings; the final hidden state is the
    encoding. Returns (h, caches)."""
    batch, n, _ = embeds.shape
    dim = store.value("lstm.b").shape[0] // 4
    w = store.value("lstm.W")
    packed = ops.PackedMatrix(w)
    h = np.zeros((batch, dim), dtype=embeds.dtype)
    c = np.zeros((batch, dim), dtype=embeds.dtype)
    caches = [] if need_backward else None
    for pos in range(n):
        h, c, cache = ops.lstm_cell(np.ascontiguousarray(embeds[:, pos]), h, c,
                                    w, store.value("lstm.b"), packed=packed)
        if need_backward:
            caches.append(cache)
    return h, caches


def sequence_lstm_backward(caches, d_h, store):
    dim = d_h.shape[1]
    d_c = np.zeros_like(d_h)
    w = store.value("lstm.W")
    for cache in reversed(caches):
        _, d_h, d_c, d_w, d_b = ops.lstm_cell_backward(cache, d_h, d_c, w)
        store.accumulate("lstm.W", d_w)
        store.accumulate("lstm.b", d_b)


def verify_equivalence(config, enc_config, store, stats, embeds, actions, trees):
    """Fast and naive tree encoders must agree before any timing."""
    n = min(config.verify_sentences, embeds.shape[0])
    batched = encoder.encode_batch(embeds[:n], actions[:n], store, stats,
                                   enc_config, need_backward=False)
    tol = 1e-9 if embeds.dtype == np.float64 else 1e-3
    for s in range(n):
        ref = naive_encode(trees[s], embeds[s], store, stats)
        diff = float(np.max(np.abs(batched.h[s].astype(np.float64) - ref)))
        if diff > tol:
            raise BenchError(
                f"fast/naive mismatch on sentence {s}: max|dh| = {diff:.3e} "
                f"(tolerance {tol:.0e}); refusing to time incorrect code")


def encode_batch_lanes(embeds, actions, store, stats, enc_config, threads):
    """Lane-parallel batched encode: contiguous lane blocks per worker.

    Lanes never interact in eval mode, so results are identical to the
    single-threaded run regardless of the thread count.
    """
    if threads <= 1 or embeds.shape[0] == 1:
        return encoder.encode_batch(embeds, actions, store, stats, enc_config,
                                    need_backward=False)
    bounds = np.linspace(0, embeds.shape[0], threads + 1, dtype=int)
    chunks = [(embeds[lo:hi], actions[lo:hi])
              for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(encoder.encode_batch, e, a, store, stats,
                               enc_config, "eval", None, None, False)
                   for e, a in chunks]
        results = [f.result() for f in futures]
    return np.concatenate([r.h for r in results])


def _time_reps(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(config, progress=None):
    """Run the configured grid and return a BenchReport."""
    previous_dtype = ops.default_dtype()
    ops.set_default_dtype(config.dtype)
    try:
        max_batch = max(config.batch_sizes)
        pool_size = max(max_batch, 64, config.naive_sentences,
                        config.verify_sentences)
        embeds, actions, trees = make_inputs(config, pool_size)
        enc_config, store, stats = build_params(config)
        verify_equivalence(config, enc_config, store, stats, embeds, actions, trees)
        lstm_store = sequence_lstm_init(config.dim, ops.make_rng(2))

        n_steps = 2 * config.length - 1
        thin_floats = (n_steps + 1) * 2 * config.dim
        naive_floats = n_steps * 2 * config.dim  # one <h,c> pair per tree node
        rows = []

        def note(msg):
            if progress is not None:
                progress(msg)

        for batch in config.batch_sizes:
            group = int(np.ceil(max(batch, 32) / batch))  # batches per rep
            sentences = group * batch

            if "thin_stack" in config.models:
                def run_thin():
                    for g in range(group):
                        lo = (g * batch) % max(pool_size - batch + 1, 1)
                        encoder.encode_batch(embeds[lo:lo + batch],
                                             actions[lo:lo + batch], store,
                                             stats, enc_config,
                                             need_backward=False)

                median = _time_reps(run_thin, config.reps, config.warmup)
                rows.append({
                    "model": "thin_stack", "batch_size": batch,
                    "median_seconds": median, "sentences": sentences,
                    "sentences_per_sec": sentences / median,
                    "state_floats_per_sentence": thin_floats,
                })
                note(f"thin_stack batch={batch}: {rows[-1]['sentences_per_sec']:.1f}/s")
                if config.threads > 1:
                    def run_threaded():
                        for g in range(group):
                            lo = (g * batch) % max(pool_size - batch + 1, 1)
                            encode_batch_lanes(embeds[lo:lo + batch],
                                               actions[lo:lo + batch], store,
                                               stats, enc_config, config.threads)

                    median = _time_reps(run_threaded, config.reps, config.warmup)
                    rows.append({
                        "model": f"thin_stack[threads={config.threads}]",
                        "batch_size": batch, "median_seconds": median,
                        "sentences": sentences,
                        "sentences_per_sec": sentences / median,
                        "state_floats_per_sentence": thin_floats,
                    })

            if "naive_treernn" in config.models:
                count = config.naive_sentences

                def run_naive():
                    for s in range(count):
                        naive_encode(trees[s], embeds[s], store, stats)

                median = _time_reps(run_naive, config.reps, config.warmup)
                rows.append({
                    "model": "naive_treernn", "batch_size": batch,
                    "median_seconds": median, "sentences": count,
                    "sentences_per_sec": count / median,
                    "state_floats_per_sentence": naive_floats,
                })
                note(f"naive_treernn batch={batch}: {rows[-1]['sentences_per_sec']:.1f}/s")

            if "sequence_lstm" in config.models:
                def run_lstm():
                    for g in range(group):
                        lo = (g * batch) % max(pool_size - batch + 1, 1)
                        sequence_lstm_baseline(embeds[lo:lo + batch], lstm_store)

                median = _time_reps(run_lstm, config.reps, config.warmup)
                rows.append({
                    "model": "sequence_lstm", "batch_size": batch,
                    "median_seconds": median, "sentences": sentences,
                    "sentences_per_sec": sentences / median,
                    "state_floats_per_sentence": 2 * config.dim,
                })
                note(f"sequence_lstm batch={batch}: {rows[-1]['sentences_per_sec']:.1f}/s")

        environment = {
            "platform": platform.platform(),
            "processor": platform.processor() or "unknown",
            "cpu_count": __import__("os").cpu_count(),
            "threads": config.threads,
            "dtype": config.dtype,
            "dim": config.dim,
            "sentence_length": config.length,
            "reps": config.reps,
            "numpy": np.__version__,
        }
        header = ("Feedforward throughput, random inputs. All models on CPU; "
                  "batched-vs-single ratios reflect CPU batching gains only. "
                  "The naive tree encoder processes one example at a time "
                  "regardless of the requested batch size.")
        return BenchReport(rows, environment, header)
    finally:
        ops.set_default_dtype(str(np.dtype(previous_dtype)))
