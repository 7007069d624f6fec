# type: ignore
"""Tokenization and training-step throughput for each encoder mode at desk scale."""
from time import perf_counter
from pathlib import Path
import timeit

import numpy as np
import torch

from whatamithinking.numlesa import (
    AdamW,
    build_model,
    encode_notes,
    generate_corpus,
    generate_unannotated,
    lab_vocab,
    load_config,
    masked_batches,
    pretrain_objective,
    resolved_model_config,
    replace,
    train_step,
    tokenize,
)

from config import print_config

DESK_CONFIG = Path(__file__).parent.parent / "configs" / "desk.json"
NUMBER_OF_EXECUTIONS = 20
REPEAT_TIMES = 5
MODES = ("plain", "lesa", "xval", "lesa_xval")


def bench_tokenize(notes):
    texts = [note.text for note in notes]
    times = timeit.repeat(
        lambda: [tokenize(text) for text in texts], number=1, repeat=REPEAT_TIMES
    )
    per_note_us = min(times) / len(texts) * 1e6
    print(f"  tokenize:              {per_note_us:.2f} µs/note")


def bench_train_step(lab, mode, corpus, unannotated, vocab):
    lab = replace(lab, train=replace(lab.train, mode=mode))
    model = build_model(resolved_model_config(lab, len(vocab)), vocab, seed=0)
    optimizer = AdamW(model.parameters(), lr=lab.train.lr)
    examples = encode_notes(unannotated, vocab, model.config.max_length)
    batches = masked_batches(
        examples, lab.train.batch_size, lab.train.mask_rate, np.random.default_rng(0)
    )
    step = lambda: train_step(model, optimizer, batches[0], pretrain_objective)
    step()  # warm up
    times = timeit.repeat(step, number=NUMBER_OF_EXECUTIONS, repeat=REPEAT_TIMES)
    per_step_ms = min(times) / NUMBER_OF_EXECUTIONS * 1e3
    print(f"  train step ({mode:<9}): {per_step_ms:.2f} ms/batch of {lab.train.batch_size}")


def main():
    print_config()
    torch.set_default_dtype(torch.float64)
    lab = load_config(DESK_CONFIG)
    spec = replace(lab.corpus, n_notes=200, n_unannotated=200)
    start = perf_counter()
    corpus = generate_corpus(spec)
    unannotated = generate_unannotated(spec)
    print(f"\nGenerated {len(corpus) + len(unannotated)} notes in {perf_counter() - start:.2f} s")
    vocab = lab_vocab(lab, corpus, unannotated)
    print(f"Vocabulary: {len(vocab)} tokens\n")

    print("--- Benchmarking ---")
    print(f"Number of executions per trial: {NUMBER_OF_EXECUTIONS}")
    print(f"Number of repeated trials: {REPEAT_TIMES} (best time taken)\n")
    bench_tokenize(corpus)
    for mode in MODES:
        bench_train_step(lab, mode, corpus, unannotated, vocab)


if __name__ == "__main__":
    main()
