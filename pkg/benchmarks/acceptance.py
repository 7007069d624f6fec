# type: ignore
"""Multi-seed desk-scale runs checking the directional claims on the synthetic corpus.

Usage: python acceptance.py [OUTPUT_DIR] [--set section.field=<json> ...]

Trains five variants over every configured seed, then reports the ablation
gaps, the completion probe, the number scatter and the embedding drift.
"""
from time import perf_counter
from pathlib import Path
import logging
import sys

import numpy as np
import torch

from whatamithinking.numlesa import (
    NUM_ID,
    CorpusSpec,
    Label,
    RunMetrics,
    compare_embeddings,
    completion_probe,
    export_scatter,
    generate_corpus,
    generate_unannotated,
    lab_vocab,
    load_checkpoint,
    load_config,
    load_terms,
    loads,
    model_from_checkpoint,
    pearson_log,
    replace,
    run_protocol,
    split_corpus,
)

from config import print_config

DESK_CONFIG = Path(__file__).parent.parent / "configs" / "desk.json"
VARIANTS = {
    "plain-before": ("plain", False),
    "plain-after": ("plain", True),
    "lesa-before": ("lesa", False),
    "lesa-after": ("lesa", True),
    "lesa_xval-after": ("lesa_xval", True),
}


def seed_f1(run_dir: Path, seed: int) -> float:
    path = run_dir / f"seed-{seed}" / "metrics.json"
    return loads(path.read_bytes(), RunMetrics).macro_f1


def report(name: str, passed: bool, detail: str) -> bool:
    print(f"  [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return passed


def drift(run_dir: Path, seed: int, stage: str, terms: list[str]) -> float:
    initial = load_checkpoint(run_dir / f"seed-{seed}" / "initial.pt")
    trained = load_checkpoint(run_dir / f"seed-{seed}" / f"{stage}.pt")
    similarity = compare_embeddings(
        initial.state["token_embedding.weight"],
        trained.state["token_embedding.weight"],
        initial.vocab,
        terms,
    )
    return similarity.mean_diagonal()


def main(argv: list[str]) -> int:
    print_config()
    torch.set_default_dtype(torch.float64)
    overrides = [argv[i + 1] for i, arg in enumerate(argv) if arg == "--set"]
    positional = [arg for i, arg in enumerate(argv) if arg != "--set" and (i == 0 or argv[i - 1] != "--set")]
    out = Path(positional[0] if positional else "acceptance")
    lab = load_config(DESK_CONFIG, overrides)
    seeds = lab.train.seeds
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    corpus = generate_corpus(lab.corpus)
    unannotated = generate_unannotated(lab.corpus)
    vocab = lab_vocab(lab, corpus, unannotated)
    start = perf_counter()
    for name, (mode, prefinetune) in VARIANTS.items():
        variant = replace(lab, train=replace(lab.train, mode=mode, prefinetune=prefinetune))
        run_protocol(variant, out / name, 1, corpus, unannotated if prefinetune else [], vocab)
    print(f"\nTrained {len(VARIANTS)} variants x {len(seeds)} seeds in {(perf_counter() - start) / 60:.1f} min\n")

    f1 = {name: np.array([seed_f1(out / name, seed) for seed in seeds]) for name in VARIANTS}
    majority = len(seeds) // 2 + 1
    strong = max(1, round(0.8 * len(seeds)))
    results = []

    gap = f1["lesa_xval-after"] - f1["plain-after"]
    results.append(
        report(
            "value embeddings + label attention beat the plain encoder",
            int(np.sum(gap >= 0.05)) >= strong,
            f"gap >= 0.05 in {int(np.sum(gap >= 0.05))}/{len(seeds)} seeds, mean gap {gap.mean():.4f}",
        )
    )
    lesa_gain = f1["lesa-after"] - f1["lesa-before"]
    plain_gain = f1["plain-after"] - f1["plain-before"]
    results.append(
        report(
            "prefinetuning helps label attention",
            int(np.sum(lesa_gain >= 0.02)) >= majority,
            f"gain >= 0.02 in {int(np.sum(lesa_gain >= 0.02))}/{len(seeds)} seeds",
        )
    )
    results.append(
        report(
            "prefinetuning barely moves the plain encoder",
            abs(plain_gain.mean()) < 0.02,
            f"mean change {plain_gain.mean():.4f}",
        )
    )

    lo, hi = CorpusSpec().value_ranges[Label.G]
    probe_hits = 0
    for seed in seeds:
        checkpoint = load_checkpoint(out / "lesa_xval-after" / f"seed-{seed}" / "prefinetune.pt")
        result = completion_probe(model_from_checkpoint(checkpoint), checkpoint.vocab, lab.eval.probe_text, 1)
        token, _ = result.top[0]
        probe_hits += token == checkpoint.vocab.token(NUM_ID) and lo <= result.value <= hi
    results.append(
        report(
            "completion probe fills a plausible gradient",
            probe_hits >= strong,
            f"[NUM] on top with a value in [{lo:g}, {hi:g}] for {probe_hits}/{len(seeds)} seeds",
        )
    )

    _, _, test = split_corpus(corpus, seed=lab.train.split_seed)
    checkpoint = load_checkpoint(out / "lesa_xval-after" / f"seed-{seeds[0]}" / "finetune.pt")
    pairs = export_scatter(model_from_checkpoint(checkpoint), test, checkpoint.vocab)
    r = pearson_log(pairs)
    results.append(report("number head tracks true values", r > 0.5, f"log-value pearson r {r:.4f}"))

    terms = load_terms(lab.eval.terms)
    ordered = 0
    for seed in seeds:
        plain = drift(out / "plain-after", seed, "prefinetune", terms)
        lesa = drift(out / "lesa-after", seed, "finetune", terms)
        lesa_xval = drift(out / "lesa_xval-after", seed, "finetune", terms)
        ordered += plain > lesa > lesa_xval
    results.append(
        report(
            "embedding drift grows with each added component",
            ordered >= majority,
            f"ordered in {ordered}/{len(seeds)} seeds",
        )
    )
    print(f"\n{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
