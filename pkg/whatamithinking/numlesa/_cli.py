from typing import Annotated, Iterator, Optional, Sequence
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
import logging
import sys

import numpy as np
import typer

from ._common import LABELS, T_Mode
from ._struct import struct, field, replace
from ._errors import Error, UsageError, VocabError
from ._codec import dumps, unstructure, serialize
from ._corpus import (
    AnnotatedNote,
    generate_corpus,
    generate_unannotated,
    load_corpus,
    load_terms,
    save_corpus,
    split_corpus,
)
from ._numtok import save_vocab
from ._config import (
    LabConfig,
    default_output_root,
    file_digest,
    load_config,
    resolved_model_config,
    run_hash,
)
from ._train import (
    build_model,
    finetune_classify,
    lab_vocab,
    load_checkpoint,
    model_from_checkpoint,
    prefinetune,
    run_protocol,
    save_checkpoint,
    snapshot,
)
from ._eval import (
    RunMetrics,
    completion_probe,
    compare_embeddings,
    evaluate_classifier,
    export_scatter,
    format_metrics_table,
    pearson_log,
    write_metrics,
    write_scatter,
    write_similarity,
)

__all__ = [
    "RunManifest",
    "AblationRow",
    "ABLATION_MODES",
    "ablation_variants",
    "ablation_table",
    "app",
    "main",
]

logger = logging.getLogger(__name__)

ABLATION_MODES: tuple[T_Mode, ...] = ("plain", "lesa", "lesa_xval")

app = typer.Typer(
    name="numlesa",
    help="Label-embedding attention and value-scaled number embeddings for clinical notes.",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


@struct
class RunManifest:
    command: str
    output_dir: str
    started: str
    config_path: str | None = None
    # sha256 over the resolved config and the inputs below
    config_hash: str | None = None
    inputs: dict[str, str | int | None] = field(default_factory=dict)
    finished: str | None = None
    exit_status: int | None = None


@struct(frozen=True)
class AblationRow:
    mode: T_Mode
    prefinetune: bool
    macro_f1: float
    macro_f1_std: float


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", help="JSON config file.", exists=True)
]
SetOption = Annotated[
    Optional[list[str]], typer.Option("--set", help="Override as section.field=<json>.")
]
OutOption = Annotated[
    Optional[Path], typer.Option("--out", help="Output directory (default under $NUMLESA_OUTPUT_ROOT).")
]
ForceOption = Annotated[bool, typer.Option("--force", help="Reuse a non-empty output directory.")]
LogLevelOption = Annotated[str, typer.Option("--log-level", help="Logging level.")]
CheckpointOption = Annotated[Path, typer.Option("--checkpoint", help="Checkpoint file.", exists=True)]
CorpusOption = Annotated[
    Path,
    typer.Option("--corpus", help="Corpus file or a directory written by generate.", exists=True),
]
ResumeOption = Annotated[
    Optional[Path],
    typer.Option("--resume", help="resume_<stage>.pt left by an interrupted run.", exists=True),
]


def _prepare_out(command: str, out: Path | None, force: bool) -> Path:
    out = out or default_output_root() / command
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configure_logging(level: str, out: Path) -> list[logging.Handler]:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise UsageError(f"unknown log level {level!r}")
    formatter = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers: list[logging.Handler] = [
        logging.StreamHandler(sys.stderr),
        logging.FileHandler(out / "run.log", encoding="utf-8"),
    ]
    root = logging.getLogger()
    root.setLevel(numeric)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return handlers


@contextmanager
def _session(
    command: str,
    out: Path | None,
    force: bool,
    log_level: str,
    config_path: Path | None = None,
) -> Iterator[tuple[RunManifest, Path]]:
    """Output directory, logging and manifest for one command; errors become exit codes."""
    try:
        out = _prepare_out(command, out, force)
        handlers = _configure_logging(log_level, out)
    except UsageError as exc:
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(exc.exit_code)
    manifest = RunManifest(
        command=command,
        output_dir=str(out),
        started=_now(),
        config_path=None if config_path is None else str(config_path),
    )
    status = 0
    try:
        yield manifest, out
    except Error as exc:
        status = exc.exit_code
        logger.error("%s failed: %s", command, exc)
    except BaseException:
        status = 1
        logger.exception("%s failed unexpectedly", command)
        raise
    finally:
        manifest.finished = _now()
        manifest.exit_status = status
        (out / "manifest.json").write_bytes(dumps(manifest))
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()
    if status:
        raise typer.Exit(status)


def _load(
    manifest: RunManifest,
    out: Path,
    config: Path | None,
    overrides: list[str] | None,
    inputs: dict[str, str | int | None] | None = None,
    corpus_spec: Path | None = None,
) -> LabConfig:
    lab = load_config(config, overrides or (), corpus_spec)
    manifest.inputs = dict(inputs or {})
    manifest.config_hash = run_hash(lab, manifest.inputs)
    (out / "config.json").write_bytes(dumps(lab))
    return lab


def _digests(name: str, path: Path | None) -> dict[str, str | int | None]:
    """File digests of an input, one per json-lines file for a corpus directory."""
    if path is None:
        return {name: None}
    if path.is_dir():
        return {f"{name}/{child.name}": file_digest(child) for child in sorted(path.glob("*.jsonl"))}
    return {name: file_digest(path)}


def _read_corpus(path: Path) -> tuple[list[AnnotatedNote], list[AnnotatedNote]]:
    if path.is_dir():
        unannotated = path / "unannotated.jsonl"
        return (
            load_corpus(path / "corpus.jsonl"),
            load_corpus(unannotated) if unannotated.exists() else [],
        )
    return load_corpus(path), []


@app.command()
def generate(
    config: ConfigOption = None,
    spec: Annotated[
        Optional[Path],
        typer.Option("--spec", help="JSON file holding only the corpus section.", exists=True),
    ] = None,
    set_: SetOption = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Write the annotated and unannotated synthetic corpora."""
    with _session("generate", out, force, log_level, config) as (manifest, out):
        lab = _load(manifest, out, config, set_, _digests("spec", spec), spec)
        save_corpus(out / "corpus.jsonl", generate_corpus(lab.corpus))
        save_corpus(out / "unannotated.jsonl", generate_unannotated(lab.corpus))
        logger.info("corpus written to %s", out)


@app.command()
def pretrain(
    corpus: CorpusOption,
    config: ConfigOption = None,
    set_: SetOption = None,
    seed: Annotated[int, typer.Option(help="Seed for weights and masking.")] = 0,
    resume: ResumeOption = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Stage A: masked-language-model training on the unannotated notes."""
    with _session("pretrain", out, force, log_level, config) as (manifest, out):
        inputs = {"seed": seed, **_digests("corpus", corpus), **_digests("resume", resume)}
        lab = _load(manifest, out, config, set_, inputs)
        annotated, unannotated = _read_corpus(corpus)
        if corpus.is_file():
            annotated, unannotated = [], annotated
        vocab = lab_vocab(lab, annotated, unannotated)
        save_vocab(out / "vocab.txt", vocab)
        model = build_model(resolved_model_config(lab, len(vocab)), vocab, seed)
        save_checkpoint(out / "initial.pt", snapshot(model, lab.train, vocab, stage="initial", seed=seed))
        resumed = None if resume is None else load_checkpoint(resume)
        checkpoint = prefinetune(model, unannotated, lab.train, vocab, seed, out, resumed)
        save_checkpoint(out / "checkpoint.pt", checkpoint)
        logger.info("best validation loss %.4f at epoch %d", checkpoint.best_metric, checkpoint.epoch)


@app.command()
def finetune(
    checkpoint: CheckpointOption,
    corpus: CorpusOption,
    resume: ResumeOption = None,
    config: ConfigOption = None,
    set_: SetOption = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Stage B: token classification from a checkpoint, scored on the test split."""
    with _session("finetune", out, force, log_level, config) as (manifest, out):
        inputs = {
            **_digests("checkpoint", checkpoint),
            **_digests("corpus", corpus),
            **_digests("resume", resume),
        }
        lab = _load(manifest, out, config, set_, inputs)
        annotated, _ = _read_corpus(corpus)
        best, metrics = finetune_classify(
            load_checkpoint(checkpoint), annotated, lab.train, out,
            lab.eval.exclude_o, lab.eval.batch_size,
            None if resume is None else load_checkpoint(resume),
        )
        save_checkpoint(out / "checkpoint.pt", best)
        write_metrics(out / "metrics.json", metrics)
        typer.echo(format_metrics_table(metrics))


@app.command("eval")
def eval_(
    checkpoint: CheckpointOption,
    corpus: CorpusOption,
    config: ConfigOption = None,
    set_: SetOption = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Metrics, confusion matrix and (with value embeddings) number scatter on the test split."""
    with _session("eval", out, force, log_level, config) as (manifest, out):
        inputs = {**_digests("checkpoint", checkpoint), **_digests("corpus", corpus)}
        lab = _load(manifest, out, config, set_, inputs)
        loaded = load_checkpoint(checkpoint)
        model = model_from_checkpoint(loaded)
        annotated, _ = _read_corpus(corpus)
        _, _, test = split_corpus(annotated, seed=loaded.train_config.split_seed)
        metrics = evaluate_classifier(
            model, test, loaded.vocab, lab.eval.exclude_o, lab.eval.batch_size, seed=loaded.seed
        )
        write_metrics(out / "metrics.json", metrics)
        np.savetxt(
            out / "confusion.csv", np.asarray(metrics.confusion), fmt="%d", delimiter=",",
            header=",".join(label.value for label in LABELS), comments="",
        )
        typer.echo(format_metrics_table(metrics))
        if model.config.xval_enabled:
            pairs = export_scatter(model, test, loaded.vocab)
            write_scatter(out / "scatter.csv", pairs)
            if len(pairs) > 1:
                typer.echo(f"log-value pearson r {pearson_log(pairs):.4f} over {len(pairs)} numbers")


@app.command()
def probe(
    checkpoint: CheckpointOption,
    text: Annotated[Optional[str], typer.Option(help="Text with exactly one mask.")] = None,
    k: Annotated[Optional[int], typer.Option("-k", help="Tokens to report.")] = None,
    config: ConfigOption = None,
    set_: SetOption = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Fill a single masked slot with the language-model and number heads."""
    with _session("probe", out, force, log_level, config) as (manifest, out):
        inputs = {**_digests("checkpoint", checkpoint), "text": text, "k": k}
        lab = _load(manifest, out, config, set_, inputs)
        loaded = load_checkpoint(checkpoint)
        result = completion_probe(
            model_from_checkpoint(loaded),
            loaded.vocab,
            text or lab.eval.probe_text,
            k or lab.eval.top_k,
        )
        (out / "probe.json").write_bytes(dumps(result))
        typer.echo(result.text)
        for token, prob in result.top:
            typer.echo(f"  {token:<20} {prob:.4f}")
        typer.echo(f"  number head: {result.value:.4f}")


@app.command()
def compare(
    reference: Annotated[Path, typer.Option(help="Reference checkpoint.", exists=True)],
    candidate: Annotated[Path, typer.Option(help="Candidate checkpoint.", exists=True)],
    terms: Annotated[Optional[Path], typer.Option(help="JSON list of terms.", exists=True)] = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Cosine similarity of term embeddings between two checkpoints."""
    with _session("compare", out, force, log_level) as (manifest, out):
        manifest.inputs = {
            **_digests("reference", reference),
            **_digests("candidate", candidate),
            **_digests("terms", terms),
        }
        manifest.config_hash = run_hash(None, manifest.inputs)
        ref, cand = load_checkpoint(reference), load_checkpoint(candidate)
        if ref.vocab.digest != cand.vocab.digest:
            raise VocabError("reference and candidate checkpoints use different vocabularies")
        similarity = compare_embeddings(
            ref.state["token_embedding.weight"],
            cand.state["token_embedding.weight"],
            ref.vocab,
            load_terms(terms),
        )
        write_similarity(out / "similarity.csv", similarity)
        typer.echo(f"mean diagonal similarity {similarity.mean_diagonal():.4f}")


def ablation_variants(
    lab: LabConfig, weighted_modes: Sequence[str] | None = None
) -> list[tuple[str, LabConfig]]:
    """Every mode with and without prefinetuning, named like ``lesa-after``.

    ``weighted_modes`` lists the modes trained with the class-weighted loss;
    without it every variant keeps ``train.class_weighted``.
    """
    if weighted_modes is not None:
        unknown = sorted(set(weighted_modes) - set(ABLATION_MODES))
        if unknown:
            raise UsageError(f"unknown mode(s) {', '.join(unknown)} for --class-weighted")
    variants = []
    for mode in ABLATION_MODES:
        weighted = lab.train.class_weighted if weighted_modes is None else mode in weighted_modes
        for prefinetune_on in (False, True):
            train = replace(
                lab.train, mode=mode, prefinetune=prefinetune_on, class_weighted=weighted
            )
            name = f"{mode}-{'after' if prefinetune_on else 'before'}"
            variants.append((name, replace(lab, train=train)))
    return variants


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'mode':<10} {'prefinetune':<12} macro F1"]
    for row in rows:
        stage = "after" if row.prefinetune else "before"
        lines.append(f"{row.mode:<10} {stage:<12} {row.macro_f1:.4f} ± {row.macro_f1_std:.4f}")
    return "\n".join(lines)


@app.command()
def ablate(
    config: ConfigOption = None,
    set_: SetOption = None,
    jobs: Annotated[int, typer.Option(min=1, help="Seeds trained in parallel.")] = 1,
    class_weighted: Annotated[
        Optional[list[str]],
        typer.Option(
            "--class-weighted",
            help="Mode trained with the class-weighted loss; repeat per mode. "
            "Without it every mode follows train.class_weighted.",
        ),
    ] = None,
    out: OutOption = None,
    force: ForceOption = False,
    log_level: LogLevelOption = "INFO",
) -> None:
    """Macro F1 for every mode with and without prefinetuning, over all seeds."""
    with _session("ablate", out, force, log_level, config) as (manifest, out):
        weighted = None if class_weighted is None else ",".join(sorted(set(class_weighted)))
        lab = _load(manifest, out, config, set_, {"class_weighted": weighted})
        variants = ablation_variants(lab, class_weighted)
        corpus = generate_corpus(lab.corpus)
        unannotated = generate_unannotated(lab.corpus)
        # shared by every variant, so seed n starts each one from the same weights
        vocab = lab_vocab(lab, corpus, unannotated)
        rows = []
        for name, variant in variants:
            logger.info("ablation %s", name)
            prefinetune_on = variant.train.prefinetune
            metrics: RunMetrics = run_protocol(
                variant, out / name, jobs, corpus, unannotated if prefinetune_on else [], vocab
            )
            rows.append(
                AblationRow(
                    mode=variant.train.mode,
                    prefinetune=prefinetune_on,
                    macro_f1=metrics.macro_f1,
                    macro_f1_std=metrics.macro_f1_std or 0.0,
                )
            )
        (out / "ablation.json").write_bytes(serialize(unstructure(rows)))
        table = ablation_table(rows)
        (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        typer.echo(table)


def main() -> None:
    app()
