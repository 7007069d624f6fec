import csv

import pytest
from typer.testing import CliRunner

from whatamithinking.numlesa import (
    AblationRow,
    RunMetrics,
    LabConfig,
    UsageError,
    app,
    ablation_table,
    ablation_variants,
    deserialize,
    load_checkpoint,
    load_corpus,
    loads,
    replace,
)

runner = CliRunner()

TINY = [
    "--set", "corpus.n_notes=80",
    "--set", "corpus.n_unannotated=30",
    "--set", "model.d_model=8",
    "--set", "model.n_heads=2",
    "--set", "model.d_ff=16",
    "--set", "model.max_length=96",
    "--set", "train.max_epochs=1",
    "--set", "train.batch_size=8",
    "--set", "train.lr=0.005",
    "--set", "train.seeds=[0, 1]",
]


def _invoke(*args):
    return runner.invoke(app, [str(_) for _ in args])


def _manifest(out):
    return deserialize((out / "manifest.json").read_bytes())


def _same_weights(left, right):
    left, right = load_checkpoint(left).state, load_checkpoint(right).state
    return left.keys() == right.keys() and all(left[name].equal(right[name]) for name in left)


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("generate")
    result = _invoke("generate", *TINY, "--out", out, "--force")
    assert result.exit_code == 0, result.output
    return out


class TestGenerate:
    def test_outputs(self, generated):
        assert len(load_corpus(generated / "corpus.jsonl")) == 80
        assert len(load_corpus(generated / "unannotated.jsonl")) == 30
        manifest = _manifest(generated)
        assert manifest["command"] == "generate"
        assert manifest["exit_status"] == 0
        assert len(manifest["config_hash"]) == 64
        assert (generated / "config.json").exists()
        assert (generated / "run.log").exists()

    def test_same_config_same_bytes(self, generated, tmp_path):
        result = _invoke("generate", *TINY, "--out", tmp_path)
        assert result.exit_code == 0, result.output
        for name in ("corpus.jsonl", "unannotated.jsonl"):
            assert (tmp_path / name).read_bytes() == (generated / name).read_bytes()


    def test_bare_corpus_spec(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_bytes(b'{"n_notes": 40, "n_unannotated": 10, "seed": 9}')
        out = tmp_path / "out"
        result = _invoke("generate", "--spec", spec, "--out", out)
        assert result.exit_code == 0, result.output
        assert len(load_corpus(out / "corpus.jsonl")) == 40
        assert len(load_corpus(out / "unannotated.jsonl")) == 10
        assert len(_manifest(out)["inputs"]["spec"]) == 64

    def test_corpus_spec_is_not_a_config_file(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_bytes(b'{"n_notes": 40}')
        result = _invoke("generate", "--config", spec, "--out", tmp_path / "out")
        assert result.exit_code == 3


class TestExitCodes:
    def test_invalid_config(self, tmp_path):
        result = _invoke("generate", "--set", "train.lr=-1", "--out", tmp_path)
        assert result.exit_code == 3
        assert _manifest(tmp_path)["exit_status"] == 3

    def test_non_empty_output(self, tmp_path):
        (tmp_path / "leftover.txt").write_text("x")
        result = _invoke("generate", *TINY, "--out", tmp_path)
        assert result.exit_code == 2
        assert not (tmp_path / "manifest.json").exists()

    def test_unknown_log_level(self, tmp_path):
        result = _invoke("generate", "--log-level", "LOUD", "--out", tmp_path)
        assert result.exit_code == 2

    def test_not_a_checkpoint(self, tmp_path):
        fake = tmp_path / "fake.pt"
        fake.write_bytes(b"not a checkpoint")
        out = tmp_path / "probe"
        result = _invoke("probe", "--checkpoint", fake, "--out", out)
        assert result.exit_code == 4
        assert _manifest(out)["exit_status"] == 4


class TestPipeline:
    def test_pretrain_finetune_eval_probe_compare(self, tmp_path, generated):
        pre = tmp_path / "pretrain"
        result = _invoke("pretrain", "--corpus", generated, *TINY, "--seed", 3, "--out", pre)
        assert result.exit_code == 0, result.output
        for name in ("vocab.txt", "initial.pt", "checkpoint.pt", "loss_prefinetune.jsonl"):
            assert (pre / name).exists(), name

        fine = tmp_path / "finetune"
        result = _invoke(
            "finetune", "--checkpoint", pre / "checkpoint.pt", "--corpus", generated, *TINY, "--out", fine
        )
        assert result.exit_code == 0, result.output
        metrics = loads((fine / "metrics.json").read_bytes(), RunMetrics)
        assert metrics.seed == 3
        assert "macro" in result.output

        evaluated = tmp_path / "eval"
        result = _invoke(
            "eval", "--checkpoint", fine / "checkpoint.pt", "--corpus", generated, *TINY, "--out", evaluated
        )
        assert result.exit_code == 0, result.output
        with open(evaluated / "confusion.csv", newline="") as file:
            rows = list(csv.reader(file))
        assert len(rows) == 9
        with open(evaluated / "scatter.csv", newline="") as file:
            assert next(csv.reader(file)) == ["truth", "predicted", "label"]

        probed = tmp_path / "probe"
        result = _invoke("probe", "--checkpoint", pre / "checkpoint.pt", "-k", 2, "--out", probed)
        assert result.exit_code == 0, result.output
        assert len(deserialize((probed / "probe.json").read_bytes())["top"]) == 2

        compared = tmp_path / "compare"
        result = _invoke(
            "compare", "--reference", pre / "initial.pt", "--candidate", pre / "checkpoint.pt",
            "--out", compared,
        )
        assert result.exit_code == 0, result.output
        with open(compared / "similarity.csv", newline="", encoding="utf-8") as file:
            rows = list(csv.reader(file))
        assert len(rows) == 21

    def test_probe_with_two_masks(self, tmp_path, generated):
        pre = tmp_path / "pretrain"
        assert _invoke("pretrain", "--corpus", generated, *TINY, "--out", pre).exit_code == 0
        out = tmp_path / "probe"
        result = _invoke(
            "probe", "--checkpoint", pre / "initial.pt", "--text", "FC <mask> sat <mask>", "--out", out
        )
        assert result.exit_code == 1
        assert _manifest(out)["exit_status"] == 1


class TestResume:
    @pytest.fixture(scope="class")
    def pretrained(self, tmp_path_factory, generated):
        out = tmp_path_factory.mktemp("pretrain")
        result = _invoke(
            "pretrain", "--corpus", generated, *TINY, "--set", "train.max_epochs=2", "--out", out, "--force"
        )
        assert result.exit_code == 0, result.output
        return out

    def test_hash_covers_seed_and_corpus(self, tmp_path, generated, pretrained):
        other = tmp_path / "seed-1"
        result = _invoke(
            "pretrain", "--corpus", generated, *TINY, "--set", "train.max_epochs=2",
            "--seed", 1, "--out", other,
        )
        assert result.exit_code == 0, result.output
        first, second = _manifest(pretrained), _manifest(other)
        assert first["config_hash"] != second["config_hash"]
        assert (first["inputs"]["seed"], second["inputs"]["seed"]) == (0, 1)
        assert first["inputs"]["corpus/corpus.jsonl"] == second["inputs"]["corpus/corpus.jsonl"]

    def test_pretrain_resume_of_a_finished_run(self, tmp_path, generated, pretrained):
        out = tmp_path / "resumed"
        result = _invoke(
            "pretrain", "--corpus", generated, *TINY, "--set", "train.max_epochs=2",
            "--resume", pretrained / "resume_prefinetune.pt", "--out", out,
        )
        assert result.exit_code == 0, result.output
        assert _same_weights(out / "checkpoint.pt", pretrained / "checkpoint.pt")
        assert _manifest(out)["config_hash"] != _manifest(pretrained)["config_hash"]

    def test_pretrain_resume_with_another_seed(self, tmp_path, generated, pretrained):
        out = tmp_path / "resumed"
        result = _invoke(
            "pretrain", "--corpus", generated, *TINY, "--set", "train.max_epochs=2", "--seed", 1,
            "--resume", pretrained / "resume_prefinetune.pt", "--out", out,
        )
        assert result.exit_code == 4
        assert _manifest(out)["exit_status"] == 4

    def test_finetune_resume_of_a_finished_run(self, tmp_path, generated, pretrained):
        fine = tmp_path / "finetune"
        args = ["finetune", "--checkpoint", pretrained / "checkpoint.pt", "--corpus", generated, *TINY]
        assert _invoke(*args, "--out", fine).exit_code == 0
        out = tmp_path / "resumed"
        result = _invoke(*args, "--resume", fine / "resume_finetune.pt", "--out", out)
        assert result.exit_code == 0, result.output
        assert _same_weights(out / "checkpoint.pt", fine / "checkpoint.pt")
        assert (out / "metrics.json").read_bytes() == (fine / "metrics.json").read_bytes()


class TestAblate:
    def test_every_mode_before_and_after(self, tmp_path):
        result = _invoke(
            "ablate", *TINY, "--set", "corpus.n_notes=60", "--set", "corpus.n_unannotated=20",
            "--out", tmp_path,
        )
        assert result.exit_code == 0, result.output
        rows = deserialize((tmp_path / "ablation.json").read_bytes())
        assert [(_["mode"], _["prefinetune"]) for _ in rows] == [
            ("plain", False), ("plain", True),
            ("lesa", False), ("lesa", True),
            ("lesa_xval", False), ("lesa_xval", True),
        ]
        assert (tmp_path / "lesa-after" / "seed-1" / "finetune.pt").exists()
        assert (tmp_path / "plain-before" / "metrics.json").exists()
        assert not (tmp_path / "plain-before" / "seed-0" / "prefinetune.pt").exists()
        for mode in ("plain", "lesa", "lesa_xval"):
            assert _same_weights(
                tmp_path / f"{mode}-before" / "seed-0" / "initial.pt",
                tmp_path / f"{mode}-after" / "seed-0" / "initial.pt",
            ), mode

    def test_class_weighted_per_mode(self):
        variants = dict(ablation_variants(LabConfig(), ["lesa", "lesa_xval"]))
        assert {name: _.train.class_weighted for name, _ in variants.items()} == {
            "plain-before": False, "plain-after": False,
            "lesa-before": True, "lesa-after": True,
            "lesa_xval-before": True, "lesa_xval-after": True,
        }
        assert variants["lesa-after"].train.prefinetune
        assert not variants["lesa-before"].train.prefinetune
        assert variants["lesa_xval-before"].train.mode == "lesa_xval"

    def test_class_weighted_defaults_to_the_config(self):
        lab = LabConfig()
        lab = replace(lab, train=replace(lab.train, class_weighted=True))
        assert all(variant.train.class_weighted for _, variant in ablation_variants(lab))

    def test_class_weighted_unknown_mode(self, tmp_path):
        with pytest.raises(UsageError):
            ablation_variants(LabConfig(), ["lesa", "bert"])
        result = _invoke("ablate", *TINY, "--class-weighted", "bert", "--out", tmp_path)
        assert result.exit_code == 2
        assert not (tmp_path / "plain-before").exists()

    def test_table(self):
        table = ablation_table(
            [AblationRow(mode="lesa", prefinetune=True, macro_f1=0.61234, macro_f1_std=0.02)]
        )
        assert table.splitlines()[1].split() == ["lesa", "after", "0.6123", "±", "0.0200"]
