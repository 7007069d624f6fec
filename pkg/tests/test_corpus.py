import pytest

from whatamithinking.numlesa import (
    LABELS,
    AnnotatedNote,
    CorpusParseError,
    CorpusSpec,
    Label,
    LabelError,
    NumberSpan,
    StratificationError,
    ValidationError,
    class_counts,
    class_weights,
    convert,
    detect_numbers,
    generate_corpus,
    generate_unannotated,
    inverse_frequency_weights,
    load_class_labels,
    load_corpus,
    load_terms,
    save_corpus,
    split_corpus,
    validate,
)


class TestGenerate:
    def test_deterministic(self, spec, corpus):
        assert generate_corpus(spec) == corpus

    def test_different_seed_differs(self, spec, corpus):
        other = generate_corpus(CorpusSpec(n_notes=spec.n_notes, seed=spec.seed + 1))
        assert other != corpus

    def test_spans_are_sound(self, corpus):
        for note in corpus:
            validate(note)
            assert note.spans
            assert [_.values for _ in detect_numbers(note.text)] == [_.values for _ in note.spans]
            for span in note.spans:
                assert isinstance(span.label, Label)
                lo, hi = CorpusSpec().value_ranges[span.label]
                for value in span.values:
                    # rounding to the rendered precision can nudge a value past its bound
                    assert lo - 0.05 <= value <= hi + 0.05

    def test_class_mix_is_dominated_by_o(self):
        counts = class_counts(generate_corpus(CorpusSpec(n_notes=300, seed=1)))
        assert counts[Label.O] / sum(counts.values()) > 0.6
        assert all(counts[label] > 0 for label in LABELS)

    def test_unannotated_notes(self, spec, unannotated):
        assert len(unannotated) == spec.n_unannotated
        assert all(not note.spans for note in unannotated)
        assert unannotated[0].id == "unannotated-00000"
        assert generate_unannotated(spec) == unannotated


class TestCorpusSpec:
    def test_defaults_validate(self):
        validate(CorpusSpec())

    def test_mix_must_sum_to_one(self):
        with pytest.raises(ValidationError) as exc_info:
            convert({"class_mix": {"O": 0.5, "Cp": 0.1}}, CorpusSpec)
        assert "sum" in {_.issue_type for _ in exc_info.value.issues}

    def test_value_range_order(self):
        with pytest.raises(ValidationError) as exc_info:
            convert({"value_ranges": {label.value: [5, 1] for label in LABELS}}, CorpusSpec)
        assert {_.issue_type for _ in exc_info.value.issues} == {"order"}

    def test_negative_noise_rate(self):
        with pytest.raises(ValidationError) as exc_info:
            convert({"noise_rate": -0.1}, CorpusSpec)
        assert str(exc_info.value.issues[0].pointer) == "$.noise_rate"


class TestAnnotatedNote:
    def test_overlapping_spans_rejected(self):
        data = {
            "id": "x",
            "text": "FC 120",
            "spans": [
                {"start": 3, "end": 6, "values": [120.0], "label": "FC"},
                {"start": 4, "end": 6, "values": [20.0], "label": "FC"},
            ],
        }
        with pytest.raises(ValidationError) as exc_info:
            convert(data, AnnotatedNote)
        assert "order" in {_.issue_type for _ in exc_info.value.issues}

    def test_span_must_parse_to_its_values(self):
        note = AnnotatedNote(
            id="x",
            text="FC 120",
            spans=(NumberSpan(start=3, end=6, values=(121.0,), label=Label.FC),),
        )
        with pytest.raises(ValidationError):
            validate(note)


class TestSplit:
    def test_sizes_and_partition(self, corpus):
        train, val, test = split_corpus(corpus, seed=0)
        n = len(corpus)
        assert len(train) == round(0.7 * n)
        assert len(val) == round(0.15 * n)
        assert len(train) + len(val) + len(test) == n
        ids = [note.id for note in (*train, *val, *test)]
        assert sorted(ids) == sorted(note.id for note in corpus)

    def test_every_class_in_every_split(self):
        corpus = generate_corpus(CorpusSpec(n_notes=300, seed=2))
        for split in split_corpus(corpus):
            counts = class_counts(split)
            assert all(counts[label] > 0 for label in LABELS)

    def test_each_class_follows_the_ratios(self):
        corpus = generate_corpus(CorpusSpec(n_notes=1000, seed=5))
        totals = class_counts(corpus)
        for ratio, split in zip((0.70, 0.15, 0.15), split_corpus(corpus, seed=1)):
            counts = class_counts(split)
            for label in LABELS:
                assert abs(counts[label] / totals[label] - ratio) <= 0.03, label

    def test_deterministic(self, corpus):
        assert split_corpus(corpus, seed=4) == split_corpus(corpus, seed=4)

    def test_rare_class_cannot_be_stratified(self):
        mix = {label: 0.0 for label in LABELS}
        mix[Label.O] = 1.0
        corpus = generate_corpus(CorpusSpec(n_notes=20, class_mix=mix))
        with pytest.raises(StratificationError):
            split_corpus(corpus)

    def test_bad_ratios(self, corpus):
        with pytest.raises(ValueError):
            split_corpus(corpus, ratios=(0.5, 0.5, 0.5))


class TestClassWeights:
    def test_inverse_frequency(self):
        weights = inverse_frequency_weights({"a": 1, "b": 3})
        assert weights["a"] == pytest.approx(1.5)
        assert weights["b"] == pytest.approx(0.5)

    def test_rare_classes_weigh_more(self, corpus):
        weights = class_weights(corpus)
        assert weights[Label.O] == min(weights.values())

    def test_absent_class(self):
        note = AnnotatedNote(
            id="x",
            text="FC 120",
            spans=(NumberSpan(start=3, end=6, values=(120.0,), label=Label.FC),),
        )
        with pytest.raises(LabelError):
            class_weights([note])


class TestPackagedData:
    def test_class_labels(self):
        labels = load_class_labels()
        assert [_.id for _ in labels] == list(LABELS)
        assert all(len(_.keywords) >= 2 for _ in labels if _.id is not Label.O)

    def test_terms(self):
        assert len(load_terms()) == 20


class TestPersistence:
    def test_save_load(self, tmp_path, corpus):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, corpus)
        assert load_corpus(path) == corpus

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_bytes(b"")
        assert load_corpus(path) == []

    def test_missing_header(self, tmp_path, corpus):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, corpus[:3])
        lines = path.read_bytes().split(b"\n")
        path.write_bytes(b"\n".join(lines[1:]))
        with pytest.raises(CorpusParseError) as exc_info:
            load_corpus(path)
        assert exc_info.value.line == 1

    def test_blank_record(self, tmp_path, corpus):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, corpus[:3])
        lines = path.read_bytes().split(b"\n")
        path.write_bytes(b"\n".join([lines[0], lines[1], b"", *lines[2:]]))
        with pytest.raises(CorpusParseError) as exc_info:
            load_corpus(path)
        assert exc_info.value.line == 3

    def test_bad_record(self, tmp_path, corpus):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, corpus[:3])
        lines = path.read_bytes().split(b"\n")
        lines[2] = b'{"id": "x", "text": 5}'
        path.write_bytes(b"\n".join(lines))
        with pytest.raises(CorpusParseError) as exc_info:
            load_corpus(path)
        assert exc_info.value.line == 3
        assert str(exc_info.value).startswith("line 3:")
