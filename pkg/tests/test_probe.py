"""Tests for evaluation probes, reports and sweeps."""

import csv
import io

import numpy as np
import pytest

from h2dilr.core.errors import ConfigError, DatasetError
from h2dilr.models.config import LabelKind, Paradigm, Representation
from h2dilr.models.records import UNUSED, CodeAssignment, CodeEntry, RunMetrics
from h2dilr.services.pipeline import pretrain_h2d
from h2dilr.services.probe import (
    DisentanglementReport,
    assign_codes,
    assignments_csv,
    compare_paradigms,
    conditional_tone_entropy,
    disentanglement_report,
    export_embeddings,
    reconstruction_mse,
    sweep,
    sweep_csv,
)


class EchoModel:
    """Reconstructs its input exactly."""

    def reconstruct(self, x, subject):
        return x.copy()


class ZeroModel:
    """Reconstructs everything as zero."""

    def reconstruct(self, x, subject):
        return np.zeros_like(x)


@pytest.fixture
def stage1(tiny_config, tiny_datasets):
    return pretrain_h2d(tiny_config, tiny_datasets)


class TestReconstructionMSE:
    """Tests for reconstruction_mse."""

    def test_perfect_reconstruction(self, tiny_datasets):
        """x_hat == x gives 0."""
        assert reconstruction_mse(EchoModel(), tiny_datasets) == 0.0

    def test_zero_reconstruction_of_zscored_data(self, tiny_datasets):
        """Predicting zero on z-scored data costs the unit variance."""
        assert reconstruction_mse(ZeroModel(), tiny_datasets) == pytest.approx(1.0, abs=1e-6)

    def test_single_dataset(self, tiny_datasets):
        """One dataset is accepted on its own."""
        assert reconstruction_mse(EchoModel(), tiny_datasets[0]) == 0.0

    def test_trained_model_is_finite(self, stage1, tiny_datasets):
        """The real model gives a finite positive error."""
        assert 0.0 < reconstruction_mse(stage1.model, tiny_datasets) < np.inf

    def test_empty(self, tiny_datasets):
        """No samples is an error."""
        with pytest.raises(DatasetError):
            reconstruction_mse(EchoModel(), [tiny_datasets[0].subset([])])


class TestAssignCodes:
    """Tests for code-to-tone assignment."""

    def test_conservation(self, stage1, tiny_datasets):
        """Histogram counts add up to every quantized token."""
        assignment = assign_codes(stage1.model, tiny_datasets)
        tokens = sum(len(d) for d in tiny_datasets) * 4
        assert assignment.total_tokens() == tokens
        assert assignment.total_tokens("codebook.shared") == tokens // 2

    def test_books_and_entries(self, stage1, tiny_datasets):
        """Every code of every book gets one entry."""
        assignment = assign_codes(stage1.model, tiny_datasets)
        assert assignment.books == ["codebook.shared", "codebook.private.0", "codebook.private.1"]
        assert len(assignment.for_book("codebook.shared")) == 6
        assert len(assignment.for_book("codebook.private.1")) == 3
        for entry in assignment.entries:
            if entry.count:
                assert entry.assigned == int(np.argmax(entry.histogram)) + 1
            else:
                assert entry.assigned == UNUSED

    def test_usage_not_counted(self, stage1, tiny_datasets):
        """Assignment leaves the books' usage counters alone."""
        before = stage1.model.state.shared.usage_count.copy()
        assign_codes(stage1.model, tiny_datasets)
        np.testing.assert_array_equal(stage1.model.state.shared.usage_count, before)

    def test_assignments_csv(self):
        """Header plus one row per code, histogram spread over tone columns."""
        assignment = CodeAssignment(
            entries=[
                CodeEntry(codebook="codebook.shared", index=0, assigned=2, histogram=[1, 5, 0, 0]),
                CodeEntry(codebook="codebook.private.0", index=3, assigned=UNUSED, histogram=[0, 0, 0, 0]),
            ]
        )
        rows = list(csv.reader(io.StringIO(assignments_csv(assignment))))
        assert rows[0] == ["codebook", "index", "assigned", "count", "tone1", "tone2", "tone3", "tone4"]
        assert rows[1] == ["codebook.shared", "0", "2", "6", "1", "5", "0", "0"]
        assert rows[2] == ["codebook.private.0", "3", str(UNUSED), "0", "0", "0", "0", "0"]


class TestConditionalEntropy:
    """Tests for H(tone | code)."""

    def test_pure_codes(self):
        """Codes used by a single tone carry zero entropy."""
        assignment = CodeAssignment(
            entries=[
                CodeEntry(codebook="codebook.shared", index=0, assigned=2, histogram=[0, 5, 0, 0]),
                CodeEntry(codebook="codebook.shared", index=1, assigned=UNUSED, histogram=[0, 0, 0, 0]),
            ]
        )
        assert conditional_tone_entropy(assignment, "codebook.shared") == 0.0

    def test_mixed_codes(self):
        """A code split evenly over four tones carries two bits, weighted by use."""
        assignment = CodeAssignment(
            entries=[
                CodeEntry(codebook="codebook.private.0", index=0, assigned=1, histogram=[1, 1, 1, 1]),
                CodeEntry(codebook="codebook.private.1", index=0, assigned=3, histogram=[0, 0, 4, 0]),
            ]
        )
        assert conditional_tone_entropy(assignment, "codebook.private") == pytest.approx(1.0)

    def test_no_tokens(self):
        """A prefix with no used codes fails."""
        with pytest.raises(DatasetError):
            conditional_tone_entropy(CodeAssignment(entries=[]), "codebook.shared")


class TestExportEmbeddings:
    """Tests for the embedding export."""

    def test_row_counts(self, stage1, tiny_datasets, tmp_path):
        """One row per code (K^S + m K^P) and one per sample."""
        codes, samples = export_embeddings(stage1.model, tiny_datasets, tmp_path / "emb")
        code_rows = codes.read_text().splitlines()
        assert code_rows[0] == "codebook,index,assigned,e0,e1,e2,e3"
        assert len(code_rows) - 1 == 6 + 2 * 3
        sample_rows = samples.read_text().splitlines()
        assert sample_rows[0] == "subject,trial,tone,p0,p1,p2,p3"
        assert len(sample_rows) - 1 == 40

    def test_idempotent(self, stage1, tiny_datasets, tmp_path):
        """Exporting twice gives identical bytes."""
        first = export_embeddings(stage1.model, tiny_datasets, tmp_path / "a")
        second = export_embeddings(stage1.model, tiny_datasets, tmp_path / "b")
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_values_parse_to_stored_float32(self, stage1, tiny_datasets, tmp_path):
        """Each exported value parses back to the stored 32-bit embedding."""
        codes, _ = export_embeddings(stage1.model, tiny_datasets, tmp_path)
        books = stage1.model.state.codebooks()
        with open(codes, newline="") as handle:
            for row in csv.DictReader(handle):
                stored = books[row["codebook"]].codes.data[int(row["index"])].astype(np.float32)
                parsed = np.array([np.float32(row[f"e{j}"]) for j in range(4)])
                np.testing.assert_array_equal(parsed, stored)

    def test_unwritable_path(self, stage1, tiny_datasets, tmp_path):
        """A file in the way of the output directory fails."""
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        with pytest.raises(DatasetError):
            export_embeddings(stage1.model, tiny_datasets, blocker / "emb")


class TestDisentanglementReport:
    """Tests for the probe grid."""

    def test_missing_cell(self):
        """Asking for a probe that was never run fails."""
        report = DisentanglementReport()
        with pytest.raises(ConfigError, match="missing probe run"):
            report.cell(0.5, Representation.HOMO_ONLY, LabelKind.TONE)

    def test_expected_but_absent(self):
        """Rendering checks every expected cell."""
        report = DisentanglementReport(expected=[(0.5, Representation.FULL, LabelKind.TONE)])
        with pytest.raises(ConfigError):
            report.to_text()

    def test_rendering(self):
        """Aligned text with '-' for impossible cells, and a CSV row per cell."""
        metrics = RunMetrics(seeds=[0, 1], accuracies=[0.5, 0.7])
        key_tone = (1.0, Representation.HOMO_ONLY, LabelKind.TONE)
        key_subject = (1.0, Representation.HETERO_ONLY, LabelKind.SUBJECT)
        report = DisentanglementReport(cells={key_tone: metrics, key_subject: None}, expected=[key_tone, key_subject])
        text = report.to_text().splitlines()
        assert text[0].split() == ["nu", "representation", "tone", "subject"]
        assert text[1].split() == ["1", "homo_only", "60.00", "±", "10.00", "-"]
        assert text[2].split() == ["1", "hetero_only", "-", "-"]
        rows = report.to_csv().splitlines()
        assert rows[0] == "nu,representation,label,n_seeds,mean,std,accuracies"
        assert "1,homo_only,tone,2,0.600000,0.100000,0.500000;0.700000" in rows
        assert "1,hetero_only,subject,0,-,-," in rows

    def test_full_grid_at_nu_one(self, tiny_config, tiny_datasets, tmp_path):
        """With every token shared the hetero-only cells are '-'."""
        config = tiny_config.with_updates(h2d={"nu": 1.0})
        checkpoint = pretrain_h2d(config, tiny_datasets).checkpoint
        report = disentanglement_report(config, checkpoint, tiny_datasets, seeds=[0])
        assert report.cell(1.0, Representation.HETERO_ONLY, LabelKind.TONE) is None
        assert report.cell(1.0, Representation.HETERO_ONLY, LabelKind.SUBJECT) is None
        homo = report.cell(1.0, Representation.HOMO_ONLY, LabelKind.SUBJECT)
        assert homo.n_seeds == 1 and 0.0 <= homo.mean <= 1.0
        assert report.cell(1.0, Representation.FULL, LabelKind.TONE).n_seeds == 1
        text_path, csv_path = report.write(tmp_path)
        assert text_path.read_text() == report.to_text()
        assert len(csv_path.read_text().splitlines()) == 1 + 6

    def test_heterogeneous_checkpoint(self, tiny_config, tiny_datasets):
        """Per-subject classifiers fill the tone cells; subject cells are '-'."""
        config = tiny_config.with_updates(h2d={"paradigm": Paradigm.HETEROGENEOUS})
        checkpoint = pretrain_h2d(config, tiny_datasets).checkpoint
        report = disentanglement_report(config, checkpoint, tiny_datasets, seeds=[0])
        for rep in (Representation.HETERO_ONLY, Representation.FULL):
            assert report.cell(0.0, rep, LabelKind.TONE).n_seeds == 1
            assert report.cell(0.0, rep, LabelKind.SUBJECT) is None
        assert report.cell(0.0, Representation.HOMO_ONLY, LabelKind.TONE) is None
        assert "hetero_only" in report.to_text()

    def test_no_seeds(self, stage1, tiny_config, tiny_datasets):
        """At least one seed is needed."""
        with pytest.raises(ConfigError):
            disentanglement_report(tiny_config, stage1.checkpoint, tiny_datasets, seeds=[])


class TestSweep:
    """Tests for one-key sweeps."""

    def test_code_dim_sweep(self, tiny_config, tiny_datasets):
        """Each value re-runs both stages and reports MSE and accuracy."""
        points = sweep(tiny_config, tiny_datasets, "h2d.code_dim", [2, 4], seeds=[0])
        assert [p.value for p in points] == [2, 4]
        for point in points:
            assert point.mean_reconstruction > 0.0
            assert point.accuracy.n_seeds == 1
        rows = sweep_csv("h2d.code_dim", points).splitlines()
        assert rows[0] == "h2d.code_dim,mse_mean,acc_mean,acc_std,n_seeds"
        assert rows[1].startswith("2,")

    def test_subject_count_sweep(self, tiny_config, tiny_datasets):
        """Using a prefix of the subjects still trains and evaluates."""
        points = sweep(tiny_config, tiny_datasets, "data.subjects_used", [1], seeds=[0])
        assert np.isfinite(points[0].mean_reconstruction)


class TestCompareParadigms:
    """Tests for the paradigm comparison."""

    def test_every_paradigm_reported(self, tiny_config, tiny_datasets):
        """One tone-accuracy entry per paradigm, one accuracy per seed."""
        results = compare_paradigms(tiny_config, tiny_datasets, seeds=[0])
        assert list(results) == list(Paradigm)
        for metrics in results.values():
            assert metrics.seeds == [0]
            assert 0.0 <= metrics.mean <= 1.0
