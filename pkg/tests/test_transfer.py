import io

import numpy as np
import pytest

from lrdecay import ndgrad, ps10, transfer
from lrdecay.errors import DegenerateStageError, ParseError, ValidationError
from lrdecay.trainer import Step, TrainConfig, train

# Reference ratios (two decimals), per target and mode, for stages 2 and 3.
REFERENCE = {
    ("Caltech256", "finetune"): (0.32, 0.22),
    ("Caltech256", "fix"): (0.37, 0.33),
    ("CUB_200", "finetune"): (0.25, 0.24),
    ("CUB_200", "fix"): (0.38, 0.33),
    ("MITIndoors", "finetune"): (0.27, 0.25),
    ("MITIndoors", "fix"): (0.40, 0.34),
    ("Sketch250", "finetune"): (0.14, 0.11),
    ("Sketch250", "fix"): (0.02, -0.06),
}


@pytest.fixture(scope="module")
def report():
    return transfer.compute_table(transfer.reference_accuracies())


@pytest.fixture(scope="module")
def setup():
    src = ps10.generate(ps10.Ps10Spec(examples_total=600, complex_per_class=10, height=1, width=1, seed=1))
    tgt = ps10.generate(ps10.Ps10Spec(examples_total=300, complex_per_class=10, height=1, width=1, seed=2))
    model = ndgrad.MlpConfig(6, (16,), 10, init_seed=0)
    run = train(model, src, TrainConfig(Step(0.5, (10, 20)), epochs=30, batch_size=32))
    return run, model, src, tgt


class TestRatio:
    def test_formula(self):
        accs = transfer.StageAccuracies([50.0, 60.0, 65.0], {("t", "fix"): [40.0, 43.0, 44.0]})
        assert transfer.transferability(accs, "t", "fix", 2) == pytest.approx(0.3)
        assert transfer.transferability(accs, "t", "fix", 3) == pytest.approx(0.2)

    def test_stage_one_undefined(self):
        accs = transfer.StageAccuracies([50.0, 60.0], {("t", "fix"): [40.0, 43.0]})
        with pytest.raises(ValidationError):
            transfer.transferability(accs, "t", "fix", 1)

    def test_degenerate(self):
        accs = transfer.StageAccuracies([50.0, 50.0], {("t", "fix"): [40.0, 43.0]})
        with pytest.raises(DegenerateStageError):
            transfer.transferability(accs, "t", "fix", 2)
        entry = transfer.compute_report({"fix": accs}).get("t", "fix", 2)
        assert entry["degenerate"] and entry["ratio"] is None

    def test_range_and_lengths(self):
        with pytest.raises(ValidationError):
            transfer.StageAccuracies([50.0, 101.0])
        with pytest.raises(ValidationError):
            transfer.StageAccuracies([50.0, 60.0], {("t", "fix"): [1.0]})


class TestTable:
    @pytest.mark.parametrize("key", sorted(REFERENCE))
    def test_reference_values(self, report, key):
        for stage, want in zip((2, 3), REFERENCE[key]):
            assert round(report.ratio(*key, stage), 2) == pytest.approx(want, abs=1e-9)

    def test_source_is_one(self, report):
        for mode in transfer.MODES:
            assert report.ratio("ImageNet", mode, 2) == pytest.approx(1.0)

    def test_ordering_reported(self, report):
        order = report.stage_ordering()
        assert order[("Caltech256", "finetune")] is True
        assert len(order) == 10

    def test_markdown(self, report):
        md = report.to_markdown()
        assert "**-0.06**" in md and "| Sketch250 |" in md
        assert md.splitlines()[0].count("**") == 8

    def test_json(self, report):
        import json

        doc = json.loads(report.to_json())
        assert len(doc["entries"]) == 20


class TestParser:
    def test_text_input(self):
        text = "dataset,mode,stage,acc\nsrc,fix,1,50\nsrc,fix,2,60\ntgt,fix,1,30\ntgt,fix,2,35\n"
        rep = transfer.compute_table(io.StringIO(text))
        assert rep.ratio("tgt", "fix", 2) == pytest.approx(0.5)
        rep2 = transfer.compute_table(text, source_name="tgt")
        assert rep2.ratio("src", "fix", 2) == pytest.approx(2.0)

    @pytest.mark.parametrize(
        "body,column",
        [
            ("src,fix,x,50", "stage"),
            ("src,fix,1,abc", "acc"),
            ("src,oops,1,50", "mode"),
            ("src,fix,1,150", "acc"),
        ],
    )
    def test_errors_carry_location(self, body, column):
        with pytest.raises(ParseError) as err:
            transfer.read_accuracies("dataset,mode,stage,acc\n" + body + "\n")
        assert err.value.row == 2 and err.value.column == column

    def test_bad_header(self):
        with pytest.raises(ParseError):
            transfer.read_accuracies("a,b,c,d\nx,fix,1,2\n")

    def test_missing_stage(self):
        text = "dataset,mode,stage,acc\nsrc,fix,1,50\nsrc,fix,2,60\ntgt,fix,1,30\n"
        with pytest.raises(ParseError):
            transfer.read_accuracies(text)

    def test_duplicate(self):
        with pytest.raises(ParseError):
            transfer.read_accuracies("dataset,mode,stage,acc\nsrc,fix,1,50\nsrc,fix,1,60\n")


class TestSnapshotTransfer:
    def test_fix_mode(self, setup):
        run, model, src, tgt = setup
        accs = transfer.snapshot_transfer(run, model, src, tgt, "fix", head_epochs=20, target_name="tgt")
        assert accs.num_stages == 3
        assert all(0 <= a <= 100 for a in accs.source_acc + accs.target_tacc[("tgt", "fix")])
        rep = transfer.compute_report({"fix": accs})
        assert {e["stage"] for e in rep.entries} == {2, 3}

    def test_finetune_mode(self, setup):
        run, model, src, tgt = setup
        cfg = TrainConfig(Step(0.05), epochs=3, batch_size=32)
        accs = transfer.snapshot_transfer(run, model, src, tgt, "finetune", finetune_cfg=cfg)
        assert len(accs.target_tacc[("target", "finetune")]) == 3

    def test_single_class_target(self, setup):
        run, model, src, tgt = setup
        one = tgt.subset_view(tgt.labels == 0)
        accs = transfer.snapshot_transfer(run, model, src, one, "fix")
        assert accs.target_tacc[("target", "fix")] == [100.0] * 3
        assert accs.flags

    def test_bad_mode(self, setup):
        run, model, src, tgt = setup
        with pytest.raises(ValidationError):
            transfer.snapshot_transfer(run, model, src, tgt, "freeze")

    def test_source_accuracy_rises(self, setup):
        run, model, src, tgt = setup
        accs = transfer.snapshot_transfer(run, model, src, tgt, "fix", head_epochs=5)
        assert np.all(np.array(accs.source_acc) > 10)
