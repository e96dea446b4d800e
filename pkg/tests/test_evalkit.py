import numpy as np
import pytest

from radloop.core import AnnotationRecord, Finding, NormBox, Task
from radloop.errors import (
    DuplicateId,
    EmptyGroundTruth,
    ParseError,
    UnknownId,
    UnsupportedTask,
)
from radloop.evalkit import (
    aggregate_iou,
    evaluate_task,
    get_scorer,
    grounding_iou,
    lexical_fact_score,
    parse_output,
    register_scorer,
    union_area,
)
from radloop.taskgen import render_instruction


class TestStrictPg:
    def test_single_box(self):
        out = parse_output("Cardiomegaly: [0.57,0.65,0.55,0.37]", Task.PG)
        assert out.phrase == "Cardiomegaly"
        assert out.boxes == [NormBox(0.57, 0.65, 0.55, 0.37)]
        assert not out.salvaged and not out.warnings

    def test_multi_box(self):
        out = parse_output(
            "Nodules: [0.20,0.20,0.10,0.10] [0.80,0.80,0.10,0.10]", Task.PG
        )
        assert len(out.boxes) == 2

    def test_phrase_containing_colon(self):
        out = parse_output("Finding: left: [0.50,0.50,0.20,0.20]", Task.PG)
        assert out.phrase == "Finding: left"

    def test_trailing_garbage_rejected(self):
        with pytest.raises(ParseError):
            parse_output("Cardiomegaly: [0.57,0.65,0.55,0.37] extra", Task.PG)

    def test_no_boxes_rejected(self):
        with pytest.raises(ParseError):
            parse_output("Cardiomegaly", Task.PG)

    def test_malformed_box_rejected(self):
        with pytest.raises(ParseError):
            parse_output("X: [0.5,0.5,0.2]", Task.PG)


class TestStrictAgrg:
    def test_locate(self):
        out = parse_output("Location of the trachea: [0.50,0.30,0.10,0.30].", Task.AGRG_LOCATE)
        assert out.location == "trachea"
        assert out.boxes == [NormBox(0.5, 0.3, 0.1, 0.3)]

    def test_locate_requires_trailing_period(self):
        with pytest.raises(ParseError):
            parse_output("Location of the trachea: [0.50,0.30,0.10,0.30]", Task.AGRG_LOCATE)

    def test_describe(self):
        out = parse_output("Description of the spine: No fracture", Task.AGRG_DESCRIBE)
        assert out.location == "spine"
        assert out.description == "No fracture"

    def test_both(self):
        out = parse_output(
            "Location of the abdomen: [0.48,0.78,0.73,0.45]. Description: Unremarkable",
            Task.AGRG_BOTH,
        )
        assert out.location == "abdomen"
        assert out.description == "Unremarkable"
        assert out.boxes == [NormBox(0.48, 0.78, 0.73, 0.45)]

    def test_both_missing_description_rejected(self):
        with pytest.raises(ParseError):
            parse_output(
                "Location of the abdomen: [0.48,0.78,0.73,0.45].", Task.AGRG_BOTH
            )

    def test_wrong_prefix_rejected(self):
        with pytest.raises(ParseError):
            parse_output("Position of the spine: [0.5,0.5,0.2,0.2].", Task.AGRG_LOCATE)


class TestStrictGrg:
    def test_mixed_findings(self):
        text = "Left effusion [0.30,0.80,0.20,0.10]. Heart size normal."
        out = parse_output(text, Task.GRG)
        assert [f.text for f in out.findings] == ["Left effusion", "Heart size normal"]
        assert out.findings[0].boxes == (NormBox(0.3, 0.8, 0.2, 0.1),)
        assert out.findings[1].boxes == ()

    def test_multi_box_finding(self):
        text = "Bilateral nodules [0.20,0.20,0.10,0.10] [0.80,0.80,0.10,0.10]."
        out = parse_output(text, Task.GRG)
        assert len(out.findings) == 1
        assert len(out.findings[0].boxes) == 2

    def test_missing_final_period_rejected(self):
        with pytest.raises(ParseError):
            parse_output("Left effusion [0.30,0.80,0.20,0.10]", Task.GRG)

    def test_empty_rejected(self):
        with pytest.raises(ParseError):
            parse_output("", Task.GRG)

    def test_detection_unsupported(self):
        with pytest.raises(UnsupportedTask):
            parse_output("anything", Task.DETECTION)


class TestCoordinateClamping:
    def test_out_of_range_center_clamped_with_warning(self):
        out = parse_output("X: [1.20,0.50,0.20,0.20]", Task.PG)
        assert out.boxes[0].cx == 1.0
        assert out.warnings

    def test_degenerate_side_replaced(self):
        out = parse_output("X: [0.50,0.50,0.00,0.20]", Task.PG)
        assert out.boxes[0].w == pytest.approx(1e-6)
        assert out.warnings


class TestLenient:
    def test_strict_text_not_marked_salvaged(self):
        out = parse_output("Cardiomegaly: [0.57,0.65,0.55,0.37]", Task.PG, mode="lenient")
        assert not out.salvaged

    def test_chatty_pg_salvaged(self):
        text = "Sure! The finding cardiomegaly is at [0.57, 0.65, 0.55, 0.37], I think."
        out = parse_output(text, Task.PG, mode="lenient")
        assert out.salvaged
        assert out.boxes == [NormBox(0.57, 0.65, 0.55, 0.37)]
        assert "cardiomegaly" in out.phrase

    def test_negative_coordinates_clamped(self):
        out = parse_output("X at [-0.10,0.50,0.20,0.20]", Task.PG, mode="lenient")
        assert out.boxes[0].cx == 0.0
        assert out.warnings

    def test_describe_salvage(self):
        text = "Here you go. Description of the spine: mild degenerative change"
        out = parse_output(text, Task.AGRG_DESCRIBE, mode="lenient")
        assert out.salvaged
        assert out.location == "spine"
        assert out.description == "mild degenerative change"

    def test_grg_salvage_attaches_boxes(self):
        text = "I see a left effusion [0.3,0.8,0.2,0.1] and also cardiomegaly [0.5,0.6,0.5,0.4] overall"
        out = parse_output(text, Task.GRG, mode="lenient")
        assert out.salvaged
        assert len(out.findings) == 3
        assert out.findings[0].boxes and out.findings[1].boxes
        assert out.findings[2].boxes == ()

    def test_lenient_never_raises(self):
        out = parse_output("complete nonsense", Task.AGRG_LOCATE, mode="lenient")
        assert out.salvaged and out.boxes == []

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            parse_output("x", Task.PG, mode="fuzzy")


class TestRenderParseRoundTrip:
    def test_all_tasks_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            task = [Task.PG, Task.GRG, Task.AGRG_LOCATE, Task.AGRG_DESCRIBE, Task.AGRG_BOTH][
                int(rng.integers(5))
            ]
            boxes = tuple(
                NormBox(
                    float(rng.uniform(0.3, 0.7)),
                    float(rng.uniform(0.3, 0.7)),
                    float(rng.uniform(0.05, 0.5)),
                    float(rng.uniform(0.05, 0.5)),
                )
                for _ in range(int(rng.integers(1, 4)))
            )
            rec = AnnotationRecord(
                image_id="r",
                source_id="s",
                task=task,
                category="left lung",
                text="patchy opacity noted" if task is not Task.GRG else None,
                boxes=boxes if task is not Task.GRG else (),
                findings=(
                    (Finding("patchy opacity", boxes), Finding("no effusion", ()))
                    if task is Task.GRG
                    else ()
                ),
            )
            inst = render_instruction(rec)
            parsed = parse_output(inst.response, task)
            if task is Task.GRG:
                got = [b for f in parsed.findings for b in f.boxes]
                want = [b for f in rec.findings for b in f.boxes]
            elif task is Task.AGRG_DESCRIBE:
                # The describe template carries no boxes.
                got, want = parsed.boxes, []
            else:
                got, want = parsed.boxes, list(boxes)
            assert len(got) == len(want)
            for g, w in zip(got, want):
                for a, b in zip(g.to_list(), w.to_list()):
                    assert abs(a - b) <= 0.005


class TestUnionArea:
    def test_empty(self):
        assert union_area([]) == 0.0

    def test_single(self):
        assert union_area([NormBox(0.5, 0.5, 0.5, 0.5)]) == pytest.approx(0.25)

    def test_disjoint_sum(self):
        boxes = [NormBox(0.2, 0.2, 0.2, 0.2), NormBox(0.8, 0.8, 0.2, 0.2)]
        assert union_area(boxes) == pytest.approx(0.08)

    def test_nested(self):
        boxes = [NormBox(0.5, 0.5, 0.8, 0.8), NormBox(0.5, 0.5, 0.2, 0.2)]
        assert union_area(boxes) == pytest.approx(0.64)

    def test_identical_duplicates(self):
        box = NormBox(0.5, 0.5, 0.4, 0.4)
        assert union_area([box, box, box]) == pytest.approx(box.area())

    def test_partial_overlap(self):
        # Two 0.2x0.2 squares overlapping in a 0.1x0.2 strip.
        a = NormBox.from_corners(0.1, 0.1, 0.3, 0.3)
        b = NormBox.from_corners(0.2, 0.1, 0.4, 0.3)
        assert union_area([a, b]) == pytest.approx(0.06)

    def test_matches_rasterization_small(self):
        rng = np.random.default_rng(11)
        res = 512
        for _ in range(25):
            k = int(rng.integers(1, 5))
            boxes = []
            for _ in range(k):
                x1, y1 = rng.integers(0, res - 8, size=2)
                w, h = rng.integers(4, res // 2, size=2)
                x2, y2 = min(x1 + w, res), min(y1 + h, res)
                boxes.append(
                    NormBox.from_corners(x1 / res, y1 / res, x2 / res, y2 / res)
                )
            mask = np.zeros((res, res), dtype=bool)
            for b in boxes:
                bx1, by1, bx2, by2 = b.corners()
                mask[
                    round(by1 * res) : round(by2 * res),
                    round(bx1 * res) : round(bx2 * res),
                ] = True
            assert union_area(boxes) == pytest.approx(mask.sum() / res**2, abs=1e-12)


class TestGroundingIou:
    def test_identity(self):
        box = NormBox(0.5, 0.5, 0.4, 0.4)
        assert grounding_iou([box], [box]) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint(self):
        assert grounding_iou(
            [NormBox(0.2, 0.2, 0.2, 0.2)], [NormBox(0.8, 0.8, 0.2, 0.2)]
        ) == 0.0

    def test_half_shift_is_one_third(self):
        # Shifting a square by half its side: overlap w/2*w over union 1.5w*w.
        a = NormBox.from_corners(0.2, 0.2, 0.4, 0.4)
        b = NormBox.from_corners(0.3, 0.2, 0.5, 0.4)
        assert grounding_iou([a], [b]) == pytest.approx(1 / 3, abs=1e-9)

    def test_union_merge_two_gt_one_pred(self):
        # Prediction covering exactly the union of two disjoint gt boxes.
        gt = [NormBox.from_corners(0.1, 0.1, 0.3, 0.3), NormBox.from_corners(0.3, 0.1, 0.5, 0.3)]
        pred = [NormBox.from_corners(0.1, 0.1, 0.5, 0.3)]
        assert grounding_iou(gt, pred) == pytest.approx(1.0, abs=1e-9)

    def test_empty_pred_scores_zero(self):
        assert grounding_iou([NormBox(0.5, 0.5, 0.4, 0.4)], []) == 0.0

    def test_empty_gt_raises(self):
        with pytest.raises(EmptyGroundTruth):
            grounding_iou([], [NormBox(0.5, 0.5, 0.4, 0.4)])

    def test_overlapping_gt_boxes_merge(self):
        # gt union = [0.1,0.5]x[0.1,0.3]; pred equals that strip.
        gt = [NormBox.from_corners(0.1, 0.1, 0.35, 0.3), NormBox.from_corners(0.25, 0.1, 0.5, 0.3)]
        pred = [NormBox.from_corners(0.1, 0.1, 0.5, 0.3)]
        assert grounding_iou(gt, pred) == pytest.approx(1.0, abs=1e-9)


class TestAggregateIou:
    def test_micro_vs_macro(self):
        per_class = {"a": [1.0, 0.0], "b": [0.5]}
        micro, macro = aggregate_iou(per_class)
        assert micro == pytest.approx(0.5)
        assert macro == pytest.approx((0.5 + 0.5) / 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_iou({})

    def test_single_class_equal(self):
        micro, macro = aggregate_iou({"a": [0.2, 0.4]})
        assert micro == macro == pytest.approx(0.3)


class TestLexicalScore:
    def test_identical(self):
        assert lexical_fact_score("no acute findings", "no acute findings") == 1.0

    def test_disjoint(self):
        assert lexical_fact_score("aaa bbb", "ccc ddd") == 0.0

    def test_both_empty(self):
        assert lexical_fact_score("", "") == 1.0

    def test_one_empty(self):
        assert lexical_fact_score("words", "") == 0.0

    def test_case_and_punctuation_insensitive(self):
        assert lexical_fact_score("No Effusion.", "no effusion") == 1.0

    def test_partial(self):
        # 2 shared tokens, 3 cand, 2 ref -> p=2/3, r=1 -> F1=0.8
        assert lexical_fact_score("left pleural effusion", "pleural effusion") == pytest.approx(0.8)

    def test_registry(self):
        register_scorer("always_half", lambda c, r: 0.5)
        assert get_scorer("always_half")("x", "y") == 0.5
        with pytest.raises(ValueError):
            get_scorer("nonexistent")


def _pg_gold(n=3):
    recs = []
    for i in range(n):
        recs.append(
            AnnotationRecord(
                image_id=f"img-{i}",
                source_id="s",
                task=Task.PG,
                category="cardiomegaly" if i % 2 == 0 else "effusion",
                text="Cardiomegaly",
                boxes=(NormBox(0.5, 0.5, 0.4, 0.4),),
            )
        )
    return recs


class TestEvaluateTask:
    def test_perfect_predictions(self):
        gold = _pg_gold()
        preds = {r.image_id: render_instruction(r).response for r in gold}
        report = evaluate_task(preds, gold, Task.PG)
        assert report.n == 3
        assert report.parse_failures == 0
        assert report.micro_iou == pytest.approx(1.0, abs=1e-9)
        assert report.macro_iou == pytest.approx(1.0, abs=1e-9)
        assert report.micro_text is None and report.macro_text is None

    def test_parse_failure_scores_zero_strict(self):
        gold = _pg_gold(2)
        preds = {
            "img-0": render_instruction(gold[0]).response,
            "img-1": "no boxes here at all",
        }
        report = evaluate_task(preds, gold, Task.PG)
        assert report.parse_failures == 1
        assert report.micro_iou == pytest.approx(0.5, abs=1e-9)
        failed = [r for r in report.rows if r.id == "img-1"][0]
        assert failed.parse_failed and failed.iou == 0.0

    def test_lenient_salvages_instead(self):
        gold = _pg_gold(1)
        preds = {"img-0": "the heart region sits near [0.5, 0.5, 0.4, 0.4] roughly"}
        report = evaluate_task(preds, gold, Task.PG, mode="lenient")
        assert report.parse_failures == 0
        assert report.rows[0].salvaged
        assert report.micro_iou == pytest.approx(1.0, abs=1e-9)

    def test_duplicate_pred_id(self):
        gold = _pg_gold(2)
        with pytest.raises(DuplicateId):
            evaluate_task([("img-0", "x"), ("img-0", "y")], gold, Task.PG)

    def test_duplicate_gold_id(self):
        gold = _pg_gold(1) + _pg_gold(1)
        with pytest.raises(DuplicateId):
            evaluate_task({"img-0": "x"}, gold, Task.PG)

    def test_unknown_pred_id(self):
        with pytest.raises(UnknownId):
            evaluate_task({"ghost": "x"}, _pg_gold(1), Task.PG)

    def test_describe_is_text_only(self):
        gold = [
            AnnotationRecord(
                image_id="d-0",
                source_id="s",
                task=Task.AGRG_DESCRIBE,
                category="spine",
                text="No fracture",
            )
        ]
        preds = {"d-0": "Description of the spine: No fracture"}
        report = evaluate_task(preds, gold, Task.AGRG_DESCRIBE)
        assert report.micro_iou is None
        assert report.micro_text == pytest.approx(1.0)

    def test_grg_greedy_matching(self):
        gold = [
            AnnotationRecord(
                image_id="g-0",
                source_id="s",
                task=Task.GRG,
                category="report",
                findings=(
                    Finding("left effusion", (NormBox(0.3, 0.8, 0.2, 0.1),)),
                    Finding("cardiomegaly", (NormBox(0.5, 0.6, 0.5, 0.4),)),
                ),
            )
        ]
        # Prediction lists the same findings in the opposite order; the
        # greedy max-IoU pairing should still match each to its partner.
        pred_text = "cardiomegaly [0.50,0.60,0.50,0.40]. left effusion [0.30,0.80,0.20,0.10]."
        report = evaluate_task({"g-0": pred_text}, gold, Task.GRG)
        assert report.micro_iou == pytest.approx(1.0, abs=1e-9)
        assert report.micro_text == pytest.approx(1.0)

    def test_grg_text_only_gold_has_no_iou(self):
        gold = [
            AnnotationRecord(
                image_id="g-1",
                source_id="s",
                task=Task.GRG,
                category="report",
                findings=(Finding("clear lungs", ()),),
            )
        ]
        report = evaluate_task({"g-1": "clear lungs."}, gold, Task.GRG)
        assert report.rows[0].iou is None
        assert report.micro_iou is None
        assert report.micro_text == pytest.approx(1.0)

    def test_per_class_breakdown(self):
        gold = _pg_gold(3)
        preds = {r.image_id: render_instruction(r).response for r in gold}
        report = evaluate_task(preds, gold, Task.PG)
        assert set(report.per_class) == {"cardiomegaly", "effusion"}
        assert report.per_class["cardiomegaly"]["n"] == 2

    def test_report_json_shape(self):
        gold = _pg_gold(1)
        preds = {"img-0": render_instruction(gold[0]).response}
        doc = evaluate_task(preds, gold, Task.PG).to_json()
        assert doc["schema_version"] == 1
        assert doc["counts"] == {"n": 1, "parse_failures": 0}
        assert doc["rows"][0]["id"] == "img-0"
