import io

import pytest

from lung_screening_benchmark.exceptions import TableParseError
from lung_screening_benchmark.geometry import Box3, Point3, Sphere
from lung_screening_benchmark.tabular_io import (
    MISSING, AnnotationSchema, Candidate, Label, SliceUnit,
    detect_annotation_schema, emit_annotations, emit_candidates, emit_metadata,
    parse_annotations, parse_candidates, parse_column_map, parse_exclusions,
    parse_manifest, parse_metadata, parse_scores, parse_slice_boxes
)


class TestAnnotations:
    def test_diameter_schema(self):
        rows = parse_annotations("scan_id,x,y,z,diameter\ns1,10.0,20.0,30.0,6.0\n")
        assert len(rows) == 1
        assert rows[0].geometry == Sphere(Point3(10, 20, 30), 6.0)
        assert rows[0].nodule_id == "s1#1"
        assert rows[0].label is None

    def test_box_schema_with_label(self):
        text = "scan_id,x,y,z,w,h,d,nodule_id,label\ns1,0,0,0,4,6,1.25,n1,malignant\n"
        a = parse_annotations(text)[0]
        assert a.geometry == Box3(Point3(0, 0, 0), 4, 6, 1.25)
        assert a.nodule_id == "n1"
        assert a.label is Label.MALIGNANT

    def test_header_only(self):
        assert parse_annotations("scan_id,x,y,z,diameter\n") == []

    def test_zero_diameter_reports_line(self):
        text = "scan_id,x,y,z,diameter\ns1,1,2,3,5\ns1,1,2,3,0\n"
        with pytest.raises(TableParseError) as info:
            parse_annotations(text)
        assert info.value.line == 3
        assert info.value.column == "diameter"
        assert "<text>:3: column 'diameter'" in str(info.value)

    def test_non_numeric(self):
        with pytest.raises(TableParseError) as info:
            parse_annotations("scan_id,x,y,z,diameter\ns1,abc,2,3,5\n")
        assert (info.value.line, info.value.column) == (2, "x")

    def test_unknown_schema(self):
        with pytest.raises(TableParseError):
            parse_annotations("scan_id,x,y\ns1,1,2\n")

    def test_luna16_headers(self, fixtures_dir):
        rows = parse_annotations(fixtures_dir / "annotations.csv")
        assert [a.scan_id for a in rows] == ["s1", "s2", "s3", "s4"]
        assert all(a.geometry.diameter == 10.0 for a in rows)

    def test_auto_ids_number_per_scan(self):
        text = "scan_id,x,y,z,diameter\ns1,0,0,0,5\ns2,0,0,0,5\ns1,9,9,9,5\n"
        assert [a.nodule_id for a in parse_annotations(text)] == ["s1#1", "s2#1", "s1#2"]

    def test_duplicate_nodule_id(self):
        text = "scan_id,x,y,z,diameter,nodule_id\ns1,0,0,0,5,a\ns1,9,9,9,5,a\n"
        with pytest.raises(TableParseError, match="first seen on line 2"):
            parse_annotations(text)

    def test_blank_lines_keep_numbering(self):
        text = "scan_id,x,y,z,diameter\ns1,0,0,0,5\n\ns1,0,0,0,-1\n"
        with pytest.raises(TableParseError) as info:
            parse_annotations(text)
        assert info.value.line == 4

    def test_emit_reparse(self):
        text = "scan_id,x,y,z,w,h,d,nodule_id,label\ns1,1.5,2,3,4,6,1.25,n1,benign\ns2,0,0,0,1,1,1,n2,\n"
        rows = parse_annotations(text)
        assert parse_annotations(emit_annotations(rows)) == rows

    def test_exclusions_ignore_labels(self):
        text = "scan_id,x,y,z,diameter,label\ns1,0,0,0,5,malignant\n"
        assert parse_exclusions(text)[0].label is None

    def test_schema_detection(self):
        assert detect_annotation_schema(["scan_id", "x", "y", "z", "diameter"]) is AnnotationSchema.DIAMETER
        assert detect_annotation_schema(["scan_id", "x", "y", "z", "w", "h", "d"]) is AnnotationSchema.BOX


class TestCandidates:
    def test_field_mapping(self):
        c = parse_candidates("scan_id,x,y,z,probability\ns1,1,2,3,0.97\n")[0]
        assert c == Candidate("s1", Point3(1, 2, 3), 0.97)

    def test_closed_interval(self):
        rows = parse_candidates("scan_id,x,y,z,probability\ns1,0,0,0,1.0\ns1,0,0,0,0.0\n")
        assert [c.probability for c in rows] == [1.0, 0.0]

    def test_out_of_range(self):
        with pytest.raises(TableParseError) as info:
            parse_candidates("scan_id,x,y,z,probability\ns1,1,2,3,1.5\n")
        assert (info.value.line, info.value.column) == (2, "probability")

    def test_missing_column(self):
        with pytest.raises(TableParseError, match="probability"):
            parse_candidates("scan_id,x,y,z\ns1,1,2,3\n")

    def test_file_object_and_column_map(self):
        source = io.StringIO("id,x,y,z,score\ns1,1,2,3,0.5\n")
        rows = parse_candidates(source, {"id": "scan_id", "score": "probability"})
        assert rows[0].scan_id == "s1"
        assert parse_candidates(emit_candidates(rows)) == rows

    def test_missing_file(self, tmp_path):
        with pytest.raises(TableParseError, match="File not found"):
            parse_candidates(tmp_path / "nope.csv")


class TestSliceBoxes:
    def test_one_row(self):
        boxes = parse_slice_boxes("scan_id,slice,x_min,y_min,x_max,y_max\ns1,10,0,0,4,6\n")
        assert len(boxes) == 1
        assert (boxes[0].width, boxes[0].height) == (4, 6)
        assert boxes[0].unit is SliceUnit.INDEX

    def test_degenerate_box(self):
        with pytest.raises(TableParseError) as info:
            parse_slice_boxes("scan_id,slice,x_min,y_min,x_max,y_max\ns1,10,2,0,2,6\n")
        assert info.value.column == "x_max"

    def test_mixed_scans(self):
        text = "scan_id,slice,x_min,y_min,x_max,y_max\ns1,10,0,0,4,6\ns2,3,0,0,1,1\n"
        assert [b.scan_id for b in parse_slice_boxes(text)] == ["s1", "s2"]

    def test_unknown_unit(self):
        with pytest.raises(TableParseError, match="slice unit"):
            parse_slice_boxes("scan_id,slice,x_min,y_min,x_max,y_max\n", unit="cm")

    def test_fractional_index(self):
        with pytest.raises(TableParseError):
            parse_slice_boxes("scan_id,slice,x_min,y_min,x_max,y_max\ns1,1.5,0,0,1,1\n")

    def test_mm_positions(self):
        boxes = parse_slice_boxes("scan_id,slice,x_min,y_min,x_max,y_max\ns1,12.5,0,0,1,1\n",
                                  unit="mm")
        assert boxes[0].slice_position == 12.5


class TestMetadata:
    def test_attributes(self, fixtures_dir):
        meta = parse_metadata(fixtures_dir / "meta.csv")
        assert len(meta) == 4
        assert list(meta[0].attributes) == ["gender", "smoking"]
        assert meta[2].attributes["smoking"] == ""
        assert meta[2].group_value("smoking") == MISSING

    def test_duplicate_scan(self):
        with pytest.raises(TableParseError, match="lines 2 and 3"):
            parse_metadata("scan_id,gender\ns1,F\ns1,M\n")

    def test_scan_id_first(self):
        with pytest.raises(TableParseError):
            parse_metadata("gender,scan_id\nF,s1\n")

    def test_emit_reparse(self, fixtures_dir):
        meta = parse_metadata(fixtures_dir / "meta.csv")
        assert parse_metadata(emit_metadata(meta)) == meta


class TestManifestAndScores:
    def test_manifest(self, fixtures_dir):
        assert parse_manifest(fixtures_dir / "scans.csv") == ["s1", "s2", "s3", "s4"]

    def test_manifest_duplicates(self):
        with pytest.raises(TableParseError):
            parse_manifest("scan_id\ns1\ns1\n")

    def test_scores(self, fixtures_dir):
        records = parse_scores(fixtures_dir / "scores.csv")
        assert [r.label for r in records] == [1, 0, 1, 0]

    def test_bad_label(self):
        with pytest.raises(TableParseError) as info:
            parse_scores("record_id,scan_id,score,label\nr1,s1,0.5,2\n")
        assert info.value.column == "label"


class TestMalformedText:
    HEADER = "scan_id,x,y,z,probability\n"

    def test_ragged_row(self):
        with pytest.raises(TableParseError) as info:
            parse_candidates(self.HEADER + "s1,0,0,0,0.9\ns2,1,0,0,0.8,EXTRA\n")
        assert info.value.line == 3
        assert "Expected 5 fields, saw 6" in str(info.value)

    def test_invalid_utf8_file(self, tmp_path):
        path = tmp_path / "cand.csv"
        path.write_bytes(self.HEADER.encode() + b"s1,0,0,0,0.9\ns\xff2,1,0,0,0.8\n")
        with pytest.raises(TableParseError) as info:
            parse_candidates(path)
        assert (info.value.line, info.value.source) == (3, str(path))
        assert "0xff" in str(info.value)

    def test_invalid_utf8_stream(self):
        with pytest.raises(TableParseError) as info:
            parse_candidates(io.BytesIO(b"scan_id,x,y,z,probability\n\xfe,0,0,0,0.5\n"))
        assert info.value.line == 2

    @pytest.mark.parametrize("prefix", [b"\xef\xbb\xbf", b""])
    def test_byte_order_mark_file(self, tmp_path, prefix):
        path = tmp_path / "ann.csv"
        path.write_bytes(prefix + b"seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,0,0,0,5\n")
        assert parse_annotations(path)[0].scan_id == "s1"

    def test_byte_order_mark_text(self):
        rows = parse_candidates("\ufeff" + self.HEADER + "s1,1,2,3,0.5\n")
        assert rows == [Candidate("s1", Point3(1, 2, 3), 0.5)]

    def test_path_with_comma(self, tmp_path):
        folder = tmp_path / "a,b"
        folder.mkdir()
        path = folder / "cand.csv"
        path.write_text(self.HEADER + "s1,1,2,3,0.5\n")
        assert len(parse_candidates(str(path))) == 1


def test_column_map_flags():
    assert parse_column_map(["seriesuid=scan_id", " p = probability "]) == {
        "seriesuid": "scan_id", "p": "probability"}
    with pytest.raises(TableParseError):
        parse_column_map(["broken"])
