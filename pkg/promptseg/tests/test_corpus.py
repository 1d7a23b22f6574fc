import json
import string
from pathlib import Path

import numpy as np
import pytest

from app.exceptions import InputValidationError, ManifestParseError
from app.schemas.corpus import SampleRecord, SplitSpec
from app.services.corpus import (
    build_concept_dictionary,
    build_prompt_items,
    canonicalize,
    expand_to_triplets,
    instances_from_label_map,
    letterbox,
    letterbox_mask,
    load_manifest,
    read_dictionary,
    split_train_val,
    to_canvas,
    unletterbox_mask,
    write_dictionary,
)
from app.services.prng import SplitMix64, fisher_yates, seed_from_text
from tests.conftest import write_manifest, write_sample

GOLDEN_TRAIN = "q d i l r s e g t h k b o j m c f".split()
GOLDEN_VAL = "a p n".split()


def _record(dataset="demo", labels=None, record_id="r0"):
    return SampleRecord(id=record_id, image="x.png", mask="x.png", dataset=dataset, labels=labels or {1: "lung"})


# ── PRNG ──

def test_splitmix64_reference_outputs():
    rng = SplitMix64(0)
    assert rng.next_u64() == 0xE220A8397B1DCDAF
    assert rng.next_u64() == 0x6E789E6AA1B965F4

    rng = SplitMix64(42)
    assert rng.next_u64() == 0xBDD732262FEB6E95
    assert rng.next_u64() == 0x28EFE333B266F103


def test_next_float_in_unit_interval():
    rng = SplitMix64(7)
    values = [rng.next_float() for _ in range(1000)]
    assert all(0.0 <= v < 1.0 for v in values)


def test_fisher_yates_is_a_permutation_and_leaves_input_alone():
    items = list(range(50))
    shuffled = fisher_yates(items, SplitMix64(3))
    assert sorted(shuffled) == items
    assert items == list(range(50))
    assert shuffled != items


def test_seed_from_text_is_stable():
    assert seed_from_text("polyp") == seed_from_text("polyp")
    assert seed_from_text("polyp") != seed_from_text("lung")


# ── Manifest ──

def test_load_manifest_resolves_paths_and_skips_blank_lines(tmp_path):
    entry = write_sample(tmp_path, "s1", np.zeros((4, 4)))
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n" + json.dumps(entry) + "\n\n", encoding="utf-8")

    records = load_manifest(path)

    assert len(records) == 1
    assert records[0].image_path == tmp_path / "images" / "s1.png"
    assert records[0].label_map == {1: "polyp"}


def test_load_manifest_names_broken_line(tmp_path):
    good = json.dumps({"id": "a", "image": "a.png", "mask": "a.png", "dataset": "d", "labels": {"1": "x"}})
    lines = [good.replace('"a"', f'"{i}"') for i in range(6)] + ['{"id": "broken", "image": ']
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    with pytest.raises(ManifestParseError) as exc:
        load_manifest(path)

    assert exc.value.line_number == 7
    assert "line 7" in str(exc.value)
    assert exc.value.exit_code == 2


def test_load_manifest_rejects_missing_field_and_duplicates(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text(json.dumps({"id": "a", "image": "a.png", "dataset": "d"}) + "\n", encoding="utf-8")
    with pytest.raises(ManifestParseError) as exc:
        load_manifest(path)
    assert "mask" in str(exc.value)

    entry = {"id": "a", "image": "a.png", "mask": "a.png", "dataset": "d", "labels": {"1": "x"}}
    path.write_text(json.dumps(entry) + "\n" + json.dumps(entry) + "\n", encoding="utf-8")
    with pytest.raises(InputValidationError, match="Duplicate"):
        load_manifest(path)


def test_label_ids_must_fit_in_png():
    with pytest.raises(ValueError):
        _record(labels={0: "background"})
    with pytest.raises(ValueError):
        _record(labels={256: "lung"})


# ── Dictionary ──

def test_canonicalize_trims_lowercases_and_is_idempotent():
    assert canonicalize("  Left   Lung ") == "left lung"
    assert canonicalize(canonicalize("  Left   Lung ")) == "left lung"


def test_dictionary_vocabulary_is_sorted_and_deduplicated():
    records = [
        _record("A", {1: "lung"}, "a0"),
        _record("B", {1: "Polyp", 2: "instrument"}, "b0"),
        _record("C", {3: "polyp"}, "c0"),
    ]
    dictionary = build_concept_dictionary(records)

    assert dictionary.vocabulary == ["instrument", "lung", "polyp"]
    assert dictionary.concept_for("B", 1) == "polyp"
    assert dictionary.concepts_for_dataset("B") == ["polyp", "instrument"]
    assert dictionary.label_ids_for("C", "polyp") == [3]


def test_dictionary_conflict_is_an_error():
    records = [_record("A", {1: "lung"}, "a0"), _record("A", {1: "heart"}, "a1")]
    with pytest.raises(InputValidationError, match="Conflicting"):
        build_concept_dictionary(records)


def test_dictionary_file_roundtrip(tmp_path):
    dictionary = build_concept_dictionary([_record("B", {1: "polyp", 2: "instrument"})])
    write_dictionary(dictionary, tmp_path / "dictionary.json")
    assert read_dictionary(tmp_path / "dictionary.json") == dictionary


# ── Triplets ──

def test_empty_mask_has_no_instances():
    record = _record()
    dictionary = build_concept_dictionary([record])
    masks, concepts, _ = instances_from_label_map(np.zeros((8, 8), dtype=np.int64), record, dictionary)
    assert masks == [] and concepts == []


def test_instances_are_eight_connected_and_ordered():
    record = _record(labels={1: "lung", 2: "heart"})
    dictionary = build_concept_dictionary([record])
    label_map = np.zeros((8, 8), dtype=np.int64)
    label_map[5, 5] = 1
    label_map[6, 6] = 1  # diagonal neighbour joins the blob above
    label_map[0, 6] = 1
    label_map[2, 1] = 2

    masks, concepts, label_ids = instances_from_label_map(label_map, record, dictionary)

    assert concepts == ["lung", "lung", "heart"]
    assert label_ids == [1, 1, 2]
    assert masks[0][0, 6] and masks[0].sum() == 1
    assert masks[1].sum() == 2


def test_unknown_label_id_is_rejected():
    record = _record()
    dictionary = build_concept_dictionary([record])
    label_map = np.zeros((4, 4), dtype=np.int64)
    label_map[1, 1] = 9
    with pytest.raises(InputValidationError, match="label 9"):
        instances_from_label_map(label_map, record, dictionary)


def test_expand_to_triplets_reads_files(tiny_corpus):
    records = load_manifest(tiny_corpus)
    dictionary = build_concept_dictionary(records)

    sample = expand_to_triplets(records[0], dictionary)

    assert sample.image.shape[:2] == (16, 16)
    assert sample.image.dtype == np.float32
    assert sample.concepts == ["polyp", "instrument"]
    assert len(sample.instances_of("polyp")) == 1


def test_rgb_mask_is_rejected(tmp_path):
    from PIL import Image

    entry = write_sample(tmp_path, "s1", np.zeros((4, 4)))
    Image.new("RGB", (4, 4)).save(tmp_path / "masks" / "s1.png")
    records = load_manifest(write_manifest(tmp_path, [entry]))
    with pytest.raises(InputValidationError, match="single-channel"):
        expand_to_triplets(records[0], build_concept_dictionary(records))


# ── Letterbox ──

def test_letterbox_pads_bottom_right_and_inverts():
    mask = np.zeros((20, 10), dtype=np.uint8)
    mask[4:12, 2:6] = 1

    boxed, info = letterbox_mask(mask, 40)

    assert boxed.shape == (40, 40)
    assert info.resized_size == (40, 20)
    assert not boxed[:, 20:].any()
    np.testing.assert_array_equal(unletterbox_mask(boxed, info), mask)


def test_letterbox_image_keeps_range():
    image = np.random.default_rng(0).uniform(size=(12, 30, 3)).astype(np.float32)
    boxed, info = letterbox(image, 60)
    assert boxed.shape == (60, 60, 3)
    assert info.resized_size == (24, 60)
    assert boxed.min() >= 0.0 and boxed.max() <= 1.0
    assert not boxed[24:].any()


def test_to_canvas_drops_vanished_instances(tiny_corpus, caplog):
    records = load_manifest(tiny_corpus)
    dictionary = build_concept_dictionary(records)
    sample = expand_to_triplets(records[0], dictionary)
    speck = np.zeros((16, 16), dtype=bool)
    speck[15, 0] = True
    sample.instance_masks.append(speck)
    sample.concepts.append("polyp")
    sample.label_ids.append(1)

    boxed, _ = to_canvas(sample, 4)

    assert len(boxed.instance_masks) < len(sample.instance_masks)
    assert "vanished" in caplog.text


# ── Splits ──

def test_golden_split_for_twenty_ids():
    ids = list(string.ascii_lowercase[:20])
    train, val = split_train_val(list(reversed(ids)), SplitSpec())
    assert train == GOLDEN_TRAIN
    assert val == GOLDEN_VAL


def test_split_sizes_and_partition():
    ids = [f"id{i:03d}" for i in range(100)]
    train, val = split_train_val(ids, SplitSpec(train_fraction=0.85, seed=42))
    assert len(train) == 85 and len(val) == 15
    assert set(train) | set(val) == set(ids)
    assert not set(train) & set(val)
    assert split_train_val(ids, SplitSpec()) == (train, val)


def test_split_of_nothing_is_an_error():
    with pytest.raises(InputValidationError):
        split_train_val([], SplitSpec())


def test_prompt_items_cover_every_dataset_concept(tiny_corpus):
    records = load_manifest(tiny_corpus)
    items = build_prompt_items(records, build_concept_dictionary(records))
    assert len(items) == 3 * 2 + 1
    assert {(i.record_id, i.concept) for i in items if i.record_id == "chest_0"} == {("chest_0", "lung")}


def test_golden_split_file_fixture_matches():
    golden = Path(__file__).parent / "data" / "golden_split_seed42.txt"
    lines = golden.read_text(encoding="utf-8").splitlines()
    assert lines == ["train: " + " ".join(GOLDEN_TRAIN), "val: " + " ".join(GOLDEN_VAL)]
