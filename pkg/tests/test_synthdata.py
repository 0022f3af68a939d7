import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmoe.errors import DomainError, FormatError, SpecError
from conceptmoe.synthdata import (
    DATASET_MAGIC,
    PRESETS,
    Dataset,
    SynthSpec,
    generate,
    make_dataset,
    mean_color,
    occlude_parts,
    part_mask,
    read_dataset,
    render,
    write_dataset,
)

SPEC = SynthSpec()


@pytest.fixture(scope="module")
def small():
    return generate(SPEC, 40)


def test_spec_validation():
    with pytest.raises(SpecError):
        SynthSpec(num_classes=17)  # 4 * 4 relevant combinations at most
    with pytest.raises(SpecError):
        SynthSpec(relevant_parts=())
    with pytest.raises(SpecError):
        SynthSpec(relevant_parts=(0, 4))
    with pytest.raises(SpecError):
        SynthSpec(num_parts=3)
    SynthSpec(num_classes=16)


def test_spec_json_round_trip():
    for spec in PRESETS.values():
        assert SynthSpec.from_json(spec.to_json()) == spec


def test_generate_is_deterministic(small):
    assert generate(SPEC, 40) == small


def test_n_equals_classes_gives_one_each():
    labels = sorted(s.label for s in generate(SPEC, SPEC.num_classes))
    assert labels == list(range(SPEC.num_classes))


@pytest.mark.parametrize("n", [1, 7, 8, 13, 50])
def test_class_balance(n):
    counts = np.bincount([s.label for s in generate(SPEC, n)], minlength=SPEC.num_classes)
    assert counts.max() - counts.min() <= 1


def test_generate_rejects_empty():
    with pytest.raises(SpecError):
        generate(SPEC, 0)


def test_samples_are_well_formed(small):
    for s in small:
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.label == SPEC.label_of(s.attributes)
        assert np.array_equal(s.part_mask, part_mask(SPEC))


def test_label_ignores_irrelevant_parts():
    attrs = np.array([1, 2, 3, 0])
    for p in SPEC.irrelevant_parts:
        for v in range(SPEC.attributes_per_part):
            other = attrs.copy()
            other[p] = v
            assert SPEC.label_of(other) == SPEC.label_of(attrs)


@pytest.mark.parametrize("spec", list(PRESETS.values()))
def test_mask_tiles_image(spec):
    m = part_mask(spec)
    assert m.shape == (32, 32)
    assert set(np.unique(m)) == set(range(spec.num_parts))


def test_render_pattern_only_changes_its_slot():
    base = render(SPEC, [0, 0, 0, 0])
    changed = render(SPEC, [0, 2, 0, 0])
    diff = np.any(base != changed, axis=0)
    assert diff.any()
    assert np.all(part_mask(SPEC)[diff] == 1)


def test_irrelevant_attributes_independent_of_label():
    samples = generate(SPEC, 4000)
    labels = np.array([s.label for s in samples])
    for p in SPEC.irrelevant_parts:
        attrs = np.array([s.attributes[p] for s in samples])
        joint = np.zeros((SPEC.num_classes, SPEC.attributes_per_part))
        np.add.at(joint, (labels, attrs), 1)
        joint /= joint.sum()
        outer = joint.sum(1, keepdims=True) * joint.sum(0, keepdims=True)
        mi = float(np.sum(joint * np.log(joint / outer)))
        assert mi < 0.02


# ---- occlusion ----------------------------------------------------------------


def test_occlude_nothing_is_identity(small):
    s = small[0]
    assert occlude_parts(s, [], [0.5, 0.5, 0.5]) == s


def test_occlude_everything_is_constant(small):
    fill = mean_color(small)
    out = occlude_parts(small[0], range(SPEC.num_parts), fill)
    assert np.all(out.image == fill[:, None, None])


@settings(max_examples=30, deadline=None)
@given(st.sets(st.integers(0, 3)), st.sets(st.integers(0, 3)))
def test_occlusion_composes_as_union(a, b):
    s = generate(SPEC, 1)[0]
    fill = np.array([0.3, 0.4, 0.5], dtype=np.float32)
    assert occlude_parts(occlude_parts(s, a, fill), b, fill) == occlude_parts(s, a | b, fill)


def test_occlude_unknown_slot(small):
    with pytest.raises(DomainError):
        occlude_parts(small[0], [4], [0, 0, 0])


# ---- file format --------------------------------------------------------------


def test_round_trip_bit_exact(tmp_path, small):
    path = tmp_path / "d.cmds"
    write_dataset(small, path, SPEC)
    back = read_dataset(path)
    assert back.samples == small
    assert back.spec == SPEC


def test_round_trip_other_preset(tmp_path):
    ds = make_dataset(PRESETS["center"], 5)
    write_dataset(ds, tmp_path / "c.cmds")
    back = read_dataset(tmp_path / "c.cmds")
    assert back.samples == ds.samples and back.spec == ds.spec


def test_empty_list_is_header_only(tmp_path):
    path = tmp_path / "e.cmds"
    write_dataset([], path)
    assert len(read_dataset(path)) == 0
    assert path.read_bytes()[:4] == DATASET_MAGIC


def test_truncated_file(tmp_path, small):
    path = tmp_path / "t.cmds"
    write_dataset(small[:3], path)
    raw = path.read_bytes()
    for cut in (2, 20, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_dataset(path)


def test_bad_magic_and_version(tmp_path, small):
    path = tmp_path / "m.cmds"
    write_dataset(small[:1], path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        read_dataset(path)
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(path)


def test_dataset_views(small):
    ds = Dataset(small, SPEC)
    assert ds.images().shape == (40, 3, 32, 32) and ds.images().dtype == np.float64
    assert ds.labels().tolist() == [s.label for s in small]
    assert ds.subset([1, 3]).samples == [small[1], small[3]]


def test_spec_seed_changes_data():
    a = generate(SPEC, 4)
    b = generate(replace(SPEC, seed=43), 4)
    assert a != b
