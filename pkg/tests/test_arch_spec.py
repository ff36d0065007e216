import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcuforge.arch_spec import (
    ArchitectureSpec,
    DuplicateLayerIndex,
    HeadSpec,
    InvalidSpec,
    LayerSpec,
    MalformedDocument,
    MissingBackbone,
    MissingHead,
    MissingParam,
    NonContiguousLayers,
    UnknownParam,
    UnsupportedModuleKind,
    BadParamValue,
    canonicalize,
    parse_spec,
    spec_id,
    validate_schema,
)
from mcuforge.proposal import sample_spec

from conftest import GOLDEN


def test_parse_candidate_listing(candidate):
    kinds = [layer.kind for layer in candidate.backbone]
    assert kinds == ["conv", "depthwise", "downsample", "depthwise", "downsample", "pointwise"]
    assert candidate.head == HeadSpec(num_classes=10)
    assert candidate.backbone[0].params["use_bn"] is True
    assert candidate.backbone[2].params == {"in_channels": 6, "out_channels": 12}


def test_parse_model_001(model_001_spec):
    assert [layer.kind for layer in model_001_spec.backbone][3:5] == ["ghost", "bottleneck"]
    assert validate_schema(model_001_spec).valid


def test_layer_order_follows_numeric_suffix(candidate_text):
    doc = json.loads(candidate_text)
    shuffled = dict(reversed(list(doc["backbone"].items())))
    doc["backbone"] = shuffled
    assert parse_spec(json.dumps(doc)) == parse_spec(candidate_text)


def _mutated(candidate_text, fn):
    doc = json.loads(candidate_text)
    fn(doc)
    return json.dumps(doc)


@pytest.mark.parametrize(
    "edit, error",
    [
        (lambda d: d.__setitem__("backbone", {}), MissingBackbone),
        (lambda d: d.pop("backbone"), MissingBackbone),
        (lambda d: d.pop("head"), MissingHead),
        (lambda d: d["backbone"].__setitem__("layer_7", d["backbone"].pop("layer_3")), NonContiguousLayers),
        (lambda d: d["backbone"].__setitem__("layer_03", d["backbone"]["layer_2"]), DuplicateLayerIndex),
        (lambda d: d["backbone"]["layer_2"].__setitem__("type", "gru"), UnsupportedModuleKind),
        (lambda d: d["backbone"]["layer_2"].__setitem__("type", "classifier"), UnsupportedModuleKind),
        (lambda d: d["backbone"]["layer_1"].pop("use_bn"), MissingParam),
        (lambda d: d["backbone"]["layer_3"].__setitem__("kernel_size", 3), UnknownParam),
        (lambda d: d["backbone"]["layer_1"].__setitem__("stride", 0), BadParamValue),
        (lambda d: d["backbone"]["layer_1"].__setitem__("use_bn", 1), BadParamValue),
        (lambda d: d["backbone"]["layer_1"].__setitem__("out_channels", 6.0), BadParamValue),
        (lambda d: d["head"].__setitem__("num_classes", 1), BadParamValue),
        (lambda d: d["head"].__setitem__("type", "conv"), UnsupportedModuleKind),
        (lambda d: d["backbone"].__setitem__("conv_1", {}), MalformedDocument),
    ],
)
def test_parse_errors(candidate_text, edit, error):
    with pytest.raises(error):
        parse_spec(_mutated(candidate_text, edit))


def test_layer_03_collides_with_layer_3(candidate_text):
    doc = json.loads(candidate_text)
    doc["backbone"]["layer_03"] = doc["backbone"]["layer_3"]
    with pytest.raises(DuplicateLayerIndex):
        parse_spec(json.dumps(doc))


def test_duplicate_json_key_rejected(candidate_text):
    text = candidate_text.replace('"layer_2"', '"layer_1"', 1)
    with pytest.raises(DuplicateLayerIndex):
        parse_spec(text)


def test_malformed_text():
    with pytest.raises(MalformedDocument):
        parse_spec("{not json")
    with pytest.raises(MalformedDocument):
        parse_spec("[1, 2]")


def test_validate_candidate_listing(candidate):
    report = validate_schema(candidate)
    assert report.valid and report.issues == ()


def test_validate_reports_unknown_kind(candidate):
    layers = list(candidate.backbone)
    layers[1] = LayerSpec("gru", {"in_channels": 6, "out_channels": 6})
    report = validate_schema(ArchitectureSpec(tuple(layers), candidate.head))
    assert not report.valid
    assert [(i.where, i.code) for i in report.issues] == [("layer_2", "UnsupportedModuleKind")]


def test_validate_depthwise_mismatch(candidate):
    layers = list(candidate.backbone)
    layers[1] = layers[1].replace(in_channels=6, out_channels=8)
    report = validate_schema(ArchitectureSpec(tuple(layers), candidate.head))
    assert [i.code for i in report.issues] == ["DepthwiseChannelMismatch"]


def test_depthwise_mismatch_parses_but_is_invalid(candidate_text):
    text = _mutated(candidate_text, lambda d: d["backbone"]["layer_2"].__setitem__("out_channels", 8))
    spec = parse_spec(text)
    assert not validate_schema(spec).valid


def test_validate_collects_every_issue():
    spec = ArchitectureSpec(
        (LayerSpec("conv", {"in_channels": 0, "out_channels": 4, "kernel_size": 3, "stride": 1,
                            "padding": -1, "extra": 1}),),
        HeadSpec(num_classes=1),
    )
    codes = sorted(i.code for i in validate_schema(spec).issues)
    assert codes == ["BadParamValue", "BadParamValue", "BadParamValue", "MissingParam", "UnknownParam"]


def test_empty_backbone_invalid():
    report = validate_schema(ArchitectureSpec((), HeadSpec(10)))
    assert [i.code for i in report.issues] == ["MissingBackbone"]


def test_canonical_golden(candidate):
    golden = (GOLDEN / "candidate_architecture_example.canonical.json").read_text().strip()
    assert canonicalize(candidate) == golden
    assert " " not in golden and "\n" not in golden


def test_canonical_ignores_insertion_order(candidate):
    reordered = ArchitectureSpec(
        tuple(LayerSpec(l.kind, dict(reversed(list(l.params.items())))) for l in candidate.backbone),
        candidate.head,
    )
    assert canonicalize(reordered) == canonicalize(candidate)


def test_canonical_layer_order_beyond_nine():
    layer = LayerSpec("pointwise", {"in_channels": 4, "out_channels": 4, "use_bn": True})
    spec = ArchitectureSpec((layer,) * 11, HeadSpec(10))
    doc = json.loads(canonicalize(spec))
    assert list(doc["backbone"]) == [f"layer_{i}" for i in range(1, 12)]


def test_canonical_is_injective_on_one_field(candidate):
    layers = list(candidate.backbone)
    layers[5] = layers[5].replace(out_channels=32)
    other = ArchitectureSpec(tuple(layers), candidate.head)
    assert canonicalize(other) != canonicalize(candidate)
    assert spec_id(other) != spec_id(candidate)


def test_canonicalize_requires_valid_spec():
    with pytest.raises(InvalidSpec):
        canonicalize(ArchitectureSpec((), HeadSpec(10)))


def test_spec_id_golden(candidate, golden_values):
    sid = spec_id(candidate)
    assert sid == golden_values["candidate_spec_id"]
    assert sid.startswith("model_") and len(sid) == len("model_") + 12
    assert sid == spec_id(parse_spec(canonicalize(candidate)))


def test_both_listings_round_trip(candidate, model_001_spec):
    for spec in (candidate, model_001_spec):
        again = parse_spec(canonicalize(spec))
        assert again == spec
        assert canonicalize(again) == canonicalize(spec)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**63 - 1))
def test_round_trip_sampled_specs(seed):
    from mcuforge.proposal import KNOWN_TASKS

    spec = sample_spec(KNOWN_TASKS["cifar10"], seed)
    assert validate_schema(spec).valid
    assert parse_spec(canonicalize(spec)) == spec
