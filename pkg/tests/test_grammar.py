"""Caption grammar, tokenizer, vocabulary, and parser checks."""

import numpy as np
import pytest

from hirisk.grammar import (
    ANSWER_SPAN,
    CLASSES,
    CLASS_SUGGESTION,
    COLORS,
    INSTRUCTION_PROMPT,
    LOCALIZATION_PROMPT,
    MOTIONS,
    POSITIONS,
    SUGGESTIONS,
    build_vocab,
    format_location,
    make_caption,
    parse_caption,
    tokenize,
)


def _random_spec(rng):
    color = COLORS[rng.integers(len(COLORS))]
    obj_class = CLASSES[rng.integers(len(CLASSES))]
    motion = list(MOTIONS)[rng.integers(len(MOTIONS))]
    position = list(POSITIONS)[rng.integers(len(POSITIONS))]
    sugg = int(rng.integers(20))
    return color, obj_class, motion, position, sugg


def test_render_parse_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        color, obj_class, motion, position, sugg = _random_spec(rng)
        caption = make_caption(color, obj_class, motion, position, sugg)
        parsed = parse_caption(tokenize(caption))
        assert parsed.color == color
        assert parsed.obj_class == obj_class
        assert parsed.motion == motion
        assert parsed.position == position
        assert parsed.intention == position
        bank = SUGGESTIONS[CLASS_SUGGESTION[obj_class]]
        assert parsed.suggestion == " ".join(tokenize(bank[sugg]))


def test_answer_span_covers_color_and_class():
    caption = make_caption("red", "cone", "cross_left", "left", 3)
    toks = tokenize(caption)
    lo, hi = ANSWER_SPAN
    assert toks[lo:hi] == ["red", "cone"]
    assert toks[:3] == ["there", "is", "a"]


def test_parse_garbage_yields_nones():
    parsed = parse_caption(["blue", "banana", "jumps", "."])
    assert parsed.color is None
    assert parsed.obj_class is None
    assert parsed.motion is None
    assert parsed.position is None
    assert parsed.intention is None
    assert parsed.suggestion is None
    assert parsed.box is None
    # empty input is fine too
    assert parse_caption([]).obj_class is None


def test_format_location_fixed_point():
    assert (
        format_location((0.0, 0.0, 1.0, 1.0))
        == "The location is at [0.000, 0.000, 1.000, 1.000]."
    )


def test_location_round_trip_through_tokens():
    box = (0.465, 0.495, 0.490, 0.614)
    caption = make_caption("gray", "truck", "into_band", "in_band", 0)
    text = caption + " " + format_location(box)
    parsed = parse_caption(tokenize(text))
    assert parsed.box == pytest.approx(box, abs=1e-9)
    assert parsed.obj_class == "truck"
    # digits round-trip at three decimals
    rng = np.random.default_rng(11)
    for _ in range(200):
        b = np.round(np.sort(rng.uniform(0, 1, size=4)), 3)
        parsed = parse_caption(tokenize(format_location(tuple(b))))
        assert parsed.box == pytest.approx(tuple(b), abs=1e-9)


def test_corrupted_location_returns_none_box():
    toks = tokenize(
        "The location is at [0.465, 0.495, 0.490, 0.614]."
    )
    # swap one digit for a word the number parser cannot eat
    bad = ["x" if t == "4" else t for t in toks]
    parsed = parse_caption(bad)
    assert parsed.box is None
    # doubled decimal point inside a group also fails cleanly
    bad2 = ["the", "location", "is", "at", "[", "0", ".", ".", "4", ",",
            "0", ",", "0", ",", "1", "]"]
    assert parse_caption(bad2).box is None


def test_vocab_encode_decode():
    v = build_vocab()
    ids = v.encode("There is a red car")
    assert v.decode(ids) == ["there", "is", "a", "red", "car"]
    assert v.unk_id == v.encode("zzzunknownzzz")[0]
    # decode trims at eos and skips pad
    some = v.token_to_id["car"]
    assert v.decode([some, v.eos_id, some]) == ["car"]
    assert v.decode([v.pad_id, some, v.pad_id]) == ["car"]


def test_vocab_covers_full_grammar():
    v = build_vocab()
    for color in COLORS:
        for obj_class in CLASSES:
            for motion in MOTIONS:
                for position in POSITIONS:
                    caption = make_caption(color, obj_class, motion, position, 19)
                    assert v.unk_id not in v.encode(caption)
    assert v.unk_id not in v.encode(format_location((0.123, 0.456, 0.789, 0.999)))
    assert v.unk_id not in v.encode(INSTRUCTION_PROMPT)
    assert v.unk_id not in v.encode(LOCALIZATION_PROMPT)


def test_prompt_token_lengths():
    assert len(tokenize(INSTRUCTION_PROMPT)) == 19
    assert len(tokenize(LOCALIZATION_PROMPT)) == 13
