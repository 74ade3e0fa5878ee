from pathlib import Path

import pytest

from isg.content import (
    Block,
    BlockKind,
    ContentToken,
    ImageRef,
    InterleavedSequence,
    StructureSignature,
    TokenScope,
    labelled_parts,
    normalize_sequence,
    resolve_token,
    structure_signature,
    tokens_for,
)
from isg.errors import InvalidToken, TokenOutOfRange

from tests.conftest import png_ref


def test_token_parse_and_render():
    token = ContentToken.parse("<gen_img3>")
    assert token.scope is TokenScope.GEN
    assert token.kind is BlockKind.IMAGE
    assert token.index == 3
    assert token.render() == "<gen_img3>"
    assert str(ContentToken.parse(" <query_text1> ")) == "<query_text1>"


@pytest.mark.parametrize("raw", ["<gen_img0>", "<gen_image1>", "gen_img1", "<answer_text1>", "<gen_img-1>", ""])
def test_token_parse_rejects_bad_grammar(raw):
    with pytest.raises(InvalidToken):
        ContentToken.parse(raw)


def test_token_validates_from_string_and_serializes_as_text():
    token = ContentToken.model_validate("<query_img2>")
    assert token == ContentToken(scope=TokenScope.QUERY, kind=BlockKind.IMAGE, index=2)
    assert token.model_dump() == "<query_img2>"


def test_normalize_merges_adjacent_text_with_newline():
    image = png_ref(1)
    seq = InterleavedSequence.of("a", "b", image, "c", "d", "e")
    normalized = normalize_sequence(seq)
    assert [b.kind for b in normalized.blocks] == [BlockKind.TEXT, BlockKind.IMAGE, BlockKind.TEXT]
    assert normalized.blocks[0].text == "a\nb"
    assert normalized.blocks[2].text == "c\nd\ne"
    assert normalized.is_normalized
    assert not seq.is_normalized


def test_normalize_is_idempotent():
    seq = InterleavedSequence.of("a", "b", png_ref(1), png_ref(2), "c")
    once = normalize_sequence(seq)
    assert normalize_sequence(once) == once


def test_structure_signature_text():
    seq = InterleavedSequence.of(png_ref(1), "one", png_ref(2), "two")
    assert str(structure_signature(seq)) == "I,T,I,T"
    assert str(structure_signature(InterleavedSequence())) == ""


def test_signature_rejects_adjacent_text():
    with pytest.raises(ValueError):
        StructureSignature(sequence=(BlockKind.TEXT, BlockKind.TEXT))


def test_empty_text_block_is_rejected():
    with pytest.raises(ValueError):
        Block.of_text("   ")


def test_resolve_token_by_scope_and_kind():
    query = InterleavedSequence.of(png_ref(1), "make it blue")
    answer = InterleavedSequence.of("first", png_ref(2), "second")
    assert resolve_token(ContentToken.parse("<query_text1>"), query, answer).text == "make it blue"
    assert resolve_token(ContentToken.parse("<gen_text2>"), query, answer).text == "second"
    assert resolve_token(ContentToken.parse("<gen_img1>"), query, answer).image == png_ref(2)


def test_resolve_token_out_of_range():
    answer = InterleavedSequence.of("only text")
    with pytest.raises(TokenOutOfRange) as info:
        resolve_token(ContentToken.parse("<gen_img1>"), InterleavedSequence.of("q"), answer)
    assert info.value.available == 0


def test_labelled_parts_with_and_without_images():
    image = png_ref(3)
    seq = InterleavedSequence.of(image, "caption")
    assert labelled_parts(seq, TokenScope.QUERY) == ["<query_img1>:", image, "<query_text1>: caption"]
    assert labelled_parts(seq, TokenScope.GEN, with_images=False) == ["<gen_img1>: [image]", "<gen_text1>: caption"]
    assert labelled_parts(seq, TokenScope.GEN, with_images=False, prefix="golden") == [
        "<golden_img1>: [image]",
        "<golden_text1>: caption",
    ]


def test_tokens_for_counts_per_kind():
    seq = InterleavedSequence.of("a", png_ref(1), "b", png_ref(2))
    assert [str(t) for t in tokens_for(seq, TokenScope.GEN)] == [
        "<gen_text1>",
        "<gen_img1>",
        "<gen_text2>",
        "<gen_img2>",
    ]


def test_document_dump_and_load(tmp_path: Path):
    image = png_ref(4)
    seq = InterleavedSequence.of("hello", image)
    target = tmp_path / "answers" / "0001.json"
    seq.dump(target, image_dir=tmp_path / "answers" / "images")

    loaded = InterleavedSequence.load(target)
    assert loaded.texts == ["hello"]
    assert loaded.images[0].read_bytes() == image.read_bytes()
    assert loaded.images[0].digest() == image.digest()


def test_from_document_rejects_unknown_block_type():
    with pytest.raises(ValueError):
        InterleavedSequence.from_document({"blocks": [{"type": "video", "path": "x.mp4"}]})


def test_image_ref_from_path_reads_file(fixtures_dir: Path):
    ref = ImageRef.from_path(fixtures_dir / "corpus" / "images" / "tiny.png")
    assert ref.read_bytes().startswith(b"\x89PNG")
    assert ref.data_url().startswith("data:image/png;base64,")
