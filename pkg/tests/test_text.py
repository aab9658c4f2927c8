"""Prompt rendering and the pluggable text encoders."""

import itertools

import numpy as np
import pytest

from abutmesh.synthetic import SERIES, SYSTEMS, location_vocabulary
from abutmesh.text import (
    FileTextEncoder,
    HashTextEncoder,
    PromptError,
    TextEmbedding,
    encode_text,
    render_prompt,
    write_embedding_table,
)


def test_render_template():
    p = render_prompt("Bottom-45", "OSSTEM", "R")
    assert p.rendered == "Bottom-45 OSSTEM R"
    assert render_prompt("Top-21", "SYSGEN", "A").rendered == "Top-21 SYSGEN A"


@pytest.mark.parametrize("bad", [("", "OSSTEM", "R"), ("Top-21", "  ", "A"), ("Top-21", "X", "")])
def test_render_rejects_empty_fields(bad):
    with pytest.raises(PromptError):
        render_prompt(*bad)


def test_embedding_validation():
    with pytest.raises(PromptError):
        TextEmbedding(np.zeros((0, 4)))
    with pytest.raises(PromptError):
        TextEmbedding(np.array([[np.nan, 1.0]]))


def test_hash_encoder_deterministic():
    enc = HashTextEncoder(width=512, seed=0)
    p = render_prompt("Bottom-45", "OSSTEM", "R")
    a = enc.encode(p).vectors
    b = HashTextEncoder(width=512, seed=0).encode(p).vectors
    assert np.array_equal(a, b)
    c = HashTextEncoder(width=512, seed=1).encode(p).vectors
    assert not np.array_equal(a, c)


def test_hash_encoder_token_mode_shape():
    enc = HashTextEncoder(width=512, seed=0)
    emb = enc.encode(render_prompt("Bottom-45", "OSSTEM", "R"), mode="tokens")
    assert emb.vectors.shape == (3, 512)
    assert emb.token_count == 3
    sent = enc.encode(render_prompt("Bottom-45", "OSSTEM", "R"), mode="sentence")
    assert sent.vectors.shape == (1, 512)
    assert np.linalg.norm(sent.vectors) == pytest.approx(1.0)


def test_hash_encoder_unknown_mode():
    enc = HashTextEncoder(width=8, seed=0)
    with pytest.raises(PromptError, match="mode"):
        enc.encode(render_prompt("Top-11", "DIO", "S"), mode="wat")


def test_hash_encoder_separates_label_vocabulary():
    # No collisions across the whole prompt vocabulary, and changing only the
    # series must change the embedding.
    enc = HashTextEncoder(width=512, seed=0)
    seen = {}
    for loc, system, series in itertools.product(
        location_vocabulary()[:8], SYSTEMS, SERIES
    ):
        vec = enc.encode(render_prompt(loc, system, series)).vectors
        key = vec.tobytes()
        assert key not in seen, "embedding collision across distinct prompts"
        seen[key] = (loc, system, series)
    base = enc.encode(render_prompt("Bottom-45", "OSSTEM", "R")).vectors
    other = enc.encode(render_prompt("Bottom-45", "OSSTEM", "A")).vectors
    assert np.abs(base - other).max() > 1e-6


def test_encode_text_default_encoder():
    p = render_prompt("Bottom-45", "OSSTEM", "R")
    a = encode_text(p)
    b = encode_text(p)
    assert np.array_equal(a.vectors, b.vectors)
    assert a.width == 512


def test_file_encoder_roundtrip(tmp_path):
    enc = HashTextEncoder(width=16, seed=3)
    prompts = [render_prompt("Bottom-45", "OSSTEM", "R"), render_prompt("Top-21", "DIO", "S")]
    table = {p.rendered: enc.encode(p).vectors[0] for p in prompts}
    path = tmp_path / "emb.tsv"
    write_embedding_table(path, table)
    fenc = FileTextEncoder(path)
    assert fenc.width == 16
    got = fenc.encode(prompts[0]).vectors[0]
    assert np.allclose(got, table[prompts[0].rendered], atol=1e-8)


def test_file_encoder_missing_prompt(tmp_path):
    path = tmp_path / "emb.tsv"
    write_embedding_table(path, {"Top-11 DIO S": np.zeros(4)})
    fenc = FileTextEncoder(path)
    with pytest.raises(PromptError, match="no embedding on file"):
        fenc.encode(render_prompt("Bottom-45", "OSSTEM", "R"))
    with pytest.raises(PromptError, match="sentence"):
        fenc.encode(render_prompt("Top-11", "DIO", "S"), mode="tokens")


def test_file_encoder_rejects_ragged(tmp_path):
    path = tmp_path / "emb.tsv"
    path.write_text("Top-11 DIO S\t1 2 3\nTop-12 DIO S\t1 2\n")
    with pytest.raises(PromptError, match="width"):
        FileTextEncoder(path)
