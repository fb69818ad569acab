from __future__ import annotations

import random

import pytest

from curasr.similarity import (
    NormalizerConfig,
    consistency_score,
    edit_distance,
    normalize_text,
)

from oracles import levenshtein_full_matrix, oracle_consistency

# Mixed alphabet: Latin, digits, CJK, combining mark, punctuation, space.
ALPHABET = "abcde01台北市夜雨聲́。!? "


def random_text(rng: random.Random, max_len: int = 32) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, max_len)))


class TestNormalize:
    def test_empty(self):
        assert normalize_text("") == ""

    def test_latin_all_options(self):
        assert normalize_text("Hello, World!") == "helloworld"

    def test_cjk_keeps_digits_drops_punctuation_and_space(self):
        assert normalize_text("台北 101 。") == "台北101"

    def test_options_off_keeps_text(self):
        cfg = NormalizerConfig(case_fold=False, strip_punctuation=False, strip_whitespace=False)
        assert normalize_text("Hello, World!", cfg) == "Hello, World!"

    def test_case_fold_only(self):
        cfg = NormalizerConfig(strip_punctuation=False, strip_whitespace=False)
        assert normalize_text("Hello, World!", cfg) == "hello, world!"

    def test_rejects_non_canonical_form(self):
        with pytest.raises(ValueError):
            NormalizerConfig(unicode_form="NFD")

    def test_idempotent_on_random_strings(self):
        rng = random.Random(11)
        configs = [
            NormalizerConfig(),
            NormalizerConfig(case_fold=False),
            NormalizerConfig(strip_punctuation=False),
            NormalizerConfig(strip_whitespace=False),
            NormalizerConfig(unicode_form="NFKC"),
        ]
        for _ in range(500):
            text = random_text(rng)
            for cfg in configs:
                once = normalize_text(text, cfg)
                assert normalize_text(once, cfg) == once

    def test_idempotent_when_stripping_exposes_combining_mark(self):
        # Stripping "!" leaves e + combining acute, which must re-compose.
        text = "e!́"
        once = normalize_text(text)
        assert once == "é"
        assert normalize_text(once) == once


class TestConsistencyScore:
    def test_identical(self):
        assert consistency_score("abcd", "abcd") == 1.0

    def test_one_empty_is_zero(self):
        assert consistency_score("abcd", "") == 0.0
        assert consistency_score("", "abcd") == 0.0

    def test_single_edit_over_four(self):
        # Full-matrix DP gives distance 1 over max length 4.
        assert levenshtein_full_matrix("abcd", "abce") == 1
        assert consistency_score("abcd", "abce") == pytest.approx(0.75)

    def test_cjk_single_edit_over_two(self):
        assert levenshtein_full_matrix("台北", "台中") == 1
        assert consistency_score("台北", "台中") == pytest.approx(0.5)

    def test_both_empty_outside_domain(self):
        with pytest.raises(ValueError):
            consistency_score("", "")

    def test_matches_full_matrix_oracle_exactly(self):
        rng = random.Random(23)
        for _ in range(1000):
            a, b = random_text(rng), random_text(rng)
            assert edit_distance(a, b) == levenshtein_full_matrix(a, b)
            if a or b:
                assert consistency_score(a, b) == oracle_consistency(a, b)

    def test_symmetry_identity_bounds(self):
        rng = random.Random(31)
        for _ in range(300):
            a, b = random_text(rng), random_text(rng)
            if not a and not b:
                continue
            score = consistency_score(a, b)
            assert 0.0 <= score <= 1.0
            assert score == consistency_score(b, a)
            if a:
                assert consistency_score(a, a) == 1.0

    def test_triangle_inequality_of_distance(self):
        rng = random.Random(43)
        for _ in range(300):
            a, b, c = random_text(rng, 20), random_text(rng, 20), random_text(rng, 20)
            assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
