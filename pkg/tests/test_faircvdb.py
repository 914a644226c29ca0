import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from faircvtest.faircvdb import (
    CSV_HEADER, BlockDistribution, CompetencyDistributions, ConfigError, DatasetParseError,
    GenerationConfig, ScoringWeights, apply_bias_penalty, compute_unbiased_score,
    generate_dataset, load_dataset, sample_competencies, save_dataset, split_dataset,
)
from faircvtest.synthembed import EmbeddingGenConfig

LEVELS = {
    "education": {0.0, 0.2, 0.4, 0.6, 0.8, 1.0},
    "experience": {k / 10 for k in range(11)},
    "availability": {0.0, 0.5, 1.0},
    "recommendation": {0.0, 1.0},
}


class TestSampling:
    def test_seeded(self):
        rng = np.random.default_rng(42)
        a, b = sample_competencies(rng), sample_competencies(rng)
        assert a.shape == (12,) and not np.array_equal(a, b)
        rng = np.random.default_rng(42)
        np.testing.assert_array_equal(sample_competencies(rng), a)
        np.testing.assert_array_equal(sample_competencies(rng), b)

    def test_point_mass(self):
        zero = BlockDistribution((0.0, 1.0), (1.0, 0.0))
        dists = CompetencyDistributions(zero, zero, zero, zero, zero, first_language_min=0.0)
        np.testing.assert_array_equal(sample_competencies(np.random.default_rng(0), dists), 0)

    def test_education_frequencies(self):
        dists = CompetencyDistributions()
        c = sample_competencies(np.random.default_rng(1), dists, size=100_000)
        for level, p in zip(dists.education.levels, dists.education.probs):
            assert np.mean(np.isclose(c[:, 0], level)) == pytest.approx(p, abs=0.01)

    def test_levels_and_first_language(self):
        c = sample_competencies(np.random.default_rng(2), size=5000)
        for j, name in enumerate(LEVELS):
            assert set(np.round(c[:, j], 12)) <= {round(x, 12) for x in LEVELS[name]}
        langs = {0.0, round(1 / 3, 12), round(2 / 3, 12), 1.0}
        assert set(np.round(c[:, 4:].ravel(), 12)) <= langs
        assert c[:, 4].min() >= 1 / 3 - 1e-12

    def test_bad_probabilities(self):
        with pytest.raises(ConfigError):
            BlockDistribution((0.0, 1.0), (0.5, 0.4))
        with pytest.raises(ConfigError):
            BlockDistribution((0.0, 1.5), (0.5, 0.5))


class TestScores:
    def test_zero_and_one(self):
        w = ScoringWeights()
        assert compute_unbiased_score(np.zeros(12), w, 0.0) == 0.0
        assert compute_unbiased_score(np.ones(12), w, 0.0) == pytest.approx(1.0, abs=1e-12)

    def test_education_only(self):
        c = np.zeros(12)
        c[0] = 1.0
        assert compute_unbiased_score(c, ScoringWeights(), 0.02) == pytest.approx(0.27, abs=1e-12)

    def test_clamped(self):
        assert compute_unbiased_score(np.ones(12), ScoringWeights(), 0.05) == 1.0
        assert compute_unbiased_score(np.zeros(12), ScoringWeights(), -0.05) == 0.0

    def test_penalties(self):
        w = ScoringWeights()
        assert apply_bias_penalty(0.80, 1, 0, w, "gender") == pytest.approx(0.65, abs=1e-12)
        assert apply_bias_penalty(0.10, 1, 0, w, "gender") == 0.0
        assert apply_bias_penalty(0.80, 0, 2, ScoringWeights(gender_penalty=0.9), "gender") == 0.80
        np.testing.assert_allclose(
            apply_bias_penalty([0.5, 0.5, 0.5], [0, 0, 0], [0, 1, 2], w, "ethnicity"),
            [0.5, 0.425, 0.35],
        )

    def test_weight_validation(self):
        with pytest.raises(ConfigError):
            ScoringWeights(alpha=(0.1,) * 12)
        with pytest.raises(ConfigError):
            ScoringWeights(ethnicity_penalty=(0.1, 0.1, 0.1))
        assert sum(ScoringWeights().alpha) == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def big():
    return generate_dataset(24_000, seed=3)


class TestGenerate:
    def test_balance(self, big):
        assert len(big) == 24_000
        np.testing.assert_array_equal(np.bincount(big.groups, minlength=6), 4000)

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError, match="multiple of 6"):
            generate_dataset(100)

    def test_profile_invariants(self, big):
        male = big.gender == 0
        assert np.all(big.t_gender <= big.t_unbiased)
        assert np.array_equal(big.t_gender[male], big.t_unbiased[male])
        g1 = big.ethnicity == 0
        assert np.all(big.t_ethnicity <= big.t_unbiased)
        assert np.array_equal(big.t_ethnicity[g1], big.t_unbiased[g1])
        assert np.all((big.t_unbiased >= 0) & (big.t_unbiased <= 1))
        assert big.embeddings.shape == (24_000, 20)

    def test_penalty_recovered(self, big):
        f = big.gender == 1
        gap = big.t_unbiased[f].mean() - big.t_gender[f].mean()
        assert gap == pytest.approx(ScoringWeights().gender_penalty, abs=0.005)

    def test_unbiased_scores_agnostic(self, big):
        stat = ks_2samp(big.t_unbiased[big.gender == 0], big.t_unbiased[big.gender == 1]).statistic
        assert stat < 0.03

    def test_embeddings_carry_no_competency(self, big):
        corr = np.corrcoef(np.hstack([big.embeddings, big.competencies]), rowvar=False)[:20, 20:]
        assert np.abs(corr).max() < 0.03

    def test_noiseless_is_affine_in_competencies(self):
        cfg = GenerationConfig(weights=ScoringWeights(noise_sigma=0.0))
        d = generate_dataset(60, cfg, seed=1)
        np.testing.assert_allclose(d.t_unbiased, d.competencies @ np.array(cfg.weights.alpha), atol=1e-15)

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(generate_dataset(6, seed=11), tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_profile_view(self, big):
        p = big[5]
        assert p.id == 5 and p.gender in ("M", "F") and p.ethnicity in ("G1", "G2", "G3")
        assert p.competencies.shape == (12,) and p.embedding.shape == (20,)


class TestSplit:
    def test_standard_sizes(self, big):
        s = split_dataset(big, 0.8, seed=0)
        assert (len(s.train), len(s.validation)) == (19_200, 4_800)
        np.testing.assert_array_equal(np.bincount(s.train.groups), 3200)
        np.testing.assert_array_equal(np.bincount(s.validation.groups), 800)
        assert not set(s.train.ids) & set(s.validation.ids)
        assert set(s.train.ids) | set(s.validation.ids) == set(big.ids)

    def test_240(self):
        s = split_dataset(generate_dataset(240, seed=0), 0.8)
        np.testing.assert_array_equal(np.bincount(s.train.groups), 32)
        np.testing.assert_array_equal(np.bincount(s.validation.groups), 8)

    def test_indivisible_strata(self):
        with pytest.raises(ValueError, match="whole profiles"):
            split_dataset(generate_dataset(6, seed=0), 0.5)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ValueError):
            split_dataset(generate_dataset(60, seed=0), ratio)


class TestCSV:
    def test_round_trip(self, big, tmp_path):
        save_dataset(big, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        assert len(back) == len(big)
        np.testing.assert_array_equal(back.ids, big.ids)
        np.testing.assert_array_equal(back.gender, big.gender)
        np.testing.assert_array_equal(back.ethnicity, big.ethnicity)
        for f in ("competencies", "embeddings", "t_unbiased", "t_gender", "t_ethnicity"):
            np.testing.assert_allclose(getattr(back, f), getattr(big, f), rtol=5e-9, atol=1e-300)
        save_dataset(back, tmp_path / "d2.csv")
        assert (tmp_path / "d.csv").read_bytes() == (tmp_path / "d2.csv").read_bytes()
        assert back.equals(load_dataset(tmp_path / "d2.csv"))

    def test_header(self, tmp_path):
        save_dataset(generate_dataset(6), tmp_path / "d.csv")
        first = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert first == ",".join(CSV_HEADER)
        assert first.startswith("id,gender,ethnicity,c01,") and first.endswith("e20,t_u,t_g,t_e")

    def _corrupt(self, tmp_path, edit):
        save_dataset(generate_dataset(12, seed=0), tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        cells = lines[3].split(",")
        lines[3] = ",".join(edit(cells))
        (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
        return tmp_path / "d.csv"

    def test_missing_column_cites_row(self, tmp_path):
        path = self._corrupt(tmp_path, lambda c: c[:3] + c[4:])
        with pytest.raises(DatasetParseError, match="row 4") as info:
            load_dataset(path)
        assert info.value.row == 4

    def test_out_of_range(self, tmp_path):
        path = self._corrupt(tmp_path, lambda c: c[:3] + ["1.2"] + c[4:])
        with pytest.raises(DatasetParseError, match="outside"):
            load_dataset(path)

    def test_bad_gender(self, tmp_path):
        path = self._corrupt(tmp_path, lambda c: c[:1] + ["X"] + c[2:])
        with pytest.raises(DatasetParseError, match="row 4"):
            load_dataset(path)


class TestConfig:
    def test_ini_round_trip(self):
        cfg = GenerationConfig(
            weights=ScoringWeights(gender_penalty=0.2, noise_sigma=0.01),
            embedding=EmbeddingGenConfig(gender_strength=1.0, direction_seed=4),
        )
        text = cfg.to_ini()
        for section in ("[weights]", "[distributions]", "[penalties]", "[noise]", "[embedding]"):
            assert section in text
        assert GenerationConfig.from_ini(text) == cfg

    def test_defaults_when_missing(self):
        assert GenerationConfig.from_ini("[noise]\nsigma = 0.05\n").weights.noise_sigma == 0.05
        assert GenerationConfig.from_ini("") == GenerationConfig()

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            GenerationConfig.from_ini("[distributions]\neducation.probs = 0.5, 0.5\n")
        with pytest.raises(ConfigError):
            GenerationConfig.from_ini("[penalties]\ngender = abc\n")


@settings(max_examples=20, deadline=None)
@given(n6=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_group_counts_always_equal(n6, seed):
    d = generate_dataset(6 * n6, seed=seed)
    assert set(np.bincount(d.groups, minlength=6)) == {n6}
    male = d.gender == 0
    assert np.array_equal(d.t_gender[male], d.t_unbiased[male])
